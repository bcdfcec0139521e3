import socket
import struct

import numpy as np
import pytest

from dfinger import dsp
from dfinger import fpservice as fp
from dfinger.errors import ConfigError, ConnectionFailed, HashMismatch, RemoteError
from dfinger.model import VARIANTS, DFingerNet, ModelConfig


@pytest.fixture(scope="module")
def model():
    return DFingerNet(ModelConfig(conv_channels=8, hidden=16, heads=2), VARIANTS["dfin"], seed=7)


@pytest.fixture(scope="module")
def server(model):
    srv = fp.EmbeddingServer(("127.0.0.1", 0), model, timeout_s=2.0, max_payload=1 << 20)
    srv.start_background()
    yield srv
    srv.stop()


def exchange(addr, raw, timeout=2.0):
    with socket.create_connection(addr, timeout=timeout) as s:
        s.sendall(raw)
        return fp.read_frame(s)


# -- wire format ------------------------------------------------------------------------

def test_frame_layout_is_little_endian():
    raw = fp.encode_frame(fp.MsgType.PING, b"ab")
    assert raw == b"DFPN" + bytes([1, 4]) + struct.pack("<I", 2) + b"ab"


def test_embed_payload_round_trips():
    x = np.linspace(-1, 1, 37, dtype=np.float32)
    sr, back = fp.decode_embed_request(fp.encode_embed_request(x, 24000))
    assert sr == 24000 and np.array_equal(back, x)
    v, h = fp.decode_embed_response(fp.encode_embed_response(x[:5], b"12345678"))
    assert h == b"12345678" and np.array_equal(v, x[:5])
    with pytest.raises(ValueError):
        fp.decode_embed_request(fp.encode_embed_request(x, 24000)[:-1])
    with pytest.raises(ValueError):
        fp.decode_embed_response(b"\x05\x00" + b"x" * 8)
    assert fp.decode_error(fp.encode_error(2, "héllo")) == (2, "héllo")


def test_address_parsing(monkeypatch):
    monkeypatch.delenv("DFPN_ADDR", raising=False)
    assert fp.parse_addr() == ("127.0.0.1", 7462)
    monkeypatch.setenv("DFPN_ADDR", "10.0.0.5:9000")
    assert fp.parse_addr() == ("10.0.0.5", 9000)
    assert fp.parse_addr("example:1") == ("example", 1)
    with pytest.raises(ConfigError):
        fp.parse_addr("host:port")


# -- server behaviour -------------------------------------------------------------------

def test_ping(server):
    assert fp.ping(server.address)


def test_remote_summary_matches_local_bit_exact(server, model):
    rng = np.random.default_rng(0)
    local_model = model.astype(np.float32)
    for i in range(100):
        n = int(rng.integers(240, 24000))
        audio = dsp.AudioBuffer(rng.standard_normal(n).astype(np.float32).astype(np.float64) * 0.1)
        res = fp.client_fetch(server.address, audio, expected_hash=server.checkpoint_hash)
        local = local_model.fingerprint_summary(audio).astype(np.float32)
        assert res.summary.dtype == np.float32
        assert np.array_equal(res.summary, local), i


def test_sample_rate_mismatch_keeps_connection(server):
    with socket.create_connection(server.address, timeout=2) as s:
        s.sendall(fp.encode_frame(fp.MsgType.EMBED_REQUEST, fp.encode_embed_request(np.zeros(480), 16000)))
        _, t, payload = fp.read_frame(s)
        assert t == fp.MsgType.ERROR and fp.decode_error(payload)[0] == fp.ErrorCode.SAMPLE_RATE_MISMATCH
        s.sendall(fp.encode_frame(fp.MsgType.PING))
        assert fp.read_frame(s)[1] == fp.MsgType.PONG


def test_unknown_version_and_type(server):
    with socket.create_connection(server.address, timeout=2) as s:
        s.sendall(fp.encode_frame(fp.MsgType.PING, version=9))
        _, t, payload = fp.read_frame(s)
        assert t == fp.MsgType.ERROR and fp.decode_error(payload)[0] == fp.ErrorCode.UNSUPPORTED_VERSION
        s.sendall(fp.encode_frame(42))
        _, t, payload = fp.read_frame(s)
        assert fp.decode_error(payload)[0] == fp.ErrorCode.UNKNOWN_TYPE
        s.sendall(fp.encode_frame(fp.MsgType.PING))
        assert fp.read_frame(s)[1] == fp.MsgType.PONG


def test_bad_magic_and_oversize_close(server):
    _, t, payload = exchange(server.address, b"XXXX" + bytes(6))
    assert t == fp.MsgType.ERROR and fp.decode_error(payload)[0] == fp.ErrorCode.MALFORMED
    head = fp.HEADER.pack(fp.MAGIC, 1, fp.MsgType.EMBED_REQUEST, (1 << 20) + 1)
    _, t, payload = exchange(server.address, head)
    assert fp.decode_error(payload)[0] == fp.ErrorCode.PAYLOAD_TOO_LARGE


def test_empty_and_non_finite_fingerprints(server):
    for pcm in (np.zeros(0), np.array([np.nan] * 10)):
        _, t, payload = exchange(server.address, fp.encode_frame(fp.MsgType.EMBED_REQUEST,
                                                                 fp.encode_embed_request(pcm, 24000)))
        assert fp.decode_error(payload)[0] == fp.ErrorCode.BAD_REQUEST


def test_remote_error_and_hash_mismatch(server):
    audio = dsp.AudioBuffer(np.ones(480) * 0.1)
    with pytest.raises(RemoteError) as err:
        fp.client_fetch(server.address, dsp.AudioBuffer(np.ones(480) * 0.1, 16000))
    assert err.value.code == fp.ErrorCode.SAMPLE_RATE_MISMATCH
    with pytest.raises(HashMismatch):
        fp.client_fetch(server.address, audio, expected_hash=b"00000000")
    assert fp.fetch_or_bypass(server.address, audio, b"00000000") is None
    assert fp.fetch_or_bypass(server.address, audio, server.checkpoint_hash) is not None


def test_random_frames_never_crash_server(server):
    rng = np.random.default_rng(1)
    sent = 0
    while sent < 10_000:
        with socket.create_connection(server.address, timeout=2) as s:
            s.settimeout(2)
            try:
                for _ in range(50):
                    kind = rng.integers(4)
                    if kind == 0:
                        raw = rng.bytes(int(rng.integers(1, 64)))
                    else:
                        body = rng.bytes(int(rng.integers(0, 64)))
                        mtype = int(rng.integers(0, 8)) if kind == 1 else fp.MsgType.EMBED_REQUEST
                        version = 1 if kind != 3 else int(rng.integers(0, 4))
                        raw = fp.encode_frame(mtype, body, version)
                    s.sendall(raw)
                    sent += 1
            except OSError:
                pass
            try:
                s.shutdown(socket.SHUT_WR)
            except OSError:
                pass
    assert fp.ping(server.address)


def test_stopped_server_is_connection_failed(model):
    srv = fp.EmbeddingServer(("127.0.0.1", 0), model)
    addr = srv.address
    srv.server_close()
    with pytest.raises(ConnectionFailed):
        fp.ping(addr, timeout=0.5)
    assert fp.fetch_or_bypass(addr, dsp.AudioBuffer(np.ones(480)), b"x" * 8, timeout=0.5) is None


def test_bypass_model_cannot_serve():
    with pytest.raises(ConfigError):
        fp.EmbeddingServer(("127.0.0.1", 0), DFingerNet(variant=VARIANTS["dfn"]))


# -- staleness --------------------------------------------------------------------------

@pytest.mark.parametrize("age,expect", [
    (0.0, fp.Freshness.USE), (59.999, fp.Freshness.USE), (60.0, fp.Freshness.REFRESH),
    (119.999, fp.Freshness.REFRESH), (120.0, fp.Freshness.DROP), (1e6, fp.Freshness.DROP),
])
def test_staleness_boundaries(age, expect):
    state = fp.CachedSummary(np.zeros(3), timestamp=1000.0)
    assert fp.staleness_guard(state, fp.StalenessPolicy(), 1000.0 + age) is expect


def test_staleness_policy_validation():
    assert fp.staleness_guard(None, fp.StalenessPolicy(), 0.0) is fp.Freshness.DROP
    with pytest.raises(ConfigError):
        fp.StalenessPolicy(max_age_s=10, refresh_interval_s=20)


def test_feed_refreshes_in_background_and_expires(server):
    now = [0.0]
    audio = dsp.AudioBuffer(np.random.default_rng(2).standard_normal(4800) * 0.1)
    feed = fp.FingerprintFeed(server.address, lambda: audio, server.checkpoint_hash, clock=lambda: now[0])
    assert feed.current() is None
    feed._worker.join(5)
    first = feed.current()
    assert first is not None
    now[0] = 130.0
    assert feed.current() is None
    feed._worker.join(5)
    assert np.array_equal(feed.current(), first)
