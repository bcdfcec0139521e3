"""Fingerprint embedding service: wire format, threaded TCP server, client and staleness policy.

Frame layout (all integers little-endian)::

    magic "DFPN" | version u8 | msg_type u8 | payload_len u32 | payload

An Error payload is ``code u16`` followed by a UTF-8 message.
"""

from __future__ import annotations

import logging
import os
import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass
from enum import Enum, IntEnum

import numpy as np

from . import dsp
from .errors import ConfigError, ConnectionFailed, DfingerError, HashMismatch, RemoteError
from .model import DFingerNet, FusionMode

log = logging.getLogger(__name__)

MAGIC = b"DFPN"
VERSION = 1
HEADER = struct.Struct("<4sBBI")
DEFAULT_PORT = 7462
DEFAULT_HOST = "127.0.0.1"
MAX_PAYLOAD = 16 * 1024 * 1024
HASH_LEN = 8


class MsgType(IntEnum):
    EMBED_REQUEST = 1
    EMBED_RESPONSE = 2
    ERROR = 3
    PING = 4
    PONG = 5


class ErrorCode(IntEnum):
    MALFORMED = 1
    SAMPLE_RATE_MISMATCH = 2
    UNSUPPORTED_VERSION = 3
    PAYLOAD_TOO_LARGE = 4
    BAD_REQUEST = 5
    UNKNOWN_TYPE = 6
    INTERNAL = 7


# -- encoding ---------------------------------------------------------------------

def encode_frame(msg_type: int, payload: bytes = b"", version: int = VERSION) -> bytes:
    return HEADER.pack(MAGIC, version, int(msg_type), len(payload)) + payload


def encode_embed_request(samples, sample_rate: int) -> bytes:
    pcm = np.ascontiguousarray(samples, dtype="<f4")
    return struct.pack("<II", sample_rate, pcm.size) + pcm.tobytes()


def decode_embed_request(payload: bytes) -> tuple[int, np.ndarray]:
    if len(payload) < 8:
        raise ValueError("embed request shorter than its 8-byte header")
    sr, n = struct.unpack_from("<II", payload)
    if n * 4 != len(payload) - 8:
        raise ValueError(f"n_samples={n} does not match {len(payload) - 8} PCM bytes")
    return sr, np.frombuffer(payload, dtype="<f4", offset=8).copy()


def encode_embed_response(summary, checkpoint_hash: bytes) -> bytes:
    vals = np.ascontiguousarray(summary, dtype="<f4")
    if len(checkpoint_hash) != HASH_LEN:
        raise ValueError("checkpoint hash must be 8 bytes")
    return struct.pack("<H", vals.size) + checkpoint_hash + vals.tobytes()


def decode_embed_response(payload: bytes) -> tuple[np.ndarray, bytes]:
    if len(payload) < 2 + HASH_LEN:
        raise ValueError("embed response too short")
    (dim,) = struct.unpack_from("<H", payload)
    if len(payload) != 2 + HASH_LEN + 4 * dim:
        raise ValueError("embed response length does not match embed_dim")
    h = payload[2:2 + HASH_LEN]
    return np.frombuffer(payload, dtype="<f4", offset=2 + HASH_LEN).copy(), h


def encode_error(code: int, message: str) -> bytes:
    return struct.pack("<H", int(code)) + message.encode("utf-8")


def decode_error(payload: bytes) -> tuple[int, str]:
    if len(payload) < 2:
        return ErrorCode.MALFORMED, "truncated error payload"
    (code,) = struct.unpack_from("<H", payload)
    return code, payload[2:].decode("utf-8", "replace")


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    """Read exactly ``n`` bytes; None on clean EOF before the first byte."""
    chunks = []
    got = 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 20))
        if not chunk:
            if got == 0:
                return None
            raise EOFError(f"connection closed after {got} of {n} bytes")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket, max_payload: int = MAX_PAYLOAD):
    """Return (version, msg_type, payload), or None on clean EOF.

    Raises ValueError for a bad magic or oversized length; the caller should
    drop the connection since framing can no longer be trusted.
    """
    head = _recv_exact(sock, HEADER.size)
    if head is None:
        return None
    magic, version, msg_type, length = HEADER.unpack(head)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if length > max_payload:
        raise OverflowError(f"payload of {length} bytes exceeds limit {max_payload}")
    payload = _recv_exact(sock, length) if length else b""
    if payload is None:
        raise EOFError("connection closed before payload")
    return version, msg_type, payload


# -- address ----------------------------------------------------------------------

def parse_addr(addr: str | tuple | None = None) -> tuple[str, int]:
    """``host:port`` string, tuple, or None (``DFPN_ADDR`` env var, then the default)."""
    if addr is None:
        addr = os.environ.get("DFPN_ADDR") or f"{DEFAULT_HOST}:{DEFAULT_PORT}"
    if isinstance(addr, tuple):
        return str(addr[0]), int(addr[1])
    host, sep, port = str(addr).rpartition(":")
    if not sep:
        return str(addr), DEFAULT_PORT
    try:
        return host or DEFAULT_HOST, int(port)
    except ValueError as exc:
        raise ConfigError(f"bad service address {addr!r}") from exc


# -- server -----------------------------------------------------------------------

class EmbeddingServer(socketserver.ThreadingTCPServer):
    """One handler thread per connection; the model is shared read-only."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, addr, model: DFingerNet, timeout_s: float = 30.0, max_payload: int = MAX_PAYLOAD):
        if model.variant.fusion is FusionMode.BYPASS:
            raise ConfigError("serving needs a checkpoint with a fingerprint encoder")
        self.model = model.astype(np.float32) if model.params.dtype != np.float32 else model
        self.checkpoint_hash = self.model.param_hash()
        self.timeout_s = timeout_s
        self.max_payload = max_payload
        self.requests_served = 0
        self._lock = threading.Lock()
        super().__init__(parse_addr(addr), _Handler)

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]

    def embed(self, samples: np.ndarray, sample_rate: int) -> np.ndarray:
        return self.model.fingerprint_summary(dsp.AudioBuffer(samples.astype(np.float64), sample_rate))

    def start_background(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, name="dfpn-server", daemon=True)
        t.start()
        return t

    def stop(self):
        self.shutdown()
        self.server_close()


class _Handler(socketserver.BaseRequestHandler):
    def _send(self, msg_type, payload=b""):
        self.request.sendall(encode_frame(msg_type, payload))

    def _error(self, code, message):
        try:
            self._send(MsgType.ERROR, encode_error(code, message))
        except OSError:
            pass

    def handle(self):
        srv: EmbeddingServer = self.server
        self.request.settimeout(srv.timeout_s)
        while True:
            try:
                frame = read_frame(self.request, srv.max_payload)
            except OverflowError as exc:
                self._error(ErrorCode.PAYLOAD_TOO_LARGE, str(exc))
                return
            except ValueError as exc:
                self._error(ErrorCode.MALFORMED, str(exc))
                return
            except (EOFError, OSError):
                return
            if frame is None:
                return
            version, msg_type, payload = frame
            try:
                if not self._dispatch(srv, version, msg_type, payload):
                    return
            except OSError:
                return

    def _dispatch(self, srv, version, msg_type, payload) -> bool:
        """Handle one frame; False closes the connection."""
        if version != VERSION:
            self._error(ErrorCode.UNSUPPORTED_VERSION, f"version {version} not supported; use {VERSION}")
            return True
        if msg_type == MsgType.PING:
            self._send(MsgType.PONG)
            return True
        if msg_type != MsgType.EMBED_REQUEST:
            self._error(ErrorCode.UNKNOWN_TYPE, f"unexpected message type {msg_type}")
            return True
        try:
            sr, pcm = decode_embed_request(payload)
        except ValueError as exc:
            self._error(ErrorCode.MALFORMED, str(exc))
            return False
        if sr != srv.model.cfg.sample_rate:
            self._error(ErrorCode.SAMPLE_RATE_MISMATCH, f"server expects {srv.model.cfg.sample_rate} Hz, got {sr}")
            return True
        if pcm.size == 0 or not np.all(np.isfinite(pcm)):
            self._error(ErrorCode.BAD_REQUEST, "fingerprint must be non-empty and finite")
            return True
        try:
            summary = srv.embed(pcm, sr)
        except DfingerError as exc:
            self._error(ErrorCode.BAD_REQUEST, str(exc))
            return True
        except Exception as exc:  # never let one request take the server down
            log.exception("embedding failed")
            self._error(ErrorCode.INTERNAL, type(exc).__name__)
            return True
        self._send(MsgType.EMBED_RESPONSE, encode_embed_response(summary, srv.checkpoint_hash))
        with srv._lock:
            srv.requests_served += 1
        return True


def serve(bind_addr, model: DFingerNet, timeout_s: float = 30.0):
    """Run the service in the calling thread until interrupted."""
    with EmbeddingServer(bind_addr, model, timeout_s) as srv:
        log.info("fingerprint service listening on %s:%d", *srv.address)
        try:
            srv.serve_forever()
        except KeyboardInterrupt:
            pass


# -- client -----------------------------------------------------------------------

@dataclass(frozen=True)
class FetchResult:
    summary: np.ndarray
    checkpoint_hash: bytes


def _request(addr, frame: bytes, timeout: float):
    host, port = parse_addr(addr)
    try:
        with socket.create_connection((host, port), timeout=timeout) as sock:
            sock.settimeout(timeout)
            sock.sendall(frame)
            reply = read_frame(sock)
    except (OSError, EOFError, ValueError) as exc:
        raise ConnectionFailed(f"fingerprint service at {host}:{port} unavailable: {exc}") from exc
    if reply is None:
        raise ConnectionFailed(f"fingerprint service at {host}:{port} closed the connection")
    return reply


def ping(addr=None, timeout: float = 2.0) -> bool:
    _, msg_type, _ = _request(addr, encode_frame(MsgType.PING), timeout)
    return msg_type == MsgType.PONG


def client_fetch(addr, fingerprint: dsp.AudioBuffer, timeout: float = 5.0,
                 expected_hash: bytes | None = None) -> FetchResult:
    """Remote fingerprint summary.  A hash differing from ``expected_hash`` raises HashMismatch."""
    frame = encode_frame(MsgType.EMBED_REQUEST, encode_embed_request(fingerprint.samples, fingerprint.sample_rate))
    _, msg_type, payload = _request(addr, frame, timeout)
    if msg_type == MsgType.ERROR:
        raise RemoteError(*decode_error(payload))
    if msg_type != MsgType.EMBED_RESPONSE:
        raise ConnectionFailed(f"unexpected reply type {msg_type}")
    try:
        summary, h = decode_embed_response(payload)
    except ValueError as exc:
        raise ConnectionFailed(f"malformed reply: {exc}") from exc
    if expected_hash is not None and h != expected_hash:
        raise HashMismatch(f"service checkpoint {h.hex()} differs from local {expected_hash.hex()}")
    return FetchResult(summary, h)


def fetch_or_bypass(addr, fingerprint: dsp.AudioBuffer, expected_hash: bytes, timeout: float = 5.0):
    """Summary vector, or None (meaning Bypass) if the service fails or mismatches."""
    try:
        return client_fetch(addr, fingerprint, timeout, expected_hash).summary
    except HashMismatch as exc:
        log.warning("discarding fingerprint summary: %s", exc)
    except (ConnectionFailed, RemoteError) as exc:
        log.warning("fingerprint service unavailable, using Bypass: %s", exc)
    return None


# -- staleness --------------------------------------------------------------------

class Freshness(str, Enum):
    USE = "use"
    REFRESH = "refresh"   # still usable; fetch a new one in the background
    DROP = "drop"


@dataclass(frozen=True)
class StalenessPolicy:
    max_age_s: float = 120.0
    refresh_interval_s: float = 60.0

    def __post_init__(self):
        if not 0 < self.refresh_interval_s <= self.max_age_s:
            raise ConfigError("need 0 < refresh_interval_s <= max_age_s")


@dataclass(frozen=True)
class CachedSummary:
    summary: np.ndarray
    timestamp: float


def staleness_guard(state: CachedSummary | None, policy: StalenessPolicy, now: float) -> Freshness:
    if state is None:
        return Freshness.DROP
    age = now - state.timestamp
    if age >= policy.max_age_s:
        return Freshness.DROP
    if age >= policy.refresh_interval_s:
        return Freshness.REFRESH
    return Freshness.USE


class FingerprintFeed:
    """Cached summary with background refresh; never blocks the caller.

    ``capture`` returns the latest fingerprint audio when a refresh starts.
    """

    def __init__(self, addr, capture, expected_hash: bytes, policy: StalenessPolicy = StalenessPolicy(),
                 timeout: float = 5.0, clock=time.monotonic):
        self.addr = addr
        self.capture = capture
        self.expected_hash = expected_hash
        self.policy = policy
        self.timeout = timeout
        self.clock = clock
        self._cached: CachedSummary | None = None
        self._lock = threading.Lock()
        self._worker: threading.Thread | None = None

    def _refresh(self):
        audio = self.capture()
        summary = fetch_or_bypass(self.addr, audio, self.expected_hash, self.timeout)
        if summary is not None:
            with self._lock:
                self._cached = CachedSummary(summary, self.clock())

    def refresh_async(self) -> threading.Thread:
        if self._worker is None or not self._worker.is_alive():
            self._worker = threading.Thread(target=self._refresh, name="dfpn-refresh", daemon=True)
            self._worker.start()
        return self._worker

    def current(self):
        """Summary to fuse now, or None for Bypass."""
        with self._lock:
            cached = self._cached
        decision = staleness_guard(cached, self.policy, self.clock())
        if decision is not Freshness.USE:
            self.refresh_async()
        return None if decision is Freshness.DROP else cached.summary
