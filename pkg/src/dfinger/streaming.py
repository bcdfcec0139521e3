"""Frame-by-frame streaming inference.

A :class:`StreamState` consumes one hop of audio per call and returns one hop
of enhanced audio, delayed by ``fft_size - hop_size`` samples relative to
the whole-utterance output: the frame that starts at hop ``j`` is complete
only once hop ``j + fft/hop - 1`` has arrived.  Work per call is constant.
"""

from __future__ import annotations

import logging

import numpy as np

from . import dsp
from .errors import ConfigError, EmptyFingerprint
from .model import DFingerNet, FusionMode
from .nn import tensor as T
from .nn.layers import multihead_attention

log = logging.getLogger(__name__)

_UNSET = object()


def _sig(x):
    return T._sigmoid(x)


class StreamState:
    """All mutable state for one audio stream.  Not shareable across threads."""

    def __init__(self, model: DFingerNet, mode: FusionMode):
        self.model = model
        self.mode = mode
        cfg = model.cfg
        self.acfg = cfg.analysis
        self.window = dsp.cola_window(self.acfg)
        self.ratio = cfg.fft_size // cfg.hop_size
        p = model.params
        self.dtype = p.dtype
        self._w = {n: t.data for n, t in p.items()}
        self.in_buf = np.zeros(cfg.fft_size)
        self.hops_seen = 0
        self.frames_done = 0
        self.norm = dsp.FeatureNormState((), cfg.erb_bands, model.n_df)
        k = cfg.kernel
        self.conv_hist = {}
        for stream, width in (("erb", cfg.erb_bands), ("df", 2 * model.n_df)):
            self.conv_hist[(stream, "conv0")] = np.zeros((k - 1, width), dtype=self.dtype)
            self.conv_hist[(stream, "conv1")] = np.zeros((k - 1, cfg.conv_channels), dtype=self.dtype)
        self.h = np.zeros(cfg.hidden, dtype=self.dtype)
        self.ring = np.zeros((cfg.df_order, model.n_df), dtype=np.complex128)
        self.ola = np.zeros(cfg.fft_size)
        w2 = self.window ** 2
        self.env_steady = sum(w2[r * cfg.hop_size:(r + 1) * cfg.hop_size] for r in range(self.ratio))
        self.summary = None
        self.fp_sequence = None
        self._pending = _UNSET
        self._warned_absent = False

    # -- fingerprint handling -------------------------------------------------

    def replace_fingerprint(self, summary):
        """Queue a new fingerprint (summary vector, or (K, H) sequence in attention mode).

        The swap happens at the start of the next processed frame.  ``None``
        drops the fingerprint and the stream runs in Bypass until replaced.
        """
        self._pending = None if summary is None else np.asarray(summary, dtype=self.dtype)

    def _apply_pending(self):
        if self._pending is _UNSET:
            return
        value, self._pending = self._pending, _UNSET
        if value is None:
            self.summary = self.fp_sequence = None
        elif self.mode is FusionMode.ATTENTION:
            if value.ndim != 2 or value.shape[-1] != self.model.cfg.hidden:
                raise ConfigError("attention streaming needs the full (K, H) fingerprint embedding")
            self.fp_sequence = value
        else:
            if value.shape != (self.model.cfg.hidden,):
                raise ConfigError(f"fingerprint summary must have shape ({self.model.cfg.hidden},)")
            self.summary = value

    @property
    def fingerprint_active(self) -> bool:
        if self.mode is FusionMode.ADDITIVE:
            return self.summary is not None
        if self.mode is FusionMode.ATTENTION:
            return self.fp_sequence is not None
        return False

    # -- per-frame network ------------------------------------------------------

    def _conv(self, key, prefix, x):
        hist = self.conv_hist[key]
        cols = np.concatenate([hist, x[None]], axis=0).reshape(-1)
        w = self._w[f"{prefix}{key[0]}.{key[1]}.w"]
        y = cols @ w.reshape(-1, w.shape[-1]) + self._w[f"{prefix}{key[0]}.{key[1]}.b"]
        if hist.shape[0]:
            self.conv_hist[key] = np.concatenate([hist[1:], x[None]], axis=0)
        return y * (y > 0)

    def _encode_frame(self, erb, df):
        w, pre = self._w, self.model.main_prefix
        streams = []
        for name, x in (("erb", erb), ("df", df)):
            x = self._conv((name, "conv0"), pre, x)
            x = self._conv((name, "conv1"), pre, x)
            streams.append(x)
        x = np.concatenate(streams) @ w[f"{pre}bottleneck.w"] + w[f"{pre}bottleneck.b"]
        x = x * (x > 0)
        xg = x[None] @ w[f"{pre}gru.wx"] + w[f"{pre}gru.bx"]
        h, _ = T.gru_cell_forward(xg, self.h[None], w[f"{pre}gru.wh"], w[f"{pre}gru.bh"])
        self.h = h[0]
        return self.h

    def _fuse_frame(self, e):
        if self.mode is FusionMode.ADDITIVE and self.summary is not None:
            return e + self.summary
        if self.mode is FusionMode.ATTENTION and self.fp_sequence is not None:
            att, _ = multihead_attention(e[None, None], self.fp_sequence[None], self.fp_sequence[None],
                                         self.model.cfg.heads, self.model.params, prefix="att.")
            return e + (att.data[0, 0] @ self._w["ffn.w"] + self._w["ffn.b"])
        return e

    def _decode_frame(self, e):
        w = self._w
        x = e[None] @ w["dec.erb.l0.w"] + w["dec.erb.l0.b"]
        x = x * (x > 0)
        gains = _sig(x @ w["dec.erb.out.w"] + w["dec.erb.out.b"])[0]
        x = e[None] @ w["dec.df.l0.w"] + w["dec.df.l0.b"]
        x = x * (x > 0)
        c = (x @ w["dec.df.out.w"] + w["dec.df.out.b"])[0]
        c = c.reshape(self.model.n_df, self.model.cfg.df_order, 2)
        return gains, c[..., 0] + 1j * c[..., 1]

    def _process_frame(self, frame_time):
        self._apply_pending()
        if self.mode is not FusionMode.BYPASS and not self.fingerprint_active and not self._warned_absent:
            log.warning("no fingerprint available in %s mode; running as Bypass", self.mode.value)
            self._warned_absent = True
        spec = np.fft.rfft(frame_time * self.window)
        erb_db = dsp.erb_energies_db(spec[None], self.model.fb)[0]
        erb, df = self.norm.step(erb_db, spec[:self.model.n_df])
        erb = erb.astype(self.dtype)
        df = np.concatenate([df.real, df.imag]).astype(self.dtype)
        e = self._fuse_frame(self._encode_frame(erb, df))
        gains, coefs = self._decode_frame(e)
        self.ring = np.concatenate([spec[None, :self.model.n_df], self.ring[:-1]], axis=0)
        out = spec.copy()
        out[:self.model.n_df] = np.sum(coefs.astype(np.complex128).T * self.ring, axis=0)
        out = out * (self.model.fb.matrix @ gains.astype(np.float64))
        chunk = np.fft.irfft(out, n=self.acfg.fft_size) * self.window
        self.ola += chunk
        self.frames_done += 1

    def _emit(self):
        hop = self.acfg.hop_size
        w2 = self.window ** 2
        m = self.frames_done - 1
        if m < self.ratio - 1:
            env = sum(w2[r * hop:(r + 1) * hop] for r in range(m + 1))
        else:
            env = self.env_steady
        out = self.ola[:hop] / env
        self.ola = np.concatenate([self.ola[hop:], np.zeros(hop)])
        return out

    def push(self, hop_samples, fingerprint_summary=_UNSET) -> np.ndarray:
        """Feed one hop, get one hop back (zeros until the first frame completes)."""
        hop = self.acfg.hop_size
        hop_samples = np.asarray(hop_samples, dtype=np.float64)
        if hop_samples.shape != (hop,):
            raise ConfigError(f"stream expects hops of {hop} samples, got {hop_samples.shape}")
        if fingerprint_summary is not _UNSET:
            self.replace_fingerprint(fingerprint_summary)
        self.in_buf = np.concatenate([self.in_buf[hop:], hop_samples])
        self.hops_seen += 1
        if self.hops_seen < self.ratio:
            return np.zeros(hop)
        self._process_frame(self.in_buf)
        return self._emit()

    def flush(self) -> np.ndarray:
        """Zero-pad the tail so the remaining frames complete; returns the final hops."""
        hop = self.acfg.hop_size
        outs = []
        for _ in range(self.ratio - 1):
            outs.append(self.push(np.zeros(hop)))
        return np.concatenate(outs) if outs else np.zeros(0)


def enhance_stream(state: StreamState, frame, fingerprint_summary=_UNSET) -> np.ndarray:
    """Process one hop through ``state``; see :meth:`StreamState.push`."""
    return state.push(frame, fingerprint_summary)


def stream_file(model: DFingerNet, x: dsp.AudioBuffer, fingerprint=None, mode=None) -> dsp.AudioBuffer:
    """Run a whole signal through the streaming path, aligned to batch output.

    ``fingerprint`` may be an audio buffer or a precomputed summary vector.
    """
    state = model.new_stream(mode)
    if state.mode is not FusionMode.BYPASS and fingerprint is not None:
        if isinstance(fingerprint, dsp.AudioBuffer):
            if state.mode is FusionMode.ATTENTION:
                state.replace_fingerprint(model.fingerprint_embedding(fingerprint))
            else:
                state.replace_fingerprint(model.fingerprint_summary(fingerprint))
        else:
            state.replace_fingerprint(fingerprint)
    elif state.mode is not FusionMode.BYPASS and fingerprint is None:
        raise EmptyFingerprint("stream_file needs a fingerprint outside Bypass mode")
    hop = model.cfg.hop_size
    n = len(x)
    k = dsp.n_frames_for(n, model.cfg.analysis)
    padded = np.zeros(k * hop)
    padded[:n] = x.samples
    outs = [state.push(padded[i * hop:(i + 1) * hop]) for i in range(k)]
    outs.append(state.flush())
    y = np.concatenate(outs)
    delay = model.cfg.fft_size - hop
    return dsp.AudioBuffer(y[delay:delay + n], x.sample_rate)
