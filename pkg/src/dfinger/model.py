"""The DFingerNet enhancer: encoders, fusion, decoders and spectral application.

Shapes used throughout: B batch, T frames, F FFT bins, Fb ERB bands, Fd
deep-filter bins, N deep-filter order, H embedding width.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from . import dsp
from .errors import ConfigError, EmptyFingerprint, InvalidShape
from .nn import tensor as T
from .nn.checkpoint import Checkpoint, param_hash
from .nn.layers import init_attention, multihead_attention
from .nn.params import ParamStore

log = logging.getLogger(__name__)


class FusionMode(str, Enum):
    ADDITIVE = "additive"
    ATTENTION = "attention"
    BYPASS = "bypass"


class FingerprintInit(str, Enum):
    RANDOM = "random"
    SAME_AS_MAIN = "same_as_main"


class WeightCoupling(str, Enum):
    INDEPENDENT = "independent"
    SHARED = "shared"


@dataclass(frozen=True)
class VariantConfig:
    fusion: FusionMode = FusionMode.ADDITIVE
    fingerprint_init: FingerprintInit = FingerprintInit.RANDOM
    weight_coupling: WeightCoupling = WeightCoupling.INDEPENDENT

    def to_dict(self):
        return {k: v.value for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(FusionMode(d["fusion"]), FingerprintInit(d["fingerprint_init"]),
                   WeightCoupling(d["weight_coupling"]))


VARIANTS = {
    "dfn": VariantConfig(FusionMode.BYPASS),
    "dfin": VariantConfig(FusionMode.ADDITIVE),
    "dfin-sameinit": VariantConfig(FusionMode.ADDITIVE, FingerprintInit.SAME_AS_MAIN),
    "dfin-sharedenc": VariantConfig(FusionMode.ADDITIVE, FingerprintInit.SAME_AS_MAIN, WeightCoupling.SHARED),
    "dfin-att": VariantConfig(FusionMode.ATTENTION),
}


def variant_by_name(name: str) -> VariantConfig:
    try:
        return VARIANTS[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}") from None


@dataclass(frozen=True)
class ModelConfig:
    sample_rate: int = 24000
    fft_size: int = 480
    hop_size: int = 240
    erb_bands: int = 32
    df_cutoff_hz: float = 4000.0
    df_order: int = 5
    conv_channels: int = 32
    kernel: int = 3
    hidden: int = 64
    heads: int = 4

    @property
    def analysis(self) -> dsp.AnalysisConfig:
        return dsp.AnalysisConfig(self.fft_size, self.hop_size, self.sample_rate)

    @property
    def n_df(self) -> int:
        return self.analysis.df_bins(self.df_cutoff_hz)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class EmbeddingSeq:
    frames: np.ndarray  # (..., T, H)

    @property
    def width(self) -> int:
        return self.frames.shape[-1]


def summarize_fingerprint(e) -> np.ndarray:
    """Time average of a fingerprint embedding sequence (..., K, H) -> (..., H)."""
    frames = e.frames if isinstance(e, EmbeddingSeq) else np.asarray(e)
    if frames.shape[-2] == 0:
        raise EmptyFingerprint("fingerprint embedding has no frames")
    return frames.mean(axis=-2)


def apply_gains(frames: np.ndarray, gains: np.ndarray, fb: dsp.ErbFilterbank) -> np.ndarray:
    """Multiply every bin by the gain of the ERB band that owns it."""
    if gains.shape[-1] != fb.n_bands or frames.shape[-1] != fb.n_bins or gains.shape[:-1] != frames.shape[:-1]:
        raise InvalidShape(f"gains {gains.shape} incompatible with spectrum {frames.shape}")
    return frames * (gains @ fb.matrix.T)


def apply_deep_filter(frames: np.ndarray, coefs: np.ndarray) -> np.ndarray:
    """Multi-frame complex filtering of the lowest ``coefs.shape[-2]`` bins.

    ``frames`` is (..., T, F) complex and ``coefs`` (..., T, Fd, N) complex with
    tap ``n`` applied to the frame ``n`` steps in the past (zero before the
    start).  Bins above Fd pass through unchanged.
    """
    n_df, order = coefs.shape[-2:]
    if coefs.shape[:-2] != frames.shape[:-1] or n_df > frames.shape[-1]:
        raise InvalidShape(f"coefficients {coefs.shape} incompatible with spectrum {frames.shape}")
    low = frames[..., :n_df]
    out = np.zeros_like(low, dtype=np.result_type(low, coefs))
    t_len = frames.shape[-2]
    for tau in range(order):
        if tau >= t_len:
            break
        out[..., tau:, :] += coefs[..., tau:, :, tau] * low[..., :t_len - tau, :]
    result = np.array(frames, dtype=out.dtype)
    result[..., :n_df] = out
    return result


def _encoder_prefixes(variant: VariantConfig):
    fing = "enc." if variant.weight_coupling is WeightCoupling.SHARED else "fing."
    return "enc.", fing


class DFingerNet:
    """Parameters plus forward computations for one model variant."""

    def __init__(self, cfg: ModelConfig | None = None, variant: VariantConfig | None = None,
                 seed: int = 0, dtype=np.float32, params: ParamStore | None = None):
        self.cfg = cfg or ModelConfig()
        self.variant = variant or VARIANTS["dfin"]
        if self.cfg.hidden % self.cfg.heads:
            raise ConfigError("hidden width must be divisible by the attention head count")
        self.fb = dsp.build_erb_matrix(self.cfg.analysis, self.cfg.erb_bands)
        self.n_df = self.cfg.n_df
        self.main_prefix, self.fing_prefix = _encoder_prefixes(self.variant)
        if params is None:
            params = ParamStore(seed, dtype)
            self._init_params(params)
        self.params = params

    # -- construction -----------------------------------------------------

    def _init_encoder(self, store: ParamStore, prefix: str):
        c, k, h = self.cfg.conv_channels, self.cfg.kernel, self.cfg.hidden
        for stream, width in (("erb", self.cfg.erb_bands), ("df", 2 * self.n_df)):
            store.glorot(f"{prefix}{stream}.conv0.w", k * width, c, shape=(k, width, c))
            store.zeros(f"{prefix}{stream}.conv0.b", (c,))
            store.glorot(f"{prefix}{stream}.conv1.w", k * c, c, shape=(k, c, c))
            store.zeros(f"{prefix}{stream}.conv1.b", (c,))
        store.glorot(f"{prefix}bottleneck.w", 2 * c, h)
        store.zeros(f"{prefix}bottleneck.b", (h,))
        store.glorot(f"{prefix}gru.wx", h, 3 * h)
        store.glorot(f"{prefix}gru.wh", h, 3 * h)
        store.zeros(f"{prefix}gru.bx", (3 * h,))
        store.zeros(f"{prefix}gru.bh", (3 * h,))

    def _init_params(self, store: ParamStore):
        h, n = self.cfg.hidden, self.cfg.df_order
        self._init_encoder(store, "enc.")
        store.glorot("dec.erb.l0.w", h, h)
        store.zeros("dec.erb.l0.b", (h,))
        store.glorot("dec.erb.out.w", h, self.cfg.erb_bands)
        store.zeros("dec.erb.out.b", (self.cfg.erb_bands,))
        store.glorot("dec.df.l0.w", h, h)
        store.zeros("dec.df.l0.b", (h,))
        n_out = self.n_df * n * 2
        store.add("dec.df.out.w", store.rng.uniform(-1, 1, (h, n_out)) * 0.01)
        # Start the deep filter as the identity: current-frame tap 1 + 0i.
        bias = np.zeros((self.n_df, n, 2))
        bias[:, 0, 0] = 1.0
        store.add("dec.df.out.b", bias.reshape(-1))
        if self.variant.fusion is not FusionMode.BYPASS:
            self.init_fingerprint_branch(store)

    def init_fingerprint_branch(self, store: ParamStore):
        """Add fingerprint encoder, projection and fusion parameters to ``store``."""
        h = self.cfg.hidden
        if self.variant.weight_coupling is WeightCoupling.INDEPENDENT:
            if self.variant.fingerprint_init is FingerprintInit.SAME_AS_MAIN:
                for name in store.names("enc."):
                    store.add("fing." + name[4:], store[name].data)
            else:
                self._init_encoder(store, "fing.")
        store.add("proj.w", np.eye(h))
        store.zeros("proj.b", (h,))
        if self.variant.fusion is FusionMode.ATTENTION:
            init_attention(store, h, prefix="att.")
            store.zeros("ffn.w", (h, h))
            store.zeros("ffn.b", (h,))

    def with_fingerprint_branch(self, variant: VariantConfig, seed: int = 0) -> "DFingerNet":
        """Copy of this Bypass model with a fresh fingerprint branch for ``variant``.

        Main encoder and decoder weights are copied unchanged; the new branch is
        initialised per ``variant.fingerprint_init`` from ``seed``.
        """
        if self.variant.fusion is not FusionMode.BYPASS:
            raise ConfigError("only a Bypass baseline can receive a new fingerprint branch")
        if variant.fusion is FusionMode.BYPASS:
            raise ConfigError("target variant has no fingerprint branch")
        store = ParamStore(seed, self.params.dtype)
        for name, t in self.params.items():
            store.add(name, t.data.copy())
        model = DFingerNet(self.cfg, variant, params=store)
        model.init_fingerprint_branch(store)
        return model

    def fingerprint_param_names(self) -> list[str]:
        """Parameters that only the fingerprint path uses."""
        names = self.params.names("fing.") + self.params.names("proj.")
        names += self.params.names("att.") + self.params.names("ffn.")
        return names

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, variant: VariantConfig | None = None, dtype=np.float32):
        meta = ckpt.metadata
        try:
            cfg = ModelConfig.from_dict(meta["model"])
            stored = VariantConfig.from_dict(meta["variant"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"checkpoint metadata incomplete: {exc}") from exc
        if variant is not None and variant != stored:
            raise ConfigError(f"checkpoint holds variant {stored.to_dict()}, requested {variant.to_dict()}")
        model = cls(cfg, stored, dtype=dtype, params=ParamStore(meta.get("seed", 0), dtype))
        expected = cls(cfg, stored, dtype=np.float64)
        if set(ckpt.params) != set(expected.params):
            missing = sorted(set(expected.params) - set(ckpt.params))
            extra = sorted(set(ckpt.params) - set(expected.params))
            raise ConfigError(f"checkpoint does not match variant: missing {missing}, unexpected {extra}")
        for name in expected.params:
            model.params.add(name, ckpt.params[name])
        return model

    def to_checkpoint(self, **metadata) -> Checkpoint:
        meta = {"model": self.cfg.to_dict(), "variant": self.variant.to_dict(), "seed": self.params.seed}
        meta.update(metadata)
        return Checkpoint({n: t.data.copy() for n, t in self.params.items()}, meta)

    def param_hash(self) -> bytes:
        return param_hash({n: t.data for n, t in self.params.items()})

    def astype(self, dtype) -> "DFingerNet":
        return DFingerNet(self.cfg, self.variant, params=self.params.astype(dtype))

    # -- features -----------------------------------------------------------

    def features(self, frames: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Spectrum (..., T, F) -> encoder inputs (erb (..., T, Fb), df (..., T, 2 Fd))."""
        spec = dsp.ComplexSpectrogram(frames, self.cfg.analysis)
        feat = dsp.extract_features(spec, self.fb, self.cfg.df_cutoff_hz)
        return self.feature_arrays(feat)

    def feature_arrays(self, feat: dsp.FeaturePair):
        dt = self.params.dtype
        df = np.concatenate([feat.df_feat.real, feat.df_feat.imag], axis=-1)
        return feat.erb_feat.astype(dt), df.astype(dt)

    # -- network ------------------------------------------------------------

    def _encode(self, erb, df, prefix):
        p = self.params
        streams = []
        for name, x in (("erb", erb), ("df", df)):
            for layer in ("conv0", "conv1"):
                x = T.relu(T.causal_conv1d(x, p[f"{prefix}{name}.{layer}.w"], p[f"{prefix}{name}.{layer}.b"]))
            streams.append(x)
        x = T.relu(T.linear(T.concat(streams, axis=-1), p[f"{prefix}bottleneck.w"], p[f"{prefix}bottleneck.b"]))
        h0 = np.zeros((x.shape[0], self.cfg.hidden), dtype=self.params.dtype)
        return T.gru_sequence(x, h0, p[f"{prefix}gru.wx"], p[f"{prefix}gru.wh"],
                              p[f"{prefix}gru.bx"], p[f"{prefix}gru.bh"])

    def encode_main(self, erb, df) -> T.Tensor:
        """Main-encoder embedding (B, T, H) from feature arrays (B, T, .)."""
        self._check_inputs(erb, df)
        return self._encode(erb, df, self.main_prefix)

    def encode_fingerprint(self, erb, df) -> T.Tensor:
        """Projected fingerprint embedding (B, K, H)."""
        if self.variant.fusion is FusionMode.BYPASS:
            raise ConfigError("this variant has no fingerprint encoder")
        if erb.shape[-2] == 0:
            raise EmptyFingerprint("fingerprint has no frames; use Bypass fusion instead")
        self._check_inputs(erb, df)
        e = self._encode(erb, df, self.fing_prefix)
        return T.linear(e, self.params["proj.w"], self.params["proj.b"])

    def _check_inputs(self, erb, df):
        if erb.shape[-1] != self.cfg.erb_bands or df.shape[-1] != 2 * self.n_df:
            raise ConfigError(
                f"feature widths ({erb.shape[-1]}, {df.shape[-1]}) do not match model "
                f"({self.cfg.erb_bands}, {2 * self.n_df})"
            )

    def resolve_mode(self, mode: FusionMode | None) -> FusionMode:
        mode = self.variant.fusion if mode is None else FusionMode(mode)
        if mode is not FusionMode.BYPASS and mode is not self.variant.fusion:
            raise ConfigError(f"model was built for {self.variant.fusion.value} fusion, not {mode.value}")
        return mode

    def fuse(self, main, fing, mode: FusionMode | None = None):
        """Combine main (B, T, H) and fingerprint (B, K, H) embeddings."""
        mode = self.resolve_mode(mode)
        if mode is FusionMode.BYPASS:
            return main
        if fing is None:
            raise EmptyFingerprint(f"{mode.value} fusion needs a fingerprint")
        if fing.shape[-1] != main.shape[-1]:
            raise InvalidShape(f"embedding widths differ: {main.shape[-1]} vs {fing.shape[-1]}")
        if mode is FusionMode.ADDITIVE:
            summary = T.mean(fing, axis=1, keepdims=True)
            return main + summary
        att, _ = multihead_attention(main, fing, fing, self.cfg.heads, self.params, prefix="att.")
        return main + T.linear(att, self.params["ffn.w"], self.params["ffn.b"])

    def fuse_summary(self, main, summary):
        """Additive fusion given a precomputed summary vector (B, H)."""
        return main + T.as_tensor(summary, main)[:, None, :]

    def decode_erb_gains(self, e) -> T.Tensor:
        p = self.params
        x = T.relu(T.linear(e, p["dec.erb.l0.w"], p["dec.erb.l0.b"]))
        return T.sigmoid(T.linear(x, p["dec.erb.out.w"], p["dec.erb.out.b"]))

    def decode_df_coefs(self, e) -> T.Tensor:
        """Deep-filter taps as a real tensor (B, T, Fd, N, 2)."""
        p = self.params
        x = T.relu(T.linear(e, p["dec.df.l0.w"], p["dec.df.l0.b"]))
        out = T.linear(x, p["dec.df.out.w"], p["dec.df.out.b"])
        return out.reshape(e.shape[0], e.shape[1], self.n_df, self.cfg.df_order, 2)

    def embed(self, frames, fp_frames=None, mode=None, fp_summary=None):
        """Fused embedding for noisy spectra (B, T, F) and optional fingerprint spectra."""
        mode = self.resolve_mode(mode)
        if self.variant.fusion is FusionMode.BYPASS and (fp_frames is not None or fp_summary is not None):
            raise ConfigError("Bypass-only model was given a fingerprint")
        main = self.encode_main(*self.features(frames))
        if mode is FusionMode.BYPASS:
            return main
        if fp_summary is not None and mode is FusionMode.ADDITIVE:
            return self.fuse_summary(main, fp_summary)
        if fp_frames is None:
            raise EmptyFingerprint(f"{mode.value} fusion needs a fingerprint")
        fing = self.encode_fingerprint(*self.features(fp_frames))
        return self.fuse(main, fing, mode)

    def forward(self, frames, fp_frames=None, mode=None, fp_summary=None):
        """Differentiable enhancement of (B, T, F) spectra; returns (real, imag) tensors."""
        e = self.embed(frames, fp_frames, mode, fp_summary)
        gains = self.decode_erb_gains(e)
        coefs = self.decode_df_coefs(e)
        return apply_enhancement(frames, gains, coefs, self.fb.matrix, self.params.dtype)

    def infer(self, frames, fp_frames=None, mode=None, fp_summary=None):
        """Gains (B, T, Fb) and complex taps (B, T, Fd, N) as numpy arrays."""
        e = self.embed(frames, fp_frames, mode, fp_summary)
        gains = self.decode_erb_gains(e).data
        c = self.decode_df_coefs(e).data
        return gains, c[..., 0] + 1j * c[..., 1]

    # -- end to end -----------------------------------------------------------

    def enhance_frames(self, frames, fp_frames=None, mode=None, fp_summary=None):
        gains, coefs = self.infer(frames, fp_frames, mode, fp_summary)
        filtered = apply_deep_filter(frames, coefs.astype(np.complex128))
        return apply_gains(filtered, gains.astype(np.float64), self.fb)

    def enhance(self, x: dsp.AudioBuffer, fingerprint: dsp.AudioBuffer | None = None,
                mode: FusionMode | None = None) -> dsp.AudioBuffer:
        """Whole-utterance enhancement of one signal."""
        out = self.enhance_batch(x.samples[None], None if fingerprint is None else fingerprint.samples[None],
                                 mode, sample_rate=x.sample_rate,
                                 fp_rate=None if fingerprint is None else fingerprint.sample_rate)
        return dsp.AudioBuffer(out[0], x.sample_rate)

    def enhance_batch(self, x: np.ndarray, fingerprints: np.ndarray | None = None, mode=None,
                      sample_rate: int | None = None, fp_rate: int | None = None) -> np.ndarray:
        """Enhance equal-length signals (B, n); fingerprints (B, m) share one length."""
        cfg = self.cfg.analysis
        for rate in (sample_rate, fp_rate):
            if rate is not None and rate != cfg.sample_rate:
                raise ConfigError(f"sample rate {rate} != model rate {cfg.sample_rate}")
        mode = self.resolve_mode(mode)
        n = x.shape[-1]
        if n == 0:
            return np.zeros_like(x, dtype=np.float64)
        frames = dsp.stft_frames(x, cfg)
        fp_frames = None
        if mode is not FusionMode.BYPASS:
            if fingerprints is None or fingerprints.shape[-1] == 0:
                raise EmptyFingerprint(f"{mode.value} fusion needs a fingerprint")
            fp_frames = dsp.stft_frames(fingerprints, cfg)
        enhanced = self.enhance_frames(frames, fp_frames, mode)
        return dsp.istft_frames(enhanced, cfg)[..., :n]

    def fingerprint_embedding(self, fingerprint: dsp.AudioBuffer) -> np.ndarray:
        """Projected fingerprint embedding (K, H) of 32-bit PCM."""
        if fingerprint.sample_rate != self.cfg.sample_rate:
            raise ConfigError(f"fingerprint rate {fingerprint.sample_rate} != model rate {self.cfg.sample_rate}")
        if len(fingerprint) == 0:
            raise EmptyFingerprint("empty fingerprint audio")
        pcm = fingerprint.samples.astype(np.float32).astype(np.float64)
        frames = dsp.stft_frames(pcm, self.cfg.analysis)
        return self.encode_fingerprint(*self.features(frames[None])).data[0]

    def fingerprint_summary(self, fingerprint: dsp.AudioBuffer) -> np.ndarray:
        """Time-averaged fingerprint embedding (H,), float32."""
        return summarize_fingerprint(self.fingerprint_embedding(fingerprint)).astype(np.float32)

    def new_stream(self, mode: FusionMode | None = None) -> "StreamState":
        from .streaming import StreamState

        return StreamState(self, self.resolve_mode(mode))


def apply_enhancement(frames, gains, coefs, erb_matrix, dtype=np.float32):
    """Tensor version of deep filter then ERB gains, for training.

    ``frames`` is a constant (B, T, F) complex array; ``gains`` (B, T, Fb) and
    ``coefs`` (B, T, Fd, N, 2) are tensors.  Returns (real, imag) tensors.
    """
    n_df, order = coefs.shape[2], coefs.shape[3]
    t_len = frames.shape[-2]
    low = frames[..., :n_df]
    # hist[..., t, f, tau] = X(t - tau, f), zero before the start
    hist = np.zeros(low.shape + (order,), dtype=np.complex128)
    for tau in range(min(order, t_len)):
        hist[..., tau:, :, tau] = low[..., :t_len - tau, :]
    h_re, h_im = hist.real.astype(dtype), hist.imag.astype(dtype)
    c_re, c_im = coefs[..., 0], coefs[..., 1]
    df_re = (c_re * h_re - c_im * h_im).sum(axis=-1)
    df_im = (c_re * h_im + c_im * h_re).sum(axis=-1)
    high = frames[..., n_df:]
    full_re = T.concat([df_re, high.real.astype(dtype)], axis=-1)
    full_im = T.concat([df_im, high.imag.astype(dtype)], axis=-1)
    bin_gain = T.matmul(gains, erb_matrix.T.astype(dtype))
    return full_re * bin_gain, full_im * bin_gain
