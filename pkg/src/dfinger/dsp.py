"""Time/frequency front end: STFT analysis/synthesis, ERB banding, features.

The analysis window is the square root of a half-sample-shifted periodic
Hann window, used for both analysis and synthesis.  The product of the two
windows is a Hann window that overlap-adds to exactly one at 50 % hop, and
it is non-zero at the first sample so the very first hop reconstructs.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .errors import ConfigError, DataError, InvalidShape

EPS = 1e-10
NORM_ALPHA = 0.99
ERB_NORM_SCALE = 40.0
ERB_NORM_INIT_DB = 0.0


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = 24000

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 1:
            raise InvalidShape(f"audio must be mono 1-D, got shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("audio contains non-finite samples")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class AnalysisConfig:
    fft_size: int = 480
    hop_size: int = 240
    sample_rate: int = 24000
    lookahead_frames: int = 0

    def __post_init__(self):
        if self.fft_size <= 0 or self.hop_size <= 0:
            raise ConfigError("fft_size and hop_size must be positive")
        if self.fft_size % self.hop_size or self.fft_size // self.hop_size < 2:
            raise ConfigError(
                f"hop {self.hop_size} must divide fft {self.fft_size} into >= 2 overlaps"
            )

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop_size

    def bin_frequencies(self) -> np.ndarray:
        return np.arange(self.n_bins) * self.sample_rate / self.fft_size

    def df_bins(self, cutoff_hz: float) -> int:
        """Number of low-frequency bins at or below ``cutoff_hz``."""
        nyq = self.sample_rate / 2
        cutoff_hz = min(cutoff_hz, nyq)
        return min(int(math.floor(cutoff_hz * self.fft_size / self.sample_rate + 1e-9)) + 1, self.n_bins)


def cola_window(cfg: AnalysisConfig) -> np.ndarray:
    """Analysis (= synthesis) window; its square overlap-adds to a constant."""
    n = np.arange(cfg.fft_size)
    hann = np.sin(np.pi * (n + 0.5) / cfg.fft_size) ** 2
    # Hann overlap-adds to fft/(2*hop); rescale so the squared window sums to 1.
    hann = hann * (2.0 * cfg.hop_size / cfg.fft_size)
    return np.sqrt(hann)


def cola_error(cfg: AnalysisConfig) -> float:
    w2 = cola_window(cfg) ** 2
    acc = np.zeros(cfg.hop_size)
    for start in range(0, cfg.fft_size, cfg.hop_size):
        acc += w2[start:start + cfg.hop_size]
    return float(np.max(np.abs(acc - 1.0)))


@dataclass
class ComplexSpectrogram:
    frames: np.ndarray  # (..., K, F) complex
    cfg: AnalysisConfig = field(default_factory=AnalysisConfig)

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim < 2:
            raise InvalidShape("spectrogram frames must be at least 2-D (K, F)")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[-2]

    @property
    def n_bins(self) -> int:
        return self.frames.shape[-1]


def n_frames_for(n_samples: int, cfg: AnalysisConfig) -> int:
    return -(-n_samples // cfg.hop_size)


def stft_analyze(audio: AudioBuffer, cfg: AnalysisConfig | None = None) -> ComplexSpectrogram:
    cfg = cfg or AnalysisConfig()
    if audio.sample_rate != cfg.sample_rate:
        raise ConfigError(f"sample rate {audio.sample_rate} != analysis rate {cfg.sample_rate}")
    return ComplexSpectrogram(stft_frames(audio.samples, cfg), cfg)


def stft_frames(x: np.ndarray, cfg: AnalysisConfig) -> np.ndarray:
    """STFT of ``x`` with shape (..., n); returns (..., K, F) complex."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    k = n_frames_for(n, cfg)
    if k == 0:
        return np.zeros(x.shape[:-1] + (0, cfg.n_bins), dtype=np.complex128)
    padded = np.zeros(x.shape[:-1] + ((k - 1) * cfg.hop_size + cfg.fft_size,))
    padded[..., :n] = x
    idx = np.arange(k)[:, None] * cfg.hop_size + np.arange(cfg.fft_size)[None, :]
    framed = padded[..., idx] * cola_window(cfg)
    return np.fft.rfft(framed, axis=-1)


def synthesis_envelope(n_frames: int, cfg: AnalysisConfig) -> np.ndarray:
    """Overlap-added squared window over the first ``n_frames * hop`` samples."""
    length = n_frames * cfg.hop_size
    env = np.zeros(length + cfg.fft_size)
    w2 = cola_window(cfg) ** 2
    for k in range(n_frames):
        env[k * cfg.hop_size:k * cfg.hop_size + cfg.fft_size] += w2
    return env[:length]


def istft_synthesize(spec: ComplexSpectrogram, cfg: AnalysisConfig | None = None) -> AudioBuffer:
    cfg = cfg or spec.cfg
    frames = spec.frames
    if frames.ndim != 2:
        raise InvalidShape("istft_synthesize expects a single (K, F) spectrogram")
    return AudioBuffer(istft_frames(frames, cfg), cfg.sample_rate)


def istft_frames(frames: np.ndarray, cfg: AnalysisConfig) -> np.ndarray:
    """Inverse of :func:`stft_frames`; output length is ``K * hop``."""
    if frames.shape[-1] != cfg.n_bins:
        raise InvalidShape(f"frame width {frames.shape[-1]} != {cfg.n_bins} bins")
    k = frames.shape[-2]
    lead = frames.shape[:-2]
    if k == 0:
        return np.zeros(lead + (0,))
    chunks = np.fft.irfft(frames, n=cfg.fft_size, axis=-1) * cola_window(cfg)
    out = np.zeros(lead + ((k - 1) * cfg.hop_size + cfg.fft_size,))
    for i in range(k):
        out[..., i * cfg.hop_size:i * cfg.hop_size + cfg.fft_size] += chunks[..., i, :]
    out = out[..., :k * cfg.hop_size]
    return out / synthesis_envelope(k, cfg)


def erb_rate(freq_hz):
    """Glasberg & Moore ERB-rate (number of ERBs below ``freq_hz``)."""
    return 21.4 * np.log10(1.0 + 0.00437 * np.asarray(freq_hz, dtype=np.float64))


def erb_rate_inverse(erb):
    return (10.0 ** (np.asarray(erb, dtype=np.float64) / 21.4) - 1.0) / 0.00437


@dataclass
class ErbFilterbank:
    matrix: np.ndarray  # (F, B), 0/1 hard assignment
    band_edges: np.ndarray  # (B + 1,) Hz, lower edge of each band then Nyquist
    widths: np.ndarray  # (B,) bins per band

    @property
    def n_bands(self) -> int:
        return self.matrix.shape[1]

    @property
    def n_bins(self) -> int:
        return self.matrix.shape[0]

    @property
    def band_of_bin(self) -> np.ndarray:
        return np.argmax(self.matrix, axis=1)


def build_erb_matrix(cfg: AnalysisConfig, bands: int = 32) -> ErbFilterbank:
    """Rectangular ERB-scale partition of the FFT bins.

    Band boundaries are spaced uniformly on the ERB-rate scale between 0 Hz
    and Nyquist; a bin belongs to the band whose ERB interval contains its
    centre frequency.  Bands that would be empty are widened to one bin,
    taking bins from the next band up, so every band owns at least one bin.
    """
    n_bins = cfg.n_bins
    if bands < 2:
        raise ConfigError("need at least 2 ERB bands")
    if bands > n_bins:
        raise ConfigError(f"{bands} bands exceed {n_bins} frequency bins")
    freqs = cfg.bin_frequencies()
    edges_erb = np.linspace(0.0, erb_rate(cfg.sample_rate / 2), bands + 1)
    bin_erb = erb_rate(freqs)
    # ideal[b]: number of bins whose ERB rate lies below the upper edge of band b
    ideal = np.searchsorted(bin_erb, edges_erb[1:], side="left")
    ideal[-1] = n_bins
    ends = np.zeros(bands, dtype=int)
    start = 0
    for b in range(bands):
        end = max(int(ideal[b]), start + 1)
        end = min(end, n_bins - (bands - 1 - b))
        ends[b] = end
        start = end
    starts = np.concatenate([[0], ends[:-1]])
    widths = ends - starts
    matrix = np.zeros((n_bins, bands))
    for b in range(bands):
        matrix[starts[b]:ends[b], b] = 1.0
    band_edges = np.concatenate([freqs[starts], [cfg.sample_rate / 2]])
    return ErbFilterbank(matrix, band_edges, widths)


@dataclass
class FeaturePair:
    erb_feat: np.ndarray  # (..., K, B) real
    df_feat: np.ndarray  # (..., K, F_df) complex
    n_df: int
    clamped: bool = False

    @property
    def n_frames(self) -> int:
        return self.erb_feat.shape[-2]


class FeatureNormState:
    """Causal running normalisation state for one or more parallel streams."""

    def __init__(self, lead_shape, n_bands, n_df, alpha=NORM_ALPHA):
        self.alpha = alpha
        self.erb_mean = np.full(tuple(lead_shape) + (n_bands,), ERB_NORM_INIT_DB)
        self.df_power = np.zeros(tuple(lead_shape) + (n_df,))

    def step(self, erb_db: np.ndarray, df_bins: np.ndarray):
        a = self.alpha
        self.erb_mean = a * self.erb_mean + (1.0 - a) * erb_db
        erb = (erb_db - self.erb_mean) / ERB_NORM_SCALE
        power = df_bins.real ** 2 + df_bins.imag ** 2
        # Floor at the current power so no bin exceeds unit magnitude.
        self.df_power = np.maximum(a * self.df_power + (1.0 - a) * power, power)
        df = df_bins / (np.sqrt(self.df_power) + EPS)
        return erb, df


def erb_energies_db(frames: np.ndarray, fb: ErbFilterbank) -> np.ndarray:
    power = frames.real ** 2 + frames.imag ** 2
    return 10.0 * np.log10(power @ fb.matrix + EPS)


def resolve_df_cutoff(cfg: AnalysisConfig, df_cutoff_hz: float) -> tuple[int, bool]:
    nyq = cfg.sample_rate / 2
    clamped = df_cutoff_hz > nyq
    if clamped:
        warnings.warn(f"df cutoff {df_cutoff_hz} Hz above Nyquist; clamped to {nyq} Hz", stacklevel=3)
    return cfg.df_bins(df_cutoff_hz), clamped


def extract_features(spec: ComplexSpectrogram, fb: ErbFilterbank, df_cutoff_hz: float = 4000.0) -> FeaturePair:
    if fb.n_bins != spec.n_bins:
        raise InvalidShape(f"filterbank built for {fb.n_bins} bins, spectrogram has {spec.n_bins}")
    n_df, clamped = resolve_df_cutoff(spec.cfg, df_cutoff_hz)
    frames = spec.frames
    erb_db = erb_energies_db(frames, fb)
    lead = frames.shape[:-2]
    state = FeatureNormState(lead, fb.n_bands, n_df)
    erb = np.empty_like(erb_db)
    df = np.empty(frames.shape[:-1] + (n_df,), dtype=np.complex128)
    for k in range(frames.shape[-2]):
        erb[..., k, :], df[..., k, :] = state.step(erb_db[..., k, :], frames[..., k, :n_df])
    return FeaturePair(erb, df, n_df, clamped)


def read_wav(path: str | Path) -> AudioBuffer:
    try:
        sr, data = wavfile.read(str(path))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read WAV {path}: {exc}") from exc
    if data.ndim != 1:
        raise DataError(f"{path}: multichannel WAV ({data.shape[1]} channels) is not supported")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise DataError(f"{path}: unsupported WAV sample type {data.dtype}")
    return AudioBuffer(samples, int(sr))


def write_wav(path: str | Path, audio: AudioBuffer, fmt: str = "float32"):
    """Write mono WAV as ``"float32"`` or ``"pcm16"``."""
    if fmt == "pcm16":
        data = np.clip(np.round(audio.samples * 32768.0), -32768, 32767).astype(np.int16)
    elif fmt == "float32":
        data = audio.samples.astype(np.float32)
    else:
        raise ConfigError(f"unknown WAV format {fmt!r}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), audio.sample_rate, data)
