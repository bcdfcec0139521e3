"""Mixture construction: fingerprint cropping, SNR mixing, manifests, synthetic corpus.

Mixing works on the 16-bit PCM grid.  Clean speech and noise are quantised
to multiples of 2**-15 and the mixing gain is rounded to the coarsest binary
grid that still keeps ``clean + gain * noise`` exact in float64, so
``mixture - clean == gain * noise`` holds bit-for-bit.  The gain rounding is
far below 1e-6 dB of SNR for any gain above 1e-4.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterator

import numpy as np

from . import dsp
from .errors import ConfigError, DataError, SkipSample

PCM_STEP = 2.0 ** -15
CLIP_TARGET = 0.99
MIN_TAIL_S = 0.1


class StressMode(str, Enum):
    NONE = "none"
    CLEAN_AS_FINGERPRINT = "clean_as_fingerprint"
    NOISE_AS_FINGERPRINT = "noise_as_fingerprint"


@dataclass(frozen=True)
class MixSpec:
    snr_db: float = 0.0
    fingerprint_len_s: float = 1.0
    fingerprint_offset_s: float = 0.0
    stress: StressMode = StressMode.NONE
    seed: int = 0
    mix_start_s: float | None = None

    def __post_init__(self):
        if self.fingerprint_len_s <= 0:
            raise ConfigError("fingerprint_len_s must be positive")
        if self.fingerprint_offset_s < 0:
            raise ConfigError("fingerprint_offset_s must be >= 0")


@dataclass
class SampleTriple:
    clean: dsp.AudioBuffer
    noise: dsp.AudioBuffer
    fingerprint: dsp.AudioBuffer
    mixture: dsp.AudioBuffer
    gain: float
    achieved_snr_db: float
    spec: MixSpec
    id: str = ""
    category: str = ""
    meta: dict = field(default_factory=dict)

    def sidecar(self) -> dict:
        return {
            "id": self.id,
            "category": self.category,
            "gain": self.gain,
            "target_snr_db": self.spec.snr_db,
            "achieved_snr_db": self.achieved_snr_db,
            "fingerprint_len_s": self.spec.fingerprint_len_s,
            "fingerprint_offset_s": self.spec.fingerprint_offset_s,
            "stress": self.spec.stress.value,
            "snr_convention": "full-signal RMS",
            **self.meta,
        }


@dataclass
class ManifestRecord:
    id: str
    clean_path: str
    noise_path: str
    snr_db: float | None = None
    fingerprint_offset_s: float = 0.0
    split: str = "train"
    category: str = ""


class Manifest:
    """JSON-lines list of :class:`ManifestRecord`; paths resolve against ``root``."""

    def __init__(self, records: list[ManifestRecord], root: Path | None = None):
        ids = [r.id for r in records]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise DataError(f"duplicate manifest ids: {', '.join(dupes)}")
        self.records = records
        self.root = Path(root) if root else Path(".")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def split(self, name: str) -> "Manifest":
        return Manifest([r for r in self.records if r.split == name], self.root)

    def categories(self) -> list[str]:
        return sorted({r.category for r in self.records})

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.root / p

    def check_paths(self):
        missing = sorted({str(self.resolve(p)) for r in self.records for p in (r.clean_path, r.noise_path)
                          if not self.resolve(p).is_file()})
        if missing:
            raise DataError("unresolvable manifest paths: " + ", ".join(missing))

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        records = []
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        for lineno, line in enumerate(lines, 1):
            if not line.strip():
                continue
            try:
                records.append(ManifestRecord(**json.loads(line)))
            except (json.JSONDecodeError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: bad manifest record: {exc}") from exc
        return cls(records, path.parent)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")


# -- primitives ----------------------------------------------------------------

def rms(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.sqrt(np.mean(x * x))) if x.size else 0.0


def snr_db(clean, noise_component) -> float:
    return 20.0 * math.log10(rms(clean) / rms(noise_component))


def to_pcm_grid(x) -> np.ndarray:
    return np.round(np.asarray(x, dtype=np.float64) / PCM_STEP) * PCM_STEP


def _exact_gain(gain: float, clean: np.ndarray, noise: np.ndarray) -> float:
    """Round ``gain`` so clean + gain*noise is exact for PCM-grid inputs."""
    bound = float(np.max(np.abs(clean), initial=0.0) + gain * np.max(np.abs(noise), initial=0.0))
    top = math.frexp(max(bound, PCM_STEP))[1] + 1  # 2**top > |sum|
    # Bits below 2**top available after the 15 fractional bits of the noise grid.
    frac_bits = 52 - top - 15
    scale = 2.0 ** frac_bits
    return round(gain * scale) / scale


def fit_length(noise: np.ndarray, n: int, rng: np.random.Generator) -> tuple[np.ndarray, dict]:
    """Crop (random start) or loop (random rotation) ``noise`` to ``n`` samples."""
    if len(noise) == 0:
        raise SkipSample("empty noise")
    if len(noise) >= n:
        start = int(rng.integers(0, len(noise) - n + 1))
        return noise[start:start + n], {"crop_start": start}
    rot = int(rng.integers(0, len(noise)))
    rolled = np.roll(noise, -rot)
    reps = -(-n // len(noise))
    return np.tile(rolled, reps)[:n], {"loop_rotation": rot, "loop_seam": len(noise)}


def mix_at_snr(clean, noise, snr_db_target: float, rng: np.random.Generator | None = None):
    """Mix at a full-signal RMS SNR.

    Returns ``(mixture, gain, info)`` where ``info`` holds the PCM-grid clean
    and noise actually used, any crop/loop record, and the clip rescale factor
    (1.0 when no rescue was needed).
    """
    clean = to_pcm_grid(getattr(clean, "samples", clean))
    noise = to_pcm_grid(getattr(noise, "samples", noise))
    info = {}
    if len(noise) != len(clean):
        noise, info = fit_length(noise, len(clean), rng or np.random.default_rng(0))
    rc, rn = rms(clean), rms(noise)
    if rc == 0.0:
        raise SkipSample("clean signal is silent")
    if rn == 0.0:
        raise SkipSample("noise signal is silent")
    gain = _exact_gain(rc / rn * 10.0 ** (-snr_db_target / 20.0), clean, noise)
    mixture = clean + gain * noise
    rescale = 1.0
    peak = float(np.max(np.abs(mixture)))
    if peak > 1.0:
        rescale = CLIP_TARGET / peak
        clean = clean * rescale
        mixture = mixture * rescale
        gain = gain * rescale
    info.update({"clean": clean, "noise": noise, "rescale": rescale})
    return mixture, gain, info


def split_fingerprint(noise: dsp.AudioBuffer, spec: MixSpec):
    """Cut the fingerprint and the mixing noise out of one recording.

    The mixing segment starts at ``spec.mix_start_s`` (default: right after
    the earliest possible fingerprint).  The fingerprint ends
    ``fingerprint_offset_s`` seconds before that start, so offset 0 makes the
    two adjacent.  Returns ``(fingerprint, mix_noise)``; ``mix_noise`` runs
    from the mixing start to the end of the recording.
    """
    sr = noise.sample_rate
    fp_len = int(round(spec.fingerprint_len_s * sr))
    offset = int(round(spec.fingerprint_offset_s * sr))
    if spec.mix_start_s is None:
        start = fp_len + offset
    else:
        start = int(round(spec.mix_start_s * sr))
    need = fp_len + offset + int(round(MIN_TAIL_S * sr))
    if len(noise) <= need or start - offset - fp_len < 0 or len(noise) - start < int(round(MIN_TAIL_S * sr)):
        raise SkipSample(
            f"noise of {len(noise) / sr:.2f} s too short for a {spec.fingerprint_len_s} s fingerprint "
            f"{spec.fingerprint_offset_s} s before a mix starting at {start / sr:.2f} s"
        )
    fp_end = start - offset
    fingerprint = dsp.AudioBuffer(noise.samples[fp_end - fp_len:fp_end], sr)
    return fingerprint, dsp.AudioBuffer(noise.samples[start:], sr)


def make_sample(clean: dsp.AudioBuffer, noise: dsp.AudioBuffer, spec: MixSpec, segment_s: float,
                rng: np.random.Generator, sample_id="", category="") -> SampleTriple:
    """One mixture of ``segment_s`` seconds plus its fingerprint."""
    sr = clean.sample_rate
    if noise.sample_rate != sr:
        raise DataError(f"sample-rate mismatch: clean {sr} Hz, noise {noise.sample_rate} Hz")
    n = int(round(segment_s * sr))
    clean_seg, clean_info = fit_length(clean.samples, n, rng)
    fingerprint, mix_noise = split_fingerprint(noise, spec)
    noise_seg = mix_noise.samples[:n]
    noise_info = {}
    if len(noise_seg) < n:
        noise_seg, noise_info = fit_length(noise_seg, n, rng)
    mixture, gain, info = mix_at_snr(clean_seg, noise_seg, spec.snr_db, rng)
    clean_q, noise_q = info["clean"], info["noise"]
    achieved = snr_db(clean_q, gain * noise_q)
    if spec.stress is StressMode.CLEAN_AS_FINGERPRINT:
        fingerprint = dsp.AudioBuffer(clean_q.copy(), sr)
    elif spec.stress is StressMode.NOISE_AS_FINGERPRINT:
        fingerprint = dsp.AudioBuffer(noise_q.copy(), sr)
    else:
        fingerprint = dsp.AudioBuffer(to_pcm_grid(fingerprint.samples), sr)
    meta = {"clean_" + k: v for k, v in clean_info.items()}
    meta.update({"noise_" + k: v for k, v in noise_info.items()})
    meta["clip_rescale"] = info["rescale"]
    return SampleTriple(
        clean=dsp.AudioBuffer(clean_q, sr),
        noise=dsp.AudioBuffer(noise_q, sr),
        fingerprint=fingerprint,
        mixture=dsp.AudioBuffer(mixture, sr),
        gain=gain,
        achieved_snr_db=achieved,
        spec=spec,
        id=sample_id,
        category=category,
        meta=meta,
    )


# -- dataset builders ------------------------------------------------------------

class AudioCache:
    """Memory-mapped WAV reader shared by dataset builders."""

    def __init__(self, manifest: Manifest):
        self.manifest = manifest
        self._cache: dict[str, dsp.AudioBuffer] = {}

    def get(self, path: str) -> dsp.AudioBuffer:
        if path not in self._cache:
            self._cache[path] = dsp.read_wav(self.manifest.resolve(path))
        return self._cache[path]


@dataclass(frozen=True)
class TrainRanges:
    snr_db: tuple[float, float] = (-5.0, 20.0)
    segment_s: float = 3.0
    fingerprint_len_s: float = 1.0
    stress: StressMode = StressMode.NONE


def build_training_set(manifest: Manifest, ranges: TrainRanges = TrainRanges(), seed: int = 0,
                       n_samples: int = 2000, split: str = "train") -> Iterator[SampleTriple]:
    """Deterministic stream of training samples, one speech and one noise each.

    Sample ``i`` depends only on ``(seed, i)``.  The fingerprint is the
    ``fingerprint_len_s`` seconds of the noise recording directly before the
    mixing segment, which starts at a random position.
    """
    part = manifest.split(split)
    if not len(part):
        raise DataError(f"manifest has no {split!r} records")
    part.check_paths()
    cleans = sorted({r.clean_path for r in part})
    noises = sorted({(r.noise_path, r.category) for r in part})
    cache = AudioCache(part)
    lo, hi = ranges.snr_db
    for i in range(n_samples):
        rng = np.random.default_rng([seed, i])
        clean = cache.get(cleans[int(rng.integers(len(cleans)))])
        noise_path, category = noises[int(rng.integers(len(noises)))]
        noise = cache.get(noise_path)
        snr = float(rng.uniform(lo, hi))
        sr = noise.sample_rate
        latest = noise.duration - ranges.segment_s - MIN_TAIL_S
        mix_start = float(rng.uniform(ranges.fingerprint_len_s, max(latest, ranges.fingerprint_len_s)))
        mix_start = round(mix_start * sr) / sr
        spec = MixSpec(snr, ranges.fingerprint_len_s, 0.0, ranges.stress, seed, mix_start)
        yield make_sample(clean, noise, spec, ranges.segment_s, rng, f"train-{seed}-{i:06d}", category)


def build_eval_set(manifest: Manifest, snr_list, spec: MixSpec = MixSpec(), offsets=None,
                   segment_s: float = 3.0, split: str = "eval") -> list[SampleTriple]:
    """Cartesian product of eval noise records and ``snr_list``.

    The mixing segment sits at the end of each noise recording.  With
    ``offsets`` every mixture is repeated once per offset with identical
    mixture audio and a fingerprint taken that many seconds earlier.
    """
    part = manifest.split(split)
    if not len(part):
        raise DataError(f"manifest has no {split!r} records")
    part.check_paths()
    cache = AudioCache(part)
    offsets = [spec.fingerprint_offset_s] if offsets is None else list(offsets)
    out = []
    for rec in part:
        clean, noise = cache.get(rec.clean_path), cache.get(rec.noise_path)
        sr = noise.sample_rate
        mix_start = (len(noise) - int(round((segment_s + MIN_TAIL_S) * sr))) / sr
        for snr in snr_list:
            for off in offsets:
                s = replace(spec, snr_db=float(snr), fingerprint_offset_s=float(off), mix_start_s=mix_start)
                # Same rng seed for every offset: the clean crop, hence the mixture, is shared.
                rng = np.random.default_rng([spec.seed, zlib.crc32(rec.id.encode()), int(round(snr * 1000)) & 0xFFFFFFF])
                sid = f"{rec.id}@{snr:g}dB" + (f"+{off:g}s" if len(offsets) > 1 else "")
                out.append(make_sample(clean, noise, s, segment_s, rng, sid, rec.category))
    return out


# -- synthetic corpus --------------------------------------------------------------

def generate_synthetic_corpus(out_dir, n_speech: int = 120, n_noise_profiles: int = 5, seed: int = 0,
                              train_files_per_profile: int = 6, eval_files_per_profile: int = 4,
                              noise_duration_s: float = 180.0, speech_duration_s: float = 4.0,
                              eval_speech_fraction: float = 0.2) -> Manifest:
    """Write a synthetic speech/noise corpus plus ``manifest.jsonl`` under ``out_dir``.

    Every noise family becomes one category.  Noise recordings are long and
    stationary so fingerprints can be taken minutes before the mixture.
    """
    from . import synth

    if n_speech < 2 or n_noise_profiles < 1:
        raise ConfigError("need at least 2 speech files and 1 noise profile")
    out = Path(out_dir)
    sr = synth.SR
    n_eval_speech = max(1, int(round(n_speech * eval_speech_fraction)))
    speech = {"train": [], "eval": []}
    for i in range(n_speech):
        rng = np.random.default_rng([seed, 1, i])
        split = "eval" if i >= n_speech - n_eval_speech else "train"
        rel = f"speech/{split}_{i:04d}.wav"
        x = synth.speech_surrogate(speech_duration_s, rng, sr)
        dsp.write_wav(out / rel, dsp.AudioBuffer(np.clip(x, -1, 1), sr), "pcm16")
        speech[split].append(rel)
    noise = {"train": [], "eval": []}
    for p in range(n_noise_profiles):
        fam = synth.family(p)
        for j in range(train_files_per_profile + eval_files_per_profile):
            rng = np.random.default_rng([seed, 2, p, j])
            split = "train" if j < train_files_per_profile else "eval"
            rel = f"noise/{fam.name}/{split}_{j:03d}.wav"
            x = synth.noise_recording(fam, noise_duration_s, rng, sr)
            dsp.write_wav(out / rel, dsp.AudioBuffer(np.clip(x, -1, 1), sr), "pcm16")
            noise[split].append((rel, fam.name))
    records = []
    rng = np.random.default_rng([seed, 3])
    for split in ("train", "eval"):
        cleans, noises = speech[split], noise[split]
        if split == "train":
            count = max(len(cleans), len(noises))
            order = rng.permutation(count)
            pairs = [(cleans[k % len(cleans)], noises[order[k] % len(noises)]) for k in range(count)]
        else:
            pairs = [(cleans[int(rng.integers(len(cleans)))], nz) for nz in noises]
        for k, (c, (nz, cat)) in enumerate(pairs):
            records.append(ManifestRecord(f"{split}-{k:04d}", c, nz, None, 0.0, split, cat))
    manifest = Manifest(records, out)
    manifest.save(out / "manifest.jsonl")
    return manifest
