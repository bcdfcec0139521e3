"""SI-SDR, STOI, delta bookkeeping and grouped aggregation for evaluation reports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from . import dsp
from ._stoi_fir import STOI_DECIMATION_FIR
from .errors import InvalidLength, UndefinedReference

SDR_CAP_DB = 60.0
REPORT_VERSION = "dfinger-report-v1"

# STOI constants (standard values of the intelligibility measure)
STOI_FS = 10000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEGMENT = 30
STOI_BETA_DB = -15.0
STOI_DYN_RANGE_DB = 40.0
_FIR = np.asarray(STOI_DECIMATION_FIR)


def _samples(x) -> np.ndarray:
    if isinstance(x, dsp.AudioBuffer):
        return x.samples.astype(np.float64)
    return np.asarray(x, dtype=np.float64)


# -- SI-SDR -------------------------------------------------------------------------

def si_sdr_detail(reference, estimate) -> tuple[float, bool]:
    """Return ``(value_db, capped)``; ``capped`` marks a value pinned at +/-60 dB."""
    r, e = _samples(reference), _samples(estimate)
    if r.shape != e.shape or r.ndim != 1 or r.size == 0:
        raise InvalidLength(f"si_sdr needs equal non-empty 1-D inputs, got {r.shape} and {e.shape}")
    ref_energy = float(np.dot(r, r))
    if ref_energy == 0.0:
        raise UndefinedReference("reference signal has zero energy")
    alpha = float(np.dot(e, r)) / ref_energy
    target = alpha * r
    num = float(np.dot(target, target))
    err = target - e
    den = float(np.dot(err, err))
    if num == 0.0:  # silent or orthogonal estimate
        return -SDR_CAP_DB, True
    if den == 0.0:
        return SDR_CAP_DB, True
    value = 10.0 * math.log10(num / den)
    if value >= SDR_CAP_DB:
        return SDR_CAP_DB, True
    if value <= -SDR_CAP_DB:
        return -SDR_CAP_DB, True
    return value, False


def si_sdr(reference, estimate) -> float:
    return si_sdr_detail(reference, estimate)[0]


# -- STOI ---------------------------------------------------------------------------

def third_octave_matrix(fs=STOI_FS, nfft=STOI_NFFT, n_bands=STOI_BANDS, min_freq=STOI_MIN_FREQ):
    """Binary one-third-octave band matrix (n_bands x nfft/2+1) and centre frequencies."""
    f = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(n_bands)
    cf = 2.0 ** (k / 3.0) * min_freq
    lo = min_freq * 2.0 ** ((2 * k - 1) / 6.0)
    hi = min_freq * 2.0 ** ((2 * k + 1) / 6.0)
    obm = np.zeros((n_bands, len(f)))
    for i in range(n_bands):
        a = int(np.argmin((f - lo[i]) ** 2))
        b = int(np.argmin((f - hi[i]) ** 2))
        obm[i, a:b] = 1.0
    return obm, cf


_OBM, _ = third_octave_matrix()


def _stoi_window():
    return np.hanning(STOI_FRAME + 2)[1:-1]


def decimate_for_stoi(x: np.ndarray, sample_rate: int) -> np.ndarray:
    if sample_rate == STOI_FS:
        return x
    if sample_rate != 24000:
        raise InvalidLength(f"stoi supports 24000 or 10000 Hz input, got {sample_rate}")
    return resample_poly(x, 5, 12, window=_FIR)


def _remove_silent_frames(x, y):
    """Drop frames whose reference energy is > 40 dB below the loudest frame, then overlap-add."""
    w = _stoi_window()
    hop = STOI_FRAME // 2
    starts = range(0, len(x) - STOI_FRAME + 1, hop)
    xf = np.array([w * x[s:s + STOI_FRAME] for s in starts])
    yf = np.array([w * y[s:s + STOI_FRAME] for s in starts])
    energy = 20 * np.log10(np.linalg.norm(xf, axis=1) + np.finfo(float).eps)
    keep = (np.max(energy) - STOI_DYN_RANGE_DB - energy) < 0
    xf, yf = xf[keep], yf[keep]
    n = (len(xf) - 1) * hop + STOI_FRAME if len(xf) else 0
    xs, ys = np.zeros(max(n, 0)), np.zeros(max(n, 0))
    for i in range(len(xf)):
        xs[i * hop:i * hop + STOI_FRAME] += xf[i]
        ys[i * hop:i * hop + STOI_FRAME] += yf[i]
    return xs, ys


def _stft_mag(x):
    w = _stoi_window()
    hop = STOI_FRAME // 2
    frames = np.array([w * x[s:s + STOI_FRAME] for s in range(0, len(x) - STOI_FRAME + 1, hop)])
    if frames.size == 0:
        return np.zeros((0, STOI_NFFT // 2 + 1))
    return np.abs(np.fft.rfft(frames, n=STOI_NFFT, axis=1))


def stoi(reference, estimate, sample_rate: int | None = None) -> float:
    """Short-time objective intelligibility of ``estimate`` against ``reference``.

    Inputs at 24 kHz are decimated to 10 kHz with the shipped polyphase FIR.
    """
    if sample_rate is None:
        sample_rate = reference.sample_rate if isinstance(reference, dsp.AudioBuffer) else 24000
    x, y = _samples(reference), _samples(estimate)
    if x.shape != y.shape or x.ndim != 1:
        raise InvalidLength(f"stoi needs equal-length 1-D inputs, got {x.shape} and {y.shape}")
    min_len = int(math.ceil((STOI_SEGMENT + 1) * (STOI_FRAME // 2) * sample_rate / STOI_FS))
    if len(x) < min_len:
        raise InvalidLength(f"stoi needs at least {min_len} samples at {sample_rate} Hz, got {len(x)}")
    x = decimate_for_stoi(x, sample_rate)
    y = decimate_for_stoi(y, sample_rate)
    x, y = _remove_silent_frames(x, y)
    x_tob = np.sqrt(_stft_mag(x) ** 2 @ _OBM.T).T  # (bands, frames)
    y_tob = np.sqrt(_stft_mag(y) ** 2 @ _OBM.T).T
    n_frames = x_tob.shape[1]
    if n_frames < STOI_SEGMENT:
        raise InvalidLength(f"only {n_frames} active frames after silence removal; need {STOI_SEGMENT}")
    # (segments, bands, N) sliding segments
    idx = np.arange(STOI_SEGMENT)[None, :] + np.arange(n_frames - STOI_SEGMENT + 1)[:, None]
    xs = np.transpose(x_tob[:, idx], (1, 0, 2))
    ys = np.transpose(y_tob[:, idx], (1, 0, 2))
    tiny = np.finfo(float).eps
    alpha = np.linalg.norm(xs, axis=2, keepdims=True) / (np.linalg.norm(ys, axis=2, keepdims=True) + tiny)
    clip = 10 ** (-STOI_BETA_DB / 20)
    yp = np.minimum(ys * alpha, xs * (1 + clip))
    xn = xs - xs.mean(axis=2, keepdims=True)
    yn = yp - yp.mean(axis=2, keepdims=True)
    xn = xn / (np.linalg.norm(xn, axis=2, keepdims=True) + tiny)
    yn = yn / (np.linalg.norm(yn, axis=2, keepdims=True) + tiny)
    return float(np.mean(np.sum(xn * yn, axis=2)))


# -- deltas and reports -----------------------------------------------------------

@dataclass(frozen=True)
class Delta:
    value: float
    unreliable: bool = False


def delta(metric_noisy: float, metric_enhanced: float, noisy_capped: bool = False,
          enhanced_capped: bool = False) -> Delta:
    """Enhanced minus noisy; flagged unreliable if either input hit a cap."""
    return Delta(float(metric_enhanced) - float(metric_noisy), bool(noisy_capped or enhanced_capped))


REPORT_COLUMNS = (
    "id", "model", "condition", "category", "snr_db", "offset_s",
    "si_sdr_noisy", "si_sdr_enhanced", "delta_si_sdr",
    "stoi_noisy", "stoi_enhanced", "delta_stoi",
    "unreliable", "pesq", "dnsmos",
)
NUMERIC_COLUMNS = ("si_sdr_noisy", "si_sdr_enhanced", "delta_si_sdr", "stoi_noisy", "stoi_enhanced", "delta_stoi")


def score_pair(clean, noisy, enhanced, sample_rate: int = 24000, with_stoi: bool = True) -> dict:
    """Per-sample metric columns for one (clean, noisy, enhanced) triple."""
    sn, cn = si_sdr_detail(clean, noisy)
    se, ce = si_sdr_detail(clean, enhanced)
    d = delta(sn, se, cn, ce)
    row = {"si_sdr_noisy": sn, "si_sdr_enhanced": se, "delta_si_sdr": d.value, "unreliable": d.unreliable}
    if with_stoi:
        tn = stoi(clean, noisy, sample_rate)
        te = stoi(clean, enhanced, sample_rate)
        row.update(stoi_noisy=tn, stoi_enhanced=te, delta_stoi=te - tn)
    else:
        row.update(stoi_noisy=float("nan"), stoi_enhanced=float("nan"), delta_stoi=float("nan"))
    return row


def _group_key(row, key):
    keys = (key,) if isinstance(key, str) else tuple(key)
    return tuple(row.get(k) for k in keys)


def _sort_token(value):
    # numbers before strings, None last; keeps mixed columns sortable
    if value is None:
        return (2, "")
    if isinstance(value, (int, float)):
        return (0, float(value))
    return (1, str(value))


def aggregate(rows, key="category", columns=NUMERIC_COLUMNS) -> list[dict]:
    """Mean of ``columns`` per group, with group size ``n``; rows sorted by key."""
    groups: dict = {}
    for row in rows:
        groups.setdefault(_group_key(row, key), []).append(row)
    keys = (key,) if isinstance(key, str) else tuple(key)
    out = []
    for gk in sorted(groups, key=lambda t: tuple(_sort_token(v) for v in t)):
        members = groups[gk]
        agg = dict(zip(keys, gk))
        agg["n"] = len(members)
        for col in columns:
            vals = [float(r[col]) for r in members if col in r and r[col] is not None]
            agg[col] = float(np.mean(vals)) if vals else float("nan")
        agg["n_unreliable"] = sum(bool(r.get("unreliable")) for r in members)
        out.append(agg)
    return out


class MetricReport:
    """Per-sample rows plus aggregates; CSV for rows, JSON for everything else."""

    def __init__(self, rows=None):
        self.rows: list[dict] = list(rows or [])

    def add(self, **row):
        for name in ("si_sdr", "stoi"):
            e, n = row.get(f"{name}_enhanced"), row.get(f"{name}_noisy")
            if e is not None and n is not None and f"delta_{name}" not in row:
                row[f"delta_{name}"] = e - n
        self.rows.append(row)

    def aggregates(self, keys=("category", "snr_db", "model")) -> dict:
        return {k: aggregate(self.rows, k) for k in keys}

    def write_csv(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, extrasaction="ignore", lineterminator="\n")
            w.writeheader()
            for row in self.rows:
                w.writerow({c: _fmt(row.get(c)) for c in REPORT_COLUMNS})

    def write_json(self, path, extra=None):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        doc = {"version": REPORT_VERSION, "columns": list(REPORT_COLUMNS), "aggregates": self.aggregates()}
        if extra:
            doc.update(extra)
        path.write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @staticmethod
    def read_csv(path) -> "MetricReport":
        rows = []
        with open(path, newline="", encoding="utf-8") as fh:
            for raw in csv.DictReader(fh):
                row = {}
                for k, v in raw.items():
                    if k in NUMERIC_COLUMNS or k in ("snr_db", "offset_s"):
                        row[k] = float(v) if v != "" else None
                    elif k == "unreliable":
                        row[k] = v == "1"
                    else:
                        row[k] = v if v != "" else None
                rows.append(row)
        return MetricReport(rows)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return None if math.isnan(f) else f
    if isinstance(obj, np.integer):
        return int(obj)
    return obj
