"""Scoring enhanced eval sets: per-sample rows, conditions and model comparisons."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import metrics
from .datamix import SampleTriple
from .errors import DataError
from .model import DFingerNet, FusionMode


@dataclass(frozen=True)
class Condition:
    """How a model is run on an eval set: fusion mode plus a label."""
    name: str
    mode: FusionMode | None = None


def _group_by_fp_len(samples):
    groups: dict = {}
    for i, s in enumerate(samples):
        key = (len(s.mixture), len(s.fingerprint))
        groups.setdefault(key, []).append(i)
    return groups


def enhance_samples(model: DFingerNet, samples: list[SampleTriple], mode=None, batch: int = 20) -> list[np.ndarray]:
    """Enhanced waveforms for ``samples`` in input order (batched by length)."""
    mode = model.resolve_mode(mode)
    out: list = [None] * len(samples)
    for idx in _group_by_fp_len(samples).values():
        for start in range(0, len(idx), batch):
            chunk = idx[start:start + batch]
            x = np.stack([samples[i].mixture.samples for i in chunk])
            fp = None
            if mode is not FusionMode.BYPASS:
                fp = np.stack([samples[i].fingerprint.samples for i in chunk])
            y = model.enhance_batch(x, fp, mode)
            for j, i in enumerate(chunk):
                out[i] = y[j]
    return out


def score_samples(samples, enhanced, model_name="", condition="", with_stoi=True, threads=1) -> list[dict]:
    def one(k):
        s = samples[k]
        row = {
            "id": s.id, "model": model_name, "condition": condition, "category": s.category,
            "snr_db": s.spec.snr_db, "offset_s": s.spec.fingerprint_offset_s,
        }
        row.update(metrics.score_pair(s.clean.samples, s.mixture.samples, enhanced[k],
                                      s.clean.sample_rate, with_stoi))
        return row

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, range(len(samples))))
    return [one(k) for k in range(len(samples))]


def evaluate(model: DFingerNet, samples, model_name="", condition: Condition | None = None,
             with_stoi=True, threads=1) -> list[dict]:
    if not samples:
        raise DataError("empty eval set")
    condition = condition or Condition("default")
    enhanced = enhance_samples(model, samples, condition.mode)
    return score_samples(samples, enhanced, model_name, condition.name, with_stoi, threads)


def mean_of(rows, column="delta_si_sdr") -> float:
    vals = [r[column] for r in rows if r.get(column) is not None and not np.isnan(r[column])]
    return float(np.mean(vals)) if vals else float("nan")


def comparison_table(rows) -> list[dict]:
    """Rows = (model, condition), columns = mean delta SI-SDR / STOI plus the mixture baseline."""
    out = []
    for agg in metrics.aggregate(rows, ("model", "condition")):
        out.append({
            "model": agg["model"], "condition": agg["condition"], "n": agg["n"],
            "mixture_si_sdr": agg["si_sdr_noisy"],
            "delta_si_sdr": agg["delta_si_sdr"], "delta_stoi": agg["delta_stoi"],
        })
    return out
