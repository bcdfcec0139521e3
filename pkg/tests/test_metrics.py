import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import freqz, resample_poly

from dfinger import metrics
from dfinger._stoi_fir import STOI_DECIMATION_FIR
from dfinger.errors import InvalidLength, UndefinedReference
from dfinger.metrics import MetricReport, aggregate, delta, score_pair, si_sdr, si_sdr_detail, stoi


def si_sdr_oracle(r, e):
    """Exact rational arithmetic; only the final log is floating point."""
    r = [Fraction(v).limit_denominator(10 ** 9) for v in r]
    e = [Fraction(v).limit_denominator(10 ** 9) for v in e]
    a = sum(x * y for x, y in zip(e, r)) / sum(x * x for x in r)
    target = [a * x for x in r]
    num = sum(t * t for t in target)
    den = sum((t - y) ** 2 for t, y in zip(target, e))
    return 10 * math.log10(num / den)


def test_si_sdr_worked_example():
    r = [1.0, 2.0, 3.0, 4.0]
    e = [1.1, 1.9, 3.1, 3.9]
    expected = si_sdr_oracle(r, e)
    assert expected == pytest.approx(28.83974538925592, abs=1e-9)
    assert si_sdr(r, e) == pytest.approx(expected, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10 ** 6), scale=st.floats(0.01, 3.0), gain=st.floats(0.1, 10.0))
def test_si_sdr_matches_oracle_and_is_scale_invariant(seed, scale, gain):
    rng = np.random.default_rng(seed)
    r = rng.standard_normal(32)
    e = r + scale * rng.standard_normal(32)
    v = si_sdr(r, e)
    assert v == pytest.approx(si_sdr_oracle(r, e), abs=1e-6)
    assert si_sdr(r, gain * e) == pytest.approx(v, abs=1e-8)


def test_si_sdr_caps_and_errors():
    r = np.array([1.0, -2.0, 3.0])
    assert si_sdr_detail(r, 2 * r) == (60.0, True)
    assert si_sdr_detail(r, np.zeros(3)) == (-60.0, True)
    with pytest.raises(UndefinedReference):
        si_sdr(np.zeros(3), r)
    with pytest.raises(InvalidLength):
        si_sdr(r, r[:2])
    with pytest.raises(InvalidLength):
        si_sdr([], [])


def test_delta_flags_capped_inputs():
    assert delta(5.0, 12.0) == metrics.Delta(7.0, False)
    assert delta(5.0, 60.0, enhanced_capped=True).unreliable


# -- STOI ------------------------------------------------------------------------------

def speechlike(seconds, sr, seed=0):
    rng = np.random.default_rng(seed)
    n = int(seconds * sr)
    t = np.arange(n) / sr
    env = 0.5 * (1 + np.sin(2 * np.pi * 4 * t)) * (np.sin(2 * np.pi * 0.7 * t) > -0.3)
    carrier = sum(np.sin(2 * np.pi * f * t + rng.uniform(0, 6)) for f in (220, 440, 660, 1300, 2500))
    return env * carrier * 0.1 + 1e-4 * rng.standard_normal(n)


def stoi_oracle_10k(x, y):
    """Loop-by-loop intelligibility measure at 10 kHz, written independently."""
    n, hop, nfft, big_n = 256, 128, 512, 30
    win = np.hanning(n + 2)[1:-1]
    starts = list(range(0, len(x) - n + 1, hop))
    energies = [20 * np.log10(np.linalg.norm(win * x[s:s + n]) + np.finfo(float).eps) for s in starts]
    top = max(energies)
    kept = [s for s, en in zip(starts, energies) if en > top - 40]
    xs = np.zeros((len(kept) - 1) * hop + n)
    ys = np.zeros_like(xs)
    for i, s in enumerate(kept):
        xs[i * hop:i * hop + n] += win * x[s:s + n]
        ys[i * hop:i * hop + n] += win * y[s:s + n]
    freqs = np.arange(nfft // 2 + 1) * 10000 / nfft
    bands = []
    for k in range(15):
        lo = 150 * 2 ** ((2 * k - 1) / 6)
        hi = 150 * 2 ** ((2 * k + 1) / 6)
        bands.append((int(np.argmin(np.abs(freqs - lo))), int(np.argmin(np.abs(freqs - hi)))))

    def tob(sig):
        out = []
        for s in range(0, len(sig) - n + 1, hop):
            p = np.abs(np.fft.rfft(win * sig[s:s + n], nfft)) ** 2
            out.append([math.sqrt(p[a:b].sum()) for a, b in bands])
        return np.array(out).T

    X, Y = tob(xs), tob(ys)
    c = 10 ** (15 / 20)
    scores = []
    for m in range(big_n - 1, X.shape[1]):
        for j in range(15):
            xv = X[j, m - big_n + 1:m + 1]
            yv = Y[j, m - big_n + 1:m + 1]
            a = np.linalg.norm(xv) / (np.linalg.norm(yv) + np.finfo(float).eps)
            yv = np.minimum(a * yv, (1 + c) * xv)
            xv = xv - xv.mean()
            yv = yv - yv.mean()
            scores.append(xv @ yv / ((np.linalg.norm(xv) + np.finfo(float).eps) * (np.linalg.norm(yv) + np.finfo(float).eps)))
    return float(np.mean(scores))


def test_stoi_matches_loop_oracle_at_10k():
    x = speechlike(2.0, 10000)
    rng = np.random.default_rng(3)
    for snr in (-5.0, 5.0):
        noise = rng.standard_normal(len(x))
        noise *= np.linalg.norm(x) / np.linalg.norm(noise) * 10 ** (-snr / 20)
        y = x + noise
        assert stoi(x, y, 10000) == pytest.approx(stoi_oracle_10k(x, y), abs=1e-9)


def test_stoi_24k_route_agrees_with_10k_route():
    # a band-limited signal decimated by the shipped FIR vs generated natively at 10 kHz
    x24 = speechlike(2.0, 24000, seed=1)
    rng = np.random.default_rng(4)
    y24 = x24 + 0.05 * resample_poly(rng.standard_normal(20000), 12, 5)[:len(x24)]
    via_24k = stoi(x24, y24, 24000)
    x10 = resample_poly(x24, 5, 12)
    y10 = resample_poly(y24, 5, 12)
    assert via_24k == pytest.approx(stoi(x10, y10, 10000), abs=0.01)


def test_stoi_identity_and_monotone():
    x = speechlike(3.0, 24000, seed=2)
    assert stoi(x, x) == pytest.approx(1.0, abs=1e-9)
    rng = np.random.default_rng(0)
    noise = rng.standard_normal(len(x))
    vals = []
    for snr in (-10, -5, 0, 5, 10):
        nz = noise * np.linalg.norm(x) / np.linalg.norm(noise) * 10 ** (-snr / 20)
        vals.append(stoi(x, x + nz))
    assert all(b > a for a, b in zip(vals, vals[1:]))
    assert 0 < vals[0] < vals[-1] < 1


def test_stoi_sign_inversion_scores_one():
    # the correlation is taken on magnitudes, so a polarity flip is invisible
    x = speechlike(2.0, 24000, seed=5)
    assert stoi(x, -x) == pytest.approx(1.0, abs=1e-9)


def test_stoi_short_input():
    with pytest.raises(InvalidLength):
        stoi(np.ones(1000), np.ones(1000))
    with pytest.raises(InvalidLength):
        stoi(np.ones(24000), np.ones(23999))
    with pytest.raises(InvalidLength):
        stoi(np.ones(24000), np.ones(24000), 16000)


def test_decimation_filter_response():
    h = np.asarray(STOI_DECIMATION_FIR)
    assert len(h) == 320
    _, resp = freqz(h, worN=[1000.0, 4000.0, 4800.0, 5500.0], fs=120000)
    db = 20 * np.log10(np.abs(resp) / 5)
    assert np.all(np.abs(db[:2]) < 0.05)
    assert db[2] == pytest.approx(-6.0, abs=0.5)
    assert db[3] < -50


def test_third_octave_bands():
    obm, cf = metrics.third_octave_matrix()
    assert obm.shape == (15, 257)
    assert np.all(obm.sum(axis=1) >= 1)
    assert np.all(obm.sum(axis=0) <= 1)
    assert cf[0] == 150 and cf[-1] == pytest.approx(150 * 2 ** (14 / 3))


# -- reports ---------------------------------------------------------------------------

def test_score_pair_columns():
    x = speechlike(2.0, 24000)
    rng = np.random.default_rng(1)
    noisy = x + 0.05 * rng.standard_normal(len(x))
    row = score_pair(x, noisy, x + 0.01 * rng.standard_normal(len(x)))
    assert row["delta_si_sdr"] == pytest.approx(row["si_sdr_enhanced"] - row["si_sdr_noisy"])
    assert row["delta_stoi"] > 0 and not row["unreliable"]
    row = score_pair(x, noisy, x, with_stoi=False)
    assert row["unreliable"] and math.isnan(row["stoi_noisy"])


def test_aggregate_groups_and_sorts():
    rows = [
        {"category": "b", "snr_db": 5.0, "delta_si_sdr": 2.0},
        {"category": "a", "snr_db": 0.0, "delta_si_sdr": 1.0},
        {"category": "b", "snr_db": 0.0, "delta_si_sdr": 4.0, "unreliable": True},
    ]
    agg = aggregate(rows, "category", ["delta_si_sdr"])
    assert [(g["category"], g["n"], g["delta_si_sdr"], g["n_unreliable"]) for g in agg] == [
        ("a", 1, 1.0, 0), ("b", 2, 3.0, 1)]
    both = aggregate(rows, ("category", "snr_db"), ["delta_si_sdr"])
    assert [(g["category"], g["snr_db"]) for g in both] == [("a", 0.0), ("b", 0.0), ("b", 5.0)]


def test_report_csv_and_json_round_trip(tmp_path):
    rep = MetricReport()
    rep.add(id="x", model="dfin", condition="fingerprint", category="hum", snr_db=0.0, offset_s=0.0,
            si_sdr_noisy=1.5, si_sdr_enhanced=4.0, stoi_noisy=0.7, stoi_enhanced=0.8, unreliable=False)
    rep.add(id="y", model="dfin", condition="bypass", category="hum", snr_db=5.0, offset_s=0.0,
            si_sdr_noisy=2.0, si_sdr_enhanced=60.0, stoi_noisy=0.7, stoi_enhanced=0.9, unreliable=True)
    rep.write_csv(tmp_path / "r.csv")
    back = MetricReport.read_csv(tmp_path / "r.csv")
    assert back.rows[0]["delta_si_sdr"] == 2.5 and back.rows[1]["unreliable"] is True
    assert back.rows[0]["pesq"] is None
    header = (tmp_path / "r.csv").read_text().splitlines()[0].split(",")
    assert tuple(header) == metrics.REPORT_COLUMNS
    rep.write_json(tmp_path / "r.json", {"note": np.float64(1.0)})
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["version"] == metrics.REPORT_VERSION and doc["note"] == 1.0
    assert doc["aggregates"]["category"][0]["n"] == 2
