"""Synthetic speech surrogates and stationary noise families.

Speech surrogates are harmonic tones with a wandering pitch contour, vowel
formant envelopes and a syllabic amplitude envelope, plus occasional
unvoiced bursts.  Each noise family is a parameterised stationary process;
recordings from one family differ only by small parameter jitter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SR = 24000

# (F1, F2, F3) Hz for a handful of vowels
VOWELS = np.array([
    [730, 1090, 2440], [270, 2290, 3010], [300, 870, 2240],
    [530, 1840, 2480], [660, 1720, 2410], [570, 840, 2410],
    [440, 1020, 2240], [490, 1350, 1690],
])


def speech_surrogate(duration_s: float, rng: np.random.Generator, sr: int = SR) -> np.ndarray:
    n = int(round(duration_s * sr))
    t = np.arange(n) / sr
    f0_base = rng.uniform(95.0, 230.0)
    # Slow pitch wander: two low-frequency sinusoids
    f0 = f0_base * (1.0 + 0.12 * np.sin(2 * np.pi * rng.uniform(0.2, 0.7) * t + rng.uniform(0, 2 * np.pi))
                    + 0.05 * np.sin(2 * np.pi * rng.uniform(1.5, 3.0) * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(f0) / sr
    out = np.zeros(n)
    pos = int(rng.uniform(0.05, 0.2) * sr)
    while pos < n:
        syl = int(rng.uniform(0.12, 0.35) * sr)
        gap = int(rng.uniform(0.04, 0.25) * sr)
        end = min(pos + syl, n)
        seg = slice(pos, end)
        length = end - pos
        env = np.sin(np.pi * np.arange(length) / max(length, 1)) ** 0.7
        formants = VOWELS[rng.integers(len(VOWELS))] * rng.uniform(0.9, 1.1)
        bw = np.array([90.0, 110.0, 170.0])
        voiced = np.zeros(length)
        f0_seg = f0[seg]
        n_harm = int(7800 // f0_base)
        for h in range(1, n_harm + 1):
            fh = h * f0_seg.mean()
            amp = sum(1.0 / (1.0 + ((fh - fc) / b) ** 2) for fc, b in zip(formants, bw)) + 0.02
            voiced += amp / np.sqrt(h) * np.sin(h * phase[seg])
        out[seg] += env * voiced
        if rng.random() < 0.3:
            # unvoiced fricative-like burst after the syllable
            blen = min(int(rng.uniform(0.04, 0.1) * sr), n - end)
            if blen > 8:
                burst = rng.standard_normal(blen)
                burst = np.diff(burst, prepend=0.0)  # tilt towards high frequencies
                out[end:end + blen] += 0.3 * np.hanning(blen) * burst
        pos = end + gap
    level = 10 ** (rng.uniform(-28.0, -22.0) / 20)
    r = np.sqrt(np.mean(out ** 2))
    return out * (level / r) if r > 0 else out


@dataclass(frozen=True)
class NoiseFamily:
    name: str
    kind: str
    tilt_db_per_oct: float = 0.0
    low_hz: float = 20.0
    high_hz: float = 12000.0
    hum_hz: float = 0.0
    mod_hz: float = 0.0


FAMILIES = [
    NoiseFamily("pink_hall", "colored", tilt_db_per_oct=-3.0, low_hz=60, high_hz=11000),
    NoiseFamily("brown_rumble", "colored", tilt_db_per_oct=-7.0, low_hz=30, high_hz=3000),
    NoiseFamily("mains_hum", "hum", tilt_db_per_oct=-2.0, hum_hz=100.0),
    NoiseFamily("am_crackle", "crackle", low_hz=1200, high_hz=7000, mod_hz=4.0),
    NoiseFamily("blue_hiss", "colored", tilt_db_per_oct=3.0, low_hz=1500, high_hz=11500),
]

NOISE_RMS = 10 ** (-30.0 / 20)


def family(index: int) -> NoiseFamily:
    base = FAMILIES[index % len(FAMILIES)]
    cycle = index // len(FAMILIES)
    if cycle == 0:
        return base
    # Later cycles shift the family so it stays distinct from its parent.
    return NoiseFamily(f"{base.name}_{cycle}", base.kind, base.tilt_db_per_oct - 4.0 * cycle,
                       base.low_hz, base.high_hz, base.hum_hz * (1 + 0.5 * cycle), base.mod_hz * (1 + cycle))


def _shape_spectrum(white: np.ndarray, gains: np.ndarray) -> np.ndarray:
    spec = np.fft.rfft(white)
    return np.fft.irfft(spec * gains, n=len(white))


def _band_gain(freqs, fam: NoiseFamily, tilt, low, high):
    f = np.maximum(freqs, 1.0)
    g = (f / 1000.0) ** (tilt / (20 * np.log10(2)))
    # 4th-order-like smooth band edges
    g = g / np.sqrt(1 + (low / f) ** 8) / np.sqrt(1 + (f / high) ** 8)
    return g


def noise_recording(fam: NoiseFamily, duration_s: float, rng: np.random.Generator, sr: int = SR) -> np.ndarray:
    n = int(round(duration_s * sr))
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    tilt = fam.tilt_db_per_oct + rng.uniform(-0.4, 0.4)
    low = fam.low_hz * rng.uniform(0.92, 1.08)
    high = fam.high_hz * rng.uniform(0.95, 1.05)
    white = rng.standard_normal(n)
    if fam.kind == "colored":
        x = _shape_spectrum(white, _band_gain(freqs, fam, tilt, low, high))
    elif fam.kind == "hum":
        t = np.arange(n) / sr
        f0 = fam.hum_hz * rng.uniform(0.97, 1.03)
        x = np.zeros(n)
        for h in range(1, 12):
            x += (0.7 ** h) * np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 2 * np.pi))
        floor = _shape_spectrum(white, _band_gain(freqs, fam, tilt, 40.0, 9000.0))
        x = x / np.sqrt(np.mean(x ** 2)) + 0.25 * floor / np.sqrt(np.mean(floor ** 2))
    elif fam.kind == "crackle":
        t = np.arange(n) / sr
        mod = fam.mod_hz * rng.uniform(0.9, 1.1)
        env = 0.6 + 0.4 * np.sin(2 * np.pi * mod * t + rng.uniform(0, 2 * np.pi))
        impulses = (rng.random(n) < 0.004) * rng.standard_normal(n) * 6.0
        bed = 0.5 * white
        x = _shape_spectrum((impulses + bed) * env, _band_gain(freqs, fam, 0.0, low, high))
    else:
        raise ValueError(f"unknown noise kind {fam.kind!r}")
    return x * (NOISE_RMS / np.sqrt(np.mean(x ** 2)))


OCTAVE_CENTRES = (125.0, 250.0, 500.0, 1000.0, 2000.0, 4000.0, 8000.0)


def octave_envelope_db(x: np.ndarray, sr: int = SR, nfft: int = 4096) -> np.ndarray:
    """Long-term power per octave band in dB (Welch average)."""
    from scipy.signal import welch

    f, p = welch(x, fs=sr, nperseg=nfft)
    out = []
    for fc in OCTAVE_CENTRES:
        sel = (f >= fc / np.sqrt(2)) & (f < fc * np.sqrt(2))
        out.append(10 * np.log10(np.sum(p[sel]) + 1e-20))
    return np.array(out)
