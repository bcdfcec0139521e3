import hashlib
import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfinger import datamix, dsp, synth
from dfinger.datamix import (
    Manifest, ManifestRecord, MixSpec, StressMode, TrainRanges, build_eval_set, build_training_set,
    generate_synthetic_corpus, mix_at_snr, snr_db, split_fingerprint,
)
from dfinger.errors import ConfigError, DataError, SkipSample

SR = 24000


def buf(seconds, seed=0):
    return dsp.AudioBuffer(np.random.default_rng(seed).standard_normal(int(seconds * SR)) * 0.05)


# -- split_fingerprint ------------------------------------------------------------------

def test_split_adjacent_fingerprint():
    noise = buf(10)
    fp, rest = split_fingerprint(noise, MixSpec(fingerprint_len_s=1.0))
    np.testing.assert_array_equal(fp.samples, noise.samples[:SR])
    np.testing.assert_array_equal(rest.samples, noise.samples[SR:])


def test_split_with_offset_before_mix_segment():
    noise = buf(200)
    fp, rest = split_fingerprint(noise, MixSpec(fingerprint_offset_s=120, mix_start_s=150))
    np.testing.assert_array_equal(fp.samples, noise.samples[29 * SR:30 * SR])
    np.testing.assert_array_equal(rest.samples, noise.samples[150 * SR:])


def test_split_too_short_is_skip():
    with pytest.raises(SkipSample):
        split_fingerprint(buf(0.5), MixSpec(fingerprint_len_s=1.0))


def test_mixspec_validation():
    with pytest.raises(ConfigError):
        MixSpec(fingerprint_len_s=0)
    with pytest.raises(ConfigError):
        MixSpec(fingerprint_offset_s=-1)


# -- mix_at_snr -------------------------------------------------------------------------

def on_grid(values):
    return np.asarray(values, dtype=float)


@pytest.mark.parametrize("c,n,snr,gain", [
    (0.25, 0.25, 0.0, 1.0),
    (0.25, 0.25, 20.0, 0.1),
    (0.125, 0.25, 0.0, 0.5),
])
def test_mix_gain_examples(c, n, snr, gain):
    clean = on_grid([c, -c] * 100)
    noise = on_grid([n, n, -n, -n] * 50)
    _, g, _ = mix_at_snr(clean, noise, snr)
    assert g == pytest.approx(gain, rel=1e-9)


def test_mix_is_exactly_additive_and_hits_snr():
    rng = np.random.default_rng(0)
    for _ in range(50):
        clean = rng.standard_normal(4000) * 0.05
        noise = rng.standard_normal(4000) * rng.uniform(0.001, 0.3)
        snr = rng.uniform(-10, 30)
        mix, g, info = mix_at_snr(clean, noise, snr, rng)
        assert info["rescale"] == 1.0
        assert np.array_equal(mix - info["clean"], g * info["noise"])
        assert abs(snr_db(info["clean"], g * info["noise"]) - snr) < 1e-6


def test_mix_clip_rescue_records_factor():
    clean = np.full(100, 0.5)
    clean[::2] = -0.5
    noise = np.full(100, 0.5)
    mix, g, info = mix_at_snr(clean, noise, -20.0)
    assert info["rescale"] < 1.0
    assert np.max(np.abs(mix)) == pytest.approx(datamix.CLIP_TARGET)
    np.testing.assert_allclose(mix - info["clean"], g * info["noise"], atol=1e-15)


def test_mix_silent_inputs_skip():
    with pytest.raises(SkipSample):
        mix_at_snr(np.zeros(10), np.ones(10), 0)
    with pytest.raises(SkipSample):
        mix_at_snr(np.ones(10), np.zeros(10), 0)


def test_mix_loops_short_noise_with_recorded_seam():
    rng = np.random.default_rng(1)
    clean = rng.standard_normal(1000) * 0.1
    noise = rng.standard_normal(300) * 0.1
    _, _, info = mix_at_snr(clean, noise, 5.0, rng)
    assert len(info["noise"]) == 1000 and info["loop_seam"] == 300


@settings(max_examples=40, deadline=None)
@given(snr=st.floats(-20, 40), scale=st.floats(1e-3, 0.5), seed=st.integers(0, 2 ** 16))
def test_mix_additivity_property(snr, scale, seed):
    rng = np.random.default_rng(seed)
    clean = rng.standard_normal(500) * 0.1
    noise = rng.standard_normal(500) * scale
    mix, g, info = mix_at_snr(clean, noise, snr, rng)
    if info["rescale"] == 1.0:
        assert np.array_equal(mix - info["clean"], g * info["noise"])
        assert abs(snr_db(info["clean"], g * info["noise"]) - snr) < 1e-6


# -- manifests and builders ---------------------------------------------------------------

@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    m = generate_synthetic_corpus(root, n_speech=10, n_noise_profiles=3, seed=4, train_files_per_profile=2,
                                  eval_files_per_profile=2, noise_duration_s=130.0, speech_duration_s=3.5)
    return root, m


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_corpus_layout(corpus):
    root, m = corpus
    assert len(m.categories()) == 3
    assert {r.split for r in m} == {"train", "eval"}
    back = Manifest.load(root / "manifest.jsonl")
    assert [r.id for r in back] == [r.id for r in m]
    back.check_paths()
    a = dsp.read_wav(root / m.split("eval").records[0].noise_path)
    assert a.sample_rate == SR and a.duration == pytest.approx(130.0)


def test_corpus_deterministic(corpus, tmp_path):
    root, _ = corpus
    generate_synthetic_corpus(tmp_path, n_speech=10, n_noise_profiles=3, seed=4, train_files_per_profile=2,
                              eval_files_per_profile=2, noise_duration_s=130.0, speech_duration_s=3.5)
    assert tree_digest(tmp_path) == tree_digest(root)


def test_default_noise_recordings_are_long_enough():
    import inspect

    assert inspect.signature(generate_synthetic_corpus).parameters["noise_duration_s"].default >= 180


def test_noise_profiles_spectral_envelopes():
    envs = {}
    for p in range(5):
        fam = synth.family(p)
        envs[fam.name] = [synth.octave_envelope_db(synth.noise_recording(fam, 60, np.random.default_rng([p, j])))
                          for j in range(2)]
    for name, (a, b) in envs.items():
        assert np.max(np.abs(a - b)) <= 3.0, name
    for x, y in itertools.combinations(envs, 2):
        assert np.max(np.abs(envs[x][0] - envs[y][0])) >= 6.0, (x, y)


def test_manifest_duplicate_ids_and_missing_paths(tmp_path):
    r = ManifestRecord("a", "c.wav", "n.wav")
    with pytest.raises(DataError):
        Manifest([r, r])
    with pytest.raises(DataError, match="n.wav"):
        Manifest([r], tmp_path).check_paths()


def test_manifest_bad_line(tmp_path):
    (tmp_path / "m.jsonl").write_text('{"id": "a"}\n')
    with pytest.raises(DataError, match="m.jsonl:1"):
        Manifest.load(tmp_path / "m.jsonl")


def test_training_set_deterministic(corpus):
    _, m = corpus
    a = list(build_training_set(m, seed=3, n_samples=6))
    b = list(build_training_set(m, seed=3, n_samples=6))
    for x, y in zip(a, b):
        assert x.id == y.id
        np.testing.assert_array_equal(x.mixture.samples, y.mixture.samples)
        np.testing.assert_array_equal(x.fingerprint.samples, y.fingerprint.samples)


def test_training_set_snr_mean(corpus):
    _, m = corpus
    snrs = [s.spec.snr_db for s in build_training_set(m, seed=0, n_samples=100)]
    assert 6.0 <= np.mean(snrs) <= 9.0
    assert min(snrs) >= -5 and max(snrs) <= 20


def test_training_sample_invariants(corpus):
    _, m = corpus
    for s in build_training_set(m, seed=1, n_samples=5):
        assert len(s.mixture) == 3 * SR and len(s.fingerprint) == SR
        np.testing.assert_array_equal(s.mixture.samples - s.clean.samples, s.gain * s.noise.samples)
        if s.meta["clip_rescale"] == 1.0:
            assert abs(s.achieved_snr_db - s.spec.snr_db) < 1e-6


def test_fingerprint_never_overlaps_mix_noise(corpus):
    root, m = corpus
    rec = m.split("eval").records[0]
    noise = dsp.read_wav(m.resolve(rec.noise_path))
    spec = MixSpec(fingerprint_offset_s=30, mix_start_s=100)
    fp, rest = split_fingerprint(noise, spec)
    fp_end = 100 * SR - 30 * SR
    np.testing.assert_array_equal(fp.samples, noise.samples[fp_end - SR:fp_end])
    assert fp_end <= 100 * SR


def test_noise_as_fingerprint_training(corpus):
    _, m = corpus
    for s in build_training_set(m, TrainRanges(stress=StressMode.NOISE_AS_FINGERPRINT), seed=2, n_samples=3):
        np.testing.assert_array_equal(s.fingerprint.samples, s.noise.samples)


def test_eval_set_product_and_categories(corpus):
    _, m = corpus
    ev = build_eval_set(m, [-5, 0, 5], MixSpec(seed=1))
    assert len(ev) == len(m.split("eval")) * 3
    assert {s.category for s in ev} == set(m.categories())


def test_eval_offsets_share_mixture(corpus):
    _, m = corpus
    offsets = [3, 10, 30, 60, 120]
    ev = build_eval_set(m, [0], MixSpec(seed=1), offsets=offsets)
    per = len(offsets)
    assert len(ev) == len(m.split("eval")) * per
    for i in range(0, len(ev), per):
        group = ev[i:i + per]
        assert [s.spec.fingerprint_offset_s for s in group] == offsets
        for s in group[1:]:
            np.testing.assert_array_equal(s.mixture.samples, group[0].mixture.samples)
        assert not np.array_equal(group[0].fingerprint.samples, group[-1].fingerprint.samples)


def test_eval_clean_as_fingerprint(corpus):
    _, m = corpus
    for s in build_eval_set(m, [0], MixSpec(seed=1, stress=StressMode.CLEAN_AS_FINGERPRINT)):
        np.testing.assert_array_equal(s.fingerprint.samples, s.clean.samples)


def test_sidecar_is_json(corpus):
    _, m = corpus
    s = build_eval_set(m, [0], MixSpec(seed=1))[0]
    doc = json.loads(json.dumps(s.sidecar()))
    assert doc["stress"] == "none" and doc["snr_convention"] == "full-signal RMS"


def test_missing_split_is_data_error(corpus):
    _, m = corpus
    with pytest.raises(DataError):
        build_eval_set(m, [0], split="nope")
