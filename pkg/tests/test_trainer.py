import json

import numpy as np
import pytest

from dfinger import dsp, synth, trainer
from dfinger.datamix import MixSpec, SampleTriple, make_sample
from dfinger.errors import ConfigError, NumericError
from dfinger.model import VARIANTS, DFingerNet, ModelConfig
from dfinger.nn.checkpoint import load_checkpoint
from dfinger.trainer import TrainConfig, pretrain_baseline_result, spectral_loss, train_model, train_variant_result

SMALL = ModelConfig(conv_channels=8, hidden=16, heads=2)


def tiny_samples(n, seconds=0.1, fp_seconds=0.05, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        clean = rng.standard_normal(int(seconds * 24000)) * 0.1
        noise = rng.standard_normal(int(seconds * 24000)) * 0.05
        fp = rng.standard_normal(int(fp_seconds * 24000)) * 0.05
        out.append(SampleTriple(dsp.AudioBuffer(clean), dsp.AudioBuffer(noise), dsp.AudioBuffer(fp),
                                dsp.AudioBuffer(clean + noise), 1.0, 6.0, MixSpec(), f"s{i}"))
    return out


def speech_samples(n, seconds=1.5, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        clean = dsp.AudioBuffer(synth.speech_surrogate(seconds, rng))
        noise = dsp.AudioBuffer(synth.noise_recording(synth.family(i % 5), seconds + 1.0, rng))
        out.append(make_sample(clean, noise, MixSpec(snr_db=0.0, fingerprint_len_s=0.5), seconds, rng, f"o{i}"))
    return out


# -- loss -------------------------------------------------------------------------------

def loss_oracle(e, s, c=0.6):
    """Element-wise compressed loss, mean over bins, no epsilon."""
    e, s = np.asarray(e, complex), np.asarray(s, complex)
    mag = np.mean((np.abs(e) ** c - np.abs(s) ** c) ** 2)
    comp = lambda z: np.abs(z) ** c * np.exp(1j * np.angle(z))
    return mag, np.mean(np.abs(comp(e) - comp(s)) ** 2)


@pytest.mark.parametrize("e,s,expect_mag,expect_cplx", [
    ([2 + 0j], [1 + 0j], (2 ** 0.6 - 1) ** 2, (2 ** 0.6 - 1) ** 2),
    ([1j], [1 + 0j], 0.0, 2.0),
    ([1 + 1j, 0.5 + 0j], [1 + 1j, 0.5 + 0j], 0.0, 0.0),
])
def test_loss_worked_examples(e, s, expect_mag, expect_cplx):
    oracle = loss_oracle(e, s)
    assert oracle == pytest.approx((expect_mag, expect_cplx), abs=1e-12)
    got = spectral_loss(np.array(e), np.array(s))
    assert got.magnitude_term == pytest.approx(expect_mag, abs=1e-6)
    assert got.complex_term == pytest.approx(expect_cplx, abs=1e-6)
    assert got.total == pytest.approx(expect_mag + expect_cplx, abs=1e-6)


def test_loss_matches_oracle_on_random_spectra():
    rng = np.random.default_rng(0)
    e = rng.standard_normal((2, 5, 7)) + 1j * rng.standard_normal((2, 5, 7))
    s = rng.standard_normal((2, 5, 7)) + 1j * rng.standard_normal((2, 5, 7))
    got = spectral_loss(e, s, lambda_mag=0.5, lambda_complex=2.0)
    mag, cplx = loss_oracle(e, s)
    assert got.magnitude_term == pytest.approx(mag, rel=1e-9)
    assert got.complex_term == pytest.approx(cplx, rel=1e-9)
    assert got.total == pytest.approx(0.5 * mag + 2.0 * cplx, rel=1e-9)


def test_loss_is_finite_on_silence():
    z = np.zeros((1, 3, 4), complex)
    got = spectral_loss(z, z)
    assert np.isfinite(got.total) and got.total < 1e-6


# -- configuration ------------------------------------------------------------------------

def test_train_config_round_trip_and_validation():
    cfg = TrainConfig(epochs=2, variant="dfin-att", fingerprint_prob=0.5)
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    assert cfg.digest() != TrainConfig(epochs=3, variant="dfin-att", fingerprint_prob=0.5).digest()
    with pytest.raises(ConfigError):
        TrainConfig(fingerprint_prob=1.5)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochs": 1, "learning_rate": 3})
    with pytest.raises(ConfigError):
        TrainConfig(variant="resnet")


def test_pretraining_requires_bypass_variant():
    with pytest.raises(ConfigError, match="Bypass"):
        pretrain_baseline_result(tiny_samples(2), TrainConfig(epochs=1, variant="dfin"), SMALL)


def test_incompatible_checkpoint_is_rejected():
    ck = DFingerNet(SMALL, VARIANTS["dfin"]).to_checkpoint()
    with pytest.raises(ConfigError):
        trainer.model_for_variant(ck, VARIANTS["dfin-att"])
    same = trainer.model_for_variant(ck, VARIANTS["dfin"])
    assert same.param_hash() == DFingerNet.from_checkpoint(ck).param_hash()


# -- loop behaviour ---------------------------------------------------------------------

def quick_cfg(**kw):
    base = dict(epochs=1, samples_per_epoch=8, batch=4, lr=1e-3, warmup_frac=0.0, variant="dfin", seed=5)
    base.update(kw)
    return TrainConfig(**base)


def test_training_is_deterministic():
    data = tiny_samples(8)
    hashes = []
    for _ in range(2):
        m = DFingerNet(SMALL, VARIANTS["dfin"], seed=1)
        train_model(m, data, quick_cfg(epochs=2, fingerprint_prob=0.5))
        hashes.append(m.param_hash())
    assert hashes[0] == hashes[1]


def test_zero_probability_leaves_fingerprint_branch_untouched():
    m = DFingerNet(SMALL, VARIANTS["dfin"], seed=1)
    before = {n: m.params[n].data.copy() for n in m.params.names()}
    res = train_model(m, tiny_samples(8), quick_cfg(fingerprint_prob=0.0))
    assert res.fp_fraction == 0.0
    for n in m.fingerprint_param_names():
        assert np.array_equal(m.params[n].data, before[n]), n
    assert any(not np.array_equal(m.params[n].data, before[n]) for n in m.params.names("enc."))


def test_bernoulli_fraction_over_400_batches():
    m = DFingerNet(SMALL, VARIANTS["dfin"], seed=1)
    res = train_model(m, tiny_samples(4, seconds=0.03, fp_seconds=0.02),
                      quick_cfg(epochs=100, samples_per_epoch=4, batch=1, fingerprint_prob=0.5, lr=1e-5))
    assert res.steps == 400
    assert 0.42 <= res.fp_fraction <= 0.58


def test_gradients_reach_fingerprint_branch_and_freeze_main():
    m = DFingerNet(SMALL, VARIANTS["dfin"], seed=2)
    before = {n: m.params[n].data.copy() for n in m.params.names()}
    train_model(m, tiny_samples(4), quick_cfg(samples_per_epoch=4, freeze_main=True))
    fp_names = set(m.fingerprint_param_names())
    for n in m.params.names():
        changed = not np.array_equal(m.params[n].data, before[n])
        assert changed == (n in fp_names), n


def test_nan_loss_restores_and_checkpoints(tmp_path, monkeypatch):
    m = DFingerNet(SMALL, VARIANTS["dfin"], seed=3)
    data = tiny_samples(8)
    real = trainer.spectral_loss
    calls = {"n": 0}

    def flaky(*a, **kw):
        calls["n"] += 1
        out = real(*a, **kw)
        if calls["n"] == 4:
            out.total = float("nan")
        return out

    monkeypatch.setattr(trainer, "spectral_loss", flaky)
    ck = tmp_path / "abort.ckpt"
    with pytest.raises(NumericError):
        train_model(m, data, quick_cfg(epochs=3), checkpoint_path=ck)
    # two steps per epoch: the fourth call fails, so state rolls back to the end of epoch 0
    saved = load_checkpoint(ck)
    assert saved.metadata["steps"] == 2
    assert DFingerNet.from_checkpoint(saved).param_hash() == m.param_hash()
    assert all(np.all(np.isfinite(m.params[n].data)) for n in m.params.names())


def test_log_and_checkpoint_metadata(tmp_path):
    m = DFingerNet(SMALL, VARIANTS["dfn"], seed=0)
    res = train_model(m, tiny_samples(8), quick_cfg(epochs=2, variant="dfn"), tmp_path / "t.jsonl", tmp_path / "t.ckpt")
    lines = [json.loads(x) for x in (tmp_path / "t.jsonl").read_text().splitlines()]
    assert sum("step" in x and "loss" in x for x in lines) == 4
    assert sum("mean_loss" in x for x in lines) == 2
    meta = load_checkpoint(tmp_path / "t.ckpt").metadata
    assert meta["steps"] == res.steps == 4
    assert meta["config_hash"] == quick_cfg(epochs=2, variant="dfn").digest()


def test_overfit_eight_fixed_samples():
    # 8 fixed samples in one batch, 200 steps: the first step's loss is the
    # untrained model's loss on the set, the last is the trained one.
    data = speech_samples(8, seconds=1.0)
    steps = []
    model = DFingerNet(SMALL, VARIANTS["dfn"], seed=5)
    train_model(model, data, quick_cfg(epochs=200, samples_per_epoch=8, batch=8, variant="dfn"),
                step_callback=lambda s, loss, a: steps.append(loss.total))
    assert len(steps) == 200
    assert steps[-1] < 0.2 * steps[0]
    res = train_variant_result(model.to_checkpoint(), data, quick_cfg(epochs=10, samples_per_epoch=8, batch=8))
    assert res.fp_fraction == 1.0
    assert res.epoch_losses[-1] <= steps[-1] * 1.1
