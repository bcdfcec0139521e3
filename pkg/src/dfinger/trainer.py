"""Losses, training loops (baseline pretraining, variant fine-tuning) and checkpoint I/O."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import dsp
from .datamix import SampleTriple
from .errors import ConfigError, InvalidShape, NumericError
from .model import VARIANTS, DFingerNet, FusionMode, ModelConfig, VariantConfig, variant_by_name
from .nn import tensor as T
from .nn.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .nn.optim import Adam, clip_grad_norm

log = logging.getLogger(__name__)

LOSS_EPS = 1e-12

__all__ = [
    "LossBreakdown", "TrainConfig", "Batch", "spectral_loss", "make_batches",
    "pretrain_baseline", "train_variant", "train_model", "save_checkpoint", "load_checkpoint",
]


# -- loss -------------------------------------------------------------------------

@dataclass
class LossBreakdown:
    total: float
    magnitude_term: float
    complex_term: float
    tensor: T.Tensor | None = field(default=None, repr=False)


def _split(x, dtype):
    if isinstance(x, tuple):
        return x
    if isinstance(x, dsp.ComplexSpectrogram):
        x = x.frames
    x = np.asarray(x)
    return T.Tensor(x.real.astype(dtype)), T.Tensor(x.imag.astype(dtype))


def spectral_loss(enhanced, clean, c: float = 0.6, lambda_mag: float = 1.0,
                  lambda_complex: float = 1.0) -> LossBreakdown:
    """Compressed magnitude plus compressed complex loss.

    ``enhanced`` is either complex spectra or a ``(real, imag)`` tensor pair
    (differentiable path); ``clean`` is complex spectra of the same shape.
    """
    e_re, e_im = _split(enhanced, np.float64)
    dtype = e_re.dtype
    s = clean.frames if isinstance(clean, dsp.ComplexSpectrogram) else np.asarray(clean)
    if s.shape != e_re.shape:
        raise InvalidShape(f"loss shapes differ: enhanced {e_re.shape}, clean {s.shape}")
    s_pow = s.real ** 2 + s.imag ** 2 + LOSS_EPS
    s_mag = (s_pow ** (c / 2)).astype(dtype)
    s_scale = s_pow ** ((c - 1) / 2)
    s_re = (s.real * s_scale).astype(dtype)
    s_im = (s.imag * s_scale).astype(dtype)

    e_pow = e_re * e_re + e_im * e_im + LOSS_EPS
    e_mag = e_pow ** (c / 2)
    e_scale = e_pow ** ((c - 1) / 2)
    d_mag = e_mag - s_mag
    mag = T.mean(d_mag * d_mag)
    d_re = e_re * e_scale - s_re
    d_im = e_im * e_scale - s_im
    cplx = T.mean(d_re * d_re + d_im * d_im)
    total = mag * lambda_mag + cplx * lambda_complex
    return LossBreakdown(float(total.data), float(mag.data), float(cplx.data), total)


# -- configuration ----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    samples_per_epoch: int = 2000
    batch: int = 8
    lr: float = 1e-3
    fingerprint_prob: float = 1.0
    variant: VariantConfig = VARIANTS["dfin"]
    seed: int = 0
    lambda_mag: float = 1.0
    lambda_complex: float = 1.0
    compression: float = 0.6
    warmup_frac: float = 0.03
    clip_norm: float = 10.0
    freeze_main: bool = False
    max_steps: int | None = None

    def __post_init__(self):
        if isinstance(self.variant, str):
            object.__setattr__(self, "variant", variant_by_name(self.variant))
        elif isinstance(self.variant, dict):
            object.__setattr__(self, "variant", VariantConfig.from_dict(self.variant))
        if not 0.0 <= self.fingerprint_prob <= 1.0:
            raise ConfigError(f"fingerprint_prob must be in [0, 1], got {self.fingerprint_prob}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch < 1 or self.samples_per_epoch < 1:
            raise ConfigError("batch and samples_per_epoch must be positive")
        if self.lr <= 0 or self.clip_norm <= 0:
            raise ConfigError("lr and clip_norm must be positive")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ConfigError("warmup_frac must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown training options: {', '.join(unknown)}")
        return cls(**known)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @property
    def steps_per_epoch(self) -> int:
        return -(-self.samples_per_epoch // self.batch)


# -- batching ---------------------------------------------------------------------

@dataclass
class Batch:
    noisy: np.ndarray        # (B, T, F) complex
    clean: np.ndarray        # (B, T, F) complex
    fingerprint: np.ndarray | None  # (B, K, F) complex


def make_batches(samples: Iterable[SampleTriple], batch: int, cfg: dsp.AnalysisConfig):
    """Group samples into spectral batches; a short final batch is kept."""
    buf: list[SampleTriple] = []

    def emit():
        x = np.stack([s.mixture.samples for s in buf])
        y = np.stack([s.clean.samples for s in buf])
        fps = [s.fingerprint.samples for s in buf]
        fp = np.stack(fps) if len({len(f) for f in fps}) == 1 else None
        return Batch(dsp.stft_frames(x, cfg), dsp.stft_frames(y, cfg),
                     None if fp is None else dsp.stft_frames(fp, cfg))

    for s in samples:
        buf.append(s)
        if len(buf) == batch:
            yield emit()
            buf = []
    if buf:
        yield emit()


DataSource = Callable[[int], Iterable[SampleTriple]]


def _as_source(data) -> DataSource:
    """Accept a callable ``epoch -> samples`` or a fixed sequence reused every epoch."""
    if callable(data):
        return data
    fixed = list(data)
    return lambda epoch: fixed


# -- training loop ----------------------------------------------------------------

class _JsonlLog:
    def __init__(self, path):
        self.fh = None
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self.fh = open(path, "w", encoding="utf-8")

    def write(self, **rec):
        if self.fh:
            self.fh.write(json.dumps(rec, sort_keys=True) + "\n")
            self.fh.flush()

    def close(self):
        if self.fh:
            self.fh.close()


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    epoch_losses: list[float]
    fp_fraction: float
    steps: int


def train_model(model: DFingerNet, data, cfg: TrainConfig, log_path=None, checkpoint_path=None,
                step_callback=None) -> TrainResult:
    """Optimise ``model`` in place.

    Each batch is fingerprint-active with probability ``cfg.fingerprint_prob``
    (seeded Bernoulli draws); inactive batches run in Bypass.  On a non-finite
    loss or gradient the last good parameters are restored, written to
    ``checkpoint_path`` and :class:`NumericError` is raised.
    """
    source = _as_source(data)
    params = model.params
    fp_names = set(model.fingerprint_param_names())
    has_branch = model.variant.fusion is not FusionMode.BYPASS
    trainable = [n for n in params.names() if not (cfg.freeze_main and n not in fp_names)]
    if not trainable:
        raise ConfigError("nothing to train: every parameter is frozen")
    total_steps = cfg.epochs * cfg.steps_per_epoch
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)
    warmup = max(1, int(round(cfg.warmup_frac * total_steps)))
    opt = Adam(cfg.lr)
    coin = np.random.default_rng([cfg.seed, 0x5F1])
    jlog = _JsonlLog(log_path)
    good = params.state()
    good_step = 0
    step = 0
    n_active = 0
    epoch_losses = []
    acfg = model.cfg.analysis
    base_meta = {"train_config": cfg.to_dict(), "config_hash": cfg.digest()}

    def snapshot(steps_done):
        return model.to_checkpoint(**base_meta, steps=steps_done)

    try:
        for epoch in range(cfg.epochs):
            losses = []
            for batch in make_batches(source(epoch), cfg.batch, acfg):
                if step >= total_steps:
                    break
                active = has_branch and bool(coin.random() < cfg.fingerprint_prob)
                if active and batch.fingerprint is None:
                    raise ConfigError("fingerprint-active batch has no equal-length fingerprints")
                lr = cfg.lr * min(1.0, (step + 1) / warmup)
                params.zero_grad()
                try:
                    with T.Tape() as tape:
                        mode = model.variant.fusion if active else FusionMode.BYPASS
                        out = model.forward(batch.noisy, batch.fingerprint if active else None, mode)
                        loss = spectral_loss(out, batch.clean, cfg.compression, cfg.lambda_mag,
                                             cfg.lambda_complex)
                    if not np.isfinite(loss.total):
                        raise NumericError(f"non-finite loss at step {step}")
                    tape.backward(loss.tensor)
                    grads = params.grads()
                    if not active:
                        leaked = sorted(n for n in fp_names if n in grads and n not in params.names("enc."))
                        if leaked:
                            raise NumericError(f"fingerprint parameters got gradients in Bypass: {leaked}")
                    names = [n for n in trainable if n in grads]
                    clipped = {n: grads[n] for n in names}
                    grad_norm = clip_grad_norm(clipped, cfg.clip_norm)
                    opt.step(params, clipped, names=names, lr=lr)
                    for n in names:
                        if not np.all(np.isfinite(params[n].data)):
                            raise NumericError(f"parameter {n} became non-finite at step {step}")
                except NumericError:
                    params.load_state(good)
                    if checkpoint_path is not None:
                        save_checkpoint(checkpoint_path, snapshot(good_step))
                    raise
                step += 1
                n_active += active
                losses.append(loss.total)
                jlog.write(step=step, epoch=epoch, loss=loss.total, magnitude=loss.magnitude_term,
                           complex=loss.complex_term, fp_active=active, lr=lr, grad_norm=grad_norm)
                if step_callback is not None:
                    step_callback(step, loss, active)
            good, good_step = params.state(), step
            if losses:
                epoch_losses.append(float(np.mean(losses)))
                jlog.write(epoch=epoch, mean_loss=epoch_losses[-1], steps=step,
                           fp_fraction=n_active / max(step, 1))
                log.info("epoch %d: loss %.4f", epoch, epoch_losses[-1])
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, snapshot(step))
            if step >= total_steps:
                break
    finally:
        jlog.close()
    fraction = n_active / max(step, 1)
    log.info("fingerprint-active fraction %.3f over %d steps", fraction, step)
    return TrainResult(snapshot(step), epoch_losses, fraction, step)


def pretrain_baseline(data, cfg: TrainConfig, model_cfg: ModelConfig | None = None, log_path=None,
                      checkpoint_path=None) -> Checkpoint:
    """Train the Bypass baseline that stands in for pretrained weights."""
    return pretrain_baseline_result(data, cfg, model_cfg, log_path, checkpoint_path).checkpoint


def pretrain_baseline_result(data, cfg, model_cfg=None, log_path=None, checkpoint_path=None) -> TrainResult:
    if cfg.variant.fusion is not FusionMode.BYPASS:
        raise ConfigError("baseline pretraining runs in Bypass; use the 'dfn' variant")
    model = DFingerNet(model_cfg, cfg.variant, seed=cfg.seed)
    return train_model(model, data, replace(cfg, fingerprint_prob=0.0), log_path, checkpoint_path)


def model_for_variant(init: Checkpoint, variant: VariantConfig, seed: int = 0) -> DFingerNet:
    """Load ``init`` and, if it is a baseline, attach a fresh branch for ``variant``."""
    base = DFingerNet.from_checkpoint(init)
    if base.variant == variant:
        return base
    if base.variant.fusion is FusionMode.BYPASS and variant.fusion is not FusionMode.BYPASS:
        return base.with_fingerprint_branch(variant, seed)
    raise ConfigError(
        f"checkpoint variant {base.variant.to_dict()} cannot initialise {variant.to_dict()}"
    )


def train_variant(init: Checkpoint, data, cfg: TrainConfig, log_path=None, checkpoint_path=None) -> Checkpoint:
    return train_variant_result(init, data, cfg, log_path, checkpoint_path).checkpoint


def train_variant_result(init, data, cfg, log_path=None, checkpoint_path=None) -> TrainResult:
    model = model_for_variant(init, cfg.variant, cfg.seed)
    return train_model(model, data, cfg, log_path, checkpoint_path)
