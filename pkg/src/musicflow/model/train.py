"""Conditional flow matching: the optimal-transport path, the weighted loss and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from tqdm import tqdm

from musicflow.autodiff import ops
from musicflow.autodiff.array import Array, Tape, backward
from musicflow.autodiff.optim import Adam, clip_grad_norm, warmup_linear_lr
from musicflow.model.conditioning import ControlExtractor, ControlFeatures, DropoutPolicy, apply_condition_dropout
from musicflow.utils.errors import NonFiniteError, ShapeError, TrainingAborted
from musicflow.utils.settings import SIGMA_MIN, Control, LossWeighting
from musicflow.utils.timer import StepTimer
from musicflow.utils.typing import TYPE_CHECKING

if TYPE_CHECKING:
    from musicflow.audio.codec import ToyCodec
    from musicflow.audio.corpus import Manifest
    from musicflow.model.vector_field import VectorField
    from musicflow.utils.config import RunConfig
    from musicflow.utils.typing import FloatArray

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "loss", "lr", "grad_norm", "skipped")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    steps: int = 20_000
    lr: float = 1e-4
    warmup_steps: int = 500
    clip_norm: float = 0.2
    sigma_min: float = SIGMA_MIN
    loss_weighting: LossWeighting = LossWeighting.ONE_PLUS_T
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    log_every: int = 50
    checkpoint_every: int = 1000
    max_skip_fraction: float = 0.01

    def __post_init__(self) -> None:
        if self.batch_size <= 0 or self.steps <= 0:
            raise ValueError(f"batch_size and steps must be positive, got {self.batch_size} and {self.steps}")
        if not 0.0 <= self.sigma_min < 1.0:
            raise ValueError(f"sigma_min must lie in [0, 1), got {self.sigma_min}")
        object.__setattr__(self, "loss_weighting", LossWeighting(self.loss_weighting))

    @classmethod
    def from_run_config(cls, cfg: RunConfig) -> TrainConfig:
        return cls(
            batch_size=cfg.batch_size,
            steps=cfg.steps,
            lr=cfg.lr,
            warmup_steps=cfg.warmup_steps,
            clip_norm=cfg.clip_norm,
            sigma_min=cfg.sigma_min,
            loss_weighting=LossWeighting(cfg.loss_weighting),
            betas=(cfg.adam_beta1, cfg.adam_beta2),
            eps=cfg.adam_eps,
            log_every=cfg.log_every,
            checkpoint_every=cfg.checkpoint_every,
        )


def _per_sample(t: FloatArray | float, ndim: int) -> np.ndarray:
    times = np.asarray(t, dtype=np.float64)
    return times.reshape(-1, *([1] * (ndim - 1))) if times.ndim == 1 and ndim > 1 else times


def interpolate(z0: FloatArray, z1: FloatArray, t: FloatArray | float, sigma_min: float = SIGMA_MIN) -> FloatArray:
    """z_t = (1 - (1 - sigma_min) t) z0 + t z1; `t` is a scalar or one value per leading row."""
    z0, z1 = np.asarray(z0), np.asarray(z1)
    if z0.shape != z1.shape:
        raise ShapeError("interpolate", z0.shape, z1.shape)
    times = _per_sample(t, z0.ndim)
    if np.any(times < 0.0) or np.any(times > 1.0):
        raise ValueError("Flow time must lie in [0, 1]")
    return (1.0 - (1.0 - sigma_min) * times) * z0 + times * z1


def flow_target(z0: FloatArray, z1: FloatArray, sigma_min: float = SIGMA_MIN) -> FloatArray:
    return np.asarray(z1) - (1.0 - sigma_min) * np.asarray(z0)


def cfm_loss(
    v_pred: Array,
    z0: FloatArray,
    z1: FloatArray,
    t: FloatArray | float,
    mode: LossWeighting | str = LossWeighting.ONE_PLUS_T,
    sigma_min: float = SIGMA_MIN,
) -> Array:
    """
    Mean squared error against the flow target, optionally weighted by (1 + t).

    The error is averaged within each sample, weighted per sample and then averaged
    over the batch (the leading axis; an unbatched input is one sample).
    """
    target = flow_target(z0, z1, sigma_min)
    if v_pred.shape != target.shape:
        raise ShapeError("cfm_loss", v_pred.shape, target.shape)
    pred = v_pred if v_pred.ndim > 1 else ops.reshape(v_pred, (1, *v_pred.shape))
    target = target if target.ndim > 1 else target[None]

    diff = ops.sub(pred, Array(target.astype(pred.dtype)))
    per_sample = ops.mean(ops.mul(diff, diff), axis=tuple(range(1, pred.ndim)))
    match LossWeighting(mode):
        case LossWeighting.UNIFORM:
            weights = np.ones(per_sample.shape)
        case LossWeighting.ONE_PLUS_T:
            weights = np.broadcast_to(1.0 + np.asarray(t, dtype=np.float64), per_sample.shape)
    return ops.mean(ops.mul(per_sample, Array(weights.astype(pred.dtype))))


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    skipped: int = 0
    checkpoints: list[Path] = field(default_factory=list)

    @property
    def final_checkpoint(self) -> Path | None:
        return self.checkpoints[-1] if self.checkpoints else None


class Trainer:
    """
    Owns the optimizer and the per-clip caches of a training run.

    Latents and deterministic controls are computed once per clip; the in/out-painting
    mask, condition dropout, flow times and noise are drawn fresh every step.
    """

    def __init__(
        self,
        model: VectorField,
        codec: ToyCodec,
        manifest: Manifest,
        cfg: RunConfig,
        seed: int = 0,
    ) -> None:
        self.model = model
        self.codec = codec
        self.cfg = cfg
        self.train_cfg = TrainConfig.from_run_config(cfg)
        self.extractor = ControlExtractor(codec, cfg)
        self.policy = DropoutPolicy.for_controls(cfg.control_set, cfg)
        self.rng = np.random.default_rng(seed)
        self.optimizer = Adam(model.params.values(), betas=self.train_cfg.betas, eps=self.train_cfg.eps)

        # Caches
        records, _ = manifest.split()
        if not records:
            raise ValueError("Training split is empty")
        self.latents: list[FloatArray] = []
        self.features: list[ControlFeatures] = []
        for clip in tqdm(manifest.clips(records), desc="prepare", leave=False):
            z = codec.encode(clip.mix)
            self.latents.append(z)
            self.features.append(self.extractor.from_clip(clip, z))
        logger.info(f"Prepared {len(self.latents)} training clips, controls={[c.value for c in cfg.control_set]}")

    def sample_batch(self) -> tuple[FloatArray, list[ControlFeatures]]:
        index = self.rng.integers(0, len(self.latents), self.train_cfg.batch_size)
        z1 = np.stack([self.latents[i] for i in index])
        features = []
        for i in index:
            f = self.features[i]
            if Control.INPAINT in self.extractor.controls:
                f = f.with_control(Control.INPAINT, self.extractor.inpaint(self.latents[i], self.rng))
            features.append(f)
        return z1, features

    def step(self, step: int) -> tuple[float, float, float]:
        """One optimizer step; returns (loss, lr, grad norm). Non-finite values raise NonFiniteError."""
        tc = self.train_cfg
        z1, features = self.sample_batch()

        with Tape() as tape:
            cs = apply_condition_dropout(self.model.encoder(features), self.policy, self.rng)
            t = self.rng.random(tc.batch_size)
            z0 = self.rng.standard_normal(z1.shape)
            z_t = interpolate(z0, z1, t, tc.sigma_min)
            v = self.model(z_t, t, cs)
            loss = cfm_loss(v, z0, z1, t, tc.loss_weighting, tc.sigma_min)

        value = loss.item()
        if not math.isfinite(value):
            raise NonFiniteError(f"Non-finite loss at step {step}")

        self.optimizer.zero_grad()
        backward(tape, loss)
        grad_norm = clip_grad_norm(self.optimizer.params, tc.clip_norm)
        if not math.isfinite(grad_norm):
            self.optimizer.zero_grad()
            raise NonFiniteError(f"Non-finite gradient norm at step {step}")

        lr = warmup_linear_lr(step, tc.lr, tc.warmup_steps, tc.steps)
        self.optimizer.step(lr)
        return value, lr, grad_norm

    def run(self, run_dir: Path) -> TrainResult:
        tc = self.train_cfg
        result = TrainResult()
        run_dir.mkdir(parents=True, exist_ok=True)
        window: list[float] = []

        def report(step: int) -> None:
            if window:
                logger.info(f"step {step}: loss {np.mean(window):.5f} (skipped {result.skipped})")
                window.clear()

        log_timer = StepTimer(tc.log_every, report)
        log_timer.activate()

        with open(run_dir / "metrics.csv", "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(LOG_COLUMNS)
            for step in tqdm(range(tc.steps), desc="train"):
                try:
                    loss, lr, grad_norm = self.step(step)
                except NonFiniteError as err:
                    result.skipped += 1
                    logger.warning(f"{err}; step skipped ({result.skipped} so far)")
                    if result.skipped > tc.max_skip_fraction * tc.steps:
                        raise TrainingAborted(
                            f"{result.skipped} non-finite steps exceed {tc.max_skip_fraction:.0%} of {tc.steps}"
                        ) from err
                    writer.writerow((step, "nan", 0.0, "nan", result.skipped))
                    continue

                result.losses.append(loss)
                window.append(loss)
                writer.writerow((step, f"{loss:.8f}", f"{lr:.8g}", f"{grad_norm:.6f}", result.skipped))
                log_timer.update(step + 1)

                if (step + 1) % tc.checkpoint_every == 0:
                    result.checkpoints.append(self.model.save(run_dir / "checkpoints" / f"step_{step + 1:06d}.bin"))

        result.checkpoints.append(self.model.save(run_dir / "model.bin"))
        logger.info(f"Training finished: {len(result.losses)} steps, {result.skipped} skipped")
        return result


def train_loop(
    manifest: Manifest,
    model: VectorField,
    codec: ToyCodec,
    cfg: RunConfig,
    run_dir: Path,
    seed: int = 0,
) -> TrainResult:
    return Trainer(model, codec, manifest, cfg, seed).run(run_dir)
