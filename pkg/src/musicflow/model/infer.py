"""
Sampling: integrate the guided vector field from noise (t=0) to data (t=1).

The stepper is the Dormand-Prince 4(5) pair with first-same-as-last reuse, so an
accepted step costs six new field evaluations.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from musicflow.model.conditioning import ConditionSet, ControlFeatures
from musicflow.utils.errors import SolverError
from musicflow.utils.typing import TYPE_CHECKING

if TYPE_CHECKING:
    from musicflow.audio.codec import ToyCodec
    from musicflow.model.vector_field import VectorField
    from musicflow.utils.config import RunConfig
    from musicflow.utils.typing import FieldFn, FloatArray, Waveform

logger = logging.getLogger(__name__)

# Butcher tableau
C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
E = B5 - B4


@dataclass(frozen=True)
class SolverConfig:
    rtol: float = 1e-5
    atol: float = 1e-5
    initial_step: float | None = None
    max_steps: int = 1000
    safety: float = 0.9
    min_factor: float = 0.2
    max_factor: float = 5.0
    fixed_step: float | None = None

    def __post_init__(self) -> None:
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError(f"Tolerances must be positive, got rtol={self.rtol}, atol={self.atol}")
        if self.max_steps <= 0:
            raise ValueError(f"max_steps must be positive, got {self.max_steps}")
        for name in ("initial_step", "fixed_step"):
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")

    @classmethod
    def from_run_config(cls, cfg: RunConfig) -> SolverConfig:
        return cls(rtol=cfg.rtol, atol=cfg.atol, max_steps=cfg.max_steps, fixed_step=cfg.fixed_step or None)


@dataclass
class SolveResult:
    z: FloatArray
    times: list[float] = field(default_factory=list)
    nfev: int = 0
    accepted: int = 0
    rejected: int = 0

    def stats(self) -> dict[str, int]:
        return {"nfev": self.nfev, "accepted": self.accepted, "rejected": self.rejected}


def _error_norm(err: np.ndarray, z: np.ndarray, z_new: np.ndarray, cfg: SolverConfig) -> float:
    scale = cfg.atol + cfg.rtol * np.maximum(np.abs(z), np.abs(z_new))
    return float(np.sqrt(np.mean(np.square(err / scale))))


def dopri5_solve(
    f: FieldFn,
    z0: FloatArray,
    t0: float = 0.0,
    t1: float = 1.0,
    cfg: SolverConfig | None = None,
) -> SolveResult:
    """
    Integrate dz/dt = f(t, z) from t0 to t1.

    Steps are accepted when the RMS of the embedded error, scaled per component by
    atol + rtol * max(|z|, |z_new|), is at most 1. The next step is the current one
    times 0.9 * err^(-1/5), clamped to [0.2, 5]. The last step lands exactly on t1 and f
    is never evaluated outside [t0, t1].

    Raises:
        SolverError: The step budget ran out or a stage was non-finite; carries the
            accepted (t, z) pairs so far and the step counts.
    """
    cfg = cfg or SolverConfig()
    if not t1 > t0:
        raise ValueError(f"Need t1 > t0, got [{t0}, {t1}]")

    z = np.asarray(z0, dtype=np.float64).copy()
    t = t0
    h = cfg.fixed_step or cfg.initial_step or (t1 - t0)
    result = SolveResult(z, times=[t0])
    trajectory: list[tuple[float, FloatArray]] = [(t0, z.copy())]

    def fail(message: str) -> SolverError:
        result.z = z
        return SolverError(message, trajectory, result.stats())

    slack = 1e-12 * max(1.0, abs(t1))
    k1 = np.asarray(f(t, z), dtype=np.float64)
    result.nfev += 1
    while t1 - t > slack:
        if result.accepted + result.rejected >= cfg.max_steps:
            raise fail(f"Step budget of {cfg.max_steps} exhausted at t={t:.6f}")

        last = t + h >= t1 - slack
        if last:
            h = t1 - t
        ks = [k1]
        for stage in range(1, 7):
            z_stage = z + h * sum(a * k for a, k in zip(A[stage], ks) if a != 0.0)
            t_stage = t1 if last and C[stage] == 1.0 else min(t + C[stage] * h, t1)
            ks.append(np.asarray(f(t_stage, z_stage), dtype=np.float64))
            result.nfev += 1
            if not np.all(np.isfinite(ks[-1])):
                raise fail(f"Non-finite field value at t={t_stage:.6f}")
        z_new = z_stage  # the seventh stage input is the fifth-order solution

        err = _error_norm(h * sum(e * k for e, k in zip(E, ks) if e != 0.0), z, z_new, cfg)
        if cfg.fixed_step is None and not math.isfinite(err):
            raise fail(f"Non-finite error estimate at t={t:.6f}")

        if cfg.fixed_step is not None or err <= 1.0:
            t = t1 if last else t + h
            z, k1 = z_new, ks[-1]
            result.accepted += 1
            result.times.append(t)
            trajectory.append((t, z.copy()))
            logger.debug(f"dopri5 accept t={t:.6f} h={h:.3e} err={err:.3e}")
        else:
            result.rejected += 1
            logger.debug(f"dopri5 reject t={t:.6f} h={h:.3e} err={err:.3e}")

        if cfg.fixed_step is None:
            factor = cfg.max_factor if err == 0.0 else cfg.safety * err ** (-1 / 5)
            h *= min(cfg.max_factor, max(cfg.min_factor, factor))

    result.z = z
    return result


@dataclass(frozen=True)
class GuidanceWeights:
    text: float = 0.5
    local: float = 0.0
    both: float = 1.5

    def __post_init__(self) -> None:
        if not all(math.isfinite(a) for a in (self.text, self.local, self.both)):
            raise ValueError(f"Guidance weights must be finite, got {self}")

    @classmethod
    def from_run_config(cls, cfg: RunConfig) -> GuidanceWeights:
        return cls(cfg.alpha_text, cfg.alpha_local, cfg.alpha_both)

    @property
    def unconditional(self) -> float:
        return 1.0 - self.text - self.local - self.both

    def terms(self, cs: ConditionSet) -> list[tuple[float, ConditionSet]]:
        """(coefficient, condition subset) pairs with non-zero coefficients."""
        subsets = (
            (self.unconditional, cs.without_all),
            (self.text, cs.without_local),
            (self.local, cs.without_style),
            (self.both, lambda: cs),
        )
        return [(alpha, subset()) for alpha, subset in subsets if alpha != 0.0]

    def to_dict(self) -> dict[str, float]:
        return {"alpha_text": self.text, "alpha_local": self.local, "alpha_both": self.both}


def guided_field(
    model: VectorField,
    z: FloatArray,
    t: float,
    cs: ConditionSet,
    w: GuidanceWeights,
) -> FloatArray:
    """
    Weighted sum of the field under each condition subset.

    unconditional: every condition zeroed; text: local controls zeroed; local: style
    zeroed; both: everything kept. Subsets with a zero weight are not evaluated; the
    rest run as one batch.
    """
    terms = w.terms(cs)
    if len(terms) == 1:
        alpha, subset = terms[0]
        v = model.predict(z, t, subset)
        return v if alpha == 1.0 else alpha * v

    stacked = model.predict(np.concatenate([z] * len(terms)), t, ConditionSet.concat([s for _, s in terms]))
    outputs = np.split(stacked, len(terms))
    return sum((alpha * v for (alpha, _), v in zip(terms, outputs)), start=np.zeros_like(outputs[0]))


@dataclass
class Generation:
    latent: FloatArray
    waveform: Waveform
    seed: int
    weights: GuidanceWeights
    solve: SolveResult

    def metadata(self) -> dict[str, object]:
        return {"seed": self.seed, **self.weights.to_dict(), **self.solve.stats()}


def generate(
    model: VectorField,
    codec: ToyCodec,
    features: ControlFeatures | Sequence[ControlFeatures],
    seed: int,
    weights: GuidanceWeights | None = None,
    solver: SolverConfig | None = None,
) -> list[Generation]:
    """
    Sample one latent per feature set from seeded noise and decode it.

    Raises:
        SolverError: Integration failed; the error carries the partial trajectory.
    """
    batch = [features] if isinstance(features, ControlFeatures) else list(features)
    weights = weights or GuidanceWeights()
    cs = model.encoder(batch)
    z0 = np.random.default_rng(seed).standard_normal((cs.batch, cs.n_frames, model.cfg.n_enc))

    solve = dopri5_solve(lambda t, z: guided_field(model, z, t, cs, weights), z0, 0.0, 1.0, solver)
    logger.info(f"Generated {cs.batch} latent(s) with seed {seed}: {solve.nfev} field evaluations")
    return [
        Generation(solve.z[i], codec.decode(solve.z[i], seed=seed), seed, weights, solve)
        for i in range(cs.batch)
    ]
