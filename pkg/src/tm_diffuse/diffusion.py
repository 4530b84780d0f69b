"""Noise schedule and the closed-form transition kernels of the discrete
diffusion process.

Step indices run over ``0..T``: ``t = 0`` is clean data and the schedule
arrays are stored with a leading entry for ``t = 0`` (``alpha_bar[0] == 1``).

Kernels use plain arithmetic with Python-float coefficients, so they accept
numpy arrays and torch tensors alike.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

__all__ = [
    "NoiseSchedule",
    "cosine_schedule",
    "linear_schedule",
    "forward_sample",
    "x0_from_score",
    "score_from_x0",
    "ddpm_step",
    "ddim_step",
    "masked_loss",
]


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    kind: str
    beta: np.ndarray  # (T+1,), beta[0] = 0
    alpha: np.ndarray  # (T+1,), alpha[0] = 1
    alpha_bar: np.ndarray  # (T+1,), alpha_bar[0] = 1
    posterior_var: np.ndarray  # (T+1,), posterior_var[0] = 0

    @property
    def steps(self) -> int:
        return len(self.beta) - 1

    @classmethod
    def from_betas(cls, betas, kind: str = "custom") -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ValidationError("betas must lie in (0, 1)")
        beta = np.concatenate([[0.0], betas])
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        prev = np.concatenate([[1.0], alpha_bar[:-1]])
        post = np.zeros_like(beta)
        post[1:] = beta[1:] * (1.0 - prev[1:]) / (1.0 - alpha_bar[1:])
        return cls(kind, beta, alpha, alpha_bar, post)

    def check_step(self, t: int, lo: int = 1) -> int:
        t = int(t)
        if not lo <= t <= self.steps:
            raise ValidationError(f"step {t} outside [{lo}, {self.steps}]")
        return t

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "beta", "alpha", "alpha_bar"])
            for t in range(self.steps + 1):
                w.writerow([t, repr(float(self.beta[t])), repr(float(self.alpha[t])),
                            repr(float(self.alpha_bar[t]))])

    @classmethod
    def from_csv(cls, path, kind: str = "custom") -> "NoiseSchedule":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        betas = [float(r["beta"]) for r in rows if int(r["t"]) > 0]
        sched = cls.from_betas(betas, kind)
        stored = np.array([float(r["alpha_bar"]) for r in rows])
        if not np.allclose(stored, sched.alpha_bar, rtol=0, atol=1e-12):
            raise ValidationError(f"{path}: alpha_bar column inconsistent with beta")
        return sched


def cosine_schedule(T: int, s: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    """Cosine schedule; betas are clipped at ``max_beta`` and ``alpha_bar``
    is re-accumulated from the clipped betas."""
    if T < 2:
        raise ValidationError("cosine schedule needs at least 2 steps")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2
    ab = f / f[0]
    betas = np.clip(1.0 - ab[1:] / ab[:-1], 0.0, max_beta)
    return NoiseSchedule.from_betas(betas, kind="cosine")


def linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    # rescaled so short chains still end near pure noise
    scale = 1000.0 / T
    betas = np.linspace(scale * beta_start, scale * beta_end, T)
    return NoiseSchedule.from_betas(np.clip(betas, 1e-8, 0.999), kind="linear")


def make_schedule(kind: str, T: int) -> NoiseSchedule:
    if kind == "cosine":
        return cosine_schedule(T)
    if kind == "linear":
        return linear_schedule(T)
    raise ValidationError(f"unknown schedule {kind!r}")


def forward_sample(x0, t: int, eps, s: NoiseSchedule):
    """``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``; ``t = 0`` returns ``x0``."""
    t = s.check_step(t, lo=0)
    if t == 0:
        return x0
    ab = float(s.alpha_bar[t])
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def x0_from_score(x_t, score, t: int, s: NoiseSchedule):
    """Tweedie posterior mean ``(x_t + (1 - ab_t) score) / sqrt(ab_t)``."""
    t = s.check_step(t)
    ab = float(s.alpha_bar[t])
    return (x_t + (1.0 - ab) * score) / math.sqrt(ab)


def score_from_x0(x_t, x0_hat, t: int, s: NoiseSchedule):
    """Score implied by a clean-data prediction: ``-(x_t - sqrt(ab_t) x0) / (1 - ab_t)``."""
    t = s.check_step(t)
    ab = float(s.alpha_bar[t])
    return -(x_t - math.sqrt(ab) * x0_hat) / (1.0 - ab)


def _posterior_coefficients(s: NoiseSchedule, t: int, prev: int) -> tuple[float, float, float]:
    """Coefficients of ``q(x_prev | x_t, x0)`` for an arbitrary jump ``t -> prev``."""
    ab_t = float(s.alpha_bar[t])
    ab_p = float(s.alpha_bar[prev])
    if prev == t - 1:
        a_ts = float(s.alpha[t])
        b_ts = float(s.beta[t])
    else:
        a_ts = ab_t / ab_p
        b_ts = 1.0 - a_ts
    c_x = math.sqrt(a_ts) * (1.0 - ab_p) / (1.0 - ab_t)
    c_0 = math.sqrt(ab_p) * b_ts / (1.0 - ab_t)
    var = (1.0 - ab_p) / (1.0 - ab_t) * b_ts
    return c_x, c_0, var


def ddpm_step(x_t, x0_hat, t: int, z, s: NoiseSchedule):
    """One ancestral step ``x_t -> x_{t-1}`` with std ``sqrt(posterior_var)``.

    ``z`` is ignored at ``t = 1`` (the last step is deterministic); pass
    ``None`` to skip the noise term.
    """
    t = s.check_step(t)
    c_x, c_0, _ = _posterior_coefficients(s, t, t - 1)
    out = c_x * x_t + c_0 * x0_hat
    if t > 1 and z is not None:
        out = out + math.sqrt(float(s.posterior_var[t])) * z
    return out


def ddim_step(x_t, x0_hat, t: int, dt: int, z, s: NoiseSchedule):
    """Strided step ``x_t -> x_{t-dt}`` using the skip posterior.

    ``dt = 1`` delegates to :func:`ddpm_step`. When ``t <= dt`` the step
    lands on ``t = 0`` deterministically.
    """
    t = s.check_step(t)
    dt = int(dt)
    if dt < 1:
        raise ValidationError("stride must be >= 1")
    if dt > t:
        raise ValidationError(f"stride {dt} larger than current step {t}")
    if dt == 1:
        return ddpm_step(x_t, x0_hat, t, z, s)
    prev = t - dt
    c_x, c_0, var = _posterior_coefficients(s, t, prev)
    out = c_x * x_t + c_0 * x0_hat
    if prev > 0 and z is not None:
        out = out + math.sqrt(var) * z
    return out


def masked_loss(x0, x0_hat, M, norm: str = "l2"):
    """Mean squared (or absolute) error over observed entries.

    Works on numpy arrays and torch tensors; masked-out entries are removed
    by multiplication so they never reach the value or its gradient.
    """
    count = float(M.sum())
    if count == 0:
        raise ValidationError("mask has no observed entries")
    diff = (x0 - x0_hat) * M
    if norm == "l2":
        return (diff * diff).sum() / count
    if norm == "l1":
        return abs(diff).sum() / count
    raise ValidationError(f"unknown loss norm {norm!r}")
