"""Reverse-process samplers: unconditional synthesis, tomography guided by
link loads (followed by EM refinement) and completion guided by observed
entries with the replacement trick.

A *denoiser* here is any callable ``f(x_t, t) -> x0_hat`` on torch tensors of
shape ``(B, N, w)``; trained :class:`~tm_diffuse.denoiser.TransformerDenoiser`
instances qualify, as does :class:`FixedTargetDenoiser`.

Randomness: window ``k`` of a batch draws its reverse-process noise from
``default_rng(seed + k)`` and its replacement noise from an independent
stream, so switching replacement on or off never shifts the main stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import _accel
from .denoiser import denoise_input_gradient
from .diffusion import NoiseSchedule, ddim_step, forward_sample
from .errors import NumericalError, ValidationError

__all__ = [
    "GuidanceConfig",
    "FixedTargetDenoiser",
    "sample_unconditional",
    "sample_tomography",
    "sample_completion",
    "replace_known",
    "em_refine",
    "assemble_series",
]


@dataclass(frozen=True)
class GuidanceConfig:
    rho_mode: str = "fixed"
    rho_fixed: float = 0.05
    sigma_z: float = 0.0
    steps_used: int | None = None
    ddim_stride: int = 1
    em_iters: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.rho_mode not in ("fixed", "schedule"):
            raise ValidationError("rho_mode must be 'fixed' or 'schedule'")
        if self.rho_fixed < 0:
            raise ValidationError("rho must be nonnegative")
        if self.rho_mode == "schedule" and not self.sigma_z > 0:
            raise ValidationError("scheduled guidance strength needs sigma_z > 0")
        if self.ddim_stride < 1 or self.em_iters < 0:
            raise ValidationError("stride must be >= 1 and em_iters >= 0")

    def timesteps(self, T: int) -> list[int]:
        if self.ddim_stride > T:
            raise ValidationError(f"stride {self.ddim_stride} exceeds {T} diffusion steps")
        steps = list(range(T, 0, -self.ddim_stride))
        if self.steps_used is not None and self.steps_used != len(steps):
            raise ValidationError(
                f"steps_used={self.steps_used} inconsistent with T={T}, stride={self.ddim_stride}"
            )
        return steps

    def rho(self, t: int, schedule: NoiseSchedule) -> float:
        if self.rho_mode == "fixed":
            return self.rho_fixed
        a = float(schedule.alpha[t])
        return (1.0 - a) / (math.sqrt(a) * self.sigma_z ** 2)


class FixedTargetDenoiser:
    """Oracle denoiser that ignores its input and returns ``target``."""

    def __init__(self, target):
        self.target = torch.as_tensor(np.asarray(target, dtype=np.float64))

    def __call__(self, x_t, t):
        tgt = self.target.to(x_t.dtype)
        if tgt.dim() == 2:
            tgt = tgt.expand(x_t.shape[0], *tgt.shape)
        return tgt.clone()


def _streams(seed: int, batch: int):
    main = [np.random.default_rng(seed + k) for k in range(batch)]
    repl = [np.random.default_rng([seed + k, 1]) for k in range(batch)]
    return main, repl


def _normal(rngs, shape) -> np.ndarray:
    return np.stack([r.standard_normal(shape) for r in rngs])


def _predict(model, x: np.ndarray, t: int, dtype) -> np.ndarray:
    xt = torch.as_tensor(x).to(dtype)
    with torch.no_grad():
        out = model(xt, t)
    return out.double().numpy()


def _model_dtype(model) -> torch.dtype:
    if isinstance(model, torch.nn.Module):
        for p in model.parameters():
            return p.dtype
    return torch.float64


def _check_finite(x: np.ndarray, t: int) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"sampler state became non-finite at step {t}")


def _reverse_loop(model, schedule, cfg, shape, residual=None, after_step=None, trace=None):
    """Shared reverse chain.

    ``residual(x0_hat)`` returns a scalar torch loss whose
    gradient wrt ``x_t`` is subtracted (times rho_t) after each step;
    ``after_step(x, t_prev)`` post-processes the new state.
    """
    B = shape[0]
    main, _ = _streams(cfg.seed, B)
    dtype = _model_dtype(model)
    T = schedule.steps
    x = _normal(main, shape[1:])
    for t in cfg.timesteps(T):
        dt = min(cfg.ddim_stride, t)
        prev = t - dt
        rho = cfg.rho(t, schedule) if residual is not None else 0.0
        if rho > 0:
            grad, x0 = denoise_input_gradient(x, t, model, residual)
        else:
            x0 = _predict(model, x, t, dtype)
        z = _normal(main, shape[1:]) if prev > 0 else None
        x_new = ddim_step(x, x0, t, dt, z, schedule)
        if rho > 0:
            x_new = x_new - rho * grad
        if after_step is not None:
            x_new = after_step(x_new, prev)
        if trace is not None and residual is not None:
            with torch.no_grad():
                trace.append(float(residual(torch.as_tensor(x0))))
        _check_finite(x_new, t)
        x = x_new
    return x


def sample_unconditional(model, schedule: NoiseSchedule, n: int, shape, cfg: GuidanceConfig):
    """Draw ``n`` windows of ``shape = (N, w)`` with strided ancestral sampling."""
    return _reverse_loop(model, schedule, cfg, (n, *shape))


def _link_residual(A, Y):
    At = torch.as_tensor(np.asarray(A, dtype=np.float64))
    Yt = torch.as_tensor(np.asarray(Y, dtype=np.float64))

    def residual(x0):
        r = Yt.to(x0.dtype) - torch.einsum("ln,bnw->blw", At.to(x0.dtype), x0)
        return (r * r).sum()

    return residual


def sample_tomography(model, schedule: NoiseSchedule, A, Y, cfg: GuidanceConfig, trace=None):
    """Estimate flows from link loads.

    ``A`` is ``(L, N)`` and ``Y`` is ``(B, L, w)`` (or ``(L, w)``), both in
    normalized units. Each reverse step is corrected by
    ``-rho_t * grad_{x_t} ||Y - A x0_hat||^2``; the final state is refined with
    ``cfg.em_iters`` EM iterations per time slot.
    """
    A = np.asarray(A, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    single = Y.ndim == 2
    if single:
        Y = Y[None]
    if A.ndim != 2 or Y.shape[1] != A.shape[0]:
        raise ValidationError(
            f"routing matrix has {A.shape[0]} links but loads have {Y.shape[1]}"
        )
    N = A.shape[1]
    if model_flows(model) not in (None, N):
        raise ValidationError(
            f"routing matrix has {N} flow columns, model expects {model_flows(model)}"
        )
    B, _, w = Y.shape
    x = _reverse_loop(model, schedule, cfg, (B, N, w), residual=_link_residual(A, Y), trace=trace)
    if cfg.em_iters > 0:
        # negative loads only arise from measurement noise
        x = np.stack([em_refine(xb, A, np.maximum(yb, 0.0), cfg.em_iters)
                      for xb, yb in zip(x, Y)])
    return x[0] if single else x


def sample_completion(model, schedule: NoiseSchedule, X_obs, M, cfg: GuidanceConfig,
                      A=None, Y=None, trace=None):
    """Fill unobserved entries of ``X_obs`` (``(B, N, w)`` or ``(N, w)``).

    Guidance uses ``||M*X_obs - M*x0_hat||^2`` plus ``||Y - A x0_hat||^2``
    when link loads are supplied; observed positions of every new state are
    replaced by forward-process samples of ``X_obs``.
    """
    X_obs = np.asarray(X_obs, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    single = X_obs.ndim == 2
    if single:
        X_obs, M = X_obs[None], M[None]
        if Y is not None:
            Y = np.asarray(Y)[None]
    if X_obs.shape != M.shape:
        raise ValidationError("observations and mask differ in shape")
    Xt = torch.as_tensor(X_obs)
    Mt = torch.as_tensor(M)
    link = _link_residual(A, Y) if A is not None else None

    def residual(x0):
        r = Mt.to(x0.dtype) * (Xt.to(x0.dtype) - x0)
        val = (r * r).sum()
        if link is not None:
            val = val + link(x0)
        return val

    B = X_obs.shape[0]
    _, repl = _streams(cfg.seed, B)

    def after_step(x, t_prev):
        return replace_known(x, X_obs, M, t_prev, schedule, rng=repl)

    if not M.any() and link is None:
        residual = None
    x = _reverse_loop(model, schedule, cfg, X_obs.shape, residual=residual,
                      after_step=after_step, trace=trace)
    return x[0] if single else x


def replace_known(x_t, X_obs, M, t: int, schedule: NoiseSchedule, rng=None, eps=None):
    """Overwrite observed positions with a forward-process sample of ``X_obs``.

    ``rng`` is a generator or a list of per-window generators; alternatively
    pass ``eps`` directly. At ``t = 0`` observed positions become ``X_obs``.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    obs = np.asarray(M) > 0
    if not obs.any():
        return x_t
    if t == 0:
        known = np.asarray(X_obs, dtype=np.float64)
    else:
        if eps is None:
            if isinstance(rng, (list, tuple)):
                eps = _normal(rng, x_t.shape[1:])
            else:
                rng = rng if rng is not None else np.random.default_rng()
                eps = rng.standard_normal(x_t.shape)
        known = forward_sample(np.asarray(X_obs, dtype=np.float64), t, eps, schedule)
    return np.where(obs, known, x_t)


def em_refine(x, A, y, iters: int, eps: float = 1e-9):
    """Multiplicative EM updates ``x_j <- x_j / sum_i a_ij * sum_i a_ij y_i / (Ax)_i``.

    ``x`` is a flow vector ``(N,)`` or a matrix ``(N, T)`` whose columns are
    refined independently against ``y`` of shape ``(L,)`` or ``(L, T)``.
    Entries are clamped to ``eps`` first; flows on no link are left alone and
    links with ``(Ax)_i < eps`` contribute a neutral ratio.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    if np.any(y < 0):
        raise ValidationError("link loads must be nonnegative for EM refinement")
    if np.any(A < 0):
        raise ValidationError("routing matrix must be nonnegative")
    vec = x.ndim == 1
    X = x[:, None] if vec else x
    Yc = y[:, None] if vec else y
    if A.shape != (Yc.shape[0], X.shape[0]) or X.shape[1] != Yc.shape[1]:
        raise ValidationError("EM shapes inconsistent")
    out = _accel.em_refine(X, A, Yc, iters, eps)
    return out[:, 0] if vec else out


def assemble_series(windows, origin_times, total_len: int | None = None) -> np.ndarray:
    """Place windows back on the time axis, averaging overlapping cells."""
    windows = np.asarray(windows, dtype=np.float64)
    origin_times = np.asarray(origin_times, dtype=np.int64)
    K, N, w = windows.shape
    end = int(origin_times.max()) + w
    total_len = end if total_len is None else total_len
    acc = np.zeros((N, total_len))
    cnt = np.zeros(total_len)
    for win, o in zip(windows, origin_times):
        acc[:, o:o + w] += win
        cnt[o:o + w] += 1
    if np.any(cnt == 0):
        gap = int(np.flatnonzero(cnt == 0)[0])
        raise ValidationError(f"windows leave time slot {gap} uncovered")
    return acc / cnt


def model_flows(model):
    cfg = getattr(model, "config", None)
    return getattr(cfg, "flow_count", None)
