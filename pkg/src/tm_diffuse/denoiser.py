"""Learnable components: the transformer that predicts clean windows from
noisy ones, the recurrent autoencoder that imputes missing training entries,
their training loops and checkpoint files.

Windows are passed around as ``(batch, n_flows, window_len)``; inside the
networks each time position is a token whose features are the flow vector.
"""

from __future__ import annotations

import io
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .diffusion import NoiseSchedule, masked_loss
from .errors import CheckpointError, NumericalError, ValidationError

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "tm-diffuse-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DenoiserConfig:
    flow_count: int
    window_len: int = 12
    diffusion_steps: int = 300
    model_dim: int = 96
    heads: int = 8
    encoder_blocks: int = 2
    decoder_blocks: int = 2
    ff_dim: int | None = None  # defaults to 4 * model_dim

    def __post_init__(self):
        if self.ff_dim is None:
            object.__setattr__(self, "ff_dim", 4 * self.model_dim)
        for name in ("flow_count", "window_len", "diffusion_steps", "model_dim",
                     "heads", "encoder_blocks", "decoder_blocks", "ff_dim"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if self.model_dim % self.heads:
            raise ValidationError("model_dim must be divisible by heads")
        if self.model_dim % 2:
            raise ValidationError("model_dim must be even for the step embedding")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 8e-4
    warmup_iters: int = 500
    adam_beta1: float = 0.9
    adam_beta2: float = 0.96
    epochs_pre: int = 200
    epochs_diff: int = 384
    seed: int = 0
    loss: str = "l2"

    def __post_init__(self):
        if self.batch_size <= 0 or self.learning_rate <= 0 or self.warmup_iters < 0:
            raise ValidationError("batch size and learning rate must be positive")
        if self.epochs_pre < 0 or self.epochs_diff < 0:
            raise ValidationError("epoch counts must be nonnegative")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValidationError("Adam betas must lie in (0, 1)")
        if self.loss not in ("l2", "l1"):
            raise ValidationError("loss must be 'l2' or 'l1'")


# ---------------------------------------------------------------------------
# building blocks


def sinusoidal_step_embedding(t, dim: int) -> torch.Tensor:
    """Sinusoidal embedding with sin at even and cos at odd positions.

    ``t`` may be an int or a 1-D tensor; returns ``(len(t), dim)``.
    """
    if dim % 2:
        raise ValidationError("embedding dimension must be even")
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t[:, None] * freqs[None, :]
    emb = torch.empty(t.shape[0], dim, dtype=torch.float64)
    emb[:, 0::2] = torch.sin(args)
    emb[:, 1::2] = torch.cos(args)
    return emb


def adaptive_layer_norm(w, emb, weight, bias, eps: float = 1e-5):
    """``a * LayerNorm(w) + b`` with ``[a, b] = emb @ weight.T + bias``.

    ``w`` is ``(B, L, D)``, ``emb`` is ``(B, E)``, ``weight`` is ``(2D, E)``.
    """
    a, b = torch.nn.functional.linear(emb, weight, bias).chunk(2, dim=-1)
    normed = torch.nn.functional.layer_norm(w, w.shape[-1:], eps=eps)
    return a[:, None, :] * normed + b[:, None, :]


class AdaLayerNorm(nn.Module):
    def __init__(self, dim: int, emb_dim: int):
        super().__init__()
        self.proj = nn.Linear(emb_dim, 2 * dim)
        with torch.no_grad():
            self.proj.weight.mul_(0.1)
            self.proj.bias.zero_()
            self.proj.bias[:dim] = 1.0

    def forward(self, w, emb):
        return adaptive_layer_norm(w, emb, self.proj.weight, self.proj.bias)


class FeedForward(nn.Sequential):
    def __init__(self, dim: int, hidden: int):
        super().__init__(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))


class EncoderBlock(nn.Module):
    def __init__(self, dim, heads, ff_dim):
        super().__init__()
        self.norm1 = AdaLayerNorm(dim, dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = AdaLayerNorm(dim, dim)
        self.ff = FeedForward(dim, ff_dim)

    def forward(self, h, emb):
        q = self.norm1(h, emb)
        h = h + self.attn(q, q, q, need_weights=False)[0]
        return h + self.ff(self.norm2(h, emb))


class DecoderBlock(nn.Module):
    def __init__(self, dim, heads, ff_dim):
        super().__init__()
        self.norm1 = AdaLayerNorm(dim, dim)
        self.self_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = AdaLayerNorm(dim, dim)
        self.cross_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm3 = AdaLayerNorm(dim, dim)
        self.ff = FeedForward(dim, ff_dim)

    def forward(self, h, memory, emb):
        q = self.norm1(h, emb)
        h = h + self.self_attn(q, q, q, need_weights=False)[0]
        q = self.norm2(h, emb)
        h = h + self.cross_attn(q, memory, memory, need_weights=False)[0]
        return h + self.ff(self.norm3(h, emb))


class TransformerDenoiser(nn.Module):
    """Predicts ``x0`` from ``(x_t, t)``; outputs pass through a sigmoid."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        d = config.model_dim
        self.embed = nn.Linear(config.flow_count, d)
        self.pos = nn.Parameter(0.02 * torch.randn(config.window_len, d))
        self.step_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.encoder = nn.ModuleList(
            EncoderBlock(d, config.heads, config.ff_dim) for _ in range(config.encoder_blocks)
        )
        self.decoder = nn.ModuleList(
            DecoderBlock(d, config.heads, config.ff_dim) for _ in range(config.decoder_blocks)
        )
        self.out_norm = nn.LayerNorm(d)
        self.out = nn.Linear(d, config.flow_count)
        with torch.no_grad():
            # start near the sigmoid midpoint
            self.out.weight.mul_(0.01)
            self.out.bias.zero_()

    def forward(self, x_t: torch.Tensor, t) -> torch.Tensor:
        B = x_t.shape[0]
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1:
            t = t.expand(B)
        emb = sinusoidal_step_embedding(t, self.config.model_dim).to(x_t.dtype)
        emb = self.step_mlp(emb)
        tokens = self.embed(x_t.transpose(1, 2)) + self.pos
        memory = tokens
        for block in self.encoder:
            memory = block(memory, emb)
        h = tokens
        for block in self.decoder:
            h = block(h, memory, emb)
        out = torch.sigmoid(self.out(self.out_norm(h)))
        return out.transpose(1, 2)


def _as_batch(x) -> tuple[torch.Tensor, bool, bool]:
    """Return ``(tensor, was_numpy, was_2d)``."""
    was_numpy = isinstance(x, np.ndarray)
    x = torch.as_tensor(x)
    was_2d = x.dim() == 2
    if was_2d:
        x = x[None]
    return x, was_numpy, was_2d


def _model_dtype(model: nn.Module) -> torch.dtype:
    for p in model.parameters():
        return p.dtype
    return torch.float32


def denoise(x_t, t: int, model: nn.Module):
    """Evaluate the denoiser without gradients.

    Accepts ``(N, w)`` or ``(B, N, w)`` arrays or tensors and returns the same
    kind and shape.
    """
    x, was_numpy, was_2d = _as_batch(x_t)
    if torch.isnan(x).any():
        raise ValidationError("denoiser input contains NaN")
    with torch.no_grad():
        out = model(x.to(_model_dtype(model)), t)
    if was_2d:
        out = out[0]
    return out.double().numpy() if was_numpy else out


def denoise_input_gradient(x_t, t: int, model: Callable, residual_fn: Callable):
    """Gradient of ``residual_fn(model(x_t, t))`` with respect to ``x_t``.

    Returns ``(grad, x0_hat)``. When the prediction does not depend on the
    input (e.g. a fixed oracle) the gradient is zero.
    """
    x, was_numpy, was_2d = _as_batch(x_t)
    dtype = _model_dtype(model) if isinstance(model, nn.Module) else x.dtype
    x = x.detach().to(dtype).requires_grad_(True)
    with torch.enable_grad():
        x0 = model(x, t)
        value = residual_fn(x0)
        if value.requires_grad:
            (grad,) = torch.autograd.grad(value, x, allow_unused=True)
        else:
            grad = None
    if grad is None:
        grad = torch.zeros_like(x)
    if not torch.isfinite(grad).all():
        raise NumericalError(f"non-finite guidance gradient at step {t}")
    x0 = x0.detach()
    if was_2d:
        grad, x0 = grad[0], x0[0]
    if was_numpy:
        return grad.double().numpy(), x0.double().numpy()
    return grad, x0


# ---------------------------------------------------------------------------
# autoencoder pre-processor


@dataclass(frozen=True)
class PreprocessorConfig:
    flow_count: int
    window_len: int = 12
    hidden1: int | None = None
    hidden2: int | None = None

    def __post_init__(self):
        if self.hidden1 is None:
            object.__setattr__(self, "hidden1", max(1, self.flow_count // 2))
        if self.hidden2 is None:
            object.__setattr__(self, "hidden2", max(1, self.flow_count // 4))


class Preprocessor(nn.Module):
    """Two ReLU layers, a bidirectional GRU over time, and a sigmoid decoder."""

    def __init__(self, config: PreprocessorConfig):
        super().__init__()
        self.config = config
        self.fc1 = nn.Linear(config.flow_count, config.hidden1)
        self.fc2 = nn.Linear(config.hidden1, config.hidden2)
        self.rnn = nn.GRU(config.hidden2, config.hidden2, batch_first=True, bidirectional=True)
        self.fc3 = nn.Linear(2 * config.hidden2, config.flow_count)

    def forward(self, seq: torch.Tensor) -> torch.Tensor:
        h = seq.transpose(1, 2)
        h = torch.relu(self.fc2(torch.relu(self.fc1(h))))
        h, _ = self.rnn(h)
        return torch.sigmoid(self.fc3(h)).transpose(1, 2)


def preprocess_forward(seq, model: Preprocessor):
    """Run the autoencoder on ``(N, K)`` or ``(B, N, K)`` sequences."""
    x, was_numpy, was_2d = _as_batch(seq)
    if x.shape[-1] == 0:
        raise ValidationError("empty sequence")
    with torch.no_grad():
        out = model(x.to(_model_dtype(model)))
    if was_2d:
        out = out[0]
    return out.double().numpy() if was_numpy else out


# ---------------------------------------------------------------------------
# training


def lr_factor(i: int, warmup: int, total: int) -> float:
    """Linear warmup to 1 over ``warmup`` iterations, then linear decay to 0
    at iteration ``total - 1``."""
    if i < warmup:
        return (i + 1) / warmup
    span = total - 1 - warmup
    if span <= 0:
        return 1.0
    return max(0.0, (total - 1 - i) / span)


def _make_optimizer(params, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(params, lr=cfg.learning_rate, betas=(cfg.adam_beta1, cfg.adam_beta2))


def _check_finite(model: nn.Module, what: str) -> None:
    for name, p in model.named_parameters():
        if not torch.isfinite(p).all():
            raise NumericalError(f"{what}: parameter {name} became non-finite")


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


@dataclass
class TrainState:
    """Model plus the optimizer state and loss trace needed to resume."""

    model: nn.Module
    optimizer: torch.optim.Optimizer
    epoch: int = 0
    iteration: int = 0
    total_iters: int = 0
    losses: list = field(default_factory=list)


def _masked_windows(windows, masks):
    windows = np.asarray(windows, dtype=np.float64)
    masks = np.asarray(masks, dtype=np.float64)
    if windows.shape != masks.shape or windows.ndim != 3:
        raise ValidationError("windows and masks must share shape (K, N, w)")
    return windows * masks, masks


def train_preprocessor(
    windows, masks, cfg: TrainConfig, config: PreprocessorConfig | None = None,
) -> tuple[Preprocessor, list[float]]:
    """Fit the autoencoder on masked reconstruction of observed entries.

    Unobserved entries are zeroed before they reach the network, so their
    original values have no influence on training.
    """
    X, M = _masked_windows(windows, masks)
    K, N, w = X.shape
    config = config or PreprocessorConfig(flow_count=N, window_len=w)
    torch.manual_seed(cfg.seed)
    model = Preprocessor(config)
    opt = _make_optimizer(model.parameters(), cfg)
    Xt = torch.as_tensor(X, dtype=torch.float32)
    Mt = torch.as_tensor(M, dtype=torch.float32)
    total = cfg.epochs_pre * math.ceil(K / cfg.batch_size)
    it = 0
    losses = []
    for epoch in range(cfg.epochs_pre):
        rng = np.random.default_rng([cfg.seed, 1, epoch])
        epoch_loss = []
        for idx in _batches(K, cfg.batch_size, rng):
            xb, mb = Xt[idx], Mt[idx]
            if float(mb.sum()) == 0:
                continue
            for g in opt.param_groups:
                g["lr"] = cfg.learning_rate * lr_factor(it, min(cfg.warmup_iters, total // 10), total)
            loss = masked_loss(xb, model(xb), mb, cfg.loss)
            if not torch.isfinite(loss):
                raise NumericalError(f"pre-processor loss diverged at epoch {epoch}, iteration {it}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss.append(float(loss.detach()))
            it += 1
        _check_finite(model, "pre-processor")
        losses.append(float(np.mean(epoch_loss)) if epoch_loss else math.nan)
    return model, losses


def impute_dataset(model: Preprocessor, X_obs, M):
    """Keep observed entries, fill the rest with autoencoder reconstructions.

    ``X_obs`` may be windows ``(K, N, w)`` or a whole series ``(N, T)``; a
    series is processed in chunks of the autoencoder's window length.
    """
    X_obs = np.asarray(X_obs, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    Xz = X_obs * M
    if X_obs.ndim == 3:
        recon = preprocess_forward(Xz, model)
    else:
        recon = _reconstruct_series(Xz, model)
    return np.where(M > 0, X_obs, recon)


def _reconstruct_series(Xz: np.ndarray, model: Preprocessor) -> np.ndarray:
    w = model.config.window_len
    T = Xz.shape[1]
    if T <= w:
        return preprocess_forward(Xz, model)
    starts = list(range(0, T - w + 1, w))
    if starts[-1] + w < T:
        starts.append(T - w)
    chunks = np.stack([Xz[:, s:s + w] for s in starts])
    rec = preprocess_forward(chunks, model)
    out = np.empty_like(Xz)
    for s, r in zip(starts, rec):
        out[:, s:s + w] = r
    return out


def new_denoiser_state(config: DenoiserConfig, cfg: TrainConfig, n_windows: int) -> TrainState:
    torch.manual_seed(cfg.seed)
    model = TransformerDenoiser(config)
    opt = _make_optimizer(model.parameters(), cfg)
    total = cfg.epochs_diff * math.ceil(n_windows / cfg.batch_size)
    return TrainState(model=model, optimizer=opt, total_iters=total)


def train_denoiser(
    windows,
    masks,
    cfg: TrainConfig,
    schedule: NoiseSchedule,
    config: DenoiserConfig | None = None,
    state: TrainState | None = None,
    on_epoch: Callable[[TrainState], None] | None = None,
) -> TrainState:
    """Masked x0-prediction training with Adam and warmup/linear-decay LR.

    Randomness is drawn from a generator seeded by ``(seed, epoch)``, so a run
    resumed from a saved :class:`TrainState` continues the same loss trace.
    """
    X = np.asarray(windows, dtype=np.float64)
    M = np.asarray(masks, dtype=np.float64)
    if X.shape != M.shape or X.ndim != 3:
        raise ValidationError("windows and masks must share shape (K, N, w)")
    if not np.all(np.isfinite(X)) or X.min() < 0 or X.max() > 1:
        raise ValidationError("training windows must be finite and normalized to [0, 1]")
    K, N, w = X.shape
    if state is None:
        config = config or DenoiserConfig(flow_count=N, window_len=w,
                                          diffusion_steps=schedule.steps)
        state = new_denoiser_state(config, cfg, K)
    model, opt = state.model, state.optimizer
    state.total_iters = cfg.epochs_diff * math.ceil(K / cfg.batch_size)
    if model.config.diffusion_steps != schedule.steps:
        raise ValidationError("schedule length differs from the model config")
    T = schedule.steps
    sqrt_ab = torch.as_tensor(np.sqrt(schedule.alpha_bar), dtype=torch.float32)
    sqrt_1mab = torch.as_tensor(np.sqrt(1.0 - schedule.alpha_bar), dtype=torch.float32)
    Xt = torch.as_tensor(X, dtype=torch.float32)
    Mt = torch.as_tensor(M, dtype=torch.float32)
    model.train()
    for epoch in range(state.epoch, cfg.epochs_diff):
        rng = np.random.default_rng([cfg.seed, 2, epoch])
        epoch_loss = []
        for idx in _batches(K, cfg.batch_size, rng):
            xb, mb = Xt[idx], Mt[idx]
            if float(mb.sum()) == 0:
                continue
            t = rng.integers(1, T + 1, size=len(idx))
            eps = torch.as_tensor(rng.standard_normal(xb.shape), dtype=torch.float32)
            tt = torch.as_tensor(t)
            x_t = sqrt_ab[tt][:, None, None] * xb + sqrt_1mab[tt][:, None, None] * eps
            for g in opt.param_groups:
                g["lr"] = cfg.learning_rate * lr_factor(state.iteration, cfg.warmup_iters,
                                                        state.total_iters)
            loss = masked_loss(xb, model(x_t, tt), mb, cfg.loss)
            if not torch.isfinite(loss):
                raise NumericalError(
                    f"denoiser loss diverged at epoch {epoch}, iteration {state.iteration}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss.append(float(loss.detach()))
            state.iteration += 1
        _check_finite(model, "denoiser")
        state.epoch = epoch + 1
        state.losses.append(float(np.mean(epoch_loss)) if epoch_loss else math.nan)
        if on_epoch is not None:
            on_epoch(state)
    model.eval()
    return state


# ---------------------------------------------------------------------------
# checkpoints


def save_params(path, state: TrainState | nn.Module, extra: dict | None = None,
                preprocessor: Preprocessor | None = None) -> None:
    """Write a self-describing checkpoint (torch zip container)."""
    if isinstance(state, nn.Module):
        model, opt_state, meta = state, None, {}
    else:
        model = state.model
        opt_state = state.optimizer.state_dict()
        meta = {"epoch": state.epoch, "iteration": state.iteration,
                "total_iters": state.total_iters, "losses": list(state.losses)}
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "denoiser_config": asdict(model.config),
        "state_dict": model.state_dict(),
        "optimizer": opt_state,
        "train_meta": meta,
        "extra": extra or {},
    }
    if preprocessor is not None:
        payload["preprocessor_config"] = asdict(preprocessor.config)
        payload["preprocessor_state"] = preprocessor.state_dict()
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path, expected: DenoiserConfig | None = None) -> dict:
    """Load a checkpoint and rebuild the modules.

    Returns a dict with ``model``, ``config``, ``extra``, ``train_meta``,
    ``optimizer`` (state dict or None) and ``preprocessor`` (or None).
    """
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:  # torch raises several unrelated types on bad files
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from None
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a tm-diffuse checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    config = DenoiserConfig(**payload["denoiser_config"])
    if expected is not None and expected != config:
        raise CheckpointError(f"{path}: checkpoint config {config} does not match {expected}")
    model = TransformerDenoiser(config)
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: weights do not fit config ({exc})") from None
    model.eval()
    pre = None
    if "preprocessor_state" in payload:
        pre = Preprocessor(PreprocessorConfig(**payload["preprocessor_config"]))
        pre.load_state_dict(payload["preprocessor_state"])
        pre.eval()
    return {
        "model": model,
        "config": config,
        "extra": payload.get("extra", {}),
        "train_meta": payload.get("train_meta", {}),
        "optimizer": payload.get("optimizer"),
        "preprocessor": pre,
    }


def load_params(path, expected: DenoiserConfig | None = None) -> TransformerDenoiser:
    return load_checkpoint(path, expected)["model"]


def resume_state(ckpt: dict, cfg: TrainConfig) -> TrainState:
    model = ckpt["model"]
    model.train()
    opt = _make_optimizer(model.parameters(), cfg)
    if ckpt["optimizer"] is not None:
        opt.load_state_dict(ckpt["optimizer"])
    meta = ckpt["train_meta"]
    return TrainState(model=model, optimizer=opt, epoch=meta.get("epoch", 0),
                      iteration=meta.get("iteration", 0),
                      total_iters=meta.get("total_iters", 0),
                      losses=list(meta.get("losses", [])))
