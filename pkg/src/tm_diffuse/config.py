"""Run configuration: a flat ``key = value`` file format with CLI overrides.

Precedence is command-line flags > config file > defaults. Every resolved
configuration can be written back with :func:`dump_config` and re-read.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields, replace

from .errors import ValidationError

DATA_DIR_ENV = "TM_DIFFUSE_DATA_DIR"


@dataclass(frozen=True)
class RunConfig:
    # dataset
    data: str = ""
    trace: str = ""
    layout: str = "rows=time"
    routing: str = ""
    train_len: int = 3000
    test_len: int = 672
    window: int = 12
    train_stride: int = 1
    train_mask_rate: float = 1.0
    test_mask_rate: float = 0.5
    mask_seed: int = 0
    # diffusion + model
    steps: int = 300
    schedule: str = "cosine"
    model_dim: int = 96
    heads: int = 8
    encoder_blocks: int = 2
    decoder_blocks: int = 2
    ff_dim: int = 0  # 0 -> 4 * model_dim
    # training
    batch_size: int = 64
    learning_rate: float = 8e-4
    warmup_iters: int = 500
    adam_beta1: float = 0.9
    adam_beta2: float = 0.96
    epochs_pre: int = 200
    epochs_diff: int = 384
    loss: str = "l2"
    seed: int = 0
    # sampling
    checkpoint: str = ""
    rho: float = 0.05
    rho_mode: str = "fixed"
    sigma_z: float = 0.0
    stride: int = 1
    sample_steps: int = 0  # 0 -> derived from stride
    em_iters: int = 20
    seeds: int = 1
    num_samples: int = 64
    link_rate: float = 0.0
    loads: str = ""
    simulate: bool = False
    jobs: int = 1
    out: str = ""

    def validate(self) -> "RunConfig":
        if self.window <= 0 or self.train_stride <= 0 or self.stride <= 0:
            raise ValidationError("window and strides must be positive")
        if self.sample_steps and self.sample_steps > self.steps:
            raise ValidationError("sample_steps cannot exceed diffusion steps")
        if not 0 < self.train_mask_rate <= 1 or not 0 < self.test_mask_rate <= 1:
            raise ValidationError("mask rates must lie in (0, 1]")
        if not 0 <= self.link_rate <= 1:
            raise ValidationError("link_rate must lie in [0, 1]")
        if self.seeds < 1 or self.jobs < 1:
            raise ValidationError("seeds and jobs must be >= 1")
        return self


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, raw):
    f = _FIELDS[name]
    default = f.default
    if isinstance(raw, str):
        raw = raw.strip()
    try:
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return str(raw)
    except ValueError:
        raise ValidationError(f"config key {name!r}: cannot interpret {raw!r}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{source}:{lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise ValidationError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, val)
    return values


def load_config(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), str(path))


def resolve(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    if not cfg.data and os.environ.get(DATA_DIR_ENV):
        cfg = replace(cfg, data=os.environ[DATA_DIR_ENV])
    for source in (file_values or {}, overrides or {}):
        cfg = replace(cfg, **{k: _coerce(k, v) for k, v in source.items() if v is not None})
    return cfg.validate()


def dump_config(cfg: RunConfig) -> str:
    lines = ["# tm-diffuse resolved run configuration"]
    for k, v in asdict(cfg).items():
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def config_fields():
    return list(_FIELDS.values())
