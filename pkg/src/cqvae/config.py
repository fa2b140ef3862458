"""Training configuration and its plain-text file format.

The file holds one ``key = value`` pair per line.  Blank lines and lines
starting with ``#`` are ignored.  Tuples are comma-separated, booleans are
``true``/``false``.  Unknown keys are an error.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass


@dataclass
class TrainConfig:
    # latent grid
    M: int = 16
    N: int = 11
    c_range: tuple = (-2.0, 2.0)
    # data
    J: int = 176
    H: int = 64
    W: int = 64
    # objective
    alpha: float = 10.0  # selected from {0.1, 1, 10} on pilot seeds
    beta: float = 10.0  # selected from {0.1, 1, 10} on pilot seeds
    alpha_cqae: float = 1.0
    shape_scale: float = 64.0
    k_max: int = 8
    l_max: int = 12
    straight_through: bool = True
    tau_start: float = 1.0
    tau_end: float = 0.3
    tau_steps: int = 0  # 0 anneals over the whole run
    # optimization
    lr: float = 3e-4
    warmup_steps: int = 500  # linear learning-rate ramp for the CQ-VAE
    lr_floor: float = 0.1  # cosine decay to lr * lr_floor over the CQ-VAE run; 1 disables
    batch: int = 16
    epochs: int = 30
    grad_clip: float = 0.0  # 0 disables clipping
    seed: int = 0
    dtype: str = "float32"
    # architecture
    encoder_channels: tuple = (16, 32, 64, 128)
    decoder_widths: tuple = (128, 256)
    shape_encoder_widths: tuple = (256, 128)
    # evaluation
    eval_l_max: int = 100
    eval_k_max: int = 100
    n_heatmaps: int = 4
    # image autoencoder variant
    cqae_M: int = 8
    cqae_N: int = 10
    cqae_size: int = 16
    cqae_images: int = 200
    cqae_channels: tuple = (16, 32)
    # paths
    data_dir: str = ""
    run_dir: str = ""

    def validate(self):
        if not self.l_max >= self.k_max >= 1:
            raise ValueError(f"need l_max >= k_max >= 1, got l_max={self.l_max}, k_max={self.k_max}")
        if self.N < 2 or self.cqae_N < 2:
            raise ValueError("N must be at least 2")
        if self.M < 1 or self.cqae_M < 1:
            raise ValueError("M must be positive")
        if self.tau_start <= 0 or self.tau_end <= 0:
            raise ValueError("temperatures must be positive")
        if len(self.c_range) != 2 or not self.c_range[0] < self.c_range[1]:
            raise ValueError("c_range must be an increasing pair")
        for name in ("alpha", "beta", "alpha_cqae"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be nonnegative")
        if not 0 <= self.lr_floor <= 1:
            raise ValueError("lr_floor must lie in [0, 1]")
        if self.batch < 1 or self.epochs < 0:
            raise ValueError("batch must be positive and epochs nonnegative")
        return self

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v)
                for f in dataclasses.fields(self)}

    @classmethod
    def from_dict(cls, d):
        defaults = cls()
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name in d:
                kwargs[f.name] = _coerce(getattr(defaults, f.name), d[f.name], f.name)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**kwargs)


def _coerce(default, value, name):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("true", "1", "yes", "on"):
            return True
        if text in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {value!r}")
    if isinstance(default, tuple):
        items = value if isinstance(value, (list, tuple)) else [v for v in str(value).split(",") if v.strip()]
        kind = type(default[0]) if default else float
        return tuple(kind(str(v).strip()) for v in items)
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return str(value)


def format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dumps(config):
    lines = ["# cqvae training configuration"]
    for f in dataclasses.fields(config):
        lines.append(f"{f.name} = {format_value(getattr(config, f.name))}")
    return "\n".join(lines) + "\n"


def loads(text, base=None):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    base = base or TrainConfig()
    merged = base.to_dict()
    merged.update(values)
    return TrainConfig.from_dict(merged)


def load(path, base=None):
    with open(path) as fh:
        return loads(fh.read(), base)


def save(config, path):
    with open(path, "w") as fh:
        fh.write(dumps(config))
