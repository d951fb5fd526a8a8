"""Flat ``key = value`` configuration files with typed parsing and env overrides."""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass

ENV_PREFIX = "SDK_"
VARIANTS = ("B", "CRDR", "CRDR+SFFM", "CRDR+SFFM+CGM")


@dataclass
class NetConfig:
    variant: str = "CRDR+SFFM+CGM"
    base_width: int = 32
    sffm_layers: int = 2
    sffm_width: int = 0  # 0 -> base_width
    si_eps: float = 1e-8
    depth_scale: float = 10.0
    depth_prior: float = 15.0
    residual_refine: bool = True
    cgm_alpha: float = 1.0
    d_max: float = 80.0
    init_seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; valid: {', '.join(VARIANTS)}")
        if self.cgm_alpha < 0:
            raise ValueError("cgm_alpha must be >= 0")

    @property
    def widths(self):
        w = self.base_width
        return (w, w, 2 * w, 4 * w)

    @property
    def uses_sffm(self):
        return "SFFM" in self.variant

    @property
    def uses_cgm(self):
        return self.variant.endswith("CGM")


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 25
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    weight_decay: float = 1e-6
    lr_initial: float = 1e-3
    lr_halving_period: int = 5
    c_first_initial: float = 0.3
    c_first_zero_epoch: int = 5
    c_first_interpolation: str = "linear"
    jitter: float = 0.1
    flip_prob: float = 0.5
    augment: bool = True
    grad_clip: float = 10.0
    seed: int = 0
    deterministic: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.c_first_interpolation not in ("linear", "step"):
            raise ValueError("c_first_interpolation must be 'linear' or 'step'")
        if not 0 <= self.jitter <= 0.2:
            raise ValueError("jitter amplitude must lie in [0, 0.2]")


DESK_SCALE = {"base_width": "8", "batch_size": "4"}


def desk_scale(net: NetConfig | None = None, train: TrainConfig | None = None):
    """CPU-sized overrides used by the ablation protocol and CLI defaults."""
    net = dataclasses.replace(net or NetConfig(), base_width=int(DESK_SCALE["base_width"]))
    train = dataclasses.replace(train or TrainConfig(), batch_size=int(DESK_SCALE["batch_size"]))
    return net, train


def parse_flat(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _coerce(value: str, typ):
    if typ is bool:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return typ(value)


def _build(cls, values: dict[str, str]):
    hints = typing.get_type_hints(cls)
    kwargs = {f.name: _coerce(values[f.name], hints[f.name])
              for f in dataclasses.fields(cls) if f.name in values}
    return cls(**kwargs)


def load_config(path=None, env=None, overrides: dict | None = None, defaults: dict | None = None):
    """Return ``(NetConfig, TrainConfig)``.

    Precedence, lowest first: dataclass defaults, ``defaults``, the file,
    ``SDK_*`` environment variables, ``overrides``.
    """
    values: dict[str, str] = {k: str(v) for k, v in (defaults or {}).items()}
    file_values: dict[str, str] = {}
    if path is not None:
        with open(path) as fh:
            file_values = parse_flat(fh.read())
    known = {f.name for c in (NetConfig, TrainConfig) for f in dataclasses.fields(c)}
    unknown = (set(file_values) | set(values)) - known
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
    values.update(file_values)
    env = os.environ if env is None else env
    for key, value in env.items():
        if key.startswith(ENV_PREFIX) and key[len(ENV_PREFIX):].lower() in known:
            values[key[len(ENV_PREFIX):].lower()] = value
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = str(value)
    return _build(NetConfig, values), _build(TrainConfig, values)


def dump_flat(*configs) -> str:
    lines = []
    for cfg in configs:
        for f in dataclasses.fields(cfg):
            lines.append(f"{f.name} = {getattr(cfg, f.name)}")
    return "\n".join(lines) + "\n"
