"""Run configuration and the flat ``key = value`` config file format."""

from __future__ import annotations

import dataclasses
import hashlib
import typing
from dataclasses import dataclass
from pathlib import Path

STAGES = ("pose", "rgb", "fused-eval")
STREAMS = ("pose", "rgb", "fused")
JOINT_ORDERS = ("topological", "no-double", "random")


@dataclass(frozen=True)
class TrainConfig:
    # sub-sequences and inputs
    seq_len: int = 20
    persons: int = 2
    n_points: int = 4
    topology: str = "ntu25"
    joint_order: str = "topological"
    # pose network
    c1: int = 32
    c2: int = 64
    d_s: int = 1024
    kernel1: tuple[int, int] = (8, 3)
    kernel2: tuple[int, int] = (8, 3)
    # glimpse sensor and RGB stream
    crop_side: int = 50
    patch_side: int = 50
    glimpse_c1: int = 16
    glimpse_c2: int = 32
    d_g: int = 2048
    d_h: int = 1024
    d_u: int = 0  # 0 means d_h
    att_hidden: int = 256
    tatt_hidden: int = 512
    # optimisation
    lr: float = 1e-4
    batch_size: int = 64
    dropout: float = 0.5
    val_fraction: float = 0.05
    patience: int = 10
    min_epochs: int = 0  # early stopping is not checked before this many epochs
    max_epochs: int = 200
    test_subsequences: int = 10
    transfer_lr_divisor: float = 10.0
    glimpse_pretrain_steps: int = 300
    glimpse_pretrain_lr: float = 1e-3
    end_to_end: bool = False
    # run selection
    seed: int = 0
    stage: str = "pose"
    variant: str = "full"
    stream: str = "fused"
    dtype: str = "float32"

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.stream not in STREAMS:
            raise ValueError(f"stream must be one of {STREAMS}, got {self.stream!r}")
        if self.joint_order not in JOINT_ORDERS:
            raise ValueError(f"joint_order must be one of {JOINT_ORDERS}, got {self.joint_order!r}")

    @property
    def feature_width(self) -> int:
        return self.d_u or self.d_h

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def digest(self) -> str:
        text = repr(sorted(dataclasses.asdict(self).items()))
        return hashlib.sha256(text.encode()).hexdigest()[:12]


FULL = TrainConfig()

DESK = TrainConfig(
    topology="desk12",
    c1=8,
    c2=16,
    d_s=64,
    crop_side=32,
    patch_side=32,
    glimpse_c1=8,
    glimpse_c2=16,
    d_g=32,
    d_h=48,
    att_hidden=32,
    tatt_hidden=32,
    lr=2e-3,
    batch_size=16,
    dropout=0.2,
    val_fraction=0.15,
    min_epochs=60,
    max_epochs=100,
    glimpse_pretrain_steps=150,
)


def preset(scale: str) -> TrainConfig:
    if scale == "desk":
        return DESK
    if scale == "full":
        return FULL
    raise ValueError(f"unknown scale {scale!r}; choose desk or full")


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ValueError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _coerce(value: str, kind, key: str):
    if kind is bool:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {value!r}")
    if typing.get_origin(kind) is tuple:
        parts = [p for p in value.replace("x", ",").split(",") if p.strip()]
        return tuple(int(p) for p in parts)
    try:
        return kind(value)
    except ValueError:
        raise ValueError(f"{key}: cannot parse {value!r} as {kind.__name__}") from None


def apply_overrides(obj, values: dict[str, str]):
    """Return a copy of dataclass ``obj`` with string ``values`` coerced by field type.

    Unknown keys are rejected.
    """
    hints = typing.get_type_hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj) if f.init}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ValueError(f"unknown configuration keys: {', '.join(unknown)}")
    changes = {k: _coerce(v, hints[k], k) for k, v in values.items()}
    return dataclasses.replace(obj, **changes)


def to_text(obj, prefix: str = "") -> str:
    lines = []
    for f in dataclasses.fields(obj):
        if not f.init:
            continue
        value = getattr(obj, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{prefix}{f.name} = {value}")
    return "\n".join(lines) + "\n"


def load_config(path: str | Path | None, scale: str = "desk") -> tuple[TrainConfig, dict[str, str]]:
    """Config file on top of a scale preset.

    Keys prefixed ``data.`` are returned separately for the dataset generator.
    """
    base = preset(scale)
    if path is None:
        return base, {}
    values = parse_kv(Path(path).read_text(), str(path))
    data = {k[5:]: v for k, v in values.items() if k.startswith("data.")}
    train = {k: v for k, v in values.items() if not k.startswith("data.")}
    return apply_overrides(base, train), data
