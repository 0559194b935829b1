"""RGB stream: glimpses at hand joints, pose-conditioned spatial attention,
an LSTM over attended glimpses, and temporal attention pooling."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Array

VARIANTS = ("full", "spatial-only", "sum", "concat", "unconditioned")
# ablation rows: which mechanism each variant keeps
_SPATIAL = {"full", "spatial-only", "unconditioned"}
_TEMPORAL = {"full", "unconditioned"}


@dataclass(frozen=True)
class RgbShape:
    seq_len: int
    n_points: int
    d_s: int
    num_classes: int
    patch_side: int = 32
    glimpse_c1: int = 8
    glimpse_c2: int = 16
    d_g: int = 64
    d_h: int = 64
    d_u: int = 64
    att_hidden: int = 256
    tatt_hidden: int = 512
    variant: str = "full"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown RGB variant {self.variant!r}; choose from {VARIANTS}")

    @property
    def lstm_input(self) -> int:
        return self.n_points * self.d_g if self.variant == "concat" else self.d_g

    @property
    def backbone_map(self) -> int:
        return -(-(-(-self.patch_side // 2)) // 2)


@dataclass
class AttentionTrace:
    """Per-sequence attention: ``spatial`` B×T×N, ``stacked`` B×(N·T), ``temporal`` B×T.

    Fields are None for variants that do not compute them.
    """

    spatial: np.ndarray | None
    stacked: np.ndarray | None
    temporal: np.ndarray | None


def _glorot(rng, shape, dtype):
    fan_out, fan_in = shape[0], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _he(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


# ---------------------------------------------------------------- glimpse sensor


def init_glimpse_params(shape: RgbShape, rng: np.random.Generator, dtype=np.float32) -> dict[str, Array]:
    m = shape.backbone_map
    raw = {
        "rgb.glimpse.conv1.w": _he(rng, (3, 3, 3, shape.glimpse_c1), 27, dtype),
        "rgb.glimpse.conv1.b": np.zeros(shape.glimpse_c1, dtype),
        "rgb.glimpse.conv2.w": _he(rng, (3, 3, shape.glimpse_c1, shape.glimpse_c2), 9 * shape.glimpse_c1, dtype),
        "rgb.glimpse.conv2.b": np.zeros(shape.glimpse_c2, dtype),
        "rgb.glimpse.fc.w": _he(rng, (shape.d_g, m * m * shape.glimpse_c2), m * m * shape.glimpse_c2, dtype),
        "rgb.glimpse.fc.b": np.zeros(shape.d_g, dtype),
    }
    return {k: Array(v, requires_grad=True, name=k) for k, v in raw.items()}


def crop_glimpse(image: np.ndarray, pixel_xy, side: int, valid: bool = True) -> np.ndarray:
    """Square ``side``×``side`` crop centred on ``pixel_xy`` = (x, y); zeros outside the image."""
    if side <= 0:
        raise ValueError(f"crop side must be positive, got {side}")
    image = np.asarray(image)
    out = np.zeros((side, side) + image.shape[2:], dtype=image.dtype)
    if not valid:
        return out
    x, y = (int(round(float(v))) for v in pixel_xy)
    top, left = y - side // 2, x - side // 2
    h, w = image.shape[:2]
    r0, r1 = max(top, 0), min(top + side, h)
    c0, c1 = max(left, 0), min(left + side, w)
    if r0 < r1 and c0 < c1:
        out[r0 - top : r1 - top, c0 - left : c1 - left] = image[r0:r1, c0:c1]
    return out


def glimpse_features(patch: Array, params: dict[str, Array]) -> Array:
    """Backbone: two conv(3×3)+ReLU+pool stages, then affine+ReLU to D_g."""
    w1 = params["rgb.glimpse.conv1.w"]
    fc = params["rgb.glimpse.fc.w"]
    batched = patch.ndim == 4
    x = patch if batched else ad.reshape(patch, (1,) + patch.shape)
    side = x.shape[1]
    m = -(-(-(-side // 2)) // 2)
    if x.shape[1] != x.shape[2] or x.shape[3] != w1.shape[2] or m * m * params["rgb.glimpse.conv2.w"].shape[3] != fc.shape[1]:
        raise ValueError(f"patch {patch.shape} does not match the glimpse backbone configuration")
    h = ad.maxpool2d(ad.relu(ad.conv2d(x, w1, params["rgb.glimpse.conv1.b"], "SAME")))
    h = ad.maxpool2d(ad.relu(ad.conv2d(h, params["rgb.glimpse.conv2.w"], params["rgb.glimpse.conv2.b"], "SAME")))
    h = ad.reshape(h, (h.shape[0], -1))
    v = ad.relu(ad.affine(h, fc, params["rgb.glimpse.fc.b"]))
    return v if batched else ad.reshape(v, (v.shape[1],))


def extract_features(patches: np.ndarray, params: dict[str, Array], chunk: int = 512) -> np.ndarray:
    """Glimpse features for a stack of patches ``...×S×S×3`` -> ``...×D_g`` (no tape)."""
    lead = patches.shape[:-3]
    flat = patches.reshape((-1,) + patches.shape[-3:])
    dtype = params["rgb.glimpse.fc.w"].data.dtype
    out = [
        glimpse_features(Array(flat[i : i + chunk].astype(dtype, copy=False)), params).data
        for i in range(0, flat.shape[0], chunk)
    ]
    d_g = params["rgb.glimpse.fc.w"].shape[0]
    return np.concatenate(out, axis=0).reshape(lead + (d_g,)) if out else np.zeros(lead + (d_g,), dtype)


# ---------------------------------------------------------------- recurrent stream


def init_rgb_params(shape: RgbShape, rng: np.random.Generator, dtype=np.float32) -> dict[str, Array]:
    h, n, t = shape.d_h, shape.n_points, shape.seq_len
    bias = np.zeros(4 * h, dtype)
    bias[h : 2 * h] = 1.0  # forget gate starts open
    raw = {
        "rgb.lstm.wx": _glorot(rng, (4 * h, shape.lstm_input), dtype),
        "rgb.lstm.wh": _glorot(rng, (4 * h, h), dtype),
        "rgb.lstm.b": bias,
        "rgb.spatial.w1": _glorot(rng, (shape.att_hidden, h + shape.d_s), dtype),
        "rgb.spatial.b1": np.zeros(shape.att_hidden, dtype),
        "rgb.spatial.w2": _glorot(rng, (n, shape.att_hidden), dtype),
        "rgb.spatial.b2": np.zeros(n, dtype),
        "rgb.tfeat.w": _he(rng, (shape.d_u, h), h, dtype),
        "rgb.tfeat.b": np.zeros(shape.d_u, dtype),
        "rgb.tatt.w1": _glorot(rng, (shape.tatt_hidden, n * t + shape.d_s), dtype),
        "rgb.tatt.b1": np.zeros(shape.tatt_hidden, dtype),
        # zero output weights: temporal attention starts as mean pooling instead of
        # peaking on arbitrary frames
        "rgb.tatt.w2": np.zeros((t, shape.tatt_hidden), dtype),
        "rgb.tatt.b2": np.zeros(t, dtype),
        "rgb.out.w": _glorot(rng, (shape.num_classes, shape.d_u), dtype),
        "rgb.out.b": np.zeros(shape.num_classes, dtype),
    }
    return {k: Array(v, requires_grad=True, name=k) for k, v in raw.items()}


def _lstm(params):
    return {"wx": params["rgb.lstm.wx"], "wh": params["rgb.lstm.wh"], "b": params["rgb.lstm.b"]}


def spatial_attention(h_prev: Array, s: Array, params: dict[str, Array]) -> Array:
    """Distribution over the N attention points from the previous state and pose features."""
    z = ad.sigmoid(ad.affine(ad.concat([h_prev, s], axis=-1), params["rgb.spatial.w1"], params["rgb.spatial.b1"]))
    return ad.softmax(ad.affine(z, params["rgb.spatial.w2"], params["rgb.spatial.b2"]), axis=-1)


def context_vector(v_t: Array, p_t: Array) -> Array:
    return ad.matvec(v_t, p_t)


def temporal_features(h_t: Array, params: dict[str, Array]) -> Array:
    return ad.relu(ad.affine(h_t, params["rgb.tfeat.w"], params["rgb.tfeat.b"]))


def temporal_attention(stacked: Array, s: Array, params: dict[str, Array]) -> Array:
    w1 = params["rgb.tatt.w1"]
    if stacked.shape[-1] + s.shape[-1] != w1.shape[1]:
        raise ValueError(
            f"temporal attention expects N·T + D_s = {w1.shape[1]} inputs, got {stacked.shape[-1]} + {s.shape[-1]}"
        )
    z = ad.sigmoid(ad.affine(ad.concat([stacked, s], axis=-1), w1, params["rgb.tatt.b1"]))
    return ad.softmax(ad.affine(z, params["rgb.tatt.w2"], params["rgb.tatt.b2"]), axis=-1)


def temporal_pool(u: Array, p_prime: Array) -> Array:
    return ad.matvec(u, p_prime)


@dataclass
class RgbState:
    h: Array
    c: Array
    spatial: list

    @classmethod
    def zeros(cls, batch: int, hidden: int, dtype) -> "RgbState":
        z = np.zeros((batch, hidden), dtype=dtype)
        return cls(Array(z), Array(z.copy()), [])


def rgb_step(state: RgbState, v_t: Array, s: Array, params: dict[str, Array], variant: str = "full") -> RgbState:
    """Attend over the N glimpses of one frame and advance the LSTM.

    ``s`` conditions attention only; the recurrence never sees it directly.
    """
    if variant in _SPATIAL:
        cond = s if variant != "unconditioned" else Array(np.zeros(s.shape, dtype=s.data.dtype))
        p_t = spatial_attention(state.h, cond, params)
        x = context_vector(v_t, p_t)
        state.spatial.append(p_t)
    elif variant == "sum":
        x = ad.sum(v_t, axis=-1)
    elif variant == "concat":
        x = ad.reshape(ad.transpose(v_t, (0, 2, 1)), (v_t.shape[0], -1))
    else:
        raise ValueError(f"unknown RGB variant {variant!r}")
    h, c = ad.lstm_step(x, state.h, state.c, _lstm(params))
    return RgbState(h, c, state.spatial)


def rgb_forward(
    v: Array,
    s: Array,
    params: dict[str, Array],
    variant: str = "full",
    train: bool = False,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[Array, AttentionTrace]:
    """RGB logits from glimpse features ``v`` (B×T×D_g×N) and pose features ``s`` (B×D_s).

    Variants: ``full`` (spatial + temporal attention), ``spatial-only`` (mean
    pooling over time), ``sum`` / ``concat`` (no attention; hands summed or
    concatenated, mean pooling), ``unconditioned`` (full with ``s`` zeroed).
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown RGB variant {variant!r}; choose from {VARIANTS}")
    if v.ndim == 3:
        v = ad.reshape(v, (1,) + v.shape)
        s = ad.reshape(s, (1,) + s.shape)
    bsz, steps = v.shape[0], v.shape[1]
    dtype = params["rgb.lstm.wh"].data.dtype
    state = RgbState.zeros(bsz, params["rgb.lstm.wh"].shape[1], dtype)
    features = []
    for t in range(steps):
        state = rgb_step(state, v[:, t], s, params, variant)
        features.append(temporal_features(state.h, params))
    u = ad.stack(features, axis=-1)  # B×D_u×T
    spatial = stacked = None
    if state.spatial:
        stacked_arr = ad.concat(state.spatial, axis=-1)
        stacked = stacked_arr.data
        spatial = np.stack([p.data for p in state.spatial], axis=1)
    if variant in _TEMPORAL:
        cond = s if variant != "unconditioned" else Array(np.zeros(s.shape, dtype=s.data.dtype))
        p_prime = temporal_attention(stacked_arr, cond, params)
    else:
        p_prime = Array(np.full((bsz, steps), 1.0 / steps, dtype=dtype))
    pooled = temporal_pool(u, p_prime)
    pooled = ad.dropout(pooled, dropout, train, rng)
    logits = ad.affine(pooled, params["rgb.out.w"], params["rgb.out.b"])
    return logits, AttentionTrace(spatial, stacked, p_prime.data)


# ---------------------------------------------------------------- trace export


def trace_records(
    ids: Iterable[str], trace: AttentionTrace, predicted: Iterable[int], true: Iterable[int]
) -> list[dict]:
    records = []
    for b, (vid, pred, label) in enumerate(zip(ids, predicted, true)):
        records.append(
            {
                "id": vid,
                "true": int(label),
                "pred": int(pred),
                "spatial": None if trace.spatial is None else np.round(trace.spatial[b], 6).tolist(),
                "temporal": None if trace.temporal is None else np.round(trace.temporal[b], 6).tolist(),
            }
        )
    return records


def write_trace(path: str | Path, records: list[dict]) -> None:
    """One JSON object per line."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def read_trace(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
