"""Convolutional pose stream: three conv stages over the pose tensor, then a linear classifier."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Array


@dataclass(frozen=True)
class PoseNetShape:
    seq_len: int
    width: int
    c1: int
    c2: int
    d_s: int
    num_classes: int
    kernel1: tuple[int, int] = (8, 3)
    kernel2: tuple[int, int] = (8, 3)

    @property
    def stage1(self) -> tuple[int, int]:
        return -(-self.seq_len // 2), -(-self.width // 2)

    @property
    def stage2(self) -> tuple[int, int]:
        h, w = self.stage1
        return -(-h // 2), -(-w // 2)


def _he(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def init_pose_params(shape: PoseNetShape, rng: np.random.Generator, dtype=np.float32) -> dict[str, Array]:
    """Parameters under the ``pose.`` prefix; ``pose.out.*`` is the classifier."""
    (k1h, k1w), (k2h, k2w) = shape.kernel1, shape.kernel2
    sh, sw = shape.stage2
    raw = {
        "pose.conv1.w": _he(rng, (k1h, k1w, 3, shape.c1), k1h * k1w * 3, dtype),
        "pose.conv1.b": np.zeros(shape.c1, dtype),
        "pose.conv2.w": _he(rng, (k2h, k2w, shape.c1, shape.c2), k2h * k2w * shape.c1, dtype),
        "pose.conv2.b": np.zeros(shape.c2, dtype),
        "pose.conv3.w": _he(rng, (sh, sw, shape.c2, shape.d_s), sh * sw * shape.c2, dtype),
        "pose.conv3.b": np.zeros(shape.d_s, dtype),
        "pose.out.w": (rng.standard_normal((shape.num_classes, shape.d_s)) * np.sqrt(1.0 / shape.d_s)).astype(dtype),
        "pose.out.b": np.zeros(shape.num_classes, dtype),
    }
    return {k: Array(v, requires_grad=True, name=k) for k, v in raw.items()}


def pose_forward(x: Array, params: dict[str, Array], maps: list | None = None) -> Array:
    """Pose features ``s`` (B×D_s) from pose tensors (B×T×W×3 or T×W×3).

    If ``maps`` is a list, the three intermediate feature maps are appended.
    """
    w3 = params["pose.conv3.w"]
    batched = x.ndim == 4
    if x.shape[-1] != 3 or x.ndim not in (3, 4):
        raise ValueError(f"pose tensor must be T×W×3 (optionally batched), got {x.shape}")
    h = ad.maxpool2d(ad.relu(ad.conv2d(x, params["pose.conv1.w"], params["pose.conv1.b"], "SAME")))
    if maps is not None:
        maps.append(h)
    h = ad.maxpool2d(ad.relu(ad.conv2d(h, params["pose.conv2.w"], params["pose.conv2.b"], "SAME")))
    if maps is not None:
        maps.append(h)
    spatial = h.shape[-3:-1]
    if spatial != w3.shape[:2]:
        raise ValueError(
            f"stage-2 map is {spatial[0]}×{spatial[1]} but conv3 kernel is "
            f"{w3.shape[0]}×{w3.shape[1]}; input {x.shape} does not match the configured tensor size"
        )
    h = ad.relu(ad.conv2d(h, w3, params["pose.conv3.b"], "VALID"))
    if maps is not None:
        maps.append(h)
    d_s = w3.shape[3]
    return ad.reshape(h, (x.shape[0], d_s) if batched else (d_s,))


def pose_classify(s: Array, params: dict[str, Array]) -> Array:
    return ad.affine(s, params["pose.out.w"], params["pose.out.b"])
