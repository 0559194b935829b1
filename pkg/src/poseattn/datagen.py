"""Synthetic two-person action videos with hand-held objects, and their on-disk format.

Each class is a (motion template, object) pair. The template decides which of
the four hands performs a reach; during the reach that hand holds the class
object. Other hands may hold random distractor objects for a while, so the
object identity is only recoverable by looking at the moving hand.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .skeleton import (
    SkeletonSequence,
    SkeletonTopology,
    load_topology,
    read_skeleton,
    read_topology,
    write_skeleton,
    write_topology,
)

NO_HAND = -1
HAND_NAMES = ("hand_left", "hand_right")

# (rgb colour, shape) per object id
OBJECTS = (
    ((0.9, 0.1, 0.1), "disk"),
    ((0.1, 0.8, 0.2), "square"),
    ((0.15, 0.25, 0.95), "triangle"),
    ((0.95, 0.9, 0.1), "ring"),
    ((0.85, 0.2, 0.85), "bar"),
    ((0.1, 0.85, 0.9), "diamond"),
)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 8
    videos_per_class: int = 40
    frames: int = 60
    topology: str = "desk12"
    noise: float = 0.02
    pixel_noise: float = 0.15
    patch_side: int = 32
    n_objects: int = 2
    distractor_prob: float = 0.75
    idle_amplitude: float = 0.8
    reach_amplitude: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.classes}")
        if self.noise < 0 or self.pixel_noise < 0:
            raise ValueError("noise levels must be non-negative")
        if not 2 <= self.n_objects <= len(OBJECTS):
            raise ValueError(f"n_objects must lie in [2, {len(OBJECTS)}]")
        if self.frames < 1 or self.videos_per_class < 1:
            raise ValueError("frames and videos_per_class must be positive")


@dataclass(frozen=True)
class ClassDef:
    template: int
    hand_slot: int
    obj: int


def class_definitions(spec: SyntheticSpec, n_points: int = 4) -> list[ClassDef]:
    """Classes 2m and 2m+1 share template m (same moving hand) but hold different objects.

    Objects repeat across templates, so neither motion nor object alone names the class.
    """
    half = spec.n_objects // 2
    out = []
    for c in range(spec.classes):
        m = c // 2
        out.append(ClassDef(template=m, hand_slot=m % n_points, obj=(c % 2) + 2 * (m % half)))
    return out


@dataclass
class LabeledSample:
    """``patches`` F×N×S×S×3 in [0, 1]; ``active_hand`` F ints (-1 when no hand is active)."""

    id: str
    label: int
    skeleton: SkeletonSequence
    patches: np.ndarray
    active_hand: np.ndarray


def hand_joints(topology: SkeletonTopology) -> list[tuple[int, int]]:
    """(person, joint) for each attention slot: p0 left, p0 right, p1 left, p1 right."""
    return [(p, topology.index(n)) for p in range(2) for n in HAND_NAMES]


# ---------------------------------------------------------------- motion


_REST = {
    "spine_mid": (0.0, 0.0, 0.0),
    "spine_shoulder": (0.0, 0.25, 0.0),
    "head": (0.0, 0.45, 0.0),
    "neck": (0.0, 0.35, 0.0),
    "spine_base": (0.0, -0.2, 0.0),
    "hip_left": (-0.1, -0.22, 0.0),
    "hip_right": (0.1, -0.22, 0.0),
    "shoulder_left": (-0.18, 0.22, 0.0),
    "shoulder_right": (0.18, 0.22, 0.0),
}
_UPPER, _FORE = 0.28, 0.26


def _bump(frames: int, start: float, length: float) -> np.ndarray:
    """Raised-cosine plateau: rises over a quarter of ``length``, holds, falls."""
    t = np.arange(frames, dtype=np.float64)
    ramp = max(length / 4.0, 1.0)
    up = np.clip((t - start) / ramp, 0.0, 1.0)
    down = np.clip((start + length - t) / ramp, 0.0, 1.0)
    return 0.5 - 0.5 * np.cos(np.pi * np.minimum(up, down))


def _person(topology: SkeletonTopology, arms: dict[str, tuple[np.ndarray, np.ndarray]], forward: np.ndarray, frames: int):
    k = topology.num_joints
    out = np.zeros((frames, k, 3))
    for name, pos in _REST.items():
        if name in topology.names:
            out[:, topology.index(name)] = pos
    down = np.array([0.0, -1.0, 0.0])
    for side in ("left", "right"):
        shoulder = out[:, topology.index(f"shoulder_{side}")]
        alpha, beta = arms[side]
        upper = np.cos(alpha)[:, None] * down + np.sin(alpha)[:, None] * forward
        fore = np.cos(alpha + beta)[:, None] * down + np.sin(alpha + beta)[:, None] * forward
        elbow = shoulder + _UPPER * upper
        hand = elbow + _FORE * fore
        if f"elbow_{side}" in topology.names:
            out[:, topology.index(f"elbow_{side}")] = elbow
        for name in (f"wrist_{side}", f"hand_{side}", f"handtip_{side}", f"thumb_{side}"):
            if name in topology.names:
                extra = {"wrist": 0.0, "hand": 0.04, "handtip": 0.1, "thumb": 0.07}[name.split("_")[0]]
                out[:, topology.index(name)] = hand + extra * fore
    return out


def _skeleton(spec: SyntheticSpec, topology: SkeletonTopology, cdef: ClassDef, rng: np.random.Generator, window):
    f = spec.frames
    start, length = window
    active = _bump(f, start, length)
    coords = np.zeros((f, 2, topology.num_joints, 3))
    amp_shoulder = spec.reach_amplitude + 0.15 * (cdef.template // 4)
    amp_elbow = 0.8 * spec.reach_amplitude
    for person in range(2):
        forward = np.array([1.0, 0.0, 0.0]) if person == 0 else np.array([-1.0, 0.0, 0.0])
        arms = {}
        for i, side in enumerate(("left", "right")):
            slot = 2 * person + i
            phase, freq = rng.uniform(0, 2 * np.pi, 2), rng.uniform(0.5, 2.0, 2) / f
            t = np.arange(f)
            idle_a = rng.uniform(0.05, spec.idle_amplitude) * (0.5 + 0.5 * np.sin(2 * np.pi * freq[0] * t + phase[0]))
            idle_b = rng.uniform(0.05, spec.idle_amplitude) * (0.5 + 0.5 * np.sin(2 * np.pi * freq[1] * t + phase[1]))
            alpha, beta = 0.15 + idle_a, 0.1 + idle_b
            if slot == cdef.hand_slot:
                jitter = rng.uniform(0.85, 1.15, 2)
                alpha = alpha + amp_shoulder * jitter[0] * active
                beta = beta + amp_elbow * jitter[1] * active
            arms[side] = (alpha, beta)
        body = _person(topology, arms, forward, f)
        sway = 0.03 * np.sin(2 * np.pi * rng.uniform(0.2, 1.0) * np.arange(f) / f + rng.uniform(0, 2 * np.pi))
        offset = np.array([-0.55 if person == 0 else 0.55, 0.0, 3.0]) + rng.normal(0, 0.05, 3)
        coords[:, person] = body + offset + sway[:, None, None] * np.array([1.0, 0.0, 0.0])
    coords += rng.normal(0.0, spec.noise, coords.shape)
    pixels = np.stack(
        [320 + 400 * coords[..., 0] / coords[..., 2], 240 - 400 * coords[..., 1] / coords[..., 2]], axis=-1
    )
    return SkeletonSequence(coords, np.ones((f, 2), dtype=bool), pixels)


# ---------------------------------------------------------------- patches


def _grid(side: int):
    y, x = np.mgrid[0:side, 0:side].astype(np.float64)
    c = (side - 1) / 2.0
    return (x - c) / side, (y - c) / side


def render_patch(obj: int, side: int, rng: np.random.Generator, pixel_noise: float) -> np.ndarray:
    """A hand patch (skin blob on grey), optionally holding object ``obj`` (-1 for none)."""
    x, y = _grid(side)
    img = np.full((side, side, 3), 0.45) + rng.uniform(-0.05, 0.05)
    hx, hy = rng.normal(0, 0.04, 2)
    hand = ((x - hx) / 0.3) ** 2 + ((y - hy) / 0.22) ** 2 < 1.0
    img[hand] = np.array([0.85, 0.65, 0.5]) + rng.uniform(-0.05, 0.05)
    if obj >= 0:
        color, shape = OBJECTS[obj]
        ox, oy = rng.normal(0, 0.05, 2)
        r = 0.22 * rng.uniform(0.85, 1.15)
        dx, dy = x - ox, y - oy
        if shape == "disk":
            mask = dx**2 + dy**2 < r**2
        elif shape == "square":
            mask = (np.abs(dx) < r * 0.85) & (np.abs(dy) < r * 0.85)
        elif shape == "triangle":
            mask = (dy < r * 0.8) & (dy > -r) & (np.abs(dx) < (dy + r) * 0.6)
        elif shape == "ring":
            d = np.sqrt(dx**2 + dy**2)
            mask = (d < r) & (d > r * 0.55)
        elif shape == "bar":
            mask = (np.abs(dx) < r * 1.2) & (np.abs(dy) < r * 0.35)
        else:
            mask = np.abs(dx) + np.abs(dy) < r
        img[mask] = color
    img = img + rng.normal(0.0, pixel_noise, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _window(spec: SyntheticSpec, rng: np.random.Generator) -> tuple[float, float]:
    length = 0.45 * spec.frames
    start = rng.uniform(0.1, 0.45) * spec.frames
    return start, length


def _held(frames: int, window) -> np.ndarray:
    start, length = window
    t = np.arange(frames)
    ramp = max(length / 4.0, 1.0)
    # object visible once the reach is half-way up, until half-way down
    return (t >= start + ramp / 2) & (t <= start + length - ramp / 2)


def make_sample(spec: SyntheticSpec, topology: SkeletonTopology, index: int) -> LabeledSample:
    rng = np.random.default_rng([spec.seed, index])
    defs = class_definitions(spec)
    label = index % spec.classes
    cdef = defs[label]
    window = _window(spec, rng)
    skel = _skeleton(spec, topology, cdef, rng, window)
    f, side = spec.frames, spec.patch_side
    holding = np.full((f, 4), -1, dtype=np.int64)
    held = _held(f, window)
    holding[held, cdef.hand_slot] = cdef.obj
    for slot in range(4):
        if slot == cdef.hand_slot or rng.random() >= spec.distractor_prob:
            continue
        holding[_held(f, _window(spec, rng)), slot] = rng.integers(spec.n_objects)
    patches = np.empty((f, 4, side, side, 3), dtype=np.float32)
    for t in range(f):
        for slot in range(4):
            patches[t, slot] = render_patch(int(holding[t, slot]), side, rng, spec.pixel_noise)
    active = np.where(held, cdef.hand_slot, NO_HAND).astype(np.int64)
    return LabeledSample(f"v{index:05d}", label, skel, patches, active)


def iter_samples(spec: SyntheticSpec, start: int = 0, stop: int | None = None) -> Iterator[LabeledSample]:
    """Samples one at a time; each video has its own derived seed."""
    topology = load_topology(spec.topology)
    total = spec.classes * spec.videos_per_class
    for i in range(start, total if stop is None else min(stop, total)):
        yield make_sample(spec, topology, i)


def generate_dataset(spec: SyntheticSpec) -> list[LabeledSample]:
    return list(iter_samples(spec))


def object_patches(
    n: int, spec: SyntheticSpec, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Labelled patches for pretraining the glimpse sensor: label 0 is an empty hand, k+1 object k."""
    rng = np.random.default_rng([seed, 7919])
    labels = rng.integers(0, len(OBJECTS) + 1, size=n)
    patches = np.stack([render_patch(int(l) - 1, spec.patch_side, rng, spec.pixel_noise) for l in labels])
    return patches, labels


# ---------------------------------------------------------------- on-disk format


def write_patches(path: str | Path, patches: np.ndarray, active: np.ndarray) -> None:
    f, n, side, _, ch = patches.shape
    header = f"side={side} channels={ch} frames={f} slots={n} active={','.join(str(int(a)) for a in active)}\n"
    Path(path).write_bytes(header.encode("ascii") + np.ascontiguousarray(patches, dtype="<f4").tobytes())


def read_patches(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    blob = path.read_bytes()
    nl = blob.find(b"\n")
    if nl < 0:
        raise DatasetError(f"{path}:1: missing header line")
    try:
        fields = dict(item.split("=", 1) for item in blob[:nl].decode("ascii").split())
        side, ch = int(fields["side"]), int(fields["channels"])
        f, n = int(fields["frames"]), int(fields["slots"])
        active = np.array([int(a) for a in fields["active"].split(",")], dtype=np.int64)
    except (KeyError, ValueError):
        raise DatasetError(f"{path}:1: malformed patch header") from None
    expected = f * n * side * side * ch * 4
    payload = blob[nl + 1 :]
    if len(payload) != expected or len(active) != f:
        raise DatasetError(f"{path}: header declares frames={f} ({expected} bytes) but payload has {len(payload)}")
    data = np.frombuffer(payload, dtype="<f4").reshape(f, n, side, side, ch).astype(np.float32)
    return data, active


def save_dataset(root: str | Path, samples: list[LabeledSample], topology: SkeletonTopology) -> Path:
    """Write skeleton/patch files plus ``manifest.txt``; returns the manifest path."""
    root = Path(root)
    (root / "skeletons").mkdir(parents=True, exist_ok=True)
    (root / "patches").mkdir(parents=True, exist_ok=True)
    write_topology(root / "topology.topo", topology)
    lines = ["# topology topology.topo"]
    seen = set()
    for s in samples:
        if s.id in seen:
            raise DatasetError(f"duplicate video id {s.id!r}")
        seen.add(s.id)
        skel, patch = f"skeletons/{s.id}.skel", f"patches/{s.id}.patch"
        write_skeleton(root / skel, s.skeleton)
        write_patches(root / patch, s.patches, s.active_hand)
        lines.append(f"{s.id} {s.label} {skel} {patch}")
    manifest = root / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_dataset(manifest: str | Path) -> tuple[list[LabeledSample], SkeletonTopology]:
    manifest = Path(manifest)
    if not manifest.exists():
        raise DatasetError(f"{manifest}: manifest not found")
    root = manifest.parent
    topology = None
    samples = []
    seen: set[str] = set()
    for lineno, raw in enumerate(manifest.read_text().splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) == 2 and parts[0] == "topology":
                topology = read_topology(root / parts[1])
            continue
        parts = line.split()
        if len(parts) != 4:
            raise DatasetError(f"{manifest}:{lineno}: expected 'id class skeleton_path patches_path'")
        vid, label, skel_path, patch_path = parts
        if vid in seen:
            raise DatasetError(f"{manifest}:{lineno}: duplicate video id {vid!r}")
        seen.add(vid)
        try:
            label_int = int(label)
        except ValueError:
            raise DatasetError(f"{manifest}:{lineno}: class {label!r} is not an integer") from None
        for p in (skel_path, patch_path):
            if not (root / p).exists():
                raise DatasetError(f"{manifest}:{lineno}: missing file {p}")
        skel = read_skeleton(root / skel_path)
        patches, active = read_patches(root / patch_path)
        if patches.shape[0] != skel.num_frames:
            raise DatasetError(
                f"{manifest}:{lineno}: {patch_path} has {patches.shape[0]} frames, skeleton has {skel.num_frames}"
            )
        samples.append(LabeledSample(vid, label_int, skel, patches, active))
    if topology is None:
        raise DatasetError(f"{manifest}: no '# topology <path>' line")
    return samples, topology


def class_counts(samples: list[LabeledSample], classes: int) -> np.ndarray:
    return np.bincount([s.label for s in samples], minlength=classes)

