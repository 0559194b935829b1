"""Skeleton topologies, Euler-tour joint ordering and pose tensor encoding."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np


class TopologyError(ValueError):
    pass


class SkeletonFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SkeletonTopology:
    """A body tree. ``edges`` are (parent, child) pairs; child order drives the tour."""

    num_joints: int
    edges: tuple[tuple[int, int], ...]
    root: int
    names: tuple[str, ...] = ()
    tour_override: tuple[int, ...] | None = None
    _adjacency: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        k = self.num_joints
        if k < 1:
            raise TopologyError("topology needs at least one joint")
        if not 0 <= self.root < k:
            raise TopologyError(f"root {self.root} outside [0, {k})")
        if len(self.edges) != k - 1:
            raise TopologyError(f"a tree over {k} joints has {k - 1} edges, got {len(self.edges)}")
        adj: list[list[int]] = [[] for _ in range(k)]
        for a, b in self.edges:
            if not (0 <= a < k and 0 <= b < k) or a == b:
                raise TopologyError(f"invalid edge ({a}, {b})")
            adj[a].append(b)
            adj[b].append(a)
        seen = {self.root}
        stack = [self.root]
        while stack:
            for n in adj[stack.pop()]:
                if n not in seen:
                    seen.add(n)
                    stack.append(n)
        if len(seen) != k:
            missing = sorted(set(range(k)) - seen)
            raise TopologyError(f"topology is disconnected (or cyclic); unreachable joints {missing}")
        if self.names and len(self.names) != k:
            raise TopologyError(f"{len(self.names)} names for {k} joints")
        object.__setattr__(self, "_adjacency", tuple(tuple(n) for n in adj))
        if self.tour_override is not None:
            check_tour(self, self.tour_override)

    def neighbors(self, joint: int) -> tuple[int, ...]:
        return self._adjacency[joint]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown joint name {name!r}") from None


def _dfs(topology: SkeletonTopology, emit_on_return: bool) -> list[int]:
    tour = [topology.root]
    # (joint, parent, iterator over neighbours)
    stack = [(topology.root, -1, iter(topology.neighbors(topology.root)))]
    while stack:
        joint, parent, it = stack[-1]
        child = next((n for n in it if n != parent), None)
        if child is None:
            stack.pop()
            if stack and emit_on_return:
                tour.append(stack[-1][0])
            continue
        tour.append(child)
        stack.append((child, joint, iter(topology.neighbors(child))))
    return tour


def build_euler_tour(topology: SkeletonTopology, use_override: bool = True) -> list[int]:
    """Depth-first Euler tour from the root, closed by one extra root entry.

    Joints are emitted on entry and again after each child returns, so every
    edge is walked twice and the tour has exactly 2K entries.
    """
    if use_override and topology.tour_override is not None:
        return list(topology.tour_override)
    return _dfs(topology, emit_on_return=True) + [topology.root]


def build_preorder_tour(topology: SkeletonTopology) -> list[int]:
    """Topological order without double entries: DFS preorder plus closing root (K+1)."""
    return _dfs(topology, emit_on_return=False) + [topology.root]


def random_tour(tour: Sequence[int], seed: int) -> list[int]:
    """Random permutation of a tour (same entries, order destroyed)."""
    rng = np.random.default_rng(seed)
    return [int(j) for j in rng.permutation(np.asarray(tour))]


def check_tour(topology: SkeletonTopology, tour: Sequence[int]) -> None:
    k = topology.num_joints
    if len(tour) != 2 * k:
        raise TopologyError(f"tour length {len(tour)} != 2K = {2 * k}")
    if any(not 0 <= j < k for j in tour):
        raise TopologyError("tour references a joint outside the topology")
    counts: dict[frozenset, int] = {}
    for i, (a, b) in enumerate(zip(tour[:-1], tour[1:])):
        if a == b:
            if i != len(tour) - 2:
                raise TopologyError(f"tour repeats joint {a} at position {i}")
            continue
        if b not in topology.neighbors(a):
            raise TopologyError(f"tour steps between non-adjacent joints {a} and {b}")
        key = frozenset((a, b))
        counts[key] = counts.get(key, 0) + 1
    for a, b in topology.edges:
        if counts.get(frozenset((a, b)), 0) != 2:
            raise TopologyError(f"edge ({a}, {b}) is not traversed exactly twice")


# ---------------------------------------------------------------- sequences


@dataclass
class SkeletonSequence:
    """``coords`` F×P×K×3 (meters), ``pixels`` F×P×K×2 or None, ``present`` F×P."""

    coords: np.ndarray
    present: np.ndarray
    pixels: np.ndarray | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.present = np.asarray(self.present, dtype=bool)
        if self.coords.ndim != 4 or self.coords.shape[3] != 3:
            raise SkeletonFormatError(f"coords must be F×P×K×3, got {self.coords.shape}")
        if self.coords.shape[0] < 1:
            raise SkeletonFormatError("a sequence needs at least one frame")
        if self.present.shape != self.coords.shape[:2]:
            raise SkeletonFormatError(f"present flags {self.present.shape} do not match {self.coords.shape[:2]}")
        if self.pixels is not None:
            self.pixels = np.asarray(self.pixels, dtype=np.float64)
            if self.pixels.shape != self.coords.shape[:3] + (2,):
                raise SkeletonFormatError(f"pixels must be F×P×K×2, got {self.pixels.shape}")

    @property
    def num_frames(self) -> int:
        return self.coords.shape[0]

    @property
    def num_persons(self) -> int:
        return self.coords.shape[1]

    @property
    def num_joints(self) -> int:
        return self.coords.shape[2]

    def take(self, frames: Sequence[int]) -> "SkeletonSequence":
        idx = np.asarray(frames)
        pixels = None if self.pixels is None else self.pixels[idx]
        return SkeletonSequence(self.coords[idx], self.present[idx], pixels)


def normalize_sequence(seq: SkeletonSequence, topology: SkeletonTopology) -> SkeletonSequence:
    """Translate every frame so person 0's root joint sits at the origin.

    All persons share person 0's origin, which keeps their relative placement.
    Frames where person 0 is missing fall back to the first present person.
    """
    present = seq.present
    if not present.any(axis=1).all():
        bad = int(np.flatnonzero(~present.any(axis=1))[0])
        raise SkeletonFormatError(f"frame {bad}: no person present, cannot normalize")
    anchor = np.argmax(present, axis=1)
    frames = np.arange(seq.num_frames)
    origin = seq.coords[frames, anchor, topology.root]  # F×3
    coords = (seq.coords - origin[:, None, None, :]) * present[:, :, None, None]
    return SkeletonSequence(coords, present.copy(), None if seq.pixels is None else seq.pixels.copy())


def encode_pose_tensor(
    coords: np.ndarray | SkeletonSequence,
    tour: Sequence[int],
    persons: int = 2,
    boundary_rule: str = "zero",
) -> np.ndarray:
    """Build the T×W×3 pose tensor from normalized T×P×K×3 coordinates.

    Columns follow the tour, (x, y, z) interleaved per entry, person blocks
    side by side. Channels: coordinates, backward first differences,
    backward second differences; undefined leading rows are zero.
    """
    if isinstance(coords, SkeletonSequence):
        coords = coords.coords
    if boundary_rule != "zero":
        raise ValueError(f"unknown boundary rule {boundary_rule!r}")
    coords = np.asarray(coords)
    t, p, k, _ = coords.shape
    tour = np.asarray(tour, dtype=np.int64)
    if tour.size and (tour.max() >= k or tour.min() < 0):
        raise TopologyError(f"tour references joint {int(tour.max())} but sequences have {k} joints")
    if p > persons:
        raise SkeletonFormatError(f"{p} persons exceed the configured maximum {persons}")
    if p < persons:
        coords = np.concatenate([coords, np.zeros((t, persons - p, k, 3), dtype=coords.dtype)], axis=1)
    pos = coords[:, :, tour, :].reshape(t, -1)
    vel = np.zeros_like(pos)
    vel[1:] = pos[1:] - pos[:-1]
    acc = np.zeros_like(pos)
    acc[2:] = vel[2:] - vel[1:-1]
    return np.stack([pos, vel, acc], axis=-1)


def sample_subsequence(video_length: int, length: int, rng: np.random.Generator | int | None) -> np.ndarray:
    """One frame drawn uniformly from each of ``length`` equal spans of the video.

    Videos shorter than ``length`` are played once and padded with the last frame.
    """
    if length <= 0:
        raise ValueError(f"sub-sequence length must be positive, got {length}")
    if video_length < 1:
        raise ValueError(f"video length must be at least 1, got {video_length}")
    if video_length < length:
        idx = np.arange(length)
        return np.minimum(idx, video_length - 1)
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    bounds = (np.arange(length + 1) * video_length) // length
    return rng.integers(bounds[:-1], bounds[1:])


# ---------------------------------------------------------------- remapping

JointSource = str | tuple[str, str]


def remap_topology(
    seq: SkeletonSequence,
    source: SkeletonTopology,
    target: SkeletonTopology,
    joint_name_map: Mapping[str, JointSource] | None = None,
) -> SkeletonSequence:
    """Express ``seq`` in ``target``'s joint set.

    Each target joint maps to a source joint name, or to a pair of source names
    whose midpoint is synthesized. With no map, names must match one to one.
    """
    mapping = dict(joint_name_map) if joint_name_map is not None else {}
    stray = sorted(set(mapping) - set(target.names))
    if stray:
        raise TopologyError(f"joint map names unknown target joints: {', '.join(stray)}")
    rows = []
    for name in target.names:
        rule = mapping.get(name, name if joint_name_map is None or name in source.names else None)
        needed = [rule] if isinstance(rule, str) else list(rule or [])
        if rule is None or any(n not in source.names for n in needed):
            raise TopologyError(f"target joint {name!r} has no source joint or midpoint rule")
        rows.append(rule)

    def gather(arr: np.ndarray) -> np.ndarray:
        out = []
        for rule in rows:
            if isinstance(rule, str):
                out.append(arr[:, :, source.index(rule)])
            else:
                a, b = rule
                out.append(0.5 * (arr[:, :, source.index(a)] + arr[:, :, source.index(b)]))
        return np.stack(out, axis=2)

    pixels = None if seq.pixels is None else gather(seq.pixels)
    return SkeletonSequence(gather(seq.coords), seq.present.copy(), pixels)


def parse_joint_map(text: str) -> dict[str, JointSource]:
    """``target = source`` or ``target = mid(a, b)`` per line; ``#`` comments."""
    out: dict[str, JointSource] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SkeletonFormatError(f"joint map line {lineno}: expected 'target = source'")
        target, rule = (s.strip() for s in line.split("=", 1))
        m = re.fullmatch(r"mid\(\s*(\S+?)\s*,\s*(\S+?)\s*\)", rule)
        out[target] = (m.group(1), m.group(2)) if m else rule
    return out


# ---------------------------------------------------------------- file formats


def write_topology(path: str | Path, topology: SkeletonTopology) -> None:
    lines = [f"joints={topology.num_joints} root={topology.root}"]
    lines += [f"{a} {b}" for a, b in topology.edges]
    lines += [f"name {i} {n}" for i, n in enumerate(topology.names)]
    if topology.tour_override is not None:
        lines.append("tour " + " ".join(str(j) for j in topology.tour_override))
    Path(path).write_text("\n".join(lines) + "\n")


def parse_topology(text: str, source: str = "<topology>") -> SkeletonTopology:
    lines = [(i, l.strip()) for i, l in enumerate(text.splitlines(), 1) if l.strip()]
    if not lines:
        raise SkeletonFormatError(f"{source}: empty topology file")
    m = re.fullmatch(r"joints=(\d+)\s+root=(\d+)", lines[0][1])
    if not m:
        raise SkeletonFormatError(f"{source}:{lines[0][0]}: expected 'joints=<K> root=<r>'")
    k, root = int(m.group(1)), int(m.group(2))
    edges, names, tour = [], [""] * k, None
    for lineno, line in lines[1:]:
        parts = line.split()
        try:
            if parts[0] == "name":
                names[int(parts[1])] = " ".join(parts[2:])
            elif parts[0] == "tour":
                tour = tuple(int(p) for p in parts[1:])
            else:
                a, b = parts
                edges.append((int(a), int(b)))
        except (ValueError, IndexError):
            raise SkeletonFormatError(f"{source}:{lineno}: malformed line {line!r}") from None
    has_names = any(names)
    return SkeletonTopology(k, tuple(edges), root, tuple(names) if has_names else (), tour)


def read_topology(path: str | Path) -> SkeletonTopology:
    return parse_topology(Path(path).read_text(), str(path))


def builtin_topology(name: str) -> SkeletonTopology:
    """``ntu25`` (Kinect v2, 25 joints) or ``desk12`` (upper body, 12 joints)."""
    files = {"ntu25": "ntu25.topo", "desk12": "desk12.topo"}
    if name not in files:
        raise KeyError(f"unknown built-in topology {name!r}; choose from {sorted(files)}")
    text = resources.files("poseattn.data").joinpath(files[name]).read_text()
    return parse_topology(text, name)


def load_topology(spec: str) -> SkeletonTopology:
    """A built-in name or a path to a topology file."""
    try:
        return builtin_topology(spec)
    except KeyError:
        return read_topology(spec)


def write_skeleton(path: str | Path, seq: SkeletonSequence) -> None:
    f, p, k = seq.coords.shape[:3]
    pixels = seq.pixels if seq.pixels is not None else np.zeros((f, p, k, 2))
    out = [f"frames={f} persons={p} joints={k}"]
    for t in range(f):
        for q in range(p):
            flag = int(seq.present[t, q])
            for j in range(k):
                vals = [*seq.coords[t, q, j].tolist(), *pixels[t, q, j].tolist()]
                # repr of a Python float round-trips exactly
                out.append(f"{j} " + " ".join(repr(v) for v in vals) + f" {flag}")
    Path(path).write_text("\n".join(out) + "\n")


def read_skeleton(path: str | Path) -> SkeletonSequence:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise SkeletonFormatError(f"{path}:1: empty skeleton file")
    m = re.fullmatch(r"frames=(\d+)\s+persons=(\d+)\s+joints=(\d+)", lines[0].strip())
    if not m:
        raise SkeletonFormatError(f"{path}:1: expected 'frames=<T> persons=<P> joints=<K>'")
    f, p, k = (int(g) for g in m.groups())
    body = [l for l in lines[1:] if l.strip()]
    expected = f * p * k
    if len(body) != expected:
        raise SkeletonFormatError(
            f"{path}: header declares frames={f} ({expected} joint lines) but file has {len(body)}"
        )
    coords = np.zeros((f, p, k, 3))
    pixels = np.zeros((f, p, k, 2))
    present = np.zeros((f, p), dtype=bool)
    for n, line in enumerate(body):
        t, rem = divmod(n, p * k)
        q, j = divmod(rem, k)
        parts = line.split()
        try:
            if len(parts) != 7 or int(parts[0]) != j:
                raise ValueError
            coords[t, q, j] = [float(v) for v in parts[1:4]]
            pixels[t, q, j] = [float(v) for v in parts[4:6]]
            flag = int(parts[6])
        except ValueError:
            raise SkeletonFormatError(f"{path}:{n + 2}: malformed joint line {line!r}") from None
        if j == 0:
            present[t, q] = bool(flag)
    return SkeletonSequence(coords, present, pixels)
