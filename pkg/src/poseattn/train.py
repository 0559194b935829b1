"""Staged training, logit-level fusion, evaluation, transfer and the ablation matrix."""

from __future__ import annotations

import dataclasses
import json
import logging
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Array, Tape
from .config import TrainConfig
from .datagen import LabeledSample, SyntheticSpec, object_patches, OBJECTS
from .glimpse import (
    VARIANTS,
    AttentionTrace,
    RgbShape,
    extract_features,
    glimpse_features,
    init_glimpse_params,
    init_rgb_params,
    rgb_forward,
)
from .optim import AdamState, adam_step
from .posenet import PoseNetShape, init_pose_params, pose_classify, pose_forward
from .skeleton import (
    SkeletonTopology,
    build_euler_tour,
    build_preorder_tour,
    encode_pose_tensor,
    normalize_sequence,
    random_tour,
    sample_subsequence,
)

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    pass


# ---------------------------------------------------------------- data


@dataclass
class Prepared:
    """A video as the model consumes it: normalized joints plus cached glimpse features."""

    id: str
    label: int
    coords: np.ndarray  # F×P×K×3
    features: np.ndarray | None = None  # F×N×D_g
    active_hand: np.ndarray | None = None
    patches: np.ndarray | None = None  # kept only for end-to-end training

    @property
    def num_frames(self) -> int:
        return self.coords.shape[0]


def prepare(
    samples: Iterable[LabeledSample],
    topology: SkeletonTopology,
    glimpse_params: dict[str, Array] | None = None,
    keep_patches: bool = False,
) -> list[Prepared]:
    out = []
    for s in samples:
        coords = normalize_sequence(s.skeleton, topology).coords
        feats = None
        if glimpse_params is not None:
            feats = extract_features(s.patches, glimpse_params)
            # hands of absent persons contribute zero columns
            valid = np.repeat(s.skeleton.present, feats.shape[1] // s.skeleton.num_persons, axis=1)
            feats[~valid] = 0.0
        out.append(Prepared(s.id, s.label, coords, feats, s.active_hand, s.patches if keep_patches else None))
    return out


def split_train_test(samples: Sequence, classes: int, test_fraction: float = 0.5) -> tuple[list, list]:
    """Per-class split in generation order: the last ``test_fraction`` of each class is test."""
    by_class: dict[int, list] = {}
    for s in samples:
        by_class.setdefault(s.label, []).append(s)
    train, test = [], []
    for c in sorted(by_class):
        items = by_class[c]
        cut = len(items) - int(round(len(items) * test_fraction))
        train += items[:cut]
        test += items[cut:]
    return train, test


def split_validation(items: Sequence[Prepared], fraction: float, seed: int) -> tuple[list[Prepared], list[Prepared]]:
    n_val = max(1, int(round(len(items) * fraction)))
    if n_val >= len(items):
        raise StageError(f"cannot hold out {n_val} validation videos from {len(items)}")
    order = np.random.default_rng([seed, 5]).permutation(len(items))
    val_idx = set(order[:n_val].tolist())
    train = [it for i, it in enumerate(items) if i not in val_idx]
    val = [it for i, it in enumerate(items) if i in val_idx]
    return train, val


# ---------------------------------------------------------------- model


def tour_for(config: TrainConfig, topology: SkeletonTopology, seed: int | None = None) -> list[int]:
    base = build_euler_tour(topology)
    if config.joint_order == "topological":
        return base
    if config.joint_order == "no-double":
        return build_preorder_tour(topology)
    return random_tour(base, config.seed if seed is None else seed)


@dataclass
class TwoStreamModel:
    config: TrainConfig
    num_classes: int
    tour: list[int]
    params: dict[str, Array] = field(default_factory=dict)
    variant: str = "full"

    def pose_shape(self) -> PoseNetShape:
        c = self.config
        return PoseNetShape(
            c.seq_len, c.persons * len(self.tour) * 3, c.c1, c.c2, c.d_s, self.num_classes, c.kernel1, c.kernel2
        )

    def rgb_shape(self) -> RgbShape:
        c = self.config
        return RgbShape(
            c.seq_len, c.n_points, c.d_s, self.num_classes, c.patch_side, c.glimpse_c1, c.glimpse_c2,
            c.d_g, c.d_h, c.feature_width, c.att_hidden, c.tatt_hidden, self.variant,
        )

    def has(self, prefix: str) -> bool:
        return any(k.startswith(prefix) for k in self.params)

    def group(self, prefix: str) -> dict[str, Array]:
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.params.items()}
        out["pose.tour"] = np.asarray(self.tour, dtype=np.float32)
        out["fuse.classes"] = np.asarray([self.num_classes], dtype=np.float32)
        out["fuse.variant"] = np.asarray([VARIANTS.index(self.variant)], dtype=np.float32)
        return out

    def copy(self) -> "TwoStreamModel":
        params = {k: Array(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        return dataclasses.replace(self, params=params, tour=list(self.tour))


def new_model(config: TrainConfig, num_classes: int, topology: SkeletonTopology, variant: str = "full") -> TwoStreamModel:
    model = TwoStreamModel(config, num_classes, tour_for(config, topology), variant=variant)
    model.params.update(init_pose_params(model.pose_shape(), np.random.default_rng([config.seed, 1]), model.dtype))
    return model


def model_from_state(state: dict[str, np.ndarray], config: TrainConfig) -> TwoStreamModel:
    classes = int(state["fuse.classes"][0])
    variant = VARIANTS[int(state["fuse.variant"][0])]
    tour = [int(t) for t in state["pose.tour"]]
    model = TwoStreamModel(config, classes, tour, variant=variant)
    dtype = model.dtype
    expected = init_pose_params(model.pose_shape(), np.random.default_rng(0), dtype)
    if any(k.startswith("rgb.glimpse.") for k in state):
        expected.update(init_glimpse_params(model.rgb_shape(), np.random.default_rng(0), dtype))
    if any(k.startswith("rgb.") and not k.startswith("rgb.glimpse.") for k in state):
        expected.update(init_rgb_params(model.rgb_shape(), np.random.default_rng(0), dtype))
    for name, ref in expected.items():
        if name not in state:
            raise StageError(f"checkpoint lacks parameter {name!r}")
        if state[name].shape != ref.shape:
            raise StageError(f"checkpoint {name!r} has shape {state[name].shape}, config expects {ref.shape}")
        model.params[name] = Array(state[name].astype(dtype), requires_grad=True, name=name)
    return model


def pretrain_glimpse(model: TwoStreamModel, steps: int | None = None, lr: float | None = None) -> list[str]:
    """Train the glimpse sensor to recognise objects in hand patches, as a stand-in for
    an externally pretrained backbone. The classification head is discarded."""
    c = model.config
    steps = c.glimpse_pretrain_steps if steps is None else steps
    shape = model.rgb_shape()
    rng = np.random.default_rng([c.seed, 2])
    params = init_glimpse_params(shape, rng, model.dtype)
    n_cls = len(OBJECTS) + 1
    head = {
        "head.w": Array((rng.standard_normal((n_cls, c.d_g)) * np.sqrt(1.0 / c.d_g)).astype(model.dtype), requires_grad=True),
        "head.b": Array(np.zeros(n_cls, model.dtype), requires_grad=True),
    }
    patches, labels = object_patches(1024, SyntheticSpec(patch_side=c.patch_side, n_objects=len(OBJECTS)), c.seed)
    patches = patches.astype(model.dtype)
    state = AdamState(lr=c.glimpse_pretrain_lr if lr is None else lr)
    every = {**params, **head}
    lines = []
    batch = 64
    for step in range(steps):
        idx = np.random.default_rng([c.seed, 3, step]).choice(len(labels), batch, replace=False)
        with Tape():
            feats = glimpse_features(Array(patches[idx]), params)
            logits = ad.affine(feats, head["head.w"], head["head.b"])
            loss = ad.cross_entropy(logits, labels[idx])
            names = list(every)
            grads = ad.backward(loss, [every[n] for n in names])
        adam_step(every, dict(zip(names, grads)), state)
        if step % 50 == 0 or step == steps - 1:
            acc = float((logits.data.argmax(1) == labels[idx]).mean())
            lines.append(f"glimpse-pretrain step {step} loss {float(loss.data):.4f} acc {acc:.3f}")
    # ReLU is positively homogeneous, so scaling the last layer rescales the
    # features exactly; unit RMS keeps the LSTM gates out of saturation.
    rms = float(np.sqrt(np.mean(extract_features(patches[:256], params) ** 2)))
    if rms > 0:
        params["rgb.glimpse.fc.w"].data /= rms
        params["rgb.glimpse.fc.b"].data /= rms
    lines.append(f"glimpse-pretrain feature rms {rms:.4f} rescaled to 1")
    model.params.update(params)
    return lines


def ensure_rgb(model: TwoStreamModel, variant: str | None = None) -> None:
    """Attach freshly initialised RGB-stream parameters (and a glimpse sensor if missing)."""
    if variant is not None:
        model.variant = variant
    if not model.has("rgb.glimpse."):
        for line in pretrain_glimpse(model):
            log.info(line)
    rgb = init_rgb_params(model.rgb_shape(), np.random.default_rng([model.config.seed, 4]), model.dtype)
    model.params.update(rgb)


# ---------------------------------------------------------------- batches


def pose_batch(items: Sequence[Prepared], frames: Sequence[np.ndarray], tour, persons: int, dtype) -> np.ndarray:
    return np.stack([encode_pose_tensor(it.coords[f], tour, persons) for it, f in zip(items, frames)]).astype(dtype)


def rgb_batch(items: Sequence[Prepared], frames: Sequence[np.ndarray], dtype) -> np.ndarray:
    # F×N×D_g -> T×D_g×N per item
    return np.stack([it.features[f].transpose(0, 2, 1) for it, f in zip(items, frames)]).astype(dtype)


def _stream_logits(
    model: TwoStreamModel,
    items: Sequence[Prepared],
    frames: Sequence[np.ndarray],
    stream: str,
    train: bool = False,
    rng: np.random.Generator | None = None,
    trace: list | None = None,
) -> tuple[Array | None, Array | None]:
    """Pose and/or RGB logits for one batch; arrays are recorded if a tape is active."""
    c = model.config
    x = Array(pose_batch(items, frames, model.tour, c.persons, model.dtype))
    need_rgb = stream in ("rgb", "fused")
    s = pose_forward(x, model.params)
    pose_logits = None
    if stream in ("pose", "fused"):
        pose_logits = pose_classify(ad.dropout(s, c.dropout, train, rng), model.params)
    rgb_logits = None
    if need_rgb:
        if not model.has("rgb.lstm."):
            raise StageError("stream needs RGB parameters but the model has none")
        if c.end_to_end and train:
            patches = np.stack([it.patches[f] for it, f in zip(items, frames)]).astype(model.dtype)
            b, t, n = patches.shape[:3]
            flat = glimpse_features(Array(patches.reshape((-1,) + patches.shape[3:])), model.params)
            v = ad.transpose(ad.reshape(flat, (b, t, n, -1)), (0, 1, 3, 2))
        else:
            v = Array(rgb_batch(items, frames, model.dtype))
            s = Array(s.data)
        rgb_logits, tr = rgb_forward(v, s, model.params, model.variant, train, c.dropout, rng)
        if trace is not None:
            trace.append(tr)
    return pose_logits, rgb_logits


def fuse_logits(pose_logits, rgb_logits):
    """Logit-level fusion: elementwise sum."""
    a = pose_logits.data if isinstance(pose_logits, Array) else np.asarray(pose_logits)
    b = rgb_logits.data if isinstance(rgb_logits, Array) else np.asarray(rgb_logits)
    if a.shape != b.shape:
        raise ValueError(f"cannot fuse logits of shapes {a.shape} and {b.shape}")
    if isinstance(pose_logits, Array) or isinstance(rgb_logits, Array):
        return ad.add(pose_logits, rgb_logits)
    return a + b


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    confusion: np.ndarray
    stream: str
    variant: str
    joint_order: str
    seed: int
    config_hash: str
    n_subsequences: int

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.confusion) / max(self.total, 1))

    @property
    def per_class_accuracy(self) -> list[float]:
        rows = self.confusion.sum(axis=1)
        return [float(self.confusion[i, i] / rows[i]) if rows[i] else float("nan") for i in range(len(rows))]

    def to_text(self) -> str:
        return json.dumps(
            {
                "stream": self.stream,
                "variant": self.variant,
                "joint_order": self.joint_order,
                "seed": self.seed,
                "config_hash": self.config_hash,
                "subsequences": self.n_subsequences,
                "accuracy": round(self.accuracy, 6),
                "per_class_accuracy": [None if np.isnan(a) else round(a, 6) for a in self.per_class_accuracy],
                "confusion": self.confusion.astype(int).tolist(),
            },
            indent=1,
        )

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(
            np.asarray(d["confusion"], dtype=np.int64), d["stream"], d["variant"], d["joint_order"],
            int(d["seed"]), d["config_hash"], int(d["subsequences"]),
        )


def _video_rng(seed: int, vid: str, salt: int) -> np.random.Generator:
    return np.random.default_rng([seed, salt, zlib.crc32(vid.encode())])


def video_logits(
    model: TwoStreamModel,
    items: Sequence[Prepared],
    stream: str,
    n_sub: int | None = None,
    seed: int | None = None,
    chunk: int = 256,
) -> tuple[np.ndarray | None, np.ndarray | None]:
    """Per-video pose and RGB logits, each averaged over ``n_sub`` seeded sub-sequences."""
    c = model.config
    n_sub = c.test_subsequences if n_sub is None else n_sub
    seed = c.seed if seed is None else seed
    flat_items, flat_frames = [], []
    for it in items:
        rng = _video_rng(seed, it.id, 17)
        for _ in range(n_sub):
            flat_items.append(it)
            flat_frames.append(sample_subsequence(it.num_frames, c.seq_len, rng))
    pose_parts, rgb_parts = [], []
    for i in range(0, len(flat_items), chunk):
        p, r = _stream_logits(model, flat_items[i : i + chunk], flat_frames[i : i + chunk], stream)
        if p is not None:
            pose_parts.append(p.data)
        if r is not None:
            rgb_parts.append(r.data)

    def avg(parts):
        if not parts:
            return None
        return np.concatenate(parts).astype(np.float64).reshape(len(items), n_sub, -1).mean(axis=1)

    return avg(pose_parts), avg(rgb_parts)


def stream_scores(pose: np.ndarray | None, rgb: np.ndarray | None, stream: str) -> np.ndarray:
    if stream == "pose":
        return pose
    if stream == "rgb":
        return rgb
    return fuse_logits(pose, rgb)


def evaluate(
    items: Sequence[Prepared], model: TwoStreamModel, stream: str = "fused", n_sub: int | None = None
) -> EvalReport:
    """Averaged logits over seeded sub-sequences per video; argmax ties go to the lowest class."""
    labels = np.asarray([it.label for it in items])
    if labels.size and labels.max() >= model.num_classes:
        raise StageError(f"dataset has class {labels.max()} but the model predicts {model.num_classes} classes")
    pose, rgb = video_logits(model, items, stream, n_sub)
    pred = stream_scores(pose, rgb, stream).argmax(axis=1)
    conf = np.zeros((model.num_classes, model.num_classes), dtype=np.int64)
    np.add.at(conf, (labels, pred), 1)
    c = model.config
    return EvalReport(
        conf, stream, model.variant if stream != "pose" else "-", c.joint_order, c.seed, c.digest(),
        c.test_subsequences if n_sub is None else n_sub,
    )


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    log: list[str]
    steps: int
    best_val_acc: float
    train_ids: list[str]
    val_ids: list[str]


def trainable(model: TwoStreamModel, stage: str) -> list[str]:
    c = model.config
    if stage == "pose":
        return [k for k in model.params if k.startswith("pose.")]
    if stage == "rgb":
        if c.end_to_end:
            return list(model.params)
        return [k for k in model.params if k.startswith("rgb.") and not k.startswith("rgb.glimpse.")]
    raise StageError(f"no trainable parameters for stage {stage!r}")


def _loss_and_acc(model, items, frames, stage, rng, train=True):
    stream = "pose" if stage == "pose" else ("fused" if model.config.end_to_end else "rgb")
    pose_logits, rgb_logits = _stream_logits(model, items, frames, stream, train=train, rng=rng)
    if stream == "fused":
        logits = fuse_logits(pose_logits, rgb_logits)
    else:
        logits = pose_logits if stream == "pose" else rgb_logits
    labels = np.asarray([it.label for it in items])
    loss = ad.cross_entropy(logits, labels)
    acc = float((logits.data.argmax(axis=1) == labels).mean())
    return loss, acc


def train_stage(
    items: Sequence[Prepared],
    model: TwoStreamModel,
    stage: str | None = None,
    lr: float | None = None,
    max_steps: int | None = None,
    validation: Sequence[Prepared] | None = None,
    early_stopping: bool = True,
) -> TrainResult:
    """Adam + cross-entropy over one sampled sub-sequence per video per epoch.

    The pose stage updates ``pose.*``. The RGB stage needs a trained pose
    stream and updates ``rgb.*`` except the glimpse sensor (unless the
    config asks for end-to-end training). A held-out validation split drives
    early stopping; the best-validation parameters are restored.
    """
    c = model.config
    stage = stage or c.stage
    if stage == "rgb":
        if not model.has("pose.conv1."):
            raise StageError("RGB stage requires a trained pose checkpoint")
        if not model.has("rgb.lstm."):
            ensure_rgb(model)
        if any(it.features is None for it in items) and not c.end_to_end:
            raise StageError("RGB stage needs glimpse features; prepare the data with the glimpse sensor")
    names = trainable(model, stage)
    if max_steps is not None and max_steps <= 0:
        return TrainResult([], 0, float("nan"), [it.id for it in items], [])
    state = AdamState(lr=c.lr if lr is None else lr)
    if validation is None:
        train_items, val_items = split_validation(items, c.val_fraction, c.seed)
    else:
        train_items, val_items = list(items), list(validation)
    frozen_names = set(model.params) - set(names)
    stage_code = 11 if stage == "pose" else 13
    stream = "pose" if stage == "pose" else ("fused" if c.end_to_end else "rgb")

    best = (-1.0, -np.inf)
    best_params = None
    since_best = 0
    step = 0
    lines = []
    for epoch in range(c.max_epochs):
        rng = np.random.default_rng([c.seed, stage_code, epoch])
        frames = [sample_subsequence(it.num_frames, c.seq_len, rng) for it in train_items]
        order = rng.permutation(len(train_items))
        losses, accs = [], []
        for start in range(0, len(order), c.batch_size):
            batch = order[start : start + c.batch_size]
            with Tape():
                loss, acc = _loss_and_acc(
                    model, [train_items[i] for i in batch], [frames[i] for i in batch], stage, rng
                )
                grads = ad.backward(loss, [model.params[n] for n in names])
            adam_step(model.params, dict(zip(names, grads)), state, frozen=frozen_names.__contains__)
            losses.append(float(loss.data))
            accs.append(acc)
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        val_acc, val_loss = _validate(model, val_items, stream)
        lines.append(f"{step} {np.mean(losses):.6f} {np.mean(accs):.6f} {val_acc:.6f}")
        score = (val_acc, -val_loss)
        if score > best:
            best, since_best = score, 0
            best_params = {n: model.params[n].data.copy() for n in names}
        else:
            since_best += 1
        if max_steps is not None and step >= max_steps:
            break
        if early_stopping and since_best >= c.patience and epoch + 1 >= c.min_epochs:
            break
    if early_stopping and best_params is not None:
        for n, v in best_params.items():
            model.params[n].data[...] = v
    return TrainResult(lines, step, best[0], [it.id for it in train_items], [it.id for it in val_items])


def _validate(model: TwoStreamModel, items: Sequence[Prepared], stream: str) -> tuple[float, float]:
    if not items:
        return 0.0, 0.0
    pose, rgb = video_logits(model, items, stream, seed=model.config.seed + 7)
    scores = stream_scores(pose, rgb, stream)
    labels = np.asarray([it.label for it in items])
    logp = ad.log_softmax_np(scores)
    return float((scores.argmax(1) == labels).mean()), float(-logp[np.arange(len(labels)), labels].mean())


def training_accuracy(model: TwoStreamModel, items: Sequence[Prepared], frames, stream: str) -> float:
    pose, rgb = _stream_logits(model, items, frames, stream)
    scores = stream_scores(
        None if pose is None else pose.data, None if rgb is None else rgb.data, stream
    )
    return float((scores.argmax(1) == np.asarray([it.label for it in items])).mean())


# ---------------------------------------------------------------- transfer


def transfer_finetune(
    source: TwoStreamModel,
    target_items: Sequence[Prepared],
    num_classes: int,
    config: TrainConfig | None = None,
    reinit_output: bool = True,
    max_steps: int | None = None,
) -> tuple[TwoStreamModel, list[str]]:
    """Initialise from ``source``, re-initialise both classifiers for ``num_classes``,
    then finetune the pose stream and the RGB stream at lr / divisor.

    ``reinit_output=False`` keeps the source classifiers (class sets must match);
    ``max_steps`` caps each stage, 0 skips training.

    Target items must already be expressed in the source topology
    (see :func:`poseattn.skeleton.remap_topology`).
    """
    config = config or source.config
    model = source.copy()
    model.config = config
    model.num_classes = num_classes
    width = model.pose_shape().width
    joints = max(model.tour) + 1
    for it in target_items:
        if it.coords.shape[2] < joints or (it.features is not None and source.has("rgb.lstm.")
                                           and it.features.shape[-1] != config.d_g):
            raise StageError(
                f"target video {it.id} is incompatible with the source model (tensor width {width}, d_g {config.d_g})"
            )
    if not reinit_output and num_classes != source.num_classes:
        raise StageError(f"cannot keep a {source.num_classes}-class classifier for {num_classes} classes")
    top = max((it.label for it in target_items), default=-1)
    if top >= num_classes:
        raise StageError(f"target has class {top} but transfer was asked for {num_classes} classes")
    rng = np.random.default_rng([config.seed, 6])
    d_s, d_u = config.d_s, config.feature_width
    if reinit_output:
        model.params["pose.out.w"] = Array((rng.standard_normal((num_classes, d_s)) * np.sqrt(1.0 / d_s)).astype(model.dtype), True, "pose.out.w")
        model.params["pose.out.b"] = Array(np.zeros(num_classes, model.dtype), True, "pose.out.b")
    lr = config.lr / config.transfer_lr_divisor
    lines = []
    res = train_stage(target_items, model, "pose", lr=lr, max_steps=max_steps)
    lines += [f"pose {l}" for l in res.log]
    if source.has("rgb.lstm."):
        if reinit_output:
            limit = np.sqrt(6.0 / (num_classes + d_u))
            model.params["rgb.out.w"] = Array(rng.uniform(-limit, limit, (num_classes, d_u)).astype(model.dtype), True, "rgb.out.w")
            model.params["rgb.out.b"] = Array(np.zeros(num_classes, model.dtype), True, "rgb.out.b")
        res = train_stage(target_items, model, "rgb", lr=lr, max_steps=max_steps)
        lines += [f"rgb {l}" for l in res.log]
    return model, lines


# ---------------------------------------------------------------- ablation


@dataclass(frozen=True)
class AblationRow:
    label: str
    stream: str
    joint_order: str
    variant: str


ABLATION_ROWS = (
    AblationRow("A pose, topological", "pose", "topological", "-"),
    AblationRow("A' pose, no double entries", "pose", "no-double", "-"),
    AblationRow("A'' pose, random order", "pose", "random", "-"),
    AblationRow("B rgb, sum", "rgb", "topological", "sum"),
    AblationRow("C rgb, concat", "rgb", "topological", "concat"),
    AblationRow("E rgb, spatial attention", "rgb", "topological", "spatial-only"),
    AblationRow("G rgb, spatio-temporal attention", "rgb", "topological", "full"),
    AblationRow("G' rgb, unconditioned attention", "rgb", "topological", "unconditioned"),
    AblationRow("H fused, sum", "fused", "topological", "sum"),
    AblationRow("I fused, spatial attention", "fused", "topological", "spatial-only"),
    AblationRow("K fused, spatio-temporal attention", "fused", "topological", "full"),
    AblationRow("K' fused, unconditioned attention", "fused", "topological", "unconditioned"),
)


@dataclass
class TwoStreamRun:
    """Everything trained for one seed: pose models per joint order, RGB models per variant."""

    pose: dict[str, TwoStreamModel]
    rgb: dict[str, TwoStreamModel]
    logs: dict[str, list[str]]


def fit_pose(config: TrainConfig, topology, train_items, num_classes) -> tuple[TwoStreamModel, TrainResult]:
    model = new_model(config, num_classes, topology)
    return model, train_stage(train_items, model, "pose")


def fit_rgb(pose_model: TwoStreamModel, train_items, variant: str) -> tuple[TwoStreamModel, TrainResult]:
    model = pose_model.copy()
    model.variant = variant
    model.params.update(
        init_rgb_params(model.rgb_shape(), np.random.default_rng([model.config.seed, 4]), model.dtype)
    )
    return model, train_stage(train_items, model, "rgb")


def run_ablation_matrix(
    train_items: Sequence[Prepared],
    test_items: Sequence[Prepared],
    config: TrainConfig,
    topology: SkeletonTopology,
    num_classes: int,
    glimpse_params: dict[str, Array],
    rows: Sequence[AblationRow] = ABLATION_ROWS,
    models_out: dict | None = None,
) -> list[tuple[AblationRow, EvalReport]]:
    """Train every model the rows need (once each) under ``config.seed`` and evaluate each row.

    ``train_items``/``test_items`` must carry features from ``glimpse_params``.
    """
    pose_models: dict[str, TwoStreamModel] = {}
    rgb_models: dict[str, TwoStreamModel] = {}
    out = []
    for row in rows:
        if row.joint_order not in pose_models:
            cfg = config.replace(joint_order=row.joint_order)
            model, res = fit_pose(cfg, topology, train_items, num_classes)
            log.info("pose %s: %d steps, best val %.3f", row.joint_order, res.steps, res.best_val_acc)
            pose_models[row.joint_order] = model
        if row.stream != "pose" and row.variant not in rgb_models:
            base = pose_models[row.joint_order].copy()
            base.params.update({k: Array(v.data, True, k) for k, v in glimpse_params.items()})
            model, res = fit_rgb(base, train_items, row.variant)
            log.info("rgb %s: %d steps, best val %.3f", row.variant, res.steps, res.best_val_acc)
            rgb_models[row.variant] = model
        model = pose_models[row.joint_order] if row.stream == "pose" else rgb_models[row.variant]
        out.append((row, evaluate(test_items, model, row.stream)))
    if models_out is not None:
        models_out.update({("pose", k): v for k, v in pose_models.items()})
        models_out.update({("rgb", k): v for k, v in rgb_models.items()})
    return out


def attention_localization(model: TwoStreamModel, items: Sequence[Prepared], seed: int = 0) -> float:
    """Fraction of frames with an active hand where the spatial attention argmax picks that hand."""
    hits = total = 0
    for it in items:
        if it.active_hand is None:
            raise StageError(f"video {it.id} carries no active-hand metadata")
        frames = sample_subsequence(it.num_frames, model.config.seq_len, _video_rng(seed, it.id, 23))
        trace: list[AttentionTrace] = []
        _stream_logits(model, [it], [frames], "rgb", trace=trace)
        if trace[0].spatial is None:
            raise StageError(f"variant {model.variant!r} has no spatial attention")
        active = it.active_hand[frames]
        on = active >= 0
        hits += int((trace[0].spatial[0][on].argmax(axis=1) == active[on]).sum())
        total += int(on.sum())
    return hits / total if total else float("nan")


@dataclass
class Benchmark:
    train: list[Prepared]
    test: list[Prepared]
    glimpse: dict[str, Array]
    topology: SkeletonTopology
    classes: int


def build_benchmark(spec: SyntheticSpec, config: TrainConfig, samples: Iterable[LabeledSample] | None = None) -> Benchmark:
    """Pretrain the glimpse sensor under ``config.seed`` and cache features for a split dataset.

    Samples are streamed, so only features and joints stay in memory.
    """
    from .datagen import iter_samples
    from .skeleton import load_topology

    topology = load_topology(spec.topology)
    holder = TwoStreamModel(config, spec.classes, tour_for(config, topology))
    for line in pretrain_glimpse(holder):
        log.info(line)
    glimpse = holder.group("rgb.glimpse.")
    items = prepare(iter_samples(spec) if samples is None else samples, topology, glimpse)
    train, test = split_train_test(items, spec.classes)
    return Benchmark(train, test, glimpse, topology, spec.classes)


def format_ablation(results: Sequence[tuple[AblationRow, EvalReport]]) -> str:
    lines = ["row\tstream\tjoint_order\tvariant\tseed\taccuracy"]
    for row, rep in results:
        lines.append(f"{row.label}\t{row.stream}\t{row.joint_order}\t{row.variant}\t{rep.seed}\t{rep.accuracy:.4f}")
    return "\n".join(lines) + "\n"
