"""Command-line experiment runner.

Every command writes into ``--out``. On failure it prints one ``error:`` line,
removes whatever it created and exits with status 1.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import train as T
from .autodiff import Array, Tape
from .checkpoint import load_checkpoint, save_checkpoint
from .config import JOINT_ORDERS, STAGES, STREAMS, apply_overrides, load_config, to_text
from .datagen import SyntheticSpec, iter_samples, load_dataset, save_dataset
from .glimpse import (
    VARIANTS,
    RgbShape,
    glimpse_features,
    init_glimpse_params,
    init_rgb_params,
    rgb_forward,
    trace_records,
    write_trace,
)
from .optim import finite_difference_gradient, relative_error
from .posenet import PoseNetShape, init_pose_params, pose_classify, pose_forward
from .skeleton import load_topology, parse_joint_map, remap_topology, sample_subsequence

log = logging.getLogger("poseattn")


class CommandError(RuntimeError):
    pass


# ---------------------------------------------------------------- helpers


def _config(args):
    config, data_keys = load_config(args.config, args.scale)
    changes = {}
    for key in ("seed", "stage", "variant", "stream", "joint_order"):
        value = getattr(args, key, None)
        if value is not None:
            changes[key] = value
    return config.replace(**changes), data_keys


def _require(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) is None]
    if missing:
        raise CommandError(f"{args.command} needs {', '.join(missing)}")


def _num_classes(samples) -> int:
    return max(s.label for s in samples) + 1


def _load_model(path, config) -> T.TwoStreamModel:
    return T.model_from_state(load_checkpoint(path), config)


def _prepare(samples, topology, model: T.TwoStreamModel | None, stream: str):
    glimpse = model.group("rgb.glimpse.") if model is not None and stream != "pose" else None
    if stream != "pose" and not glimpse:
        raise CommandError(f"stream {stream!r} needs an RGB checkpoint (no glimpse parameters found)")
    return T.prepare(samples, topology, glimpse)


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, out: Path):
    config, data_keys = _config(args)
    spec = apply_overrides(SyntheticSpec(seed=config.seed, patch_side=config.patch_side, topology=config.topology), data_keys)
    topology = load_topology(spec.topology)
    samples = list(iter_samples(spec))
    train, test = T.split_train_test(samples, spec.classes)
    for name, part in (("train", train), ("test", test)):
        manifest = save_dataset(out / name, part, topology)
        print(manifest)
    (out / "spec.txt").write_text(to_text(spec))


def cmd_train(args, out: Path):
    _require(args, "data", "stage")
    config, _ = _config(args)
    samples, topology = load_dataset(args.data)
    if config.stage == "pose":
        model = T.new_model(config, _num_classes(samples), topology)
    elif config.stage == "rgb":
        if args.checkpoint is None:
            raise CommandError("the rgb stage requires a trained pose checkpoint (--checkpoint)")
        model = _load_model(args.checkpoint, config)
        T.ensure_rgb(model, config.variant)
    else:
        raise CommandError(f"train runs the pose or rgb stage, not {config.stage!r}")
    items = _prepare(samples, topology, model, "pose" if config.stage == "pose" else "rgb")
    result = T.train_stage(items, model, config.stage)
    save_checkpoint(out / f"{config.stage}.ckpt", model.state_dict())
    (out / f"{config.stage}.log").write_text("\n".join(result.log) + "\n")
    (out / "config.txt").write_text(to_text(config))
    print(f"{config.stage}: {result.steps} steps, best validation accuracy {result.best_val_acc:.4f}")


def cmd_eval(args, out: Path):
    _require(args, "data", "checkpoint")
    config, _ = _config(args)
    samples, topology = load_dataset(args.data)
    model = _load_model(args.checkpoint, config)
    items = _prepare(samples, topology, model, config.stream)
    report = T.evaluate(items, model, config.stream)
    (out / "report.json").write_text(report.to_text() + "\n")
    print(f"{config.stream} accuracy {report.accuracy:.4f} on {report.total} videos")


def _split_dirs(data: str) -> tuple[Path, Path]:
    root = Path(data)
    train, test = root / "train" / "manifest.txt", root / "test" / "manifest.txt"
    if not (train.exists() and test.exists()):
        raise CommandError(f"{root} is not a gen-data directory (needs train/ and test/ manifests)")
    return train, test


def cmd_ablate(args, out: Path):
    _require(args, "data")
    config, _ = _config(args)
    train_path, test_path = _split_dirs(args.data)
    train_samples, topology = load_dataset(train_path)
    test_samples, _ = load_dataset(test_path)
    classes = _num_classes(train_samples)
    holder = T.TwoStreamModel(config, classes, T.tour_for(config, topology))
    T.pretrain_glimpse(holder)
    glimpse = holder.group("rgb.glimpse.")
    results = T.run_ablation_matrix(
        T.prepare(train_samples, topology, glimpse),
        T.prepare(test_samples, topology, glimpse),
        config,
        topology,
        classes,
        glimpse,
    )
    table = T.format_ablation(results)
    (out / "ablation.tsv").write_text(table)
    print(table, end="")


def _gradcheck_groups(seed: int, steps: int = 8) -> dict[str, float]:
    """Tiny two-stream model; max relative error per parameter group.

    Analytic gradients run at 64-bit. The finite-difference oracle replays the
    same values in extended precision, since float64 rounding in the loss
    (~1e-16 / step) is comparable to the smallest gradient entries.
    """
    rng = np.random.default_rng(seed)
    hands, d_g = 4, 5
    pshape = PoseNetShape(steps, 24, 4, 8, 16, 3)
    rshape = RgbShape(steps, hands, 16, 3, patch_side=8, glimpse_c1=2, glimpse_c2=3, d_g=d_g, d_h=4, d_u=4,
                      att_hidden=6, tatt_hidden=7)
    params = init_pose_params(pshape, rng, np.float64)
    params.update(init_rgb_params(rshape, rng, np.float64))
    params.update(init_glimpse_params(rshape, rng, np.float64))
    for p in params.values():  # move biases off zero so every path carries gradient
        p.data += rng.normal(scale=0.1, size=p.shape)
    x = rng.normal(size=(2, steps, 24, 3))
    patches = rng.uniform(size=(2 * steps * hands, 8, 8, 3))
    labels = [0, 2]

    def loss(ps, dtype):
        s = pose_forward(Array(x.astype(dtype)), ps)
        feats = glimpse_features(Array(patches.astype(dtype)), ps)
        v = ad.transpose(ad.reshape(feats, (2, steps, hands, d_g)), (0, 1, 3, 2))
        rgb, _ = rgb_forward(v, s, ps, "full")
        return ad.cross_entropy(T.fuse_logits(pose_classify(s, ps), rgb), labels)

    names = list(params)
    with Tape():
        analytic = ad.backward(loss(params, np.float64), [params[n] for n in names])
    wide = {n: Array(p.data.astype(np.longdouble)) for n, p in params.items()}
    numeric = finite_difference_gradient(lambda: loss(wide, np.longdouble).data[()], [wide[n].data for n in names])
    groups: dict[str, float] = {}
    for n, a, g in zip(names, analytic, numeric):
        group = n.rsplit(".", 1)[0]
        groups[group] = max(groups.get(group, 0.0), relative_error(a, g))
    return groups


def cmd_gradcheck(args, out: Path):
    if args.scale != "desk":
        raise CommandError("gradcheck runs at --scale desk; finite differences over the full model are infeasible")
    groups = _gradcheck_groups(args.seed or 0)
    lines = [f"{g}\t{e:.3e}" for g, e in groups.items()]
    worst = max(groups.values())
    lines.append(f"max\t{worst:.3e}")
    (out / "gradcheck.tsv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    if not worst < 1e-4:
        raise CommandError(f"gradient check failed: max relative error {worst:.3e} >= 1e-4")


def _remap(samples, data_topology, model_topology, joint_map):
    for s in samples:
        s.skeleton = remap_topology(s.skeleton, data_topology, model_topology, joint_map)
    return samples


def cmd_transfer(args, out: Path):
    _require(args, "data", "source_checkpoint")
    config, _ = _config(args)
    source = _load_model(args.source_checkpoint, config)
    train_path, test_path = _split_dirs(args.data)
    train_samples, data_topology = load_dataset(train_path)
    test_samples, _ = load_dataset(test_path)
    model_topology = load_topology(config.topology)
    if args.joint_map is not None:
        joint_map = parse_joint_map(Path(args.joint_map).read_text())
        train_samples = _remap(train_samples, data_topology, model_topology, joint_map)
        test_samples = _remap(test_samples, data_topology, model_topology, joint_map)
    elif data_topology.names != model_topology.names:
        raise CommandError("target topology differs from the source model's; pass --joint-map")
    classes = _num_classes(train_samples)
    stream = "fused" if source.has("rgb.lstm.") else "pose"
    train_items = _prepare(train_samples, model_topology, source, stream)
    test_items = _prepare(test_samples, model_topology, source, stream)
    tuned, lines = T.transfer_finetune(source, train_items, classes, config)
    scratch = T.new_model(config, classes, model_topology)
    T.train_stage(train_items, scratch, "pose")
    if stream != "pose":
        # same frozen glimpse sensor, so the comparison isolates the transferred weights
        scratch.params.update({k: Array(v.data.copy(), True, k) for k, v in source.group("rgb.glimpse.").items()})
        T.ensure_rgb(scratch, source.variant)
        T.train_stage(train_items, scratch, "rgb")
    rep_t = T.evaluate(test_items, tuned, stream)
    rep_s = T.evaluate(test_items, scratch, stream)
    save_checkpoint(out / "transfer.ckpt", tuned.state_dict())
    (out / "transfer.log").write_text("\n".join(lines) + "\n")
    (out / "report.txt").write_text(
        f"finetuned\t{rep_t.accuracy:.4f}\nscratch\t{rep_s.accuracy:.4f}\n"
        f"# finetuned\n{rep_t.to_text()}\n# scratch\n{rep_s.to_text()}\n"
    )
    print(f"finetuned {rep_t.accuracy:.4f} scratch {rep_s.accuracy:.4f}")


def cmd_export_trace(args, out: Path):
    _require(args, "data", "checkpoint")
    config, _ = _config(args)
    samples, topology = load_dataset(args.data)
    model = _load_model(args.checkpoint, config)
    if not model.has("rgb.lstm."):
        raise CommandError("export-trace needs an RGB checkpoint")
    items = _prepare(samples, topology, model, "rgb")
    records = []
    for it in items:
        frames = sample_subsequence(it.num_frames, config.seq_len, T._video_rng(config.seed, it.id, 17))
        trace: list = []
        _, logits = T._stream_logits(model, [it], [frames], "rgb", trace=trace)
        records += trace_records([it.id], trace[0], logits.data.argmax(1), [it.label])
    write_trace(out / "trace.jsonl", records)
    print(f"wrote {len(records)} attention records")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "transfer": cmd_transfer,
    "export-trace": cmd_export_trace,
}

HELP = {
    "gen-data": "generate the synthetic benchmark (train/ and test/ manifests)",
    "train": "train the pose stage, or the rgb stage on top of a pose checkpoint",
    "eval": "evaluate a checkpoint with sub-sequence logit averaging",
    "ablate": "run the ablation matrix on a gen-data directory",
    "gradcheck": "finite-difference check of every parameter group",
    "transfer": "finetune a source checkpoint on a target gen-data directory",
    "export-trace": "write per-video attention records",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file (data.* keys configure the generator)")
    common.add_argument("--seed", type=int, help="random seed for data, initialisation and sampling")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--stage", choices=[s for s in STAGES if s != "fused-eval"], help="training stage")
    common.add_argument("--variant", choices=VARIANTS, help="RGB stream variant")
    common.add_argument("--stream", choices=STREAMS, help="stream to evaluate")
    common.add_argument("--joint-order", choices=JOINT_ORDERS, help="joint ordering of the pose tensor")
    common.add_argument("--scale", choices=("desk", "full"), default="desk", help="configuration preset")
    common.add_argument("--data", help="dataset manifest, or a gen-data directory for ablate/transfer")
    common.add_argument("--checkpoint", help="model checkpoint to continue from or evaluate")
    common.add_argument("--source-checkpoint", help="pretrained checkpoint for transfer")
    common.add_argument("--joint-map", help="target-to-source joint map file for transfer")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser = argparse.ArgumentParser(prog="poseattn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HELP[name], description=HELP[name])
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    out = Path(args.out)
    existed = out.exists()
    before = {p for p in out.rglob("*")} if existed else set()
    try:
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, out)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one diagnostic line
        if not existed:
            shutil.rmtree(out, ignore_errors=True)
        else:
            for p in sorted(set(out.rglob("*")) - before, reverse=True):
                p.rmdir() if p.is_dir() else p.unlink()
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {message}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
