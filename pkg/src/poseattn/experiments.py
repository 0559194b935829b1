"""Multi-seed experiment drivers behind ``scripts/`` and the acceptance suite."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import train as T
from .autodiff import Array
from .config import TrainConfig, apply_overrides
from .datagen import SyntheticSpec, iter_samples
from .skeleton import load_topology

log = logging.getLogger(__name__)


@dataclass
class AblationSummary:
    seeds: list[int]
    rows: list[str]
    accuracy: dict[str, list[float]] = field(default_factory=dict)  # row label -> per-seed accuracy
    localization: list[float] = field(default_factory=list)

    def mean(self, prefix: str) -> float:
        """Mean accuracy of the row whose label starts with ``prefix + ' '``."""
        (label,) = [r for r in self.rows if r.split()[0] == prefix]
        return float(np.mean(self.accuracy[label]))

    def to_text(self) -> str:
        lines = ["row\tmean_accuracy\tper_seed"]
        for r in self.rows:
            accs = self.accuracy[r]
            lines.append(f"{r}\t{np.mean(accs):.4f}\t{','.join(f'{a:.4f}' for a in accs)}")
        locs = self.localization
        lines.append(f"attention localization\t{np.mean(locs):.4f}\t{','.join(f'{a:.4f}' for a in locs)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def load(cls, path: Path) -> "AblationSummary":
        return cls(**json.loads(Path(path).read_text()))


def _save(obj, path: Path) -> None:
    path.write_text(json.dumps(dataclasses.asdict(obj), indent=1))


def ablation_seeds(
    seeds, config: TrainConfig, data_keys: dict[str, str] | None = None, out: Path | None = None
) -> AblationSummary:
    """Fresh data, glimpse sensor and models per seed; every ablation row evaluated on the seed's test half."""
    summary = AblationSummary(list(seeds), [r.label for r in T.ABLATION_ROWS])
    for r in summary.rows:
        summary.accuracy[r] = []
    for seed in seeds:
        t0 = time.time()
        cfg = config.replace(seed=seed)
        spec = apply_overrides(SyntheticSpec(seed=seed), data_keys or {})
        bench = T.build_benchmark(spec, cfg)
        models: dict = {}
        results = T.run_ablation_matrix(
            bench.train, bench.test, cfg, bench.topology, bench.classes, bench.glimpse, models_out=models
        )
        loc = T.attention_localization(models[("rgb", "full")], bench.test)
        for row, rep in results:
            summary.accuracy[row.label].append(rep.accuracy)
        summary.localization.append(loc)
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / f"seed{seed}.tsv").write_text(T.format_ablation(results) + f"# localization\t{loc:.4f}\n")
            (out / "summary.tsv").write_text(summary.to_text())
            _save(summary, out / "summary.json")
        log.info("ablation seed %d done in %.0fs", seed, time.time() - t0)
    return summary


# ---------------------------------------------------------------- transfer


def fit_two_stream(config: TrainConfig, topology, items, classes: int, glimpse) -> T.TwoStreamModel:
    model = T.new_model(config, classes, topology)
    T.train_stage(items, model, "pose")
    model.params.update({k: Array(v.data.copy(), True, k) for k, v in glimpse.items()})
    T.ensure_rgb(model, config.variant)
    T.train_stage(items, model, "rgb")
    return model


def stream_accuracies(model: T.TwoStreamModel, items) -> dict[str, float]:
    pose, rgb = T.video_logits(model, items, "fused")
    y = np.array([it.label for it in items])
    return {s: float((T.stream_scores(pose, rgb, s).argmax(1) == y).mean()) for s in ("pose", "rgb", "fused")}


@dataclass
class TransferSummary:
    seeds: list[int]
    finetuned: list[dict[str, float]] = field(default_factory=list)
    scratch: list[dict[str, float]] = field(default_factory=list)

    def mean(self, which: str, stream: str = "fused") -> float:
        return float(np.mean([d[stream] for d in getattr(self, which)]))

    def to_text(self) -> str:
        lines = ["seed\tstream\tfinetuned\tscratch"]
        for seed, t, s in zip(self.seeds, self.finetuned, self.scratch):
            lines += [f"{seed}\t{k}\t{t[k]:.4f}\t{s[k]:.4f}" for k in t]
        if self.finetuned:
            for k in self.finetuned[0]:
                lines.append(f"mean\t{k}\t{self.mean('finetuned', k):.4f}\t{self.mean('scratch', k):.4f}")
        return "\n".join(lines) + "\n"

    @classmethod
    def load(cls, path: Path) -> "TransferSummary":
        return cls(**json.loads(Path(path).read_text()))


def transfer_seeds(
    seeds,
    config: TrainConfig,
    data_keys: dict[str, str] | None = None,
    source_videos: int = 2000,
    target_videos: int = 160,
    source_epochs: int = 20,
    source_seed: int = 0,
    out: Path | None = None,
) -> TransferSummary:
    """One source model pretrained on ``source_videos`` streamed videos, then for each seed a fresh
    disjoint target set: finetune at lr / divisor versus training from scratch with the same sensor."""
    base_spec = apply_overrides(SyntheticSpec(), data_keys or {})
    topology = load_topology(base_spec.topology)
    classes = base_spec.classes
    src_cfg = config.replace(seed=source_seed, max_epochs=source_epochs, min_epochs=min(config.min_epochs, source_epochs))
    holder = T.TwoStreamModel(src_cfg, classes, T.tour_for(src_cfg, topology))
    T.pretrain_glimpse(holder)
    glimpse = holder.group("rgb.glimpse.")
    # generator seeds 1000+ (source) and 2000+ (targets) keep the sets disjoint
    source_spec = apply_overrides(
        base_spec, {"videos_per_class": str(source_videos // classes), "seed": str(1000 + source_seed)}
    )
    t0 = time.time()
    source_items = T.prepare(iter_samples(source_spec), topology, glimpse)
    source = fit_two_stream(src_cfg, topology, source_items, classes, glimpse)
    del source_items
    log.info("source model on %d videos in %.0fs", source_videos, time.time() - t0)
    summary = TransferSummary(list(seeds))
    for seed in seeds:
        cfg = config.replace(seed=seed)
        target_spec = apply_overrides(
            base_spec, {"videos_per_class": str(target_videos // classes), "seed": str(2000 + seed)}
        )
        train, test = T.split_train_test(T.prepare(iter_samples(target_spec), topology, glimpse), classes)
        tuned, _ = T.transfer_finetune(source, train, classes, cfg)
        scratch = fit_two_stream(cfg, topology, train, classes, glimpse)
        summary.finetuned.append(stream_accuracies(tuned, test))
        summary.scratch.append(stream_accuracies(scratch, test))
        log.info("transfer seed %d: finetuned %s scratch %s", seed, summary.finetuned[-1], summary.scratch[-1])
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            (out / "transfer.tsv").write_text(summary.to_text())
            _save(summary, out / "transfer.json")
    return summary
