"""Experiment configs, single runs, ablation sweeps and run comparison."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import data as D
from .cam import cam_batch, export_heatmap
from .model import MiniCNN, save_checkpoint
from .regularizers import ReplaceBlock, ReplaceBlockConfig, build_regularizer
from .tensor import upsample_nearest
from .train import SGD, TrainConfig, train_epoch

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "train_loss", "train_top1", "test_top1", "lr")
PROBE_COUNT = 8


@dataclass
class DatasetSpec:
    """``kind`` is cifar10, mnist or synthetic; sizes of 0 mean "use everything"."""

    kind: str = "cifar10"
    dir: str = "data/cifar-10-batches-bin"
    subset_size: int = 5000
    test_subset_size: int = 1000


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    regularizer: dict = field(default_factory=lambda: {"kind": "none"})
    replace_block: ReplaceBlockConfig = field(default_factory=ReplaceBlockConfig)
    out_dir: str = "runs/default"
    eval_every: int = 1
    widths: tuple[int, int, int] = (32, 64, 128)
    normalization: dict | None = None  # filled in from the training split at run time

    @property
    def seed(self) -> int:
        return self.train.seed

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        d = copy.deepcopy(d)
        kwargs = dict(d)
        if "dataset" in d:
            kwargs["dataset"] = DatasetSpec(**d["dataset"])
        if "train" in d:
            kwargs["train"] = TrainConfig(**d["train"])
        if "replace_block" in d:
            kwargs["replace_block"] = ReplaceBlockConfig(**d["replace_block"])
        if "widths" in d:
            kwargs["widths"] = tuple(d["widths"])
        return cls(**kwargs)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text())

    def build_regularizer(self):
        if self.regularizer.get("kind") == "replace_block":
            extra = {k: v for k, v in self.regularizer.items() if k != "kind"}
            return ReplaceBlock(ReplaceBlockConfig(**{**asdict(self.replace_block), **extra}))
        return build_regularizer(self.regularizer)


# -- data --------------------------------------------------------------------


def load_dataset(spec: DatasetSpec, seed: int = 0) -> tuple[D.Dataset, D.Dataset]:
    if spec.kind == "cifar10":
        train, test = D.load_cifar10(spec.dir)
    elif spec.kind == "mnist":
        d = Path(spec.dir)
        train = D.load_mnist_idx(_find(d, "train-images"), _find(d, "train-labels"))
        test = D.load_mnist_idx(_find(d, "t10k-images"), _find(d, "t10k-labels"))
    elif spec.kind == "synthetic":
        train, test = D.synthetic_cifar(spec.subset_size or 5000, spec.test_subset_size or 1000, seed)
    else:
        raise D.DatasetError(f"unknown dataset kind {spec.kind!r}")
    if spec.subset_size:
        train = D.balanced_subset(train, spec.subset_size)
    if spec.test_subset_size:
        test = D.balanced_subset(test, spec.test_subset_size)
    return train, test


def _find(directory: Path, prefix: str) -> Path:
    hits = sorted(directory.glob(prefix + "*")) if directory.is_dir() else []
    if not hits:
        raise D.DatasetError(f"{directory}: no file starting with {prefix!r}")
    return hits[0]


# -- single run ----------------------------------------------------------------


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_heatmaps(model: MiniCNN, x_probe, y_probe, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    f3 = model.forward_backbone(x_probe)[1]
    maps = cam_batch(f3, model.classifier_weights, y_probe)
    for i, m in enumerate(maps):
        export_heatmap(upsample_nearest(m, x_probe.shape[2], x_probe.shape[3]), directory / f"probe{i}.pgm")


def run_experiment(config: ExperimentConfig) -> Path:
    """Train one model and write metrics.csv, config.json, model.ckpt and heatmaps/.

    Raises :class:`~replaceblock.data.DatasetError` for missing/invalid data
    and ``OSError`` for an unwritable output directory.
    """
    out = Path(config.out_dir)
    train_ds, test_ds = load_dataset(config.dataset, config.seed)
    out.mkdir(parents=True, exist_ok=True)
    stats = D.NormStats.from_dataset(train_ds)
    config = copy.deepcopy(config)
    config.normalization = {"mean": list(stats.mean), "std": list(stats.std)}
    (out / "config.json").write_text(config.to_json() + "\n")

    tc = config.train
    model = MiniCNN(train_ds.num_classes, train_ds.images.shape[1], config.widths, seed=tc.seed)
    regularizer = config.build_regularizer()
    batches = D.BatchIterator(train_ds, tc.batch_size, tc.seed, stats, augment=True)
    optimizer = SGD(tc.lr0, tc.momentum, tc.weight_decay, total_steps=tc.epochs * len(batches))
    x_test = D.normalize(test_ds.pixels(), stats).astype(np.float32)
    test_set = (x_test, test_ds.labels)
    probe = (x_test[:PROBE_COUNT], test_ds.labels[:PROBE_COUNT])

    log.info("run %s: %d train / %d test, regularizer=%s", out, len(train_ds), len(test_ds),
             regularizer.describe())
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for epoch in range(1, tc.epochs + 1):
            evaluate_now = epoch % config.eval_every == 0 or epoch == tc.epochs
            rec = train_epoch(model, batches.epoch(epoch), optimizer, regularizer, tc.seed, epoch,
                              test_set if evaluate_now else None)
            test_cell = _fmt(rec.test_top1) if evaluate_now else ""
            writer.writerow([rec.epoch, _fmt(rec.train_loss), _fmt(rec.train_top1), test_cell, _fmt(rec.lr)])
            fh.flush()
            if evaluate_now:
                _write_heatmaps(model, *probe, out / "heatmaps" / f"epoch{epoch:03d}")
            log.info("epoch %d loss %.4f train %.2f%% test %s", epoch, rec.train_loss, rec.train_top1,
                     test_cell or "-")
    save_checkpoint(model, out / "model.ckpt")
    return out


# -- comparison ----------------------------------------------------------------


@dataclass
class RunSummary:
    name: str
    path: str
    final_top1: float
    best_top1: float
    delta_final: float = 0.0
    delta_best: float = 0.0


def read_metrics(run_dir) -> list[dict]:
    with open(Path(run_dir) / "metrics.csv", newline="") as fh:
        return list(csv.DictReader(fh))


def summarize_run(run_dir) -> RunSummary | None:
    """None when the run is incomplete (missing files or fewer rows than epochs)."""
    run_dir = Path(run_dir)
    try:
        cfg = ExperimentConfig.load(run_dir / "config.json")
        rows = read_metrics(run_dir)
    except (OSError, ValueError, KeyError):
        return None
    tops = [float(r["test_top1"]) for r in rows if r.get("test_top1")]
    if len(rows) < cfg.train.epochs or not tops or not rows[-1].get("test_top1"):
        return None
    return RunSummary(run_dir.name, str(run_dir), tops[-1], max(tops))


def compare_runs(dirs) -> tuple[list[RunSummary], list[str]]:
    """Summaries of completed runs (deltas against the first) and the skipped dirs."""
    done, skipped = [], []
    for d in dirs:
        s = summarize_run(d)
        (done if s else skipped).append(s or str(d))
    if len(done) < 2:
        raise ValueError(f"need at least two completed runs, got {len(done)} (incomplete: {skipped})")
    ref = done[0]
    for s in done:
        s.delta_final = s.final_top1 - ref.final_top1
        s.delta_best = s.best_top1 - ref.best_top1
    return done, skipped


def format_summary(summaries: list[RunSummary], skipped: list[str] = ()) -> str:
    width = max(len(s.name) for s in summaries)
    lines = [f"{'run':<{width}}  final_top1  best_top1  delta_final  delta_best"]
    for s in summaries:
        lines.append(
            f"{s.name:<{width}}  {s.final_top1:10.2f}  {s.best_top1:9.2f}  {s.delta_final:+11.2f}  {s.delta_best:+10.2f}"
        )
    for d in skipped:
        lines.append(f"[incomplete, excluded] {d}")
    return "\n".join(lines)


def summary_csv(summaries: list[RunSummary]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["run", "path", "final_top1", "best_top1", "delta_final", "delta_best"])
    for s in summaries:
        writer.writerow([s.name, s.path, _fmt(s.final_top1), _fmt(s.best_top1),
                         _fmt(s.delta_final), _fmt(s.delta_best)])
    return buf.getvalue()


# -- ablation presets ------------------------------------------------------------


def _rb(**overrides) -> dict:
    return {"kind": "replace_block", **overrides}


PRESETS: dict[str, dict[str, dict]] = {
    "threshold-sweep": {
        "cam05": _rb(threshold_ratio=0.05),
        "cam20": _rb(threshold_ratio=0.20),
        "cam60": _rb(threshold_ratio=0.60),
    },
    "sampling-ablation": {
        "rr_sm": _rb(sampling_mode="rr_sm"),
        "random": _rb(sampling_mode="uniform"),
    },
    "schedule-ablation": {
        "all_time": _rb(schedule="all_time"),
        "alternate": _rb(schedule="alternate"),
    },
    "baseline-grid": {
        "baseline": {"kind": "none"},
        "dropout": {"kind": "dropout", "keep_prob": 0.7},
        "spatial_dropout": {"kind": "spatial_dropout", "keep_prob": 0.9},
        "cutout": {"kind": "cutout", "size": 8},
        "drop_block": {"kind": "drop_block", "keep_prob": 0.9, "block_size": 3},
        "replace_block": _rb(),
    },
}


def preset_configs(preset: str, base: ExperimentConfig, out_root) -> list[ExperimentConfig]:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    configs = []
    for name, reg in PRESETS[preset].items():
        cfg = copy.deepcopy(base)
        cfg.regularizer = {"kind": reg["kind"]} if reg["kind"] == "replace_block" else dict(reg)
        if reg["kind"] == "replace_block":
            rb = {**asdict(base.replace_block), **{k: v for k, v in reg.items() if k != "kind"}}
            cfg.replace_block = ReplaceBlockConfig(**rb)
        cfg.out_dir = str(Path(out_root) / name)
        configs.append(cfg)
    return configs


def _run_quiet(cfg: ExperimentConfig) -> str:
    return str(run_experiment(cfg))


def run_sweep(preset: str, base: ExperimentConfig, out_root, jobs: int = 1) -> list[Path]:
    configs = preset_configs(preset, base, out_root)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            dirs = [Path(p) for p in pool.map(_run_quiet, configs)]
    else:
        dirs = [run_experiment(c) for c in configs]
    summaries, skipped = compare_runs(dirs)
    root = Path(out_root)
    (root / "summary.txt").write_text(format_summary(summaries, skipped) + "\n")
    (root / "summary.csv").write_text(summary_csv(summaries))
    return dirs
