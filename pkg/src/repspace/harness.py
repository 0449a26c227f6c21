"""Run drivers behind the command-line interface.

Every driver writes into its own output directory and leaves a manifest from
which the run can be reproduced exactly.  Nothing time-dependent is written,
so deterministic runs are byte-identical.
"""

from __future__ import annotations

import hashlib
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from repspace import config as cfgmod
from repspace import contrastive, evaluation, synthetic
from repspace.config import RunConfig
from repspace.contrastive import STATS_COLUMNS, Model
from repspace.embio import (
    LabelVector, read_labels, read_manifest, read_raw, write_csv_rows, write_labels, write_manifest, write_raw,
)
from repspace.metrics import REPORT_COLUMNS, MetricsReport, render_table

log = logging.getLogger(__name__)

CHECKPOINT = "checkpoint.rlns"
SMALL_ENCODER = (16, 8)
LARGE_ENCODER = (256, 64)


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --- presets --------------------------------------------------------------------

def small_preset(**train_overrides) -> RunConfig:
    """Capacity-limited encoder on the default shortcut dataset, baseline augmentation."""
    return RunConfig(train=replace(contrastive.TrainConfig(encoder_widths=SMALL_ENCODER), **train_overrides))


def large_preset(**train_overrides) -> RunConfig:
    """Same as ``small_preset`` except for encoder widths."""
    return RunConfig(train=replace(contrastive.TrainConfig(encoder_widths=LARGE_ENCODER), **train_overrides))


PROJECTOR_VARIANTS = ("baseline", "deeper", "wider", "wider-out", "dropout")


def projector_variant(name: str, hidden: int = 64, out: int = 32) -> tuple[tuple[int, ...], float]:
    """Projector widths and dropout for the named head variant.

    ``baseline`` is one hidden layer; ``deeper`` adds a second; ``wider``
    doubles the hidden width; ``wider-out`` doubles the output width;
    ``dropout`` keeps the baseline shape with p = 0.5 after the hidden layer.
    """
    table = {
        "baseline": ((hidden, out), 0.0),
        "deeper": ((hidden, hidden, out), 0.0),
        "wider": ((2 * hidden, out), 0.0),
        "wider-out": ((hidden, 2 * out), 0.0),
        "dropout": ((hidden, out), 0.5),
    }
    if name not in table:
        raise ValueError(f"unknown projector variant {name!r}; known: {PROJECTOR_VARIANTS}")
    return table[name]


# --- datasets on disk -------------------------------------------------------------

def write_dataset(spec: synthetic.DatasetSpec, directory) -> Path:
    """Both splits as RAW1/LBL1 files plus ``dataset.manifest``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {f"spec.{f.name}": repr(getattr(spec, f.name)) for f in fields(spec)}
    for split in ("train", "val"):
        ds = synthetic.generate(spec, split)
        write_raw(ds.features, directory / f"{split}.raw")
        write_labels(LabelVector(ds.labels), directory / f"{split}.lbl")
        entries[f"{split}.features"] = f"{split}.raw"
        entries[f"{split}.labels"] = f"{split}.lbl"
        entries[f"{split}.n"] = len(ds)
    path = directory / "dataset.manifest"
    write_manifest(entries, path)
    return path


def load_dataset(manifest_path) -> tuple[synthetic.Dataset, synthetic.Dataset]:
    """Regenerate both splits from the recorded spec and check them against the stored files."""
    manifest_path = Path(manifest_path)
    man = read_manifest(manifest_path)
    defaults = synthetic.DatasetSpec()
    kw = {}
    for f in fields(defaults):
        key = f"spec.{f.name}"
        if key not in man:
            raise ValueError(f"{manifest_path}: missing {key}")
        kw[f.name] = type(getattr(defaults, f.name))(man[key])
    spec = synthetic.DatasetSpec(**kw)
    splits = []
    for split in ("train", "val"):
        ds = synthetic.generate(spec, split)
        feats = read_raw(manifest_path.parent / man[f"{split}.features"])
        labels = read_labels(manifest_path.parent / man[f"{split}.labels"])
        if not (np.array_equal(feats, ds.features) and np.array_equal(labels.labels, ds.labels)):
            raise ValueError(f"{manifest_path}: stored {split} split does not match its spec")
        splits.append(ds)
    return splits[0], splits[1]


def _manifest_entries(config: RunConfig) -> dict:
    return dict(cfgmod.parse_kv(cfgmod.render(config)))


def write_stats(stats: list[contrastive.EpochStats], path) -> None:
    write_csv_rows(path, list(STATS_COLUMNS),
                   [[s.epoch, repr(s.loss), repr(s.batch_inst_disc), repr(s.lr)] for s in stats])


# --- train ------------------------------------------------------------------------

def resolve_init(config: RunConfig) -> Model | None:
    if config.train.init == "random":
        return None
    return Model.load(config.train.init)


def run_train(config: RunConfig, out_dir=None) -> tuple[Model, Path]:
    config.validate()
    out = Path(out_dir or config.out)
    out.mkdir(parents=True, exist_ok=True)
    train_ds = synthetic.generate(config.data, "train")
    every = config.train.snapshot_every
    snapshots = []

    def snapshot(done: int, model: Model) -> None:
        if every and done % every == 0 and done < config.train.epochs:
            name = f"checkpoint-epoch{done:04d}.rlns"
            model.save(out / name)
            snapshots.append(name)

    result = contrastive.train(train_ds, config.train, config.seed, init=resolve_init(config),
                               deterministic=config.deterministic, on_epoch=snapshot)
    result.model.save(out / CHECKPOINT)
    write_stats(result.stats, out / "stats.csv")
    dataset_manifest = write_dataset(config.data, out / "dataset")
    entries = _manifest_entries(config)
    entries.update({"checkpoint": CHECKPOINT, "checkpoint.sha256": sha256_file(out / CHECKPOINT),
                    "stats": "stats.csv", "dataset": str(dataset_manifest.relative_to(out))})
    for name in snapshots:
        entries[f"snapshot.{name}.sha256"] = sha256_file(out / name)
    write_manifest(entries, out / "train.manifest")
    (out / "config.cfg").write_text(cfgmod.render(config), encoding="utf-8")
    return result.model, out


# --- evaluate ---------------------------------------------------------------------

def write_report(ev: evaluation.Evaluation, out: Path, labels: np.ndarray) -> None:
    write_csv_rows(out / "metrics.csv", list(REPORT_COLUMNS), [ev.report.csv_row()])
    (out / "metrics.md").write_text(render_table([ev.report]) + "\n", encoding="utf-8")
    write_csv_rows(out / "pca.csv", ["pc1", "pc2", "label"],
                   [[repr(float(a)), repr(float(b)), int(c)] for (a, b), c in zip(ev.pca, labels)])


def run_evaluate(checkpoint, dataset_manifest, settings: evaluation.EvalSettings, out_dir,
                 key: str = "") -> MetricsReport:
    errs = settings.errors()
    if errs:
        raise cfgmod.ConfigError([f"eval.{e}" for e in errs])
    model = Model.load(checkpoint)
    train_ds, val_ds = load_dataset(dataset_manifest)
    if model.in_width != train_ds.dim:
        raise ValueError(f"checkpoint input width {model.in_width} != dataset dim {train_ds.dim}")
    ev = evaluation.evaluate(model, train_ds, val_ds, settings, key=key)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_report(ev, out, ev.embedded.labels.labels)
    entries = {f"eval.{f.name}": repr(getattr(settings, f.name)) if isinstance(getattr(settings, f.name), float)
               else getattr(settings, f.name) for f in fields(settings)}
    entries.update({"checkpoint.sha256": sha256_file(checkpoint), "dataset": str(Path(dataset_manifest).resolve()),
                    "metrics": "metrics.csv", "table": "metrics.md", "pca": "pca.csv"})
    write_manifest(entries, out / "evaluate.manifest")
    return ev.report


def train_and_evaluate(config: RunConfig, key: str = "") -> tuple[Model, MetricsReport]:
    """In-memory train + evaluate, no files."""
    config.validate()
    train_ds = synthetic.generate(config.data, "train")
    val_ds = synthetic.generate(config.data, "val")
    result = contrastive.train(train_ds, config.train, config.seed, init=resolve_init(config),
                               deterministic=config.deterministic)
    return result.model, evaluation.evaluate(result.model, train_ds, val_ds, config.eval, key).report


# --- sweep ------------------------------------------------------------------------

SWEEP_COLUMNS = REPORT_COLUMNS + ("seed", "status")


def _run_point(args) -> tuple[str, int, MetricsReport | None, str]:
    key, config, point_dir = args
    try:
        model, out = run_train(config, point_dir)
        report = run_evaluate(out / CHECKPOINT, out / "dataset" / "dataset.manifest", config.eval,
                              out / "eval", key=key)
        return key, config.seed, report, "ok"
    except Exception as exc:  # a failed point becomes a failed row
        log.error("sweep point %s failed: %s", key, exc)
        (Path(point_dir) / "error.txt").write_text(traceback.format_exc(), encoding="utf-8")
        return key, config.seed, None, f"failed: {type(exc).__name__}: {exc}".replace("\n", " ")


@dataclass(frozen=True)
class SweepResult:
    rows: list[tuple[str, int, MetricsReport | None, str]]

    @property
    def n_failed(self) -> int:
        return sum(1 for r in self.rows if r[2] is None)


def run_sweep(grid: cfgmod.SweepGrid, out_dir, workers: int = 1) -> SweepResult:
    points = grid.points()  # raises before any run when over the cap
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = []
    for i, (key, config) in enumerate(points):
        point_dir = out / f"point-{i:03d}"
        point_dir.mkdir(parents=True, exist_ok=True)
        jobs.append((key, config, point_dir))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_point, jobs))
    else:
        rows = [_run_point(job) for job in jobs]
    csv_rows = []
    for key, seed, report, status in rows:
        metrics_cells = report.csv_row() if report else [key] + [""] * (len(REPORT_COLUMNS) - 1)
        csv_rows.append(metrics_cells + [str(seed), status])
    write_csv_rows(out / "sweep.csv", list(SWEEP_COLUMNS), csv_rows)
    reports = [r for _, _, r, _ in rows if r is not None]
    table = render_table(reports)
    failed = [f"- {key}: {status}" for key, _, r, status in rows if r is None]
    (out / "sweep.md").write_text(table + ("\n\nFailed points:\n" + "\n".join(failed) if failed else "") + "\n",
                                  encoding="utf-8")
    entries = _manifest_entries(grid.base)
    entries.update({f"sweep.{name}": " | ".join(values) for name, values in grid.axes})
    entries["sweep.cap"] = grid.cap
    for i, (key, config) in enumerate(points):
        entries[f"point.{i:03d}"] = f"{key} @ seed {config.seed}"
    write_manifest(entries, out / "sweep.manifest")
    return SweepResult(rows)


# --- distillation init --------------------------------------------------------------

def run_distill_init(teacher_path, epochs: int, config: RunConfig, out_dir=None) -> tuple[Model, Path]:
    config.validate()
    out = Path(out_dir or config.out)
    out.mkdir(parents=True, exist_ok=True)
    teacher = Model.load(teacher_path)
    train_ds = synthetic.generate(config.data, "train")
    student = contrastive.distill_init(train_ds, teacher, epochs, config.train, config.seed,
                                       deterministic=config.deterministic)
    student.save(out / CHECKPOINT)
    entries = _manifest_entries(config)
    entries.update({"teacher": str(Path(teacher_path).resolve()), "teacher.sha256": sha256_file(teacher_path),
                    "distill.epochs": epochs, "checkpoint": CHECKPOINT,
                    "checkpoint.sha256": sha256_file(out / CHECKPOINT)})
    write_manifest(entries, out / "distill.manifest")
    return student, out


# --- over-clustering report ---------------------------------------------------------

OVERCLUSTER_COLUMNS = ("inst_disc_top1", "alignment", "intra_class_alignment", "uniformity",
                       "best_nn_top1", "linear_probe_top1")
VERDICT_OVER = "over-clustered"
VERDICT_NONE = "no over-clustering gap"


@dataclass(frozen=True)
class OverclusterReport:
    small: MetricsReport
    large: MetricsReport
    align_band: float
    intra_margin: float

    def deltas(self) -> dict[str, float]:
        return {c: getattr(self.small, c) - getattr(self.large, c) for c in OVERCLUSTER_COLUMNS}

    @property
    def verdict(self) -> str:
        d = self.deltas()
        if abs(d["alignment"]) <= self.align_band and d["intra_class_alignment"] > self.intra_margin:
            return VERDICT_OVER
        return VERDICT_NONE

    def render(self) -> str:
        header = ["model", *OVERCLUSTER_COLUMNS]
        rows = [["small", *(f"{getattr(self.small, c):.4f}" for c in OVERCLUSTER_COLUMNS)],
                ["large", *(f"{getattr(self.large, c):.4f}" for c in OVERCLUSTER_COLUMNS)],
                ["small - large", *(f"{v:+.4f}" for v in self.deltas().values())]]
        widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(header)]
        lines = ["| " + " | ".join(h.ljust(w) for h, w in zip(header, widths)) + " |",
                 "|" + "|".join("-" * (w + 2) for w in widths) + "|"]
        lines += ["| " + " | ".join(v.ljust(w) for v, w in zip(r, widths)) + " |" for r in rows]
        lines.append("")
        lines.append(f"verdict: {self.verdict} (alignment band {self.align_band}, "
                     f"intra-class margin {self.intra_margin})")
        return "\n".join(lines)


def overcluster_report(small: RunConfig, large: RunConfig, align_band: float = 0.1,
                       intra_margin: float = 0.02) -> OverclusterReport:
    _, s = train_and_evaluate(small, "small")
    _, l = train_and_evaluate(large, "large")
    return OverclusterReport(s, l, align_band, intra_margin)


def run_overcluster_report(small: RunConfig, large: RunConfig, out_dir, align_band: float = 0.1,
                           intra_margin: float = 0.02) -> OverclusterReport:
    report = overcluster_report(small, large, align_band, intra_margin)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv_rows(out / "overcluster.csv", list(REPORT_COLUMNS), [report.small.csv_row(), report.large.csv_row()])
    (out / "overcluster.md").write_text(report.render() + "\n", encoding="utf-8")
    (out / "small.cfg").write_text(cfgmod.render(small), encoding="utf-8")
    (out / "large.cfg").write_text(cfgmod.render(large), encoding="utf-8")
    write_manifest({"small": "small.cfg", "large": "large.cfg", "align_band": repr(align_band),
                    "intra_margin": repr(intra_margin), "verdict": report.verdict}, out / "overcluster.manifest")
    return report
