"""Confusion matrices, IoU/mIoU and the cross-domain experiment harness.

Scores are per point: voxel predictions are copied back to every member point.
Source validation uses the last 20% of each source dataset by frame index;
targets are scored on every scan and never seen in training.
"""

from __future__ import annotations

import csv
import glob
import io
import os
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from .bev import BevProjectionConfig
from .core import DEFAULT_VOCAB, IGNORE, PointCloud, load_scan
from .errors import ValidationError
from .net.checkpoint import dumps
from .net.model import ModelConfig, ModelParams, make_batch, predict_batch
from .train import Sample, TrainConfig, prepare_sample, train
from .voxel import unvoxelize_predictions

VARIANTS = ("lidog", "no_bev", "double_head")


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns predictions; IGNORE never counted."""

    counts: np.ndarray

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def accumulate(cm: ConfusionMatrix, pred, gt) -> ConfusionMatrix:
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    gt = np.asarray(gt, dtype=np.int64).reshape(-1)
    if pred.shape != gt.shape:
        raise ValidationError(f"{pred.shape[0]} predictions for {gt.shape[0]} labels")
    k = cm.num_classes
    keep = gt != IGNORE
    if np.any(pred[keep] < 0) or np.any(pred[keep] >= k) or np.any(gt[keep] >= k):
        raise ValidationError("class id outside the confusion matrix")
    add = np.bincount(gt[keep] * k + pred[keep], minlength=k * k).reshape(k, k)
    return ConfusionMatrix(cm.counts + add)


def iou(cm: ConfusionMatrix, c: int) -> Optional[float]:
    """Percentage IoU of class ``c``; ``None`` when the class is absent from gt and predictions."""
    tp = cm.counts[c, c]
    denom = cm.counts[c, :].sum() + cm.counts[:, c].sum() - tp
    if denom == 0:
        return None
    return 100.0 * float(tp) / float(denom)


def per_class_iou(cm: ConfusionMatrix) -> List[Optional[float]]:
    return [iou(cm, c) for c in range(cm.num_classes)]


def miou(cm: ConfusionMatrix) -> Optional[float]:
    vals = [v for v in per_class_iou(cm) if v is not None]
    if not vals:
        return None
    return float(np.mean(vals))


def load_dataset(path) -> List[PointCloud]:
    """Scans of a dataset directory (``scans/*.ldg``) in frame order."""
    if not os.path.isdir(path):
        raise ValidationError(f"dataset path does not exist: {path}")
    files = sorted(glob.glob(os.path.join(path, "scans", "*.ldg")))
    return [load_scan(f, "native") for f in files]


def split_train_val(clouds: Sequence, val_fraction: float = 0.2):
    n_val = int(round(len(clouds) * val_fraction))
    cut = len(clouds) - n_val
    return list(clouds[:cut]), list(clouds[cut:])


def evaluate(
    params: ModelParams, model_cfg: ModelConfig, samples: Sequence[Sample], chunk: int = 32
) -> ConfusionMatrix:
    cm = ConfusionMatrix.empty(model_cfg.num_classes)
    for start in range(0, len(samples), chunk):
        part = samples[start : start + chunk]
        batch = make_batch([s.feats for s in part], [s.geometry for s in part])
        pred = predict_batch(params, batch, model_cfg)
        for s, sl in zip(part, batch.scan_slices):
            point_pred = unvoxelize_predictions(s.grid, pred[sl], len(s.cloud))
            cm = accumulate(cm, point_pred, s.cloud.labels)
    return cm


def variant_config(base: ModelConfig, variant: str) -> ModelConfig:
    if variant == "lidog":
        return replace(base, use_bev=True, double_head=False)
    if variant == "no_bev":
        return replace(base, use_bev=False, double_head=False)
    if variant == "double_head":
        return replace(base, use_bev=False, double_head=True)
    raise ValidationError(f"unknown variant '{variant}'; expected one of {VARIANTS}")


@dataclass
class ExperimentSpec:
    sources: List[str]
    targets: List[str]
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    bev: BevProjectionConfig = field(default_factory=BevProjectionConfig)
    variants: tuple = ("lidog", "no_bev")
    bev_area: Optional[float] = None
    bev_resolution: float = 1.0
    val_fraction: float = 0.2

    def __post_init__(self):
        if not self.sources:
            raise ValidationError("at least one source dataset is required")
        src = {os.path.realpath(p) for p in self.sources}
        overlap = src & {os.path.realpath(p) for p in self.targets}
        if overlap:
            raise ValidationError(f"source and target datasets overlap: {sorted(overlap)}")
        for v in self.variants:
            if v not in VARIANTS:
                raise ValidationError(f"unknown variant '{v}'")
        if self.bev_resolution not in (0.5, 0.75, 1.0):
            raise ValidationError("bev_resolution must be one of 0.5, 0.75, 1.0")

    def projection(self) -> BevProjectionConfig:
        cfg = self.bev
        if self.bev_area is not None:
            cfg = cfg.with_area(self.bev_area)
        return cfg.with_resolution(self.bev_resolution)


@dataclass
class Report:
    rows: List[dict]  # variant, split, class, iou
    summary: List[dict]  # variant, split, miou
    checkpoints: Dict[str, bytes] = field(default_factory=dict)
    logs: Dict[str, list] = field(default_factory=dict)

    def miou(self, variant: str, split: str) -> Optional[float]:
        for r in self.summary:
            if r["variant"] == variant and r["split"] == split:
                return r["miou"]
        raise KeyError((variant, split))

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["variant", "split", "class", "iou"])
        for r in self.rows:
            w.writerow([r["variant"], r["split"], r["class"], _fmt(r["iou"])])
        w.writerow([])
        w.writerow(["variant", "split", "miou"])
        for r in self.summary:
            w.writerow([r["variant"], r["split"], _fmt(r["miou"])])
        return out.getvalue()

    def table(self) -> str:
        splits = list(dict.fromkeys(r["split"] for r in self.summary))
        variants = list(dict.fromkeys(r["variant"] for r in self.summary))
        width = max([len(s) for s in splits] + [10])
        lines = ["variant".ljust(14) + "".join(s.rjust(width + 2) for s in splits)]
        for v in variants:
            cells = []
            for s in splits:
                m = self.miou(v, s)
                cells.append(("-" if m is None else f"{m:.2f}").rjust(width + 2))
            lines.append(v.ljust(14) + "".join(cells))
        if "no_bev" in variants:
            for v in variants:
                if v == "no_bev":
                    continue
                deltas = []
                for s in splits:
                    a, b = self.miou(v, s), self.miou("no_bev", s)
                    deltas.append(("-" if a is None or b is None else f"{a - b:+.2f}").rjust(width + 2))
                lines.append(f"{v}-no_bev".ljust(14) + "".join(deltas))
        return "\n".join(lines)


def _fmt(v):
    return "" if v is None else repr(float(v))


def split_name(path: str) -> str:
    return "target:" + os.path.basename(os.path.normpath(path))


def run_experiment(spec: ExperimentSpec, datasets: Optional[Dict[str, List[PointCloud]]] = None, vocab=DEFAULT_VOCAB) -> Report:
    """Train every requested variant on the sources and score source-val and each target.

    All variants share the training seed, so data order and the 3D-branch
    initialization are identical across them. ``datasets`` may pre-supply the
    clouds keyed by path.
    """
    datasets = dict(datasets or {})
    for p in list(spec.sources) + list(spec.targets):
        if p not in datasets:
            datasets[p] = load_dataset(p)
    tcfg = spec.train
    n_levels = spec.model.n_levels
    prep = lambda clouds: [prepare_sample(c, tcfg.voxel_size, n_levels, tcfg.count_cap) for c in clouds]

    train_clouds, val_samples, train_samples = [], [], []
    for p in spec.sources:
        tr, va = split_train_val(datasets[p], spec.val_fraction)
        train_clouds.append(tr)
        train_samples.append(prep(tr) if tcfg.augmentation == "none" else None)
        val_samples.extend(prep(va))
    if sum(len(t) for t in train_clouds) == 0:
        raise ValidationError("source datasets hold no training scans")
    target_samples = {split_name(p): prep(datasets[p]) for p in spec.targets}

    bev_cfg = spec.projection()
    rows, summary, ckpts, logs = [], [], {}, {}
    for variant in spec.variants:
        mcfg = variant_config(spec.model, variant)
        result = train(
            mcfg,
            train_clouds,
            tcfg,
            bev_cfg if mcfg.use_bev else None,
            samples=train_samples if tcfg.augmentation == "none" else None,
        )
        ckpts[variant] = dumps(result.params, mcfg)
        logs[variant] = result.log
        splits = [("source_val", val_samples)] + list(target_samples.items())
        for split, samples in splits:
            cm = evaluate(result.params, mcfg, samples)
            for c, v in enumerate(per_class_iou(cm)):
                rows.append({"variant": variant, "split": split, "class": vocab.names[c], "iou": v})
            summary.append({"variant": variant, "split": split, "miou": miou(cm)})
    return Report(rows, summary, ckpts, logs)


def write_report(report: Report, out_dir) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "report.csv")
    with open(path, "w") as f:
        f.write(report.to_csv())
    with open(os.path.join(out_dir, "report.txt"), "w") as f:
        f.write(report.table() + "\n")
    return path
