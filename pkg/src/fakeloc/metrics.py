"""Localization and detection metrics: map resizing, binarization, IoU, PBCA,
average precision, and IoU as a function of manipulated area."""
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DataError, DomainError, ShapeError

RESULTS_HEADER = "#fakeloc-results\tv1"


@dataclass
class SampleResult:
    sample_id: str
    iou: float  # percent
    pbca: float  # percent
    mask_area_percent: float


@dataclass
class EvalResult:
    iou: float
    pbca: float
    ap: float | None = None
    per_sample: list = field(default_factory=list)

    def summary_lines(self):
        ap = "-" if self.ap is None else f"{self.ap:.1f}"
        return [f"IoU\t{self.iou:.1f}", f"PBCA\t{self.pbca:.1f}", f"AP\t{ap}"]


def _as_numpy(x):
    if torch.is_tensor(x):
        return x.detach().cpu().numpy()
    if hasattr(x, "values") and not isinstance(x, np.ndarray):
        return _as_numpy(x.values)
    return np.asarray(x)


def resize_map(values, target):
    """Bilinear resize (half-pixel centers) of an (h, w) map, clamped to [0, 1]."""
    h, w = (int(t) for t in target)
    if h <= 0 or w <= 0:
        raise DomainError(f"target size must be positive, got {target}")
    arr = _as_numpy(values).astype(np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D map, got shape {arr.shape}")
    t = torch.from_numpy(arr)[None, None]
    out = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)[0, 0]
    return out.clamp(0, 1).numpy()


def binarize(values, threshold=0.5):
    return (_as_numpy(values) >= threshold).astype(np.uint8)


def _pair(pred, gt):
    pred = _as_numpy(pred).astype(bool)
    gt = _as_numpy(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    return pred, gt


def iou(pred, gt):
    pred, gt = _pair(pred, gt)
    if not gt.any():
        raise DomainError("IoU is undefined for an empty ground-truth mask")
    return float(np.logical_and(pred, gt).sum() / np.logical_or(pred, gt).sum())


def pbca(pred, gt):
    pred, gt = _pair(pred, gt)
    return float((pred == gt).mean())


def average_precision(scores, labels=None):
    """Mean over positives of the precision at each positive's rank.

    Accepts a list of ``(score, label)`` pairs or two parallel sequences.
    Ranking is by score descending with ties kept in input order.
    """
    if labels is None:
        pairs = list(scores)
        scores = [p[0] for p in pairs]
        labels = [p[1] for p in pairs]
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise ShapeError("scores and labels differ in length")
    if not labels.any():
        raise DomainError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    # exact rational sum, rounded once, so the value does not depend on summation order
    found = np.cumsum(hits)[hits].tolist()
    ranks = (np.flatnonzero(hits) + 1).tolist()
    total = sum(Fraction(k, r) for k, r in zip(found, ranks))
    return float(total / len(found))


def iou_vs_area_curve(per_sample, bins=10):
    """Equal-width mask-area bins over [0, 100] percent; per-bin mean IoU and counts."""
    if bins < 1:
        raise DomainError("bins must be >= 1")
    if not per_sample:
        raise DataError("no samples to bin")
    edges = np.linspace(0.0, 100.0, bins + 1)
    areas = np.array([s.mask_area_percent for s in per_sample], dtype=np.float64)
    ious = np.array([s.iou for s in per_sample], dtype=np.float64)
    idx = np.clip(np.floor(areas / 100.0 * bins).astype(int), 0, bins - 1)
    curve = []
    for b in range(bins):
        sel = idx == b
        n = int(sel.sum())
        curve.append({"lo": float(edges[b]), "hi": float(edges[b + 1]), "count": n,
                      "mean_iou": float(ious[sel].mean()) if n else None})
    return curve


def aggregate(per_sample, ap=None):
    if not per_sample:
        raise DataError("no samples to aggregate")
    return EvalResult(
        iou=float(np.mean([s.iou for s in per_sample])),
        pbca=float(np.mean([s.pbca for s in per_sample])),
        ap=ap,
        per_sample=list(per_sample),
    )


def evaluate_map(sample_id, soft_map, gt_mask, threshold=0.5):
    """Resize a soft map to the mask size, binarize, and score it against the mask."""
    gt = _as_numpy(gt_mask).astype(bool)
    pred = binarize(resize_map(soft_map, gt.shape), threshold)
    return SampleResult(sample_id, 100.0 * iou(pred, gt), 100.0 * pbca(pred, gt),
                        100.0 * float(gt.mean()))


def write_results(path, result):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [RESULTS_HEADER, "sample_id\tiou\tpbca\tmask_area_percent"]
    for s in result.per_sample:
        lines.append(f"{s.sample_id}\t{s.iou:.4f}\t{s.pbca:.4f}\t{s.mask_area_percent:.4f}")
    lines += ["# " + line for line in result.summary_lines()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def read_results(path):
    path = Path(path)
    if not path.is_file():
        from .errors import MissingArtifactError
        raise MissingArtifactError(f"results file not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != RESULTS_HEADER:
        raise DataError(f"{path}: not a results file")
    per_sample, summary = [], {}
    for n, line in enumerate(lines[2:], start=3):
        if line.startswith("# "):
            key, value = line[2:].split("\t")
            summary[key] = None if value == "-" else float(value)
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataError(f"{path}: line {n}: expected 4 fields")
        per_sample.append(SampleResult(parts[0], float(parts[1]), float(parts[2]), float(parts[3])))
    if not per_sample:
        raise DataError(f"{path}: results file is empty")
    return EvalResult(summary.get("IoU"), summary.get("PBCA"), summary.get("AP"), per_sample)
