"""Segmentation metrics: one-vs-rest ROC/AUC, Jaccard index, confusion matrix."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import nnet
from .labeler import CLASS_NAMES, N_CLASSES
from .netpbm import atomic_write_bytes

log = logging.getLogger(__name__)


class DegenerateClassError(ValueError):
    """Truth has no positives or no negatives, so ROC is undefined."""


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # first entry is +inf (nothing predicted positive)

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def roc_curve(scores, truth) -> RocCurve:
    """ROC over distinct score thresholds, highest first; tied scores move together."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    truth = np.asarray(truth).ravel().astype(bool)
    if scores.shape != truth.shape:
        raise ValueError("scores and truth differ in size")
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateClassError(f"need positives and negatives, got {n_pos}/{n_neg}")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    t = truth[order]
    tp = np.cumsum(t)
    fp = np.cumsum(~t)
    # last index of every run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    fpr = np.r_[0.0, fp[ends] / n_neg]
    tpr = np.r_[0.0, tp[ends] / n_pos]
    return RocCurve(fpr, tpr, np.r_[np.inf, s[ends]])


def simplify(curve: RocCurve) -> RocCurve:
    """Drop interior points of purely vertical or horizontal runs.

    The polyline, and hence the AUC, is unchanged.
    """
    x, y = curve.fpr, curve.tpr
    if len(x) <= 2:
        return curve
    same_x = (x[1:-1] == x[:-2]) & (x[1:-1] == x[2:])
    same_y = (y[1:-1] == y[:-2]) & (y[1:-1] == y[2:])
    keep = np.r_[True, ~(same_x | same_y), True]
    return RocCurve(x[keep], y[keep], curve.thresholds[keep])


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under the ROC curve."""
    x, y = curve.fpr, curve.tpr
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1])) / 2.0)


def _check_pair(pred, truth):
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise nnet.ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ")
    return pred, truth


def jaccard(pred, truth, cls: int) -> float:
    pred, truth = _check_pair(pred, truth)
    p = pred == cls
    t = truth == cls
    union = np.count_nonzero(p | t)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & t) / union


def confusion(pred, truth, n_classes: int = N_CLASSES) -> np.ndarray:
    """Counts indexed ``[truth, prediction]``."""
    pred, truth = _check_pair(pred, truth)
    idx = truth.astype(np.int64).ravel() * n_classes + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def jaccard_from_confusion(cm: np.ndarray) -> np.ndarray:
    """Per-class IoU; NaN where the class is absent from both sides."""
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, np.nan)


def mean_jaccard(cm: np.ndarray) -> float:
    """Mean IoU over classes that occur in truth or prediction."""
    j = jaccard_from_confusion(cm)
    return float(np.nanmean(j)) if np.any(~np.isnan(j)) else 1.0


def pixel_accuracy(cm: np.ndarray) -> float:
    total = cm.sum()
    return float(np.trace(cm) / total) if total else 1.0


@dataclass
class MetricsReport:
    curves: dict[int, RocCurve]
    auc: dict[int, float]             # pooled; degenerate classes are missing
    jaccard: np.ndarray               # per class, NaN if absent everywhere
    confusion: np.ndarray
    per_image_auc: list[float] = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        return pixel_accuracy(self.confusion)

    @property
    def mean_auc(self) -> float:
        return float(np.mean(list(self.auc.values()))) if self.auc else float("nan")

    @property
    def mean_jaccard(self) -> float:
        return mean_jaccard(self.confusion)


def _class_roc(probs_c, truth_c):
    try:
        return roc_curve(probs_c, truth_c)
    except DegenerateClassError:
        return None


def report_from_probs(probs: np.ndarray, truth: np.ndarray) -> MetricsReport:
    """Metrics from softmax outputs ``N x 7 x H x W`` and truth ``N x H x W``."""
    pred = probs.argmax(axis=1)
    cm = confusion(pred, truth)
    curves = {}
    aucs = {}
    for c in range(N_CLASSES):
        curve = _class_roc(probs[:, c], truth == c)
        if curve is None:
            log.warning("class %s is degenerate in the pooled truth; skipped", CLASS_NAMES[c])
            continue
        curves[c] = curve
        aucs[c] = auc(curve)
    per_image = []
    for i in range(len(truth)):
        vals = []
        for c in range(N_CLASSES):
            curve = _class_roc(probs[i, c], truth[i] == c)
            if curve is not None:
                vals.append(auc(curve))
        if vals:
            per_image.append(float(np.mean(vals)))
    return MetricsReport(curves, aucs, jaccard_from_confusion(cm), cm, per_image)


def predict_probs(model: nnet.UNetModel, x: np.ndarray, batch_size: int = 16) -> np.ndarray:
    out = []
    for i in range(0, len(x), batch_size):
        out.append(nnet.softmax(nnet.unet_forward(model, x[i:i + batch_size])))
    return np.concatenate(out)


def evaluate(model: nnet.UNetModel, patches, stats, batch_size: int = 16) -> MetricsReport:
    """Inference-mode metrics over a patch list, normalized with ``stats``."""
    from .trainer import patches_to_arrays
    if not patches:
        raise ValueError("evaluate needs at least one patch")
    x, y = patches_to_arrays(patches, stats, model.config.in_channels)
    return report_from_probs(predict_probs(model, x, batch_size), y)


def write_report(out_dir, report: MetricsReport) -> None:
    os.makedirs(out_dir, exist_ok=True)
    support = report.confusion.sum(axis=1)
    predicted = report.confusion.sum(axis=0)
    rows = ["class\tauc\tjaccard\ttruth_pixels\tpredicted_pixels\n"]
    for c, name in enumerate(CLASS_NAMES):
        a = report.auc.get(c, float("nan"))
        rows.append(f"{name}\t{a:.6f}\t{report.jaccard[c]:.6f}\t{support[c]}\t{predicted[c]}\n")
    rows.append(f"mean\t{report.mean_auc:.6f}\t{report.mean_jaccard:.6f}\t"
                f"{support.sum()}\t{predicted.sum()}\n")
    rows.append(f"# pixel_accuracy = {report.accuracy:.6f}\n")
    if report.per_image_auc:
        rows.append(f"# per_image_macro_auc_mean = {np.mean(report.per_image_auc):.6f}\n")
    atomic_write_bytes(os.path.join(out_dir, "metrics.tsv"), "".join(rows).encode())

    cm_rows = ["truth\\pred\t" + "\t".join(CLASS_NAMES) + "\n"]
    for c, name in enumerate(CLASS_NAMES):
        cm_rows.append(name + "\t" + "\t".join(str(v) for v in report.confusion[c]) + "\n")
    atomic_write_bytes(os.path.join(out_dir, "confusion.tsv"), "".join(cm_rows).encode())

    for c, curve in report.curves.items():
        curve = simplify(curve)
        lines = ["fpr\ttpr\tthreshold\n"]
        lines += [f"{f!r}\t{t!r}\t{th!r}\n"
                  for f, t, th in zip(curve.fpr.tolist(), curve.tpr.tolist(),
                                      curve.thresholds.tolist())]
        atomic_write_bytes(os.path.join(out_dir, f"roc_{CLASS_NAMES[c]}.tsv"),
                           "".join(lines).encode())
    with_images = ["image\tmacro_auc\n"] + [f"{i}\t{v:.6f}\n"
                                           for i, v in enumerate(report.per_image_auc)]
    atomic_write_bytes(os.path.join(out_dir, "per_image_auc.tsv"), "".join(with_images).encode())
