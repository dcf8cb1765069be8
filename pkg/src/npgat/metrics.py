"""Pixel and instance segmentation metrics.

Instance matching is one-to-one: a (ground truth, prediction) pair may match
when its set IoU is strictly greater than the threshold, and the number of
matches is maximised (Hopcroft-Karp on the bipartite candidate graph).
"""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.ndimage as ndi
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

THRESHOLDS = np.round(np.arange(0.10, 0.951, 0.05), 2)
F1_IOU = 0.7


def soft_iou(y, p):
    """``(sum(y * p) + 1) / (sum(y) + sum(p) + 1)``, no union subtraction."""
    y = np.asarray(y, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if y.shape != p.shape:
        raise ValueError(f"soft_iou: shape mismatch {y.shape} vs {p.shape}")
    return float(((y * p).sum() + 1.0) / (y.sum() + p.sum() + 1.0))


def dice_f1(y, p, eps=1e-7):
    """``2 sum(y p) / (sum(y^2) + sum(p^2) + eps)``."""
    y = np.asarray(y, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if y.shape != p.shape:
        raise ValueError(f"dice_f1: shape mismatch {y.shape} vs {p.shape}")
    return float(2.0 * (y * p).sum() / ((y * y).sum() + (p * p).sum() + eps))


def label_instances(mask, connectivity=1):
    """Connected components of a binary mask as a list of boolean masks.

    ``connectivity=1`` is 4-connectivity, ``2`` is 8-connectivity.
    """
    mask = np.asarray(mask).astype(bool)
    structure = ndi.generate_binary_structure(2, connectivity)
    labels, n = ndi.label(mask, structure=structure)
    return [labels == k for k in range(1, n + 1)]


def _stack(instances, shape=None):
    if isinstance(instances, np.ndarray) and instances.ndim == 3:
        return instances.astype(bool)
    instances = list(instances)
    if not instances:
        return np.zeros((0,) + tuple(shape or (0,)), dtype=bool)
    return np.stack([np.asarray(m).astype(bool) for m in instances])


def pairwise_iou(gt, pred):
    """(G, P) matrix of set IoU between instance masks."""
    gt = _stack(gt)
    pred = _stack(pred, gt.shape[1:] if gt.size else None)
    if gt.shape[0] == 0 or pred.shape[0] == 0:
        return np.zeros((gt.shape[0], pred.shape[0]))
    g = gt.reshape(gt.shape[0], -1).astype(np.float64)
    p = pred.reshape(pred.shape[0], -1).astype(np.float64)
    inter = g @ p.T
    union = g.sum(1)[:, None] + p.sum(1)[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def match_count(iou, t):
    """Maximum number of one-to-one pairs with IoU strictly above ``t``."""
    if iou.size == 0:
        return 0
    cand = csr_matrix((iou > t).astype(np.int8))
    if cand.nnz == 0:
        return 0
    match = maximum_bipartite_matching(cand, perm_type="column")
    return int((match >= 0).sum())


def _ratio(num, den):
    # 0/0 means nothing to get wrong
    return 1.0 if den == 0 else num / den


@dataclass
class ThresholdRow:
    threshold: float
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    score: float  # TP / (TP + FP + FN)
    f1: float


def instance_metrics(gt, pred, t, iou=None):
    if iou is None:
        iou = pairwise_iou(gt, pred)
    n_gt, n_pred = iou.shape
    tp = match_count(iou, t)
    fp, fn = n_pred - tp, n_gt - tp
    return ThresholdRow(
        threshold=float(t), tp=tp, fp=fp, fn=fn,
        precision=_ratio(tp, tp + fp), recall=_ratio(tp, tp + fn),
        score=_ratio(tp, tp + fp + fn), f1=_ratio(2 * tp, 2 * tp + fp + fn),
    )


def threshold_table(gt, pred, thresholds=THRESHOLDS):
    iou = pairwise_iou(gt, pred)
    return [instance_metrics(None, None, t, iou=iou) for t in thresholds]


def competition_score(gt, pred, thresholds=THRESHOLDS):
    rows = threshold_table(gt, pred, thresholds)
    return float(np.mean([r.score for r in rows]))


@dataclass
class EvalReport:
    sample_id: str
    soft_iou: float
    dice: float
    score: float
    f1_at_07: float
    thresholds: list = field(default_factory=list)  # ThresholdRow
    class_tag: str = None

    def to_dict(self):
        d = asdict(self)
        return d

    def threshold_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["threshold", "tp", "fp", "fn", "precision", "recall", "score", "f1"])
        for r in self.thresholds:
            w.writerow([f"{r.threshold:.2f}", r.tp, r.fp, r.fn,
                        repr(r.precision), repr(r.recall), repr(r.score), repr(r.f1)])
        return buf.getvalue()


def evaluate_masks(gt_mask, gt_instances, prob, binary, sample_id="", class_tag=None):
    """Every metric for one sample.

    ``prob`` is the raw probability image, ``binary`` the thresholded mask;
    predicted instances are the 4-connected components of ``binary``.
    """
    pred_instances = label_instances(binary)
    rows = threshold_table(gt_instances, pred_instances)
    f1 = instance_metrics(None, None, F1_IOU, iou=pairwise_iou(gt_instances, pred_instances)).f1
    return EvalReport(
        sample_id=sample_id,
        soft_iou=soft_iou(gt_mask, prob),
        dice=dice_f1(gt_mask, binary),
        score=float(np.mean([r.score for r in rows])),
        f1_at_07=f1,
        thresholds=rows,
        class_tag=class_tag,
    )


def aggregate(reports):
    """Mean of every scalar metric, overall and per class tag."""
    def summarize(rs):
        out = {k: float(np.mean([getattr(r, k) for r in rs]))
               for k in ("soft_iou", "dice", "score", "f1_at_07")}
        out["n"] = len(rs)
        return out

    result = {"overall": summarize(reports) if reports else {"n": 0}}
    tags = sorted({r.class_tag for r in reports if r.class_tag is not None})
    result["per_class"] = {t: summarize([r for r in reports if r.class_tag == t]) for t in tags}
    if reports:
        rows = []
        for k, t in enumerate(THRESHOLDS):
            per = [r.thresholds[k] for r in reports]
            rows.append({
                "threshold": float(t),
                "tp": int(sum(r.tp for r in per)),
                "fp": int(sum(r.fp for r in per)),
                "fn": int(sum(r.fn for r in per)),
                "precision": float(np.mean([r.precision for r in per])),
                "recall": float(np.mean([r.recall for r in per])),
                "score": float(np.mean([r.score for r in per])),
            })
        result["thresholds"] = rows
    return result
