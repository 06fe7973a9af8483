"""Detection metrics: IoU, all-points AP, mAP@.5 / mAP@.5:.95, P/R/F1 curves."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "IOU_THRESHOLDS",
    "CONF_GRID",
    "iou",
    "match_detections",
    "average_precision",
    "interpolated_ap",
    "MetricsReport",
    "full_report",
]

IOU_THRESHOLDS = np.round(0.5 + 0.05 * np.arange(10), 2)
CONF_GRID = np.linspace(0.0, 1.0, 101)


def iou(a, b) -> float:
    """IoU of two xyxy boxes."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def _sort_key(image_id):
    return (type(image_id).__name__, image_id)


def match_detections(dets, truths, iou_thresh: float = 0.5):
    """Greedy single-class matching pooled over images.

    ``dets``: iterable of ``(image_id, confidence, box)``;
    ``truths``: iterable of ``(image_id, box)``.  Detections are visited by
    descending confidence (ties by image id, then input order) and each
    claims the unmatched truth of highest IoU if that IoU reaches the
    threshold.  Returns ``(confidences, tp_flags, n_truths)`` in visit order.
    """
    gt = {}
    for img, box in truths:
        gt.setdefault(img, []).append(box)
    used = {img: np.zeros(len(b), bool) for img, b in gt.items()}
    items = [(img, float(c), box, i) for i, (img, c, box) in enumerate(dets)]
    items.sort(key=lambda d: (-d[1], _sort_key(d[0]), d[3]))
    conf = np.array([d[1] for d in items], dtype=np.float64)
    tp = np.zeros(len(items), dtype=bool)
    for k, (img, _, box, _) in enumerate(items):
        best, best_j = -1.0, -1
        for j, t in enumerate(gt.get(img, ())):
            if used[img][j]:
                continue
            o = iou(box, t)
            if o > best:
                best, best_j = o, j
        if best_j >= 0 and best >= iou_thresh:
            used[img][best_j] = True
            tp[k] = True
    return conf, tp, sum(len(v) for v in gt.values())


def interpolated_ap(tp, n_truths: int) -> float:
    """Area under the all-points interpolated P-R curve."""
    if n_truths == 0 or len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_truths
    precision = ctp / np.arange(1, len(tp) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(dets, truths, iou_thresh: float = 0.5) -> float:
    dets = list(dets)
    if any(not 0.0 <= float(c) <= 1.0 for _, c, _ in dets):
        raise ValueError("confidences must lie in [0, 1]")
    _, tp, n = match_detections(dets, truths, iou_thresh)
    return interpolated_ap(tp, n)


def _pr_at_thresholds(conf, tp, n_truths, grid):
    """Precision/recall of the detections with confidence >= each threshold."""
    ctp = np.concatenate([[0], np.cumsum(tp)])
    # conf is sorted descending; count of dets with conf >= g
    k = np.searchsorted(-conf, -grid, side="right")
    p = np.where(k > 0, ctp[k] / np.maximum(k, 1), 0.0)
    r = ctp[k] / n_truths if n_truths else np.zeros_like(grid)
    return p, r


def _f1(p, r):
    denom = p + r
    return np.where(denom > 0, 2 * p * r / np.where(denom > 0, denom, 1), 0.0)


@dataclass
class MetricsReport:
    """Per-class AP table and aggregate curves.

    ``ap[c]`` holds AP at each of :data:`IOU_THRESHOLDS` for every class that
    appears in either truths or detections.  Aggregate P/R are class means;
    the aggregate F1 is computed from them.
    """

    classes: list
    ap: dict
    map50: float
    map5095: float
    conf_grid: np.ndarray
    precision: dict = field(default_factory=dict)
    recall: dict = field(default_factory=dict)
    f1: dict = field(default_factory=dict)
    mean_precision: np.ndarray = None
    mean_recall: np.ndarray = None
    mean_f1: np.ndarray = None
    best_f1: float = 0.0
    conf_at_best_f1: float = 0.0
    pr_recall_grid: np.ndarray = None
    pr_curves: dict = field(default_factory=dict)
    n_truths: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "map50": self.map50,
            "map5095": self.map5095,
            "best_f1": self.best_f1,
            "conf_at_best_f1": self.conf_at_best_f1,
            "precision_at_best_f1": float(self.mean_precision[self._best_idx()]) if self.classes else 0.0,
            "recall_at_best_f1": float(self.mean_recall[self._best_idx()]) if self.classes else 0.0,
        }

    def _best_idx(self):
        return int(np.argmax(self.mean_f1)) if self.mean_f1 is not None and len(self.mean_f1) else 0

    def to_json(self) -> str:
        per_class = {
            str(c): {
                "n_truths": int(self.n_truths.get(c, 0)),
                "ap": {f"{t:.2f}": float(v) for t, v in zip(IOU_THRESHOLDS, self.ap[c])},
                "ap50": float(self.ap[c][0]),
                "ap5095": float(np.mean(self.ap[c])),
            }
            for c in self.classes
        }
        return json.dumps({**self.summary(), "classes": per_class}, indent=2, sort_keys=True)

    def table_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "n_truths"] + [f"ap{int(round(t * 100))}" for t in IOU_THRESHOLDS] + ["ap5095"])
        for c in self.classes:
            w.writerow([c, self.n_truths.get(c, 0)] + [f"{v:.6f}" for v in self.ap[c]] + [f"{np.mean(self.ap[c]):.6f}"])
        w.writerow(["all", sum(self.n_truths.values())] + [f"{np.mean([self.ap[c][i] for c in self.classes]) if self.classes else 0.0:.6f}" for i in range(len(IOU_THRESHOLDS))] + [f"{self.map5095:.6f}"])
        return buf.getvalue()

    def curve_csv(self, which: str) -> str:
        """``which`` in {precision, recall, f1, pr}; one row per grid point."""
        if which == "pr":
            grid, per, mean = self.pr_recall_grid, self.pr_curves, None
            head = "recall"
        else:
            grid = self.conf_grid
            per = {"precision": self.precision, "recall": self.recall, "f1": self.f1}[which]
            mean = {"precision": self.mean_precision, "recall": self.mean_recall, "f1": self.mean_f1}[which]
            head = "confidence"
        if mean is None and per:
            mean = np.mean([per[c] for c in self.classes], axis=0)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([head] + [f"class_{c}" for c in self.classes] + ["mean"])
        for i, g in enumerate(grid):
            row = [f"{g:.4f}"] + [f"{per[c][i]:.6f}" for c in self.classes]
            row.append(f"{mean[i]:.6f}" if mean is not None else "0.000000")
            w.writerow(row)
        return buf.getvalue()


def full_report(dets_per_image, truths_per_image, class_count: int, conf_grid=None) -> MetricsReport:
    """Aggregate metrics over a dataset.

    ``dets_per_image``: ``{image_id: [(cls, conf, box), ...]}``;
    ``truths_per_image``: ``{image_id: [(cls, box), ...]}``.  Classes absent
    from both are excluded from every mean.
    """
    grid = CONF_GRID if conf_grid is None else np.asarray(conf_grid, dtype=np.float64)
    dets_c = {c: [] for c in range(class_count)}
    truths_c = {c: [] for c in range(class_count)}
    for img in sorted(set(dets_per_image) | set(truths_per_image), key=_sort_key):
        for cls, conf, box in dets_per_image.get(img, ()):
            dets_c[int(cls)].append((img, float(conf), tuple(box)))
        for cls, box in truths_per_image.get(img, ()):
            truths_c[int(cls)].append((img, tuple(box)))
    classes = [c for c in range(class_count) if dets_c[c] or truths_c[c]]
    rec_grid = np.linspace(0.0, 1.0, 101)
    report = MetricsReport(classes, {}, 0.0, 0.0, grid, pr_recall_grid=rec_grid)
    for c in classes:
        aps = []
        for t in IOU_THRESHOLDS:
            conf, tp, n = match_detections(dets_c[c], truths_c[c], t)
            aps.append(interpolated_ap(tp, n))
            if t == IOU_THRESHOLDS[0]:
                p, r = _pr_at_thresholds(conf, tp, n, grid)
                report.precision[c], report.recall[c], report.f1[c] = p, r, _f1(p, r)
                report.pr_curves[c] = _interp_pr(tp, n, rec_grid)
                report.n_truths[c] = n
        report.ap[c] = np.array(aps)
    if classes:
        report.map50 = float(np.mean([report.ap[c][0] for c in classes]))
        report.map5095 = float(np.mean([report.ap[c] for c in classes]))
        report.mean_precision = np.mean([report.precision[c] for c in classes], axis=0)
        report.mean_recall = np.mean([report.recall[c] for c in classes], axis=0)
        report.mean_f1 = _f1(report.mean_precision, report.mean_recall)
        i = int(np.argmax(report.mean_f1))
        report.best_f1 = float(report.mean_f1[i])
        report.conf_at_best_f1 = float(grid[i])
    else:
        z = np.zeros_like(grid)
        report.mean_precision = report.mean_recall = report.mean_f1 = z
    return report


def _interp_pr(tp, n, rec_grid):
    """Interpolated precision (max precision at recall >= r) on a recall grid."""
    if n == 0 or len(tp) == 0:
        return np.zeros_like(rec_grid)
    ctp = np.cumsum(tp)
    recall = ctp / n
    precision = ctp / np.arange(1, len(tp) + 1)
    env = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, rec_grid, side="left")
    return np.where(idx < len(env), env[np.minimum(idx, len(env) - 1)], 0.0)
