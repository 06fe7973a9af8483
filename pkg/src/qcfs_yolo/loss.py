"""Composite detection loss: (1 - IoU) box term plus BCE objectness and class terms."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import DetectionOutput, _sigmoid

__all__ = ["LossWeights", "LossResult", "assign_targets", "yolo_loss", "bce_with_logits", "anchor_shape_iou"]


@dataclass
class LossWeights:
    box: float = 0.05
    obj: float = 1.0
    cls: float = 0.5

    def __post_init__(self):
        if min(self.box, self.obj, self.cls) < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class LossResult:
    total: float
    box: float
    obj: float
    cls: float
    grad: np.ndarray  # d total / d raw, same shape as DetectionOutput.raw

    def __iter__(self):
        return iter((self.total, self.box, self.obj, self.cls))


def bce_with_logits(x, y):
    """Elementwise binary cross-entropy of ``sigmoid(x)`` against ``y``."""
    return np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))


def anchor_shape_iou(wh, anchors):
    """IoU of a centered ``(w, h)`` box against each centered anchor."""
    inter = np.minimum(wh[0], anchors[:, 0]) * np.minimum(wh[1], anchors[:, 1])
    return inter / (wh[0] * wh[1] + anchors[:, 0] * anchors[:, 1] - inter)


def assign_targets(out: DetectionOutput, truths):
    """Map each truth box to (image, anchor, gy, gx) in its center cell.

    ``truths[b]`` is a sequence of ``(cls, (x1, y1, x2, y2))``.  The anchor is
    the one whose shape overlaps the box best; a later truth landing on an
    already-claimed slot is dropped.
    """
    h, w = out.grid_shape
    s = out.stride
    anchors = np.asarray(out.anchors, dtype=np.float64)
    slots = {}
    for b, boxes in enumerate(truths):
        for cls, box in boxes:
            x1, y1, x2, y2 = (float(v) for v in box)
            cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
            gx = min(max(int(cx // s), 0), w - 1)
            gy = min(max(int(cy // s), 0), h - 1)
            a = int(np.argmax(anchor_shape_iou((x2 - x1, y2 - y1), anchors)))
            slots.setdefault((b, a, gy, gx), (int(cls), (x1, y1, x2, y2)))
    return slots


def _iou_and_grad(p, t):
    """IoU of xyxy boxes ``p`` (k,4) and ``t`` (k,4), and dIoU/dp."""
    ix1 = np.maximum(p[:, 0], t[:, 0])
    iy1 = np.maximum(p[:, 1], t[:, 1])
    ix2 = np.minimum(p[:, 2], t[:, 2])
    iy2 = np.minimum(p[:, 3], t[:, 3])
    iw_raw, ih_raw = ix2 - ix1, iy2 - iy1
    overlap = (iw_raw > 0) & (ih_raw > 0)
    iw, ih = np.where(overlap, iw_raw, 0), np.where(overlap, ih_raw, 0)
    inter = iw * ih
    pw, ph = p[:, 2] - p[:, 0], p[:, 3] - p[:, 1]
    area_p = pw * ph
    area_t = (t[:, 2] - t[:, 0]) * (t[:, 3] - t[:, 1])
    union = area_p + area_t - inter
    iou = inter / union
    # dI/dp: only the coordinates that bound the intersection contribute
    d_inter = np.stack([
        -ih * (p[:, 0] > t[:, 0]),
        -iw * (p[:, 1] > t[:, 1]),
        ih * (p[:, 2] < t[:, 2]),
        iw * (p[:, 3] < t[:, 3]),
    ], axis=1)
    d_area = np.stack([-ph, -pw, ph, pw], axis=1)
    c1 = (1 / union + inter / union**2)[:, None]
    c2 = (inter / union**2)[:, None]
    grad = d_inter * c1 - d_area * c2
    return iou, grad


def yolo_loss(pred: DetectionOutput, truths, weights: LossWeights | None = None) -> LossResult:
    """Loss and its gradient with respect to ``pred.raw``.

    * box: mean over assigned slots of ``1 - IoU(decoded box, truth)``
    * obj: mean BCE over every anchor cell, target 1 on assigned slots
    * cls: mean BCE over assigned slots x classes with one-hot targets

    ``total = w_box * box + w_obj * obj + w_cls * cls``.
    """
    weights = weights or LossWeights()
    raw = pred.raw.astype(np.float64)
    n, na, nf, h, w = raw.shape
    nc = nf - 5
    s = pred.stride
    grad = np.zeros_like(raw)
    slots = assign_targets(pred, truths)

    obj_target = np.zeros((n, na, h, w))
    for b, a, gy, gx in slots:
        obj_target[b, a, gy, gx] = 1.0
    obj_logit = raw[:, :, 4]
    lobj = float(bce_with_logits(obj_logit, obj_target).mean())
    grad[:, :, 4] = weights.obj * (_sigmoid(obj_logit) - obj_target) / obj_target.size

    lbox = lcls = 0.0
    k = len(slots)
    if k:
        idx = np.array(list(slots.keys()))
        bi, ai, gyi, gxi = idx.T
        tcls = np.array([v[0] for v in slots.values()])
        tbox = np.array([v[1] for v in slots.values()], dtype=np.float64)
        t = raw[bi, ai, :, gyi, gxi]  # (k, nf)

        sxy = _sigmoid(t[:, 0:2])
        swh = _sigmoid(t[:, 2:4])
        anc = np.asarray(pred.anchors, dtype=np.float64)[ai]
        cx = (2 * sxy[:, 0] - 0.5 + gxi) * s
        cy = (2 * sxy[:, 1] - 0.5 + gyi) * s
        bw = (2 * swh[:, 0]) ** 2 * anc[:, 0]
        bh = (2 * swh[:, 1]) ** 2 * anc[:, 1]
        pbox = np.stack([cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2], axis=1)
        iou, diou = _iou_and_grad(pbox, tbox)
        lbox = float(np.mean(1.0 - iou))
        dl = -diou * (weights.box / k)  # d total / d (x1, y1, x2, y2)
        dcx = dl[:, 0] + dl[:, 2]
        dcy = dl[:, 1] + dl[:, 3]
        dbw = (dl[:, 2] - dl[:, 0]) / 2
        dbh = (dl[:, 3] - dl[:, 1]) / 2
        g = np.zeros((k, nf))
        g[:, 0] = dcx * 2 * s * sxy[:, 0] * (1 - sxy[:, 0])
        g[:, 1] = dcy * 2 * s * sxy[:, 1] * (1 - sxy[:, 1])
        g[:, 2] = dbw * 8 * swh[:, 0] * anc[:, 0] * swh[:, 0] * (1 - swh[:, 0])
        g[:, 3] = dbh * 8 * swh[:, 1] * anc[:, 1] * swh[:, 1] * (1 - swh[:, 1])

        onehot = np.zeros((k, nc))
        onehot[np.arange(k), tcls] = 1.0
        cl = t[:, 5:]
        lcls = float(bce_with_logits(cl, onehot).mean())
        g[:, 5:] = weights.cls * (_sigmoid(cl) - onehot) / onehot.size
        # slots are unique so plain fancy-index accumulation is safe
        grad[bi, ai, :, gyi, gxi] += g

    total = weights.box * lbox + weights.obj * lobj + weights.cls * lcls
    return LossResult(total, lbox, lobj, lcls, grad.astype(pred.raw.dtype))
