"""Mini-batch SGD training of the tiny detector."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .graph import (
    QCFS,
    NetworkGraph,
    decode_detections,
    forward_ann,
    forward_train,
    backward,
    normalize_activation,
)
from .loss import LossWeights, yolo_loss
from .metrics import full_report

logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainingDivergedError",
    "SGD",
    "train",
    "evaluate",
    "predict_detections",
    "CURVE_COLUMNS",
    "curves_to_csv",
]

CURVE_COLUMNS = (
    "epoch", "total_loss", "box_loss", "obj_loss", "cls_loss",
    "map50", "map5095", "f1_best", "conf_at_f1_best",
)

#: lambda is kept above this floor after every update
MIN_LAMBDA = 1e-3


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch, step, value):
        super().__init__(f"loss became non-finite ({value}) at epoch {epoch}, step {step}")
        self.epoch, self.step, self.value = epoch, step, value


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    L: int = 4
    activation: str = "qcfs"
    box_weight: float = 0.05
    obj_weight: float = 1.0
    cls_weight: float = 0.5
    cosine: bool = True
    warmup_epochs: int = 0
    eval_conf: float = 0.001
    eval_nms: float = 0.5

    def __post_init__(self):
        self.activation = normalize_activation(self.activation)
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.L < 1:
            raise ValueError("L must be >= 1")
        LossWeights(self.box_weight, self.obj_weight, self.cls_weight)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.box_weight, self.obj_weight, self.cls_weight)

    def to_dict(self) -> dict:
        return asdict(self)


class SGD:
    """Momentum SGD over every trainable tensor in a :class:`NetworkGraph`.

    Trainables are conv/head weights and biases, batch-norm gamma/beta and
    each QCFS layer's lambda.  Weight decay applies to conv weights only.
    """

    def __init__(self, net: NetworkGraph, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.net = net
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {}

    def _slots(self, name, layer):
        p = layer.params
        if layer.kind == "conv":
            return {"weights": p, "bias": p}
        if layer.kind == "detect-head":
            return {"weights": p.conv, "bias": p.conv}
        if layer.kind == "batchnorm":
            return {"gamma": p, "beta": p}
        if layer.kind == "activation" and isinstance(p, QCFS):
            return {"lam": p.params}
        return {}

    def step(self, grads):
        for name in self.net.order:
            layer = self.net.layer(name)
            g_layer = grads.get(name)
            if not g_layer:
                continue
            for pname, owner in self._slots(name, layer).items():
                g = g_layer[pname]
                if pname == "lam":
                    value = owner.lam
                    v = self.momentum * self.velocity.get((name, pname), 0.0) + g
                    self.velocity[(name, pname)] = v
                    owner.lam = max(value - self.lr * v, MIN_LAMBDA)
                    continue
                arr = getattr(owner, pname)
                g = g.astype(np.float64)
                if pname == "weights" and self.weight_decay:
                    g = g + self.weight_decay * arr
                key = (name, pname)
                v = self.velocity.get(key)
                v = g if v is None else self.momentum * v + g
                self.velocity[key] = v
                arr -= (self.lr * v).astype(arr.dtype)


def _check_kind(net: NetworkGraph, activation: str):
    kinds = {l.activation_kind for l in net.activation_layers()}
    want = {"qcfs"} if activation == "qcfs" else {"leaky_relu"}
    if kinds != want:
        raise ValueError(f"network activations {sorted(kinds)} do not match config activation {activation!r}")


def predict_detections(net: NetworkGraph, images, conf: float = 0.001, nms_iou: float = 0.5, batch_size: int = 50, forward=None):
    """Decoded detections for every image, batched."""
    forward = forward or (lambda x: forward_ann(net, x))
    dets = []
    for i in range(0, len(images), batch_size):
        dets.extend(decode_detections(forward(images[i:i + batch_size]), conf, nms_iou))
    return dets


def evaluate(net: NetworkGraph, images, truths, conf: float = 0.001, nms_iou: float = 0.5, forward=None):
    """:class:`~qcfs_yolo.metrics.MetricsReport` of ``net`` on a labelled set."""
    dets = predict_detections(net, images, conf, nms_iou, forward=forward)
    return full_report(
        {i: [tuple(d) for d in ds] for i, ds in enumerate(dets)},
        {i: list(t) for i, t in enumerate(truths)},
        net.class_count,
    )


def _lr_at(config: TrainConfig, epoch: int, frac: float) -> float:
    t = epoch + frac
    lr = config.learning_rate
    if config.warmup_epochs and t < config.warmup_epochs:
        return lr * (0.1 + 0.9 * t / config.warmup_epochs)
    if config.cosine:
        return lr * (0.05 + 0.95 * 0.5 * (1 + math.cos(math.pi * t / config.epochs)))
    return lr


def train(net: NetworkGraph, images, truths, config: TrainConfig, val_images=None, val_truths=None, on_epoch=None):
    """Train a copy of ``net``; returns ``(trained_net, curve_rows)``.

    ``images`` is ``(N, 3, H, W)``; ``truths[i]`` lists ``(cls, xyxy)``.
    One curve row is produced per epoch; metric columns are computed on the
    validation split when given and left as NaN otherwise.
    """
    _check_kind(net, config.activation)
    net = net.copy()
    images = np.asarray(images, dtype=net.dtype)
    rng = np.random.default_rng(config.seed)
    opt = SGD(net, config.learning_rate, config.momentum, config.weight_decay)
    weights = config.loss_weights
    n = len(images)
    steps = math.ceil(n / config.batch_size)
    rows = []
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        sums = np.zeros(4)
        for step in range(steps):
            idx = perm[step * config.batch_size:(step + 1) * config.batch_size]
            opt.lr = _lr_at(config, epoch, step / steps)
            out, tape = forward_train(net, images[idx])
            res = yolo_loss(out, [truths[i] for i in idx], weights)
            if not np.isfinite(res.total):
                raise TrainingDivergedError(epoch + 1, step, res.total)
            sums += np.array(tuple(res)) * len(idx)
            if config.learning_rate > 0:
                opt.step(backward(net, tape, res.grad))
        row = dict(zip(CURVE_COLUMNS[1:5], sums / n))
        row["epoch"] = epoch + 1
        if val_images is not None:
            rep = evaluate(net, val_images, val_truths, config.eval_conf, config.eval_nms)
            row.update(map50=rep.map50, map5095=rep.map5095, f1_best=rep.best_f1, conf_at_f1_best=rep.conf_at_best_f1)
        else:
            row.update(map50=float("nan"), map5095=float("nan"), f1_best=float("nan"), conf_at_f1_best=float("nan"))
        rows.append(row)
        logger.info("epoch %d loss %.4f map50 %.3f", epoch + 1, row["total_loss"], row["map50"])
        if on_epoch is not None:
            on_epoch(row)
    return net, rows


def curves_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    for r in rows:
        w.writerow([r["epoch"]] + [f"{r[c]:.6f}" for c in CURVE_COLUMNS[1:]])
    return buf.getvalue()
