"""Layer graph for a tiny YOLO-style detector and its ANN / SNN executors.

A :class:`NetworkGraph` is a list of named :class:`Layer` records.  Each
layer names its inputs (``"input"`` is the image), so skip connections and
concatenations are expressed directly.  The last layer is always a
:class:`DetectHead`.
"""
from __future__ import annotations

import copy
from collections import deque
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import tensor_ops as ops
from .neuron import if_init, if_step
from .qcfs import QCFSParams, qcfs_forward, qcfs_layer_backward
from .tensor_ops import BatchNormSpec, ConvSpec, ShapeError

__all__ = [
    "LeakyReLU",
    "QCFS",
    "IFNeuron",
    "Pool",
    "Upsample",
    "Concat",
    "DetectHead",
    "Layer",
    "NetworkGraph",
    "DetectionOutput",
    "Detection",
    "GraphError",
    "SNNRequiredError",
    "ACTIVATION_KINDS",
    "DEFAULT_ANCHORS",
    "forward_ann",
    "forward_train",
    "layer_outputs",
    "backward",
    "forward_snn",
    "merge_spike_stats",
    "PROPAGATION_MODES",
    "decode_detections",
    "nms",
    "box_iou_matrix",
    "fold_network_batchnorm",
    "build_tiny_detector",
    "normalize_activation",
]

ACTIVATION_KINDS = ("leaky_relu", "qcfs", "if_neuron")
PROPAGATION_MODES = ("per-step", "rate-averaged")

# (w, h) in input pixels for the single stride-8 head; sized for the
# synthetic shapes (sides 10-30 px).
DEFAULT_ANCHORS = np.array([[12.0, 12.0], [18.0, 26.0], [26.0, 18.0]], dtype=np.float32)


class GraphError(ValueError):
    pass


class SNNRequiredError(GraphError):
    """An integrate-and-fire layer was reached by the ANN executor."""


@dataclass
class LeakyReLU:
    slope: float = 0.1


@dataclass
class QCFS:
    params: QCFSParams = field(default_factory=QCFSParams)


@dataclass
class IFNeuron:
    theta: float


@dataclass
class Pool:
    k: int = 2
    s: int = 2


@dataclass
class Upsample:
    factor: int = 2


@dataclass
class Concat:
    pass


@dataclass
class DetectHead:
    """1x1 prediction conv plus the anchor set used for decoding."""

    conv: ConvSpec
    anchors: np.ndarray
    class_count: int
    stride: int

    @property
    def num_anchors(self) -> int:
        return len(self.anchors)


Params = Union[ConvSpec, BatchNormSpec, LeakyReLU, QCFS, IFNeuron, Pool, Upsample, Concat, DetectHead]

_KIND_PARAMS = {
    "conv": (ConvSpec,),
    "batchnorm": (BatchNormSpec,),
    "activation": (LeakyReLU, QCFS, IFNeuron),
    "avgpool": (Pool,),
    "maxpool": (Pool,),
    "upsample-nearest": (Upsample,),
    "concat": (Concat,),
    "detect-head": (DetectHead,),
}


@dataclass
class Layer:
    name: str
    kind: str
    params: Params
    inputs: tuple = ("input",)

    def __post_init__(self):
        if self.kind not in _KIND_PARAMS:
            raise GraphError(f"unknown layer kind {self.kind!r}")
        if not isinstance(self.params, _KIND_PARAMS[self.kind]):
            raise GraphError(f"layer {self.name!r}: {type(self.params).__name__} is not valid for kind {self.kind!r}")
        self.inputs = tuple(self.inputs)

    @property
    def activation_kind(self):
        if self.kind != "activation":
            return None
        return {LeakyReLU: "leaky_relu", QCFS: "qcfs", IFNeuron: "if_neuron"}[type(self.params)]


class NetworkGraph:
    """Validated, topologically ordered layer graph with one image input."""

    def __init__(self, layers, input_shape, class_count: int):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.class_count = int(class_count)
        self.order = self._validate()

    # -- structure -----------------------------------------------------
    def _validate(self):
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise GraphError("layer names must be unique")
        if "input" in names:
            raise GraphError("'input' is reserved for the network input")
        by_name = {l.name: l for l in self.layers}
        consumers = {n: [] for n in names}
        indeg = {}
        for layer in self.layers:
            if not layer.inputs:
                raise GraphError(f"layer {layer.name!r} has no inputs")
            if layer.kind != "concat" and len(layer.inputs) != 1:
                raise GraphError(f"layer {layer.name!r} takes exactly one input")
            for src in layer.inputs:
                if src != "input" and src not in by_name:
                    raise GraphError(f"layer {layer.name!r} references missing edge {src!r}")
                if src in by_name:
                    consumers[src].append(layer.name)
            indeg[layer.name] = sum(1 for s in layer.inputs if s != "input")
        # Kahn's algorithm; ties resolved by list position so order is stable.
        pos = {n: i for i, n in enumerate(names)}
        ready = sorted((n for n in names if indeg[n] == 0), key=pos.get)
        queue = deque(ready)
        order = []
        while queue:
            n = queue.popleft()
            order.append(n)
            newly = []
            for c in consumers[n]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    newly.append(c)
            for c in sorted(set(newly), key=pos.get):
                queue.append(c)
        if len(order) != len(names):
            raise GraphError("layer graph contains a cycle")
        heads = [l for l in self.layers if l.kind == "detect-head"]
        if len(heads) != 1 or order[-1] != heads[0].name or consumers[heads[0].name]:
            raise GraphError("exactly one detect-head is required and it must be terminal")
        terminal = [n for n in names if not consumers[n]]
        if terminal != [heads[0].name]:
            raise GraphError(f"dangling layers without consumers: {[n for n in terminal if n != heads[0].name]}")
        self._by_name = by_name
        self.output_shapes = self._infer_shapes(order, by_name)
        return order

    def _infer_shapes(self, order, by_name):
        shapes = {"input": self.input_shape}
        for name in order:
            layer = by_name[name]
            ins = [shapes[s] for s in layer.inputs]
            c, h, w = ins[0]
            p = layer.params
            if layer.kind == "conv":
                if c != p.in_channels:
                    raise ShapeError(f"layer {name!r} expects {p.in_channels} channels", ins[0], p.weights.shape)
                shapes[name] = (p.out_channels, *p.output_hw(h, w))
            elif layer.kind == "batchnorm":
                if c != p.channels:
                    raise ShapeError(f"layer {name!r} channel mismatch", ins[0], p.gamma.shape)
                shapes[name] = ins[0]
            elif layer.kind in ("avgpool", "maxpool"):
                shapes[name] = (c, (h - p.k) // p.s + 1, (w - p.k) // p.s + 1)
            elif layer.kind == "upsample-nearest":
                shapes[name] = (c, h * p.factor, w * p.factor)
            elif layer.kind == "concat":
                if any(s[1:] != ins[0][1:] for s in ins):
                    raise ShapeError(f"concat {name!r} inputs differ spatially", *ins)
                shapes[name] = (sum(s[0] for s in ins), h, w)
            elif layer.kind == "detect-head":
                if c != p.conv.in_channels:
                    raise ShapeError(f"head {name!r} channel mismatch", ins[0], p.conv.weights.shape)
                if p.conv.out_channels != p.num_anchors * (5 + p.class_count):
                    raise GraphError("head conv must emit anchors * (5 + classes) channels")
                shapes[name] = (p.conv.out_channels, *p.conv.output_hw(h, w))
            else:
                shapes[name] = ins[0]
        return shapes

    def layer(self, name: str) -> Layer:
        return self._by_name[name]

    @property
    def head(self) -> DetectHead:
        return self._by_name[self.order[-1]].params

    @property
    def anchors(self) -> np.ndarray:
        return self.head.anchors

    def activation_layers(self) -> list:
        """Activation layers in execution order."""
        return [self._by_name[n] for n in self.order if self._by_name[n].kind == "activation"]

    def has_kind(self, kind: str) -> bool:
        return any(l.kind == kind for l in self.layers)

    def copy(self) -> "NetworkGraph":
        return copy.deepcopy(self)

    @property
    def dtype(self):
        for layer in self.layers:
            if layer.kind == "conv":
                return layer.params.weights.dtype
        return self.head.conv.weights.dtype

    def __repr__(self):
        kinds = [l.activation_kind or l.kind for l in self.layers]
        return f"NetworkGraph({len(self.layers)} layers, input={self.input_shape}, classes={self.class_count}, {kinds})"


# --------------------------------------------------------------------------
# detection output and decoding


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class DetectionOutput:
    """Raw head logits shaped ``(N, A, 5 + C, H, W)`` plus decoding constants.

    Channel order per anchor: tx, ty, tw, th, objectness, class scores.
    Boxes decode as ``center = (2*sigmoid(t) - 0.5 + cell) * stride`` and
    ``size = (2*sigmoid(t))**2 * anchor``.
    """

    raw: np.ndarray
    anchors: np.ndarray
    stride: int

    @property
    def grid_shape(self):
        return self.raw.shape[3:]

    def _grid(self):
        h, w = self.grid_shape
        gy, gx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        return gx, gy

    @property
    def xy(self):
        gx, gy = self._grid()
        s = _sigmoid(self.raw[:, :, 0:2].astype(np.float64))
        cx = (2 * s[:, :, 0] - 0.5 + gx) * self.stride
        cy = (2 * s[:, :, 1] - 0.5 + gy) * self.stride
        return np.stack([cx, cy], axis=-1)

    @property
    def wh(self):
        s = _sigmoid(self.raw[:, :, 2:4].astype(np.float64))
        a = self.anchors.astype(np.float64).reshape(1, -1, 2, 1, 1)
        return np.moveaxis((2 * s) ** 2 * a, 2, -1)

    @property
    def boxes(self):
        """``(N, A, H, W, 4)`` boxes as x1, y1, x2, y2."""
        xy, wh = self.xy, self.wh
        return np.concatenate([xy - wh / 2, xy + wh / 2], axis=-1)

    @property
    def objectness(self):
        return _sigmoid(self.raw[:, :, 4].astype(np.float64))

    @property
    def class_scores(self):
        return _sigmoid(self.raw[:, :, 5:].astype(np.float64))


@dataclass(frozen=True)
class Detection:
    cls: int
    confidence: float
    box: tuple

    def __iter__(self):
        return iter((self.cls, self.confidence, self.box))


def box_iou_matrix(a, b):
    """Pairwise IoU between ``(n, 4)`` and ``(m, 4)`` xyxy boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def nms(boxes, scores, iou_threshold: float):
    """Greedy non-max suppression; returns kept indices by descending score."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-np.asarray(scores), kind="stable")
    keep = []
    while order.size:
        i = order[0]
        keep.append(int(i))
        if order.size == 1:
            break
        ious = box_iou_matrix(boxes[i], boxes[order[1:]])[0]
        order = order[1:][ious <= iou_threshold]
    return keep


def decode_detections(out: DetectionOutput, conf_threshold: float = 0.25, nms_iou: float = 0.5, max_det: int = 100):
    """Per-image lists of :class:`Detection` after per-class greedy NMS.

    Each anchor cell proposes its best class with confidence
    ``objectness * class score``.
    """
    if not (0 <= conf_threshold <= 1 and 0 <= nms_iou <= 1):
        raise ValueError("thresholds must lie in [0, 1]")
    boxes = out.boxes
    conf_all = out.objectness[:, :, None] * out.class_scores
    n = out.raw.shape[0]
    results = []
    for b in range(n):
        conf = conf_all[b]  # (A, C, H, W)
        cls = conf.argmax(axis=1)
        best = np.take_along_axis(conf, cls[:, None], axis=1)[:, 0]
        mask = best > conf_threshold
        bx = boxes[b][mask]
        sc = best[mask]
        cl = cls[mask]
        dets = []
        for c in np.unique(cl):
            idx = np.flatnonzero(cl == c)
            for k in nms(bx[idx], sc[idx], nms_iou):
                j = idx[k]
                dets.append(Detection(int(c), float(sc[j]), tuple(float(v) for v in bx[j])))
        dets.sort(key=lambda d: -d.confidence)
        results.append(dets[:max_det])
    return results


# --------------------------------------------------------------------------
# ANN execution


def _check_image(net, image):
    image = np.asarray(image)
    if image.ndim == 3:
        image = image[None]
    if image.shape[1:] != net.input_shape:
        raise ShapeError("image shape differs from network input", image.shape[1:], net.input_shape)
    return image.astype(net.dtype, copy=False)


def _head_output(head: DetectHead, x):
    raw = ops.conv2d(x, head.conv)
    n, _, h, w = raw.shape
    return raw.reshape(n, head.num_anchors, 5 + head.class_count, h, w)


def _apply(layer: Layer, ins, train=False, tape=None):
    p = layer.params
    x = ins[0]
    kind = layer.kind
    if kind == "conv":
        if tape is not None:
            out, cols = ops.conv2d(x, p, return_cols=True)
            tape.append((layer, ins, cols))
            return out
        return ops.conv2d(x, p)
    if kind == "batchnorm":
        if train:
            out, cache = ops.batch_norm_train(x, p)
            if tape is not None:
                tape.append((layer, ins, cache))
            return out
        if tape is not None:
            tape.append((layer, ins, None))
        return ops.batch_norm_infer(x, p)
    if tape is not None:
        tape.append((layer, ins, None))
    if kind == "activation":
        if isinstance(p, LeakyReLU):
            return ops.leaky_relu(x, p.slope)
        if isinstance(p, QCFS):
            return qcfs_forward(x, p.params)
        raise SNNRequiredError(f"layer {layer.name!r} is an integrate-and-fire neuron; use forward_snn")
    if kind == "avgpool":
        return ops.avg_pool2d(x, p.k, p.s)
    if kind == "maxpool":
        return ops.max_pool2d(x, p.k, p.s)
    if kind == "upsample-nearest":
        return ops.upsample_nearest(x, p.factor)
    if kind == "concat":
        return np.concatenate(ins, axis=1)
    if kind == "detect-head":
        return _head_output(p, x)
    raise GraphError(f"unhandled layer kind {kind!r}")


def _execute(net: NetworkGraph, image, train=False, tape=None):
    values = {"input": image}
    for name in net.order:
        layer = net.layer(name)
        values[name] = _apply(layer, [values[s] for s in layer.inputs], train, tape)
    return values[net.order[-1]]


def forward_ann(net: NetworkGraph, image) -> DetectionOutput:
    """Inference-mode forward pass (batch norm uses running statistics)."""
    image = _check_image(net, image)
    raw = _execute(net, image)
    return DetectionOutput(raw, net.anchors, net.head.stride)


def layer_outputs(net: NetworkGraph, image, upto: str | None = None) -> dict:
    """Inference-mode output of every layer (keyed by name, plus ``"input"``).

    Execution stops after ``upto`` when given.
    """
    image = _check_image(net, image)
    values = {"input": image}
    if upto == "input":
        return values
    if upto is not None and upto not in net._by_name:
        raise GraphError(f"no layer named {upto!r}")
    for name in net.order:
        layer = net.layer(name)
        values[name] = _apply(layer, [values[s] for s in layer.inputs])
        if name == upto:
            break
    return values


def forward_train(net: NetworkGraph, image, train: bool = True):
    """Forward pass that records a tape for :func:`backward`.

    With ``train`` true, batch norm normalizes by batch statistics and
    updates its running averages in place.
    """
    image = _check_image(net, image)
    tape = []
    raw = _execute(net, image, train=train, tape=tape)
    return DetectionOutput(raw, net.anchors, net.head.stride), tape


def backward(net: NetworkGraph, tape, grad_raw):
    """Backpropagate ``dLoss/draw`` through the tape.

    Returns ``{layer_name: {param_name: grad}}``; QCFS layers report a float
    under ``"lam"``.  The input gradient is stored under ``"input"``.
    """
    grads = {}
    upstream = {net.order[-1]: grad_raw}
    for layer, ins, cache in reversed(tape):
        g = upstream.pop(layer.name, None)
        if g is None:
            continue
        p = layer.params
        kind = layer.kind
        x = ins[0]
        if kind == "detect-head":
            n, a, f, h, w = g.shape
            dx, dw, db = ops.conv2d_backward(g.reshape(n, a * f, h, w), x, p.conv)
            grads[layer.name] = {"weights": dw, "bias": db}
            gin = [dx]
        elif kind == "conv":
            dx, dw, db = ops.conv2d_backward(g, x, p, cols=cache)
            grads[layer.name] = {"weights": dw, "bias": db}
            gin = [dx]
        elif kind == "batchnorm":
            if cache is None:
                gin = [ops.batch_norm_infer_backward(g, p)]
            else:
                dx, dgam, dbeta = ops.batch_norm_train_backward(g, p, cache)
                grads[layer.name] = {"gamma": dgam, "beta": dbeta}
                gin = [dx]
        elif kind == "activation":
            if isinstance(p, LeakyReLU):
                gin = [ops.leaky_relu_backward(g, x, p.slope)]
            else:
                dz, dlam = qcfs_layer_backward(g, x, p.params)
                grads[layer.name] = {"lam": dlam}
                gin = [dz]
        elif kind == "avgpool":
            gin = [ops.avg_pool2d_backward(g, x.shape, p.k, p.s)]
        elif kind == "maxpool":
            gin = [ops.max_pool2d_backward(g, x, p.k, p.s)]
        elif kind == "upsample-nearest":
            gin = [ops.upsample_nearest_backward(g, p.factor)]
        elif kind == "concat":
            splits = np.cumsum([t.shape[1] for t in ins])[:-1]
            gin = np.split(g, splits, axis=1)
        else:
            raise GraphError(f"no backward for {kind!r}")
        for src, gi in zip(layer.inputs, gin):
            if src in upstream:
                upstream[src] = upstream[src] + gi
            else:
                upstream[src] = gi
    grads["input"] = upstream.get("input")
    return grads


# --------------------------------------------------------------------------
# SNN execution


class _Signal:
    """A static ``(N, ...)`` tensor or a temporal ``(T*N, ...)`` stack."""

    __slots__ = ("data", "temporal")

    def __init__(self, data, temporal=False):
        self.data = data
        self.temporal = temporal


def forward_snn(net: NetworkGraph, image, T: int, mode: str = "rate-averaged", input_mode: str = "constant-encode"):
    """Run ``T`` timesteps with the image presented identically at each step.

    ``mode`` selects how integrate-and-fire outputs reach downstream layers:
    ``"per-step"`` feeds the binary spikes (scaled by theta) through every
    later layer at every step; ``"rate-averaged"`` hands the spike rate to
    downstream layers as an analog tensor.  The detect head always decodes
    the time-averaged pre-head tensor.

    Returns ``(DetectionOutput, spike_stats)`` with per-IF-layer spike and
    neuron counts.
    """
    if int(T) != T or T < 1:
        raise ValueError(f"T must be an integer >= 1, got {T}")
    if mode not in PROPAGATION_MODES:
        raise ValueError(f"mode must be one of {PROPAGATION_MODES}")
    if input_mode != "constant-encode":
        raise ValueError("only constant-encode input is supported")
    if not any(l.activation_kind == "if_neuron" for l in net.layers):
        raise GraphError("network has no integrate-and-fire layers; use forward_ann")
    image = _check_image(net, image)
    n = image.shape[0]
    dtype = image.dtype
    stats = {}
    values = {"input": _Signal(image)}
    for name in net.order:
        layer = net.layer(name)
        ins = [values[s] for s in layer.inputs]
        if layer.kind == "detect-head":
            x = ins[0]
            data = x.data.reshape((T, n) + x.data.shape[1:]).mean(axis=0, dtype=np.float64).astype(dtype) if x.temporal else x.data
            raw = _head_output(layer.params, data)
            values[name] = _Signal(raw)
        elif layer.activation_kind == "if_neuron":
            values[name] = _if_layer(layer, ins[0], T, n, mode, stats, dtype)
        elif layer.kind == "concat" and any(s.temporal for s in ins) and not all(s.temporal for s in ins):
            parts = [s.data if s.temporal else np.concatenate([s.data] * T, axis=0) for s in ins]
            values[name] = _Signal(np.concatenate(parts, axis=1), True)
        else:
            values[name] = _Signal(_apply(layer, [s.data for s in ins]), any(s.temporal for s in ins))
    out = values[net.order[-1]].data
    return DetectionOutput(out, net.anchors, net.head.stride), stats


def merge_spike_stats(total: dict, stats: dict) -> dict:
    """Add the counts of one :func:`forward_snn` batch into ``total`` (in place)."""
    for name, st in stats.items():
        acc = total.setdefault(name, {"spikes": 0, "neurons": 0, "T": st["T"]})
        acc["spikes"] += st["spikes"]
        acc["neurons"] += st["neurons"]
    for acc in total.values():
        acc["rate"] = acc["spikes"] / (acc["neurons"] * acc["T"]) if acc["neurons"] else 0.0
    return total


def _if_layer(layer, x: _Signal, T, n, mode, stats, dtype):
    theta = layer.params.theta
    shape = (n,) + x.data.shape[1:]
    state = if_init(shape, theta)
    steps = x.data.reshape((T, n) + x.data.shape[1:]) if x.temporal else None
    const = x.data.astype(np.float64) if not x.temporal else None
    total = np.zeros(shape, dtype=np.float64)
    spikes_out = [] if mode == "per-step" else None
    count = 0
    for t in range(T):
        s, state = if_step(state, const if const is not None else steps[t].astype(np.float64))
        count += int(s.sum())
        if spikes_out is not None:
            spikes_out.append((s * theta).astype(dtype))
        else:
            total += s
    stats[layer.name] = {"spikes": count, "neurons": int(np.prod(shape)), "T": T}
    if spikes_out is not None:
        return _Signal(np.concatenate(spikes_out, axis=0), True)
    return _Signal((total / T * theta).astype(dtype))


# --------------------------------------------------------------------------
# construction and rewriting


def normalize_activation(kind: str) -> str:
    k = kind.lower().replace("-", "_")
    if k in ("relu", "leaky_relu", "leakyrelu"):
        return "leaky_relu"
    if k in ("qcfs", "if_neuron"):
        return k
    raise ValueError(f"unknown activation kind {kind!r}")


def fold_network_batchnorm(net: NetworkGraph) -> NetworkGraph:
    """Fold every conv -> batchnorm pair into the conv and drop the BN layer."""
    consumers = {}
    for layer in net.layers:
        for s in layer.inputs:
            consumers.setdefault(s, []).append(layer.name)
    rename = {}
    keep = []
    convs = {}
    for layer in net.layers:
        layer = copy.deepcopy(layer)
        if layer.kind == "batchnorm":
            src = layer.inputs[0]
            src_layer = net.layer(src) if src != "input" else None
            if src_layer is not None and src_layer.kind == "conv" and consumers[src] == [layer.name]:
                convs[src].params = ops.fold_batchnorm(convs[src].params, layer.params)
                rename[layer.name] = src
                continue
        if layer.kind == "conv":
            convs[layer.name] = layer
        keep.append(layer)
    for layer in keep:
        layer.inputs = tuple(rename.get(s, s) for s in layer.inputs)
    return NetworkGraph(keep, net.input_shape, net.class_count)


def _he(rng, shape, dtype):
    fan_in = shape[1] * shape[2] * shape[3]
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


#: (out_channels, kernel, followed_by_pool) for the backbone BConv blocks.
TINY_BACKBONE = (
    (16, 3, True),
    (32, 3, True),
    (32, 3, False),
    (64, 3, True),
    (64, 3, False),
    (32, 1, False),
    (32, 3, False),
)


def build_tiny_detector(
    class_count: int = 3,
    L: int = 4,
    activation: str = "qcfs",
    seed: int = 0,
    lam_init: float = 8.0,
    input_shape=(3, 64, 64),
    anchors=None,
    slope: float = 0.1,
    dtype=np.float32,
) -> NetworkGraph:
    """A 9-conv BConv detector with one stride-8 head.

    QCFS variants pool with averages; leaky-ReLU variants with max.  The last
    two backbone blocks are concatenated (a one-level ELAN-style
    aggregation) and fused by a 1x1 BConv before the head.
    """
    if class_count < 1:
        raise ValueError("class_count must be >= 1")
    activation = normalize_activation(activation)
    if activation == "if_neuron":
        raise ValueError("build with qcfs and convert to obtain integrate-and-fire layers")
    rng = np.random.default_rng(seed)
    anchors = DEFAULT_ANCHORS if anchors is None else np.asarray(anchors, dtype=np.float32)
    pool_kind = "avgpool" if activation == "qcfs" else "maxpool"
    layers = []
    prev, cin = "input", input_shape[0]
    stride = 1
    outputs = []

    def bconv(idx, cout, k, src, cin):
        cname, bname, aname = f"conv{idx}", f"bn{idx}", f"act{idx}"
        w = _he(rng, (cout, cin, k, k), dtype)
        layers.append(Layer(cname, "conv", ConvSpec(w, np.zeros(cout, dtype), 1, k // 2), (src,)))
        layers.append(Layer(bname, "batchnorm", BatchNormSpec.identity(cout, dtype), (cname,)))
        act = QCFS(QCFSParams(lam_init, L, 0.5)) if activation == "qcfs" else LeakyReLU(slope)
        layers.append(Layer(aname, "activation", act, (bname,)))
        return aname

    for i, (cout, k, pool) in enumerate(TINY_BACKBONE, start=1):
        prev = bconv(i, cout, k, prev, cin)
        outputs.append((prev, cout))
        cin = cout
        if pool:
            layers.append(Layer(f"pool{i}", pool_kind, Pool(2, 2), (prev,)))
            prev = f"pool{i}"
            stride *= 2
    (a, ca), (b, cb) = outputs[-2], outputs[-1]
    layers.append(Layer("cat", "concat", Concat(), (a, b)))
    n = len(TINY_BACKBONE) + 1
    prev = bconv(n, 64, 1, "cat", ca + cb)
    na = len(anchors)
    hw = _he(rng, (na * (5 + class_count), 64, 1, 1), dtype) * 0.1
    hb = np.zeros((na, 5 + class_count), dtype)
    cells = (input_shape[1] // stride) * (input_shape[2] // stride)
    hb[:, 4] = np.log(2.0 / (cells * na))
    hb[:, 5:] = np.log(0.6 / max(class_count - 0.99, 0.01))
    head = DetectHead(ConvSpec(hw.astype(dtype), hb.reshape(-1).astype(dtype)), anchors, class_count, stride)
    layers.append(Layer("head", "detect-head", head, (prev,)))
    return NetworkGraph(layers, input_shape, class_count)
