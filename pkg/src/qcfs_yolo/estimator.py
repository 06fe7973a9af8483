"""scikit-learn style wrappers around the functional core.

These follow the usual estimator conventions (constructor arguments only
stored, learned state in trailing-underscore attributes, ``get_params`` /
``set_params`` from :class:`~sklearn.base.BaseEstimator`).  Detection
targets are not a 1-D ``y`` vector, so the wrappers are not meant for
sklearn's cross-validation utilities.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .converter import SurgeryPlan, convert
from .graph import (
    NetworkGraph,
    build_tiny_detector,
    decode_detections,
    forward_ann,
    forward_snn,
    merge_spike_stats,
)
from .qcfs import QCFSParams, qcfs_forward, qcfs_grad_lambda, qcfs_grad_z
from .trainer import TrainConfig, evaluate, predict_detections, train
from .validation import check_images, check_positive_int, check_probability, check_truths

__all__ = ["QCFSActivation", "TinyYoloDetector", "SpikingYoloDetector"]


class QCFSActivation(TransformerMixin, BaseEstimator):
    """Elementwise QCFS quantizer as a stateless transformer."""

    def __init__(self, lam: float = 8.0, L: int = 4, phi: float = 0.5, band: str = "symmetric"):
        self.lam = lam
        self.L = L
        self.phi = phi
        self.band = band

    def _params(self) -> QCFSParams:
        return QCFSParams(self.lam, self.L, self.phi)

    def fit(self, X, y=None):
        X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64)
        self.params_ = self._params()
        self.n_features_in_ = X.shape[1] if X.ndim > 1 else 1
        return self

    def transform(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, allow_nd=True, ensure_2d=False, dtype=(np.float64, np.float32))
        return qcfs_forward(X, self.params_)

    def gradient(self, X):
        """``(dh/dz, dh/dlambda)`` under the straight-through estimator."""
        check_is_fitted(self, "params_")
        X = check_array(X, allow_nd=True, ensure_2d=False, dtype=(np.float64, np.float32))
        return qcfs_grad_z(X, self.params_, self.band), qcfs_grad_lambda(X, self.params_, self.band)


class TinyYoloDetector(BaseEstimator):
    """Train and run the single-scale toy detector.

    ``fit(X, y)`` takes images ``(N, 3, H, W)`` and per-image lists of
    ``(class_id, (x1, y1, x2, y2))`` in pixels.  Pass ``X_val``/``y_val``
    to get metric columns in ``curves_``.
    """

    def __init__(
        self,
        activation: str = "qcfs",
        L: int = 4,
        class_count: int = 3,
        epochs: int = 50,
        batch_size: int = 16,
        learning_rate: float | None = None,
        momentum: float = 0.9,
        weight_decay: float = 5e-4,
        box_weight: float = 0.05,
        obj_weight: float = 1.0,
        cls_weight: float = 0.5,
        cosine: bool = True,
        lam_init: float = 8.0,
        conf_threshold: float = 0.25,
        nms_iou: float = 0.5,
        random_state: int = 0,
    ):
        self.activation = activation
        self.L = L
        self.class_count = class_count
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.box_weight = box_weight
        self.obj_weight = obj_weight
        self.cls_weight = cls_weight
        self.cosine = cosine
        self.lam_init = lam_init
        self.conf_threshold = conf_threshold
        self.nms_iou = nms_iou
        self.random_state = random_state

    def train_config(self) -> TrainConfig:
        kw = dict(
            epochs=check_positive_int(self.epochs, "epochs"),
            batch_size=check_positive_int(self.batch_size, "batch_size"),
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            seed=self.random_state,
            L=self.L,
            activation=self.activation,
            box_weight=self.box_weight,
            obj_weight=self.obj_weight,
            cls_weight=self.cls_weight,
            cosine=self.cosine,
        )
        if self.learning_rate is not None:
            kw["learning_rate"] = self.learning_rate
        return TrainConfig(**kw)

    def fit(self, X, y, X_val=None, y_val=None, on_epoch=None):
        config = self.train_config()
        X = check_images(X)
        y = check_truths(y, len(X), self.class_count)
        if X_val is not None:
            X_val = check_images(X_val, X.shape[1:])
            y_val = check_truths(y_val, len(X_val), self.class_count)
        net = build_tiny_detector(
            self.class_count, self.L, config.activation, seed=self.random_state,
            lam_init=self.lam_init, input_shape=X.shape[1:],
        )
        self.net_, self.curves_ = train(net, X, y, config, X_val, y_val, on_epoch=on_epoch)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    @classmethod
    def from_network(cls, net: NetworkGraph, **params):
        """Wrap an already trained graph (e.g. one read from a checkpoint)."""
        kinds = {l.activation_kind for l in net.activation_layers()}
        params.setdefault("activation", "qcfs" if "qcfs" in kinds else "leaky_relu")
        params.setdefault("class_count", net.class_count)
        est = cls(**params)
        est.net_ = net
        est.curves_ = []
        est.n_features_in_ = int(np.prod(net.input_shape))
        return est

    def _net(self):
        check_is_fitted(self, "net_")
        return self.net_

    def decision_function(self, X) -> np.ndarray:
        """Raw head logits ``(N, A, 5 + C, H, W)``."""
        net = self._net()
        return forward_ann(net, check_images(X, net.input_shape)).raw

    def predict(self, X) -> list:
        """Per-image lists of :class:`~qcfs_yolo.graph.Detection`."""
        net = self._net()
        conf = check_probability(self.conf_threshold, "conf_threshold")
        return predict_detections(net, check_images(X, net.input_shape), conf, self.nms_iou)

    def evaluate(self, X, y, conf: float = 0.001):
        net = self._net()
        X = check_images(X, net.input_shape)
        return evaluate(net, X, check_truths(y, len(X), net.class_count), conf, self.nms_iou)

    def score(self, X, y) -> float:
        """mAP@.5 over the labelled set."""
        return self.evaluate(X, y).map50

    def to_snn(self, plan="last-only", T: int = 4, mode: str = "per-step") -> "SpikingYoloDetector":
        return SpikingYoloDetector(self, plan=plan, T=T, mode=mode, conf_threshold=self.conf_threshold,
                                   nms_iou=self.nms_iou).fit()


class SpikingYoloDetector(BaseEstimator):
    """Converted detector: QCFS layers chosen by ``plan`` become IF neurons."""

    def __init__(self, detector=None, plan="last-only", T: int = 4, mode: str = "per-step",
                 conf_threshold: float = 0.25, nms_iou: float = 0.5):
        self.detector = detector
        self.plan = plan
        self.T = T
        self.mode = mode
        self.conf_threshold = conf_threshold
        self.nms_iou = nms_iou

    def fit(self, X=None, y=None):
        """Perform the conversion; ``X`` and ``y`` are ignored."""
        source = self.detector
        if isinstance(source, TinyYoloDetector):
            source = source._net()
        if not isinstance(source, NetworkGraph):
            raise TypeError("detector must be a fitted TinyYoloDetector or a NetworkGraph")
        self.plan_ = SurgeryPlan(self.plan, check_positive_int(self.T, "T"), self.mode)
        self.snn_ = convert(source, self.plan_)
        self.spike_stats_ = {}
        return self

    def _forward(self, X):
        check_is_fitted(self, "snn_")
        out, stats = forward_snn(self.snn_, X, self.T, self.mode)
        merge_spike_stats(self.spike_stats_, stats)
        return out

    def predict(self, X) -> list:
        check_is_fitted(self, "snn_")
        X = check_images(X, self.snn_.input_shape)
        conf = check_probability(self.conf_threshold, "conf_threshold")
        self.spike_stats_ = {}
        return decode_detections(self._forward(X), conf, self.nms_iou)

    def evaluate(self, X, y, conf: float = 0.001):
        check_is_fitted(self, "snn_")
        X = check_images(X, self.snn_.input_shape)
        y = check_truths(y, len(X), self.snn_.class_count)
        self.spike_stats_ = {}
        return evaluate(self.snn_, X, y, conf, self.nms_iou, forward=self._forward)

    def score(self, X, y) -> float:
        return self.evaluate(X, y).map50
