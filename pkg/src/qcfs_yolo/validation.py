"""Input checks shared by the estimator facade and the CLI."""
from __future__ import annotations

import numbers

import numpy as np
from sklearn.utils.validation import check_array

from .tensor_ops import ShapeError

__all__ = ["check_images", "check_truths", "check_positive_int", "check_probability", "parse_int_list", "parse_float_list"]


def check_images(X, input_shape=None, dtype=np.float32) -> np.ndarray:
    """Return ``X`` as a finite ``(N, C, H, W)`` array of ``dtype``.

    A single ``(C, H, W)`` image is promoted to a batch of one.
    """
    X = check_array(X, allow_nd=True, dtype=dtype, ensure_2d=False, ensure_min_samples=1)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ShapeError("images must be (N, C, H, W)", X.shape)
    if input_shape is not None and tuple(X.shape[1:]) != tuple(input_shape):
        raise ShapeError("image shape does not match the network input", X.shape[1:], tuple(input_shape))
    return X


def check_truths(y, n_images: int, class_count: int | None = None) -> list:
    """Validate per-image ground truth: ``y[i]`` lists ``(cls, (x1, y1, x2, y2))``."""
    if y is None:
        raise ValueError("ground truth is required")
    y = list(y)
    if len(y) != n_images:
        raise ValueError(f"got {len(y)} truth lists for {n_images} images")
    out = []
    for i, objs in enumerate(y):
        clean = []
        for cls, box in objs:
            if not isinstance(cls, numbers.Integral) or cls < 0 or (class_count is not None and cls >= class_count):
                raise ValueError(f"image {i}: invalid class id {cls!r}")
            box = tuple(float(v) for v in box)
            if len(box) != 4 or not all(np.isfinite(box)):
                raise ValueError(f"image {i}: box must be 4 finite numbers, got {box}")
            if box[2] <= box[0] or box[3] <= box[1]:
                raise ValueError(f"image {i}: box {box} has non-positive area")
            clean.append((int(cls), box))
        out.append(clean)
    return out


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_probability(value, name: str) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {value}")
    return value


def parse_int_list(text) -> list:
    """``"4,8,16"`` -> ``[4, 8, 16]``."""
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    return [int(v) for v in str(text).split(",") if v.strip()]


def parse_float_list(text) -> list:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).split(",") if v.strip()]
