"""Quantization clip-floor-shift (QCFS) activation and its STE gradients.

``h(z) = lam * clip(floor(z * L / lam + phi) / L, 0, 1)``

The activation is evaluated in float64 and cast back to the input dtype so
that it agrees bit-for-bit with the integrate-and-fire simulation in
:mod:`qcfs_yolo.neuron` at ``T == L``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_ops import ShapeError

__all__ = [
    "QCFSParams",
    "BANDS",
    "qcfs_forward",
    "qcfs_grad_z",
    "qcfs_grad_lambda",
    "qcfs_layer_backward",
    "ste_band",
]

#: ``symmetric`` is the band (-lam/2L, lam - lam/2L); ``printed`` keeps the
#: double negative literally, giving (-lam/2L, lam + lam/2L).
BANDS = ("symmetric", "printed")


@dataclass
class QCFSParams:
    lam: float = 8.0
    L: int = 4
    phi: float = 0.5

    def __post_init__(self):
        self.lam = float(self.lam)
        if not (np.isfinite(self.lam) and self.lam > 0):
            raise ValueError(f"lambda must be a positive finite number, got {self.lam}")
        if int(self.L) != self.L or self.L < 1:
            raise ValueError(f"L must be an integer >= 1, got {self.L}")
        self.L = int(self.L)
        if not 0.0 <= self.phi < 1.0:
            raise ValueError(f"phi must lie in [0, 1), got {self.phi}")


def _out_dtype(z):
    return z.dtype if np.issubdtype(z.dtype, np.floating) else np.float64


def qcfs_forward(z, p: QCFSParams) -> np.ndarray:
    z = np.asarray(z)
    q = z.astype(np.float64)
    q *= p.L
    q /= p.lam
    q += p.phi
    np.floor(q, out=q)
    np.clip(q, 0, p.L, out=q)
    q /= p.L
    q *= p.lam
    return q.astype(_out_dtype(z), copy=False)


def ste_band(p: QCFSParams, band: str = "symmetric") -> tuple[float, float]:
    """Open interval on which the straight-through gradient passes."""
    if band not in BANDS:
        raise ValueError(f"band must be one of {BANDS}, got {band!r}")
    half = p.lam / (2 * p.L)
    return -half, (p.lam - half if band == "symmetric" else p.lam + half)


def qcfs_grad_z(z, p: QCFSParams, band: str = "symmetric") -> np.ndarray:
    z = np.asarray(z)
    lo, hi = ste_band(p, band)
    zz = z.astype(np.float64)
    return ((zz > lo) & (zz < hi)).astype(_out_dtype(z))


def qcfs_grad_lambda(z, p: QCFSParams, band: str = "symmetric") -> np.ndarray:
    """Elementwise dh/dlambda: (h - z)/lam inside the band, 1 at or above it, else 0.

    ``z`` exactly on the lower edge belongs to neither printed case and gets 0.
    """
    z = np.asarray(z)
    lo, hi = ste_band(p, band)
    zz = z.astype(np.float64)
    h = qcfs_forward(zz, p)
    inside = (zz > lo) & (zz < hi)
    g = np.where(inside, (h - zz) / p.lam, 0.0)
    g = np.where(zz >= hi, 1.0, g)
    return g.astype(_out_dtype(z))


def qcfs_layer_backward(upstream_grad, z, p: QCFSParams, band: str = "symmetric"):
    """Chain rule through one QCFS layer whose lambda is shared by all units.

    Returns ``(grad_z, grad_lambda)`` where ``grad_lambda`` is a float.
    """
    upstream_grad = np.asarray(upstream_grad)
    z = np.asarray(z)
    if upstream_grad.shape != z.shape:
        raise ShapeError("upstream gradient shape differs from z", upstream_grad.shape, z.shape)
    lo, hi = ste_band(p, band)
    inside = (z > lo) & (z < hi)
    grad_z = upstream_grad * inside
    # sum(g * dh/dlam) split into the band term and the saturated term
    band_term = np.sum(grad_z * (qcfs_forward(z, p) - z), dtype=np.float64) / p.lam
    sat_term = np.sum(upstream_grad, where=z >= hi, dtype=np.float64)
    return grad_z, float(band_term + sat_term)
