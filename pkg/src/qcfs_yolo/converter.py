"""ANN -> SNN surgery and conversion-error measurement."""
from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .graph import (
    PROPAGATION_MODES,
    IFNeuron,
    GraphError,
    NetworkGraph,
    forward_snn,
    fold_network_batchnorm,
    layer_outputs,
)
from .neuron import if_run_constant
from .qcfs import QCFSParams, qcfs_forward

__all__ = [
    "PLANS",
    "SurgeryPlan",
    "ConversionReport",
    "RESULT_COLUMNS",
    "convert",
    "conversion_error_empirical",
    "layer_conversion_error",
    "layer_surgery_experiment",
    "rows_to_csv",
]

PLANS = ("first-only", "last-only", "all")
RESULT_COLUMNS = ("plan", "mode", "T", "L", "phi", "lambda", "map50", "mean_err", "std_err", "max_err", "n")

#: Monte Carlo samples per RNG stream; fixed so results do not depend on threads
CHUNK = 1 << 17


@dataclass
class SurgeryPlan:
    """Which activation layers to replace, and how the SNN is then simulated.

    ``target`` is ``"first-only"``, ``"last-only"``, ``"all"`` or an explicit
    collection of 0-based positions among the network's activation layers.
    """

    target: object = "last-only"
    T: int = 4
    mode: str = "per-step"

    def __post_init__(self):
        if isinstance(self.target, str):
            if self.target not in PLANS:
                raise ValueError(f"plan must be one of {PLANS} or an index set, got {self.target!r}")
        else:
            self.target = tuple(sorted({int(i) for i in self.target}))
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.mode not in PROPAGATION_MODES:
            raise ValueError(f"mode must be one of {PROPAGATION_MODES}")

    @property
    def label(self) -> str:
        return self.target if isinstance(self.target, str) else "idx:" + ",".join(map(str, self.target))

    def select(self, net: NetworkGraph) -> list:
        acts = net.activation_layers()
        if not acts:
            raise GraphError("network has no activation layers")
        if self.target == "first-only":
            chosen = [acts[0]]
        elif self.target == "last-only":
            chosen = [acts[-1]]
        elif self.target == "all":
            chosen = [a for a in acts if a.activation_kind == "qcfs"]
        else:
            bad = [i for i in self.target if not 0 <= i < len(acts)]
            if bad:
                raise GraphError(f"activation indices {bad} out of range (network has {len(acts)})")
            chosen = [acts[i] for i in self.target]
        if not chosen or any(a.activation_kind != "qcfs" for a in chosen):
            raise GraphError(f"plan {self.label!r} selects no QCFS activation (already converted?)")
        return [a.name for a in chosen]


def convert(net: NetworkGraph, plan: SurgeryPlan) -> NetworkGraph:
    """Replace the selected QCFS layers with IF neurons (theta = trained lambda).

    Batch norm is folded into the preceding convolutions; no other weight
    is touched.
    """
    names = plan.select(net)
    out = fold_network_batchnorm(net)
    for name in names:
        layer = out.layer(name)
        layer.params = IFNeuron(theta=layer.params.params.lam)
    return out


# --------------------------------------------------------------------------
# conversion error


@dataclass
class ConversionReport:
    """Statistics of ``rate(IF) - QCFS`` over a sample of inputs."""

    mean: float
    std: float
    n: int
    max_abs: float
    T: int
    L: int
    phi: float
    lam: float
    z_range: tuple = field(default=(np.nan, np.nan))

    def __post_init__(self):
        if self.n <= 0 or self.std < 0:
            raise ValueError("report needs n > 0 and std >= 0")

    @property
    def standard_error(self) -> float:
        return self.std / np.sqrt(self.n)

    def within_bound(self, k: float = 4.0) -> bool:
        """``|mean| <= k * std / sqrt(n)``."""
        return abs(self.mean) <= k * self.standard_error

    def as_row(self, plan="scalar", mode="constant", map50=None) -> dict:
        return {
            "plan": plan, "mode": mode, "T": self.T, "L": self.L, "phi": self.phi, "lambda": self.lam,
            "map50": map50, "mean_err": self.mean, "std_err": self.std, "max_err": self.max_abs, "n": self.n,
        }


def _moments(err):
    n = err.size
    mean = float(err.mean())
    m2 = float(np.sum((err - mean) ** 2))
    return n, mean, m2, float(np.abs(err).max()) if n else 0.0


def _combine(parts):
    """Ordered pairwise combination of (n, mean, M2, max) chunk moments."""
    n, mean, m2, mx = parts[0]
    for nb, mb, m2b, mxb in parts[1:]:
        tot = n + nb
        delta = mb - mean
        mean = mean + delta * nb / tot
        m2 = m2 + m2b + delta * delta * n * nb / tot
        n, mx = tot, max(mx, mxb)
    return n, mean, m2, mx


def _error_chunk(args):
    seed, size, lo, hi, p, theta, T = args
    z = np.random.default_rng(seed).uniform(lo, hi, size)
    err = if_run_constant(z, theta, T).rate - qcfs_forward(z, p)
    return _moments(err)


def conversion_error_empirical(
    p: QCFSParams,
    theta: float,
    T: int,
    N: int,
    z_range=None,
    rng_seed: int = 0,
    threads: int = 1,
) -> ConversionReport:
    """Monte Carlo estimate of the conversion error for i.i.d. uniform inputs.

    ``theta`` must equal ``p.lam``.  Samples are drawn in fixed-size chunks,
    each from its own stream spawned from ``rng_seed``, and the chunk moments
    are merged in chunk order, so the result is the same for any ``threads``.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    if float(theta) != p.lam:
        raise ValueError(f"threshold {theta} must equal lambda {p.lam}")
    lo, hi = z_range if z_range is not None else (-p.lam, 2 * p.lam)
    sizes = [CHUNK] * (N // CHUNK) + ([N % CHUNK] if N % CHUNK else [])
    seeds = np.random.SeedSequence(rng_seed).spawn(len(sizes))
    jobs = [(s, k, lo, hi, p, theta, T) for s, k in zip(seeds, sizes)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(_error_chunk, jobs))
    else:
        parts = [_error_chunk(j) for j in jobs]
    n, mean, m2, mx = _combine(parts)
    std = float(np.sqrt(m2 / (n - 1))) if n > 1 else 0.0
    return ConversionReport(mean, std, n, mx, T, p.L, p.phi, p.lam, (lo, hi))


def layer_conversion_error(net: NetworkGraph, layer_name: str, images, T: int) -> ConversionReport:
    """Conversion error of one QCFS layer on the inputs it sees in ANN mode."""
    layer = net.layer(layer_name)
    if layer.activation_kind != "qcfs":
        raise GraphError(f"layer {layer_name!r} is not a QCFS activation")
    p = layer.params.params
    src = layer.inputs[0]
    z = _layer_input(net, src, images)
    err = if_run_constant(z, p.lam, T).rate - qcfs_forward(z.astype(np.float64), p)
    n, mean, m2, mx = _moments(err.ravel())
    std = float(np.sqrt(m2 / (n - 1))) if n > 1 else 0.0
    return ConversionReport(mean, std, n, mx, T, p.L, p.phi, p.lam)


def _layer_input(net, name, images):
    """Inference-mode output of layer ``name`` (or the image itself)."""
    return layer_outputs(net, images, upto=name)[name]


def layer_surgery_experiment(
    qcfs_net: NetworkGraph,
    images,
    truths,
    T_values=(4, 8, 16),
    plans=("first-only", "last-only"),
    modes=PROPAGATION_MODES,
    conf: float = 0.001,
    nms_iou: float = 0.5,
    error_images: int = 32,
):
    """Convert, simulate and score every (plan, mode, T) combination.

    Returns one :data:`RESULT_COLUMNS` row per combination; the error
    columns describe the converted layer on the first ``error_images``
    evaluation images.
    """
    from .trainer import evaluate

    if len(images) == 0:
        raise ValueError("evaluation set is empty")
    rows = []
    for plan_name in plans:
        for mode in modes:
            for T in T_values:
                plan = SurgeryPlan(plan_name, T, mode)
                snn = convert(qcfs_net, plan)
                rep = evaluate(
                    snn, images, truths, conf, nms_iou,
                    forward=lambda x, snn=snn, T=T, mode=mode: forward_snn(snn, x, T, mode)[0],
                )
                layer = plan.select(qcfs_net)[0]
                err = layer_conversion_error(qcfs_net, layer, images[:error_images], T)
                rows.append(err.as_row(plan_name, mode, rep.map50))
    return rows


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in rows:
        out = []
        for c in RESULT_COLUMNS:
            v = r.get(c)
            if v is None:
                out.append("")
            elif isinstance(v, float):
                out.append(repr(v) if c in ("phi", "lambda") else f"{v:.8g}")
            else:
                out.append(v)
        w.writerow(out)
    return buf.getvalue()
