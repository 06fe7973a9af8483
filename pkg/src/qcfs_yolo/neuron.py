"""Integrate-and-fire neurons with reset-by-subtraction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_ops import ShapeError

__all__ = [
    "IFNeuronState",
    "SpikeTrace",
    "IncompleteTraceError",
    "if_init",
    "if_step",
    "if_run_constant",
    "rate_readout",
]


class IncompleteTraceError(RuntimeError):
    pass


@dataclass
class IFNeuronState:
    """Membrane potentials of one layer. Potentials are kept in float64."""

    v: np.ndarray
    theta: float
    t: int = 0


@dataclass
class SpikeTrace:
    """Spike trains of a layer over ``T`` steps.

    ``spikes`` holds one binary array per completed step; ``postsynaptic``
    the matching ``spikes * theta``.
    """

    theta: float
    T: int
    spikes: list = field(default_factory=list)
    postsynaptic: list = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return len(self.spikes) == self.T

    def record(self, s: np.ndarray) -> None:
        if self.complete:
            raise ValueError(f"trace already holds {self.T} steps")
        self.spikes.append(s)
        self.postsynaptic.append(s * self.theta)

    @property
    def rate(self) -> np.ndarray:
        return rate_readout(self)


def if_init(shape, theta: float) -> IFNeuronState:
    """Fresh state with every potential at ``theta / 2``."""
    theta = float(theta)
    if not theta > 0:
        raise ValueError(f"threshold must be positive, got {theta}")
    return IFNeuronState(np.full(shape, theta / 2, dtype=np.float64), theta, 0)


def if_step(state: IFNeuronState, input_current) -> tuple[np.ndarray, IFNeuronState]:
    """Integrate one step, fire where ``v >= theta``, subtract ``theta`` from firers.

    Mutates and returns ``state``; spikes are float64 zeros and ones.
    """
    input_current = np.asarray(input_current)
    if input_current.shape != state.v.shape:
        raise ShapeError("input current shape differs from membrane", input_current.shape, state.v.shape)
    state.v += input_current
    fired = state.v >= state.theta
    state.v -= fired * state.theta
    state.t += 1
    return fired.astype(np.float64), state


def if_run_constant(z, theta: float, T: int) -> SpikeTrace:
    """Drive a fresh layer with the same input ``z`` for ``T`` steps."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    z = np.asarray(z, dtype=np.float64)
    state = if_init(z.shape, theta)
    trace = SpikeTrace(state.theta, T)
    for _ in range(T):
        s, state = if_step(state, z)
        trace.record(s)
    return trace


def rate_readout(trace: SpikeTrace) -> np.ndarray:
    """Mean postsynaptic potential over the run, in ``[0, theta]``.

    Evaluated as ``theta * (spike_count / T)``: the count is an exact
    integer, so the result never leaves ``[0, theta]`` through rounding and
    uses the same operation order as :func:`~qcfs_yolo.qcfs.qcfs_forward`.
    """
    if not trace.complete:
        raise IncompleteTraceError(f"trace has {len(trace.spikes)} of {trace.T} steps")
    count = trace.spikes[0].astype(np.float64, copy=True)
    for s in trace.spikes[1:]:
        count += s
    return count / trace.T * trace.theta
