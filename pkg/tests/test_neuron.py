import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qcfs_yolo.neuron import (
    IncompleteTraceError,
    SpikeTrace,
    if_init,
    if_run_constant,
    if_step,
    rate_readout,
)
from qcfs_yolo.qcfs import QCFSParams, qcfs_forward
from qcfs_yolo.tensor_ops import ShapeError


def test_init_half_threshold():
    s = if_init((2, 3), 1.0)
    assert np.all(s.v == 0.5) and s.t == 0
    np.testing.assert_array_equal(if_init((1,), 2.0).v, [1.0])


@pytest.mark.parametrize("theta", [0.0, -1.0])
def test_init_rejects_non_positive_threshold(theta):
    with pytest.raises(ValueError):
        if_init((1,), theta)


@pytest.mark.parametrize("inp,spike,v", [(0.5, 1.0, 0.0), (0.0, 0.0, 0.5), (-1.0, 0.0, -0.5)])
def test_step_examples(inp, spike, v):
    s, state = if_step(if_init((1,), 1.0), np.array([inp]))
    assert s[0] == spike and state.v[0] == v and state.t == 1


def test_step_shape_mismatch():
    with pytest.raises(ShapeError):
        if_step(if_init((2,), 1.0), np.zeros(3))


def test_run_constant_example():
    tr = if_run_constant(np.array([0.5]), 1.0, 4)
    assert [float(s[0]) for s in tr.spikes] == [1.0, 0.0, 1.0, 0.0]
    assert tr.rate[0] == 0.5 == qcfs_forward(np.array([0.5]), QCFSParams(1.0, 4))[0]


def test_run_constant_zero_and_saturation():
    assert if_run_constant(np.array([0.0]), 1.0, 8).rate[0] == 0.0
    assert if_run_constant(np.array([1.0, 3.0]), 1.0, 8).rate.tolist() == [1.0, 1.0]


def test_run_constant_rejects_T0():
    with pytest.raises(ValueError):
        if_run_constant(np.zeros(1), 1.0, 0)


def test_rate_readout_examples():
    tr = SpikeTrace(2.0, 4)
    for s in (1, 0, 1, 0):
        tr.record(np.array([float(s)]))
    assert rate_readout(tr)[0] == 1.0
    ones = SpikeTrace(1.0, 3)
    zeros = SpikeTrace(1.0, 3)
    for _ in range(3):
        ones.record(np.ones(2))
        zeros.record(np.zeros(2))
    assert rate_readout(ones).tolist() == [1.0, 1.0]
    assert rate_readout(zeros).tolist() == [0.0, 0.0]


def test_incomplete_trace_rejected():
    tr = SpikeTrace(1.0, 4)
    tr.record(np.zeros(1))
    with pytest.raises(IncompleteTraceError):
        rate_readout(tr)
    full = if_run_constant(np.zeros(1), 1.0, 2)
    with pytest.raises(ValueError):
        full.record(np.zeros(1))


@given(
    k=st.lists(st.integers(-256, 512), min_size=1, max_size=40),
    T=st.integers(1, 32),
    theta_exp=st.integers(-2, 3),
)
def test_closed_form_rate(k, T, theta_exp):
    # dyadic inputs keep every membrane update exact
    theta = 2.0**theta_exp
    z = np.array(k, dtype=np.float64) / 128 * theta
    tr = if_run_constant(z, theta, T)
    expected = theta * np.clip(np.floor((z * T + theta / 2) / theta) / T, 0, 1)
    mask = z >= -theta / 2
    np.testing.assert_array_equal(tr.rate[mask], expected[mask])


@given(seed=st.integers(0, 10**6), T=st.integers(1, 20), theta=st.floats(0.1, 5))
def test_charge_conservation(seed, T, theta):
    r = np.random.default_rng(seed)
    inputs = [np.round(r.uniform(-2, 3, 6) * 256) / 256 for _ in range(T)]
    theta = np.round(theta * 64) / 64
    state = if_init((6,), theta)
    v0 = state.v.copy()
    count = np.zeros(6)
    for x in inputs:
        s, state = if_step(state, x)
        count += s
        assert set(np.unique(s)) <= {0.0, 1.0}
    np.testing.assert_array_equal(state.v, v0 + np.sum(inputs, axis=0) - theta * count)


@given(seed=st.integers(0, 10**6), T=st.integers(1, 16), theta=st.floats(0.1, 5))
def test_rate_levels_and_range(seed, T, theta):
    z = np.random.default_rng(seed).uniform(-2 * theta, 3 * theta, 50)
    rate = if_run_constant(z, theta, T).rate
    assert np.all((rate >= 0) & (rate <= theta))
    np.testing.assert_allclose(rate * T / theta, np.round(rate * T / theta), atol=1e-9)


def test_deterministic():
    z = np.random.default_rng(0).uniform(-1, 2, 100)
    a, b = if_run_constant(z, 1.0, 7), if_run_constant(z, 1.0, 7)
    assert all(np.array_equal(x, y) for x, y in zip(a.spikes, b.spikes))


@pytest.mark.parametrize("L", [1, 2, 4, 8, 16, 32])
def test_equivalence_with_qcfs_at_T_equal_L(L):
    lam = 1.0
    z = np.linspace(-lam, 2 * lam, 20001)
    rate = if_run_constant(z, lam, L).rate
    assert np.max(np.abs(rate - qcfs_forward(z, QCFSParams(lam, L, 0.5)))) <= 1e-6
