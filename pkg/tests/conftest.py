import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def ramp4x4(dtype=np.float32):
    return np.arange(16, dtype=dtype).reshape(1, 1, 4, 4)


def tiny_net(activation="leaky_relu", dtype=np.float64, seed=0, L=4, lam=2.0, class_count=2, with_concat=True):
    """A ~430-parameter detector covering conv, BN, both pools, concat and the head.

    Input is 3x16x16; the head runs at stride 4 on a 4x4 grid with two anchors.
    """
    from qcfs_yolo.graph import QCFS, Concat, DetectHead, Layer, LeakyReLU, NetworkGraph, Pool
    from qcfs_yolo.qcfs import QCFSParams
    from qcfs_yolo.tensor_ops import BatchNormSpec, ConvSpec

    r = np.random.default_rng(seed)

    def conv(cin, cout, k):
        w = r.standard_normal((cout, cin, k, k)) * np.sqrt(2.0 / (cin * k * k))
        return ConvSpec(w.astype(dtype), (r.standard_normal(cout) * 0.1).astype(dtype), 1, k // 2)

    def bn(c):
        return BatchNormSpec(
            r.uniform(0.5, 1.5, c).astype(dtype), (r.standard_normal(c) * 0.1).astype(dtype),
            (r.standard_normal(c) * 0.1).astype(dtype), r.uniform(0.5, 1.5, c).astype(dtype),
        )

    def act():
        return QCFS(QCFSParams(lam, L, 0.5)) if activation == "qcfs" else LeakyReLU(0.1)

    pool2 = "avgpool" if activation == "qcfs" else "maxpool"
    layers = [
        Layer("conv1", "conv", conv(3, 4, 3)),
        Layer("bn1", "batchnorm", bn(4), ("conv1",)),
        Layer("act1", "activation", act(), ("bn1",)),
        Layer("pool1", "avgpool", Pool(2, 2), ("act1",)),
        Layer("conv2", "conv", conv(4, 4, 3), ("pool1",)),
        Layer("bn2", "batchnorm", bn(4), ("conv2",)),
        Layer("act2", "activation", act(), ("bn2",)),
        Layer("pool2", pool2, Pool(2, 2), ("act2",)),
        Layer("conv3", "conv", conv(4, 4, 1), ("pool2",)),
        Layer("bn3", "batchnorm", bn(4), ("conv3",)),
        Layer("act3", "activation", act(), ("bn3",)),
    ]
    last, cin = "act3", 4
    if with_concat:
        layers.append(Layer("cat", "concat", Concat(), ("pool2", "act3")))
        last, cin = "cat", 8
    anchors = np.array([[4.0, 4.0], [8.0, 6.0]], dtype=dtype)
    na = len(anchors)
    hw = (r.standard_normal((na * (5 + class_count), cin, 1, 1)) * 0.3).astype(dtype)
    hb = (r.standard_normal(na * (5 + class_count)) * 0.1).astype(dtype)
    layers.append(Layer("head", "detect-head", DetectHead(ConvSpec(hw, hb), anchors, class_count, 4), (last,)))
    return NetworkGraph(layers, (3, 16, 16), class_count)


def count_params(net):
    total = 0
    for layer in net.layers:
        p = layer.params
        if layer.kind == "conv":
            total += p.weights.size + p.bias.size
        elif layer.kind == "batchnorm":
            total += p.gamma.size + p.beta.size
        elif layer.kind == "detect-head":
            total += p.conv.weights.size + p.conv.bias.size
    return total


#: one line per acceptance criterion, filled by tests/test_acceptance.py
CRITERIA_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_RESULTS):
            terminalreporter.write_line(line)
