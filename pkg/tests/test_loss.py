import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qcfs_yolo.graph import DetectionOutput
from qcfs_yolo.loss import LossWeights, anchor_shape_iou, assign_targets, bce_with_logits, yolo_loss


def one_cell(raw_vec, anchors=((8.0, 8.0),), stride=8):
    raw = np.asarray(raw_vec, np.float64).reshape(1, len(anchors), -1, 1, 1)
    return DetectionOutput(raw, np.asarray(anchors, np.float64), stride)


def test_single_cell_hand_value():
    # zero logits decode to the anchor box (0, 0, 8, 8); the truth overlaps it by 24 px^2 of a 72 px^2 union
    out = one_cell([0, 0, 0, 0, 0, 0])
    res = yolo_loss(out, [[(0, (2.0, 2.0, 6.0, 10.0))]])
    assert res.box == pytest.approx(2 / 3, abs=1e-12)
    assert res.obj == pytest.approx(math.log(2), abs=1e-12)
    assert res.cls == pytest.approx(math.log(2), abs=1e-12)
    assert res.total == pytest.approx(0.05 * 2 / 3 + 1.5 * math.log(2), abs=1e-12)


def test_perfect_prediction_has_tiny_box_and_class_terms():
    out = one_cell([0, 0, 0, 0, 30, 30, -30])
    res = yolo_loss(out, [[(0, (0.0, 0.0, 8.0, 8.0))]])
    assert res.box == pytest.approx(0.0, abs=1e-12)
    assert res.cls < 1e-12
    assert res.obj < 1e-12


def test_zero_weights_give_zero_total():
    out = one_cell([0.3, -1, 2, 0.1, 0.5, -0.2])
    res = yolo_loss(out, [[(0, (1.0, 1.0, 5.0, 6.0))]], LossWeights(0, 0, 0))
    assert res.total == 0.0
    np.testing.assert_array_equal(res.grad, 0.0)


def test_background_image_only_objectness():
    out = one_cell([0.3, -1, 2, 0.1, -1.0, 4.0])
    res = yolo_loss(out, [[]])
    assert res.box == 0 and res.cls == 0
    assert res.obj == pytest.approx(bce_with_logits(-1.0, 0.0))


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        LossWeights(-1.0)


def test_anchor_assignment_picks_best_shape():
    anchors = np.array([[12.0, 12.0], [18.0, 26.0], [26.0, 18.0]])
    assert np.argmax(anchor_shape_iou((17.0, 27.0), anchors)) == 1
    out = DetectionOutput(np.zeros((1, 3, 8, 4, 4)), anchors, 8)
    # 26x14 box centered at (22, 8): anchor 2, cell (gy=1, gx=2)
    slots = assign_targets(out, [[(2, (9.0, 1.0, 35.0, 15.0))]])
    assert slots == {(0, 2, 1, 2): (2, (9.0, 1.0, 35.0, 15.0))}


def test_second_truth_on_same_slot_is_dropped():
    out = one_cell([0] * 6)
    slots = assign_targets(out, [[(0, (1.0, 1.0, 7.0, 7.0)), (0, (2.0, 2.0, 6.0, 6.0))]])
    assert len(slots) == 1 and slots[(0, 0, 0, 0)][1] == (1.0, 1.0, 7.0, 7.0)


@given(
    raw=arrays(np.float64, (2, 2, 7, 2, 2), elements=st.floats(-6, 6)),
    w=st.tuples(*[st.floats(0, 2)] * 3),
)
def test_terms_nonnegative_and_total_is_weighted_sum(raw, w):
    out = DetectionOutput(raw, np.array([[6.0, 6.0], [10.0, 5.0]]), 4)
    truths = [[(0, (0.5, 1.0, 6.0, 5.0)), (1, (4.0, 4.0, 8.0, 7.5))], []]
    res = yolo_loss(out, truths, LossWeights(*w))
    assert min(res.box, res.obj, res.cls) >= 0
    assert res.total == pytest.approx(w[0] * res.box + w[1] * res.obj + w[2] * res.cls, rel=1e-12, abs=1e-15)


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    raw = rng.normal(0, 1, (2, 2, 7, 3, 3))
    anchors = np.array([[6.0, 6.0], [10.0, 5.0]])
    truths = [[(0, (0.5, 1.0, 6.0, 5.0)), (1, (4.0, 4.0, 11.0, 9.5))], [(1, (2.0, 6.0, 9.0, 11.0))]]
    w = LossWeights(1.0, 1.0, 1.0)
    grad = yolo_loss(DetectionOutput(raw, anchors, 4), truths, w).grad
    eps = 1e-6
    for idx in np.ndindex(raw.shape):
        if rng.random() > 0.15:
            continue
        r = raw.copy()
        r[idx] += eps
        up = yolo_loss(DetectionOutput(r, anchors, 4), truths, w).total
        r[idx] -= 2 * eps
        down = yolo_loss(DetectionOutput(r, anchors, 4), truths, w).total
        assert (up - down) / (2 * eps) == pytest.approx(grad[idx], rel=1e-5, abs=1e-9)
