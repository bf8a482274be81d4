import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxlift import numerics as nx
from voxlift.detection import (Box3D, EvalReport, HeadOutput, ScoredBox, assign_targets, average_precision,
                               centerness_from_distances, decode_and_nms, detection_loss, evaluate_map,
                               focal_loss, head_forward, iou3d_axis_aligned, iou_from_distances, nms,
                               total_loss, wrap_angle)
from voxlift.geometry import VoxelGridSpec
from voxlift.numerics import ParameterStore, finite_diff_gradcheck

box_st = st.builds(lambda c, s: Box3D(c, s),
                   st.tuples(*[st.floats(-2, 2)] * 3), st.tuples(*[st.floats(0.1, 2)] * 3))


def test_iou_by_hand():
    a = Box3D((0, 0, 0), (1, 1, 1))
    assert iou3d_axis_aligned(a, Box3D((0.5, 0, 0), (1, 1, 1))) == pytest.approx(1 / 3)
    assert iou3d_axis_aligned(a, Box3D((0, 0, 0), (2, 2, 2))) == pytest.approx(1 / 8)
    assert iou3d_axis_aligned(a, Box3D((3, 0, 0), (1, 1, 1))) == 0.0


@settings(max_examples=100, deadline=None)
@given(box_st, box_st)
def test_iou_properties(a, b):
    ab, ba = iou3d_axis_aligned(a, b), iou3d_axis_aligned(b, a)
    assert ab == ba
    assert 0.0 <= ab <= 1.0
    assert iou3d_axis_aligned(a, a) == pytest.approx(1.0)
    if ab > 1 - 1e-12:
        np.testing.assert_allclose(a.center, b.center, atol=1e-5)
        np.testing.assert_allclose(a.size, b.size, atol=1e-5)


def test_box_validation_and_round_trip():
    with pytest.raises(ValueError):
        Box3D((0, 0, 0), (1, 0, 1))
    b = Box3D((1, 2, 3), (0.5, 0.6, 0.7), 0.3, 2)
    assert Box3D.from_dict(b.to_dict()) == b
    assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)


# -- losses ---------------------------------------------------------------------------

def test_focal_loss_reduces_to_log_loss():
    z = np.array([[0.3, -1.2], [2.0, 0.1]])
    y = np.array([[1.0, 0.0], [0.0, 1.0]])
    expected = -np.sum(y * np.log(1 / (1 + np.exp(-z))))
    assert focal_loss(z, y, gamma=0.0, alpha=1.0).item() == pytest.approx(expected, abs=1e-12)


def test_focal_loss_by_hand():
    z, y = np.array([0.0]), np.array([1.0])
    # p = 0.5: alpha * (1 - p)^2 * log 2
    assert focal_loss(z, y).item() == pytest.approx(0.25 * 0.25 * math.log(2))
    assert focal_loss(z, 1 - y).item() == pytest.approx(0.75 * 0.25 * math.log(2))


def test_focal_loss_gradient(rng):
    y = (rng.random((4, 3)) > 0.6).astype(float)
    assert finite_diff_gradcheck(lambda z: focal_loss(z, y), [rng.standard_normal((4, 3))]) < 1e-4


def test_iou_from_distances():
    t = np.array([[0.5, 0.5, 0.5, 0.5, 0.5, 0.5]])
    assert iou_from_distances(t, t).item() == pytest.approx(1.0)
    p = np.array([[0.5, 0.5, 0.5, 1.0, 0.5, 0.5]])
    assert iou_from_distances(p, t).item() == pytest.approx(1 / 1.5)


def test_centerness():
    assert centerness_from_distances(np.array([1.0, 2, 3, 1, 2, 3])) == pytest.approx(1.0)
    assert centerness_from_distances(np.array([0.0, 2, 3, 1, 2, 3])) == 0.0
    assert centerness_from_distances(np.array([1.0, 1, 1, 3, 1, 1])) == pytest.approx((1 / 3) ** (1 / 3))


GRID = VoxelGridSpec((0, 0, 0), (8, 8, 4), (0.25, 0.25, 0.25))


def _brute_targets(grid, boxes):
    idx = np.full(grid.dims, -1)
    for i in np.ndindex(*grid.dims):
        p = grid.centers()[i]
        best = None
        for k, b in enumerate(boxes):
            c, s = math.cos(b.yaw), math.sin(b.yaw)
            d = p - np.array(b.center)
            loc = np.array([c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]])
            if np.all(np.abs(loc) <= np.array(b.size) / 2) and (best is None or b.volume < boxes[best].volume):
                best = k
        if best is not None:
            idx[i] = best
    return idx


def test_assignment_smallest_box_wins():
    boxes = [Box3D((1, 1, 0.5), (1.6, 1.6, 0.9), 0.0, 0), Box3D((1.1, 0.9, 0.5), (0.6, 0.7, 0.6), 0.4, 2)]
    t = assign_targets(GRID, boxes)
    assert np.array_equal(t.box_index, _brute_targets(GRID, boxes))
    assert np.all(t.class_id[t.box_index == 1] == 2)
    assert np.all(t.positive == (t.box_index >= 0))
    assert np.all((t.centerness >= 0) & (t.centerness <= 1))


def _tiny_prediction(rng, nc=3):
    return HeadOutput.from_raw(rng.standard_normal((8, 8, 4, 8 + nc)) * 0.5)


def test_loss_components_nonnegative(rng):
    boxes = [Box3D((1, 1, 0.5), (0.8, 0.8, 0.8), 0.2, 1)]
    for oriented in (False, True):
        loss = detection_loss(_tiny_prediction(rng), assign_targets(GRID, boxes), oriented=oriented)
        assert all(v >= 0 for v in loss.components().values())
        assert loss.total.item() == pytest.approx(sum(loss.components().values()))


def test_loss_without_positives_is_classification_only(rng):
    loss = detection_loss(_tiny_prediction(rng), assign_targets(GRID, []))
    assert loss.center.item() == 0.0 and loss.iou.item() == 0.0 and loss.total.item() == loss.cls.item()


def test_detection_loss_gradient(rng):
    grid = VoxelGridSpec((0, 0, 0), (3, 3, 2), (0.5, 0.5, 0.5))
    targets = assign_targets(grid, [Box3D((0.7, 0.8, 0.5), (0.9, 0.8, 0.9), 0.3, 1)])
    raw = rng.standard_normal((3, 3, 2, 10)) * 0.3
    for oriented in (False, True):
        op = lambda r: detection_loss(HeadOutput.from_raw(r), targets, oriented=oriented).total
        assert finite_diff_gradcheck(op, [raw]) < 1e-4


def test_head_gradient(rng):
    feats = rng.standard_normal((2, 2, 2, 3))
    store = ParameterStore(seed=1)
    head_forward(feats, store, num_classes=2, hidden=4)
    names = store.names()

    def op(f, *params):
        s = ParameterStore()
        for n, p in zip(names, params):
            s.params[n] = p
        return head_forward(f, s, num_classes=2, hidden=4).raw

    assert finite_diff_gradcheck(op, [feats] + [store[n].data for n in names]) < 1e-4


def test_total_loss_weighting():
    det, occ = nx.Tensor(2.0), nx.Tensor(3.0)
    assert total_loss(det, occ, 0.5).item() == 3.5
    assert total_loss(det, occ, 0.0).item() == 2.0
    with pytest.raises(ValueError):
        total_loss(det, occ, -0.1)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 5), st.floats(0, 2))
def test_total_loss_is_monotone(a, b, da, lam):
    assert total_loss(nx.Tensor(a + da), nx.Tensor(b), lam).item() >= total_loss(nx.Tensor(a), nx.Tensor(b), lam).item()
    assert total_loss(nx.Tensor(a), nx.Tensor(b + da), lam).item() >= total_loss(nx.Tensor(a), nx.Tensor(b), lam).item()


# -- decoding --------------------------------------------------------------------------

def _perfect_raw(grid, boxes, nc=3):
    t = assign_targets(grid, boxes)
    raw = np.full(grid.dims + (8 + nc,), -8.0)
    raw[..., 1:7] = np.log(np.maximum(t.box[..., :6], 1e-4))
    raw[..., 7] = t.box[..., 6]
    raw[..., 0] = np.where(t.positive, 8 * t.centerness - 4, -8)
    for c in range(nc):
        raw[..., 8 + c] = np.where(t.class_id == c, 8.0, -8.0)
    return raw


def test_decode_recovers_boxes():
    boxes = [Box3D((0.6, 0.6, 0.5), (0.8, 0.7, 0.8), 0.0, 0), Box3D((1.5, 1.4, 0.4), (0.6, 0.6, 0.6), 0.0, 2)]
    dets = decode_and_nms(HeadOutput.from_raw(_perfect_raw(GRID, boxes)), GRID, score_thresh=0.3)
    assert len(dets) == 2
    for d in dets:
        best = max(boxes, key=lambda b: iou3d_axis_aligned(d.box, b))
        assert iou3d_axis_aligned(d.box, best) == pytest.approx(1.0)
        assert d.box.class_id == best.class_id


def _brute_nms(centers, sizes, scores, t):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    keep = []
    for i in order:
        if all(iou3d_axis_aligned(Box3D(centers[i], sizes[i]), Box3D(centers[k], sizes[k])) < t for k in keep):
            keep.append(i)
    return keep


def test_nms_matches_greedy_oracle(rng):
    for _ in range(20):
        n = 30
        centers = rng.uniform(0, 2, (n, 3))
        sizes = rng.uniform(0.3, 1.0, (n, 3))
        scores = rng.integers(0, 6, n) / 5.0
        assert nms(centers, sizes, scores, 0.25) == _brute_nms(centers, sizes, scores, 0.25)


# -- evaluation ---------------------------------------------------------------------------

def test_ap_hand_worked_case():
    gt = [[Box3D((0, 0, 0), (1, 1, 1), 0, 0), Box3D((3, 0, 0), (1, 1, 1), 0, 0)]]
    preds = [[ScoredBox(Box3D((0, 0, 0), (1, 1, 1)), 0.9), ScoredBox(Box3D((6, 0, 0), (1, 1, 1)), 0.8),
              ScoredBox(Box3D((3.1, 0, 0), (1, 1, 1)), 0.7)]]
    # precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1 -> AP = 0.5 * 1 + 0.5 * 2/3
    report = evaluate_map(preds, gt)
    assert abs(report.map_25 - (0.5 + 1 / 3)) < 1e-9
    assert abs(report.map_50 - (0.5 + 1 / 3)) < 1e-9
    assert abs(average_precision(np.array([1, 0, 1]), 2) - 5 / 6) < 1e-9


def test_ground_truth_predictions_score_one(rng):
    gts = [[Box3D(rng.uniform(-2, 2, 3), rng.uniform(0.2, 1, 3), 0, int(rng.integers(3))) for _ in range(3)]
           for _ in range(4)]
    preds = [[ScoredBox(b, 1.0) for b in scene] for scene in gts]
    r = evaluate_map(preds, gts)
    assert r.map_25 == 1.0 and r.map_50 == 1.0


def test_duplicates_count_as_false_positives():
    g = Box3D((0, 0, 0), (1, 1, 1))
    r = evaluate_map([[ScoredBox(g, 0.9), ScoredBox(g, 0.8)]], [[g]])
    assert r.map_25 == 1.0  # recall hits 1 before the duplicate
    assert average_precision(np.array([0, 1]), 1) == 0.5


@settings(max_examples=30, deadline=None)
@given(st.randoms(use_true_random=False))
def test_map_is_order_invariant(rnd):
    rng = np.random.default_rng(rnd.randint(0, 10_000))
    gts = [[Box3D(rng.uniform(-2, 2, 3), rng.uniform(0.3, 1, 3), 0, int(rng.integers(2))) for _ in range(2)]
           for _ in range(3)]
    preds = [[ScoredBox(Box3D(np.array(b.center) + rng.normal(0, 0.2, 3), b.size, 0, b.class_id),
                        float(rng.integers(1, 4)) / 4) for b in scene for _ in range(2)] for scene in gts]
    base = evaluate_map(preds, gts).to_json()
    shuffled = [list(s) for s in preds]
    for s in shuffled:
        rnd.shuffle(s)
    assert evaluate_map(shuffled, gts).to_json() == base


def test_report_formats():
    r = EvalReport({0: {0.25: 1.0, 0.5: 0.5}, 1: {0.25: 0.0, 0.5: 0.0}})
    assert r.map_25 == 0.5 and r.map_50 == 0.25
    assert r.to_csv().splitlines() == ["class_id,AP@0.25,AP@0.50", "0,1.000000,0.500000", "1,0.000000,0.000000",
                                       "mAP,0.500000,0.250000"]
    assert '"0.25": 0.5' in r.to_json()
    with pytest.raises(ValueError):
        evaluate_map([[]], [])


def test_translation_invariance(rng):
    boxes = [Box3D((0.6, 0.6, 0.5), (0.8, 0.7, 0.8), 0.3, 0), Box3D((1.5, 1.4, 0.4), (0.6, 0.6, 0.6), -0.2, 2)]
    off = np.array([3.25, -1.5, 0.75])
    t1 = assign_targets(GRID, boxes)
    t2 = assign_targets(GRID.translated(off), [b.translated(off) for b in boxes])
    assert np.array_equal(t1.box_index, t2.box_index)
    np.testing.assert_allclose(t1.box, t2.box, atol=1e-9)
    raw = rng.standard_normal(GRID.dims + (11,))
    l1 = detection_loss(HeadOutput.from_raw(raw), t1, oriented=True).total.item()
    l2 = detection_loss(HeadOutput.from_raw(raw), t2, oriented=True).total.item()
    assert abs(l1 - l2) < 1e-9
    p1 = decode_and_nms(HeadOutput.from_raw(_perfect_raw(GRID, boxes)), GRID)
    p2 = decode_and_nms(HeadOutput.from_raw(_perfect_raw(GRID, boxes)), GRID.translated(off))
    m1 = evaluate_map([p1], [boxes])
    m2 = evaluate_map([p2], [[b.translated(off) for b in boxes]])
    assert abs(m1.map_25 - m2.map_25) < 1e-9 and abs(m1.map_50 - m2.map_50) < 1e-9
