import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from msdn.errors import ConfigError, DataError, DimensionError
from msdn.objectives import (
    IGNORE, NEGATIVE, POSITIVE, Box, BoxTargets, box_iou, cell_anchors, decode_boxes, detection_loss,
    dice_loss, dice_score, encode_boxes, focal_loss, generate_anchors, match_and_encode, nms,
    one_hot, smooth_l1, smooth_l1_value, total_loss,
)
from msdn.tensor import Tensor, channel_softmax, gradcheck, precision


def targets_for(labels, state=None):
    labels = np.asarray(labels, dtype=np.float32).reshape(-1, 1)
    state = np.where(labels[:, 0] == 1, POSITIVE, NEGATIVE) if state is None else np.asarray(state)
    return BoxTargets(state.astype(np.int8), labels, np.zeros((len(labels), 4)), np.zeros(len(labels), int))


class TestDice:
    def test_perfect_prediction(self):
        mask = (np.random.default_rng(0).random((2, 6, 6)) > 0.5).astype(int)
        probs = one_hot(mask, 2, dtype=np.float64)
        loss = dice_loss(Tensor(probs), mask, smooth=1e-5).item()
        assert loss <= 1e-5 / (mask.size + 1e-5) + 1e-15

    def test_uniform_half_foreground(self):
        s = 1e-5
        mask = np.zeros((1, 4, 4), dtype=int)
        mask[0, :2] = 1
        probs = np.full((1, 2, 4, 4), 0.5)
        with precision("f64"):
            loss = dice_loss(Tensor(probs), mask, smooth=s).item()
        # 2*sum(p*g) = 2*0.5*8, sum(p^2) = 16*0.25, sum(g^2) = 8
        assert loss == pytest.approx(1 - (8 + s) / (4 + 8 + s), rel=1e-12)

    def test_gradcheck(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(1, 2, 4, 4))
        mask = rng.integers(0, 2, size=(1, 4, 4))
        assert gradcheck(lambda z: dice_loss(channel_softmax(z), mask), logits) <= 1e-5

    def test_label_out_of_range(self):
        with pytest.raises(DataError):
            dice_loss(Tensor(np.full((1, 2, 2, 2), 0.5)), np.full((1, 2, 2), 2))

    def test_in_unit_interval(self):
        rng = np.random.default_rng(2)
        probs = channel_softmax(Tensor(rng.normal(size=(2, 3, 5, 5)))).data
        loss = dice_loss(Tensor(probs), rng.integers(0, 3, size=(2, 5, 5))).item()
        assert 0 <= loss <= 1

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_hard_loss_matches_score(self, seed):
        rng = np.random.default_rng(seed)
        truth = rng.integers(0, 2, size=(1, 6, 6))
        pred = rng.integers(0, 2, size=(1, 6, 6))
        s = 1e-5
        loss = dice_loss(Tensor(one_hot(pred, 2, np.float64)), truth, smooth=s).item()
        score = dice_score(pred, truth)
        # hard predictions: p^2 = p, so the squared form equals the set form up to smoothing,
        # which shifts it by s(S - 2I) / (S(S + s)) <= s / S with S the total foreground count
        total = truth.sum() + pred.sum()
        assert total == 0 or abs((1 - loss) - score) <= s / total + 1e-12


class TestDiceScore:
    def test_identical(self):
        m = np.zeros((5, 5), int)
        m[1:3, 1:4] = 1
        assert dice_score(m, m) == 1.0

    def test_disjoint(self):
        a, b = np.zeros((4, 4), int), np.zeros((4, 4), int)
        a[0, :2] = 1
        b[3, :2] = 1
        assert dice_score(a, b) == 0.0

    def test_half_overlap(self):
        p, g = np.zeros((4, 4), int), np.zeros((4, 4), int)
        p[0, :4] = 1
        g[0, 2:4] = 1
        g[1, 0:2] = 1
        assert dice_score(p, g) == 0.5

    def test_both_empty(self):
        assert dice_score(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            dice_score(np.zeros((3, 3)), np.zeros((3, 4)))

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.integers(0, 2, (5, 5)), rng.integers(0, 2, (5, 5))
        assert dice_score(a, b) == dice_score(b, a)


class TestAnchors:
    def test_single_cell(self):
        (anchors,) = generate_anchors([(1, 1)], (32, 32), base_sizes=[32], scales=[1], ratios=[1.0])
        np.testing.assert_allclose(anchors, [[0, 0, 32, 32]])

    def test_counts(self):
        stages = [(8, 8), (16, 16), (32, 32), (64, 64)]
        total = sum(len(a) for a in generate_anchors(stages, (64, 64)))
        assert total == 9 * (64 + 256 + 1024 + 4096)

    def test_geometry(self):
        (anchors,) = generate_anchors([(2, 2)], (16, 16), base_sizes=[10])
        cell = anchors[:9]
        w, h = cell[:, 2] - cell[:, 0], cell[:, 3] - cell[:, 1]
        areas = (w * h).reshape(3, 3)
        for i, k in enumerate([1, 2 ** (2 / 3), 2 ** (4 / 3)]):
            np.testing.assert_allclose(areas[i], 100 * k, rtol=1e-12)
        np.testing.assert_allclose((h / w).reshape(3, 3), [[0.5, 1, 2]] * 3, rtol=1e-12)
        np.testing.assert_allclose((cell[:, 0] + cell[:, 2]) / 2, 4.0)
        assert np.all(w > 0) and np.all(h > 0)


class TestMatching:
    def test_identity_anchor(self):
        t = match_and_encode(np.array([[2.0, 3.0, 12.0, 9.0]]), [Box(2, 3, 12, 9)])
        assert t.state[0] == POSITIVE
        np.testing.assert_allclose(t.offsets[0], 0.0, atol=1e-15)
        np.testing.assert_array_equal(t.classes[0], [1.0])

    def test_disjoint_negative(self):
        anchors = np.array([[0, 0, 4, 4], [20, 20, 30, 30.0]])
        t = match_and_encode(anchors, [Box(20, 20, 30, 30)])
        assert t.state[0] == NEGATIVE
        np.testing.assert_array_equal(t.classes[0], [0.0])

    def test_worked_example(self):
        a, g = np.array([[0.0, 0, 10, 10]]), np.array([[5.0, 5, 15, 15]])
        assert box_iou(a, g)[0, 0] == pytest.approx(25 / 175)
        anchors = np.vstack([a, g])  # second anchor wins the forced match
        t = match_and_encode(anchors, [Box(5, 5, 15, 15)])
        assert t.state[0] == NEGATIVE
        np.testing.assert_allclose(encode_boxes(a, g)[0], [0.5, 0.5, 0, 0])

    def test_ignore_band(self):
        gt = Box(0, 0, 10, 10)
        anchor = np.array([[0.0, 0, 10, 4.5]])  # IoU 0.45
        t = match_and_encode(np.vstack([anchor, [[0, 0, 10, 10]]]), [gt])
        assert t.state[0] == IGNORE

    def test_empty_gt_all_negative(self):
        t = match_and_encode(np.random.default_rng(0).uniform(0, 10, (5, 4)).cumsum(axis=1), [])
        assert np.all(t.state == NEGATIVE)

    def test_forced_match(self):
        anchors = generate_anchors([(4, 4)], (32, 32), base_sizes=[8])[0]
        t = match_and_encode(anchors, [Box(3, 5, 30, 6)])  # thin box, IoU < 0.5 for all anchors
        assert t.num_positive >= 1

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_every_gt_has_a_positive(self, seed):
        rng = np.random.default_rng(seed)
        anchors = np.concatenate(generate_anchors([(4, 4), (8, 8)], (32, 32), base_sizes=[16, 8]))
        boxes = []
        for _ in range(rng.integers(1, 4)):
            x0, y0 = rng.uniform(0, 28, 2)
            boxes.append(Box(x0, y0, x0 + rng.uniform(2, 32 - x0), y0 + rng.uniform(2, 32 - y0)))
        t = match_and_encode(anchors, boxes)
        for g in range(len(boxes)):
            assert (t.matched[t.state == POSITIVE] == g).any()


class TestCodec:
    def test_zero_offsets(self):
        a = np.array([[1.0, 2.0, 7.0, 5.0]])
        np.testing.assert_allclose(decode_boxes(a, np.zeros((1, 4))), a)

    def test_log_scale(self):
        out = decode_boxes(np.array([[0.0, 0, 4, 2]]), np.array([[0, 0, math.log(2), math.log(2)]]))
        np.testing.assert_allclose(out, [[-2, -1, 6, 3]])

    def test_round_trip(self):
        rng = np.random.default_rng(3)
        xy = rng.uniform(0, 60, (100, 2, 2))
        wh = rng.uniform(2, 64, (100, 2, 2))
        anchors = np.concatenate([xy[:, 0], xy[:, 0] + wh[:, 0]], axis=1)
        gt = np.concatenate([xy[:, 1], xy[:, 1] + wh[:, 1]], axis=1)
        back = decode_boxes(anchors, encode_boxes(anchors, gt))
        assert np.abs(back - gt).max() <= 1e-6

    def test_non_finite(self):
        with pytest.raises(DataError):
            decode_boxes(np.array([[0.0, 0, 1, 1]]), np.array([[np.nan, 0, 0, 0]]))


class TestFocal:
    def test_worked_value(self):
        with precision("f64"):
            loss = focal_loss(Tensor([[0.9]]), targets_for([1]), alpha=0.25, gamma=2).item()
        assert loss == pytest.approx(-0.25 * 0.1 ** 2 * math.log(0.9), rel=1e-12)
        assert abs(loss - 2.634e-4) <= 1e-7

    def test_degenerate_is_half_bce(self):
        rng = np.random.default_rng(4)
        p = rng.uniform(0.05, 0.95, (20, 1))
        labels = (rng.random(20) > 0.7).astype(float)
        with precision("f64"):
            loss = focal_loss(Tensor(p), targets_for(labels), alpha=0.5, gamma=0).item()
        t = labels[:, None]
        bce = -(t * np.log(p) + (1 - t) * np.log(1 - p)).sum() / max(1, labels.sum())
        assert abs(loss - 0.5 * bce) / (0.5 * bce) <= 1e-9

    def test_confident_goes_to_zero(self):
        with precision("f64"):
            loss = focal_loss(Tensor([[1 - 1e-9], [1e-9]]), targets_for([1, 0])).item()
        assert loss < 1e-12

    def test_ignored_excluded(self):
        t = targets_for([1, 0, 0], state=[POSITIVE, IGNORE, NEGATIVE])
        full = focal_loss(Tensor([[0.6], [0.99], [0.2]]), t).item()
        kept = focal_loss(Tensor([[0.6], [0.2]]), targets_for([1, 0])).item()
        assert full == pytest.approx(kept, rel=1e-6)

    @given(st.floats(0.01, 0.98), st.floats(0.001, 0.01), st.sampled_from([0.0, 0.5, 2.0]))
    @settings(max_examples=40, deadline=None)
    def test_monotone_in_pt(self, p, dp, gamma):
        with precision("f64"):
            lo = focal_loss(Tensor([[p]]), targets_for([1]), gamma=gamma).item()
            hi = focal_loss(Tensor([[p + dp]]), targets_for([1]), gamma=gamma).item()
        assert hi < lo

    def test_gradcheck(self):
        rng = np.random.default_rng(5)
        p = rng.uniform(0.05, 0.95, (6, 2))
        t = BoxTargets(np.array([1, 0, -1, 0, 1, 0], np.int8), (rng.random((6, 2)) > 0.5).astype(np.float32),
                       np.zeros((6, 4)), np.zeros(6, int))
        assert gradcheck(lambda x: focal_loss(x, t), p) <= 1e-5


class TestSmoothL1:
    def pos_targets(self, offsets):
        offsets = np.asarray(offsets, dtype=np.float64)
        k = len(offsets)
        return BoxTargets(np.full(k, POSITIVE, np.int8), np.ones((k, 1), np.float32), offsets, np.zeros(k, int))

    def test_zero_residual(self):
        off = np.random.default_rng(6).normal(size=(3, 4))
        with precision("f64"):
            assert smooth_l1(Tensor(off), self.pos_targets(off)).item() == 0.0

    def test_large_residual(self):
        with precision("f64"):
            loss = smooth_l1(Tensor([[2.0, 0, 0, 0]]), self.pos_targets([[0, 0, 0, 0]]), beta=1.0).item()
        assert loss == 1.5

    def test_continuity_at_beta(self):
        beta, h = 1.0, 1e-12
        left, right = smooth_l1_value(beta - h, beta), smooth_l1_value(beta + h, beta)
        assert abs(left - right) <= 1e-9
        d_left = (smooth_l1_value(beta - h, beta) - smooth_l1_value(beta - 2 * h, beta)) / h
        d_right = (smooth_l1_value(beta + 2 * h, beta) - smooth_l1_value(beta + h, beta)) / h
        # one-sided slopes both equal 1 at the joint
        assert abs(d_left - 1) <= 1e-3 and abs(d_right - 1) <= 1e-3
        assert abs((1 - h / beta) - 1.0) <= 1e-9

    def test_no_positives_zero(self):
        t = BoxTargets(np.zeros(2, np.int8), np.zeros((2, 1), np.float32), np.zeros((2, 4)), np.zeros(2, int))
        assert smooth_l1(Tensor(np.ones((2, 4))), t).item() == 0.0

    def test_bad_beta(self):
        with pytest.raises(ConfigError):
            smooth_l1(Tensor(np.ones((1, 4))), self.pos_targets([[0, 0, 0, 0]]), beta=0)

    def test_gradcheck(self):
        rng = np.random.default_rng(7)
        pred = rng.normal(size=(5, 4)) * 1.5
        t = self.pos_targets(rng.normal(size=(5, 4)))
        t.state[1] = NEGATIVE
        assert gradcheck(lambda x: smooth_l1(x, t), pred) <= 1e-5


class TestTotal:
    def test_arithmetic(self):
        with precision("f64"):
            assert total_loss(Tensor(0.3), Tensor(0.2), Tensor(0.1)).item() == pytest.approx(0.6)

    def test_absent_tasks(self):
        seg = Tensor(0.4)
        assert total_loss(seg) is seg
        assert total_loss(None, Tensor(0.2), Tensor(0.1)).item() == pytest.approx(0.3)

    def test_detection_loss_sums_stages(self):
        rng = np.random.default_rng(8)
        stages = [(2, 2), (4, 4)]
        anchors = generate_anchors(stages, (16, 16), base_sizes=[8, 4])
        box = Box(3, 4, 11, 10)
        targets = [[match_and_encode(a, [box]) for a in anchors]]
        outs = [{"cls": Tensor(rng.uniform(0.1, 0.9, (1, 9, h, w))), "box": Tensor(rng.normal(size=(1, 36, h, w)))}
                for h, w in stages]
        with precision("f64"):
            cls, reg = detection_loss(outs, targets)
            npos = sum(t.num_positive for t in targets[0])
            manual = 0.0
            for o, t, (h, w) in zip(outs, targets[0], stages):
                flat = o["cls"].data.transpose(0, 2, 3, 1).reshape(-1, 1)
                manual += focal_loss(Tensor(flat), t, normalizer=npos).item()
        assert cls.item() == pytest.approx(manual, rel=1e-10)
        assert reg.item() >= 0


def test_nms_keeps_best_and_suppresses_overlap():
    boxes = np.array([[0, 0, 10, 10], [1, 1, 10, 10], [20, 20, 30, 30.0]])
    assert nms(boxes, [0.9, 0.8, 0.7]) == [0, 2]


def test_cell_anchor_count():
    assert cell_anchors(8).shape == (9, 2)
