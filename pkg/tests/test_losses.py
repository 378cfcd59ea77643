"""Hungarian matching, focal classification, and the combined loss."""

import itertools
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from rxfusion import autodiff as ad
from rxfusion.autodiff import Tape, Tensor
from rxfusion.fusion import IterationOutput
from rxfusion.geometry import Box3D
from rxfusion.losses import (
    MatchError,
    focal_loss,
    hungarian,
    iteration_loss,
    match_cost,
    match_cost_matrix,
    total_loss,
)


def _brute_min_cost(cost: np.ndarray) -> float:
    """Exhaustive one-prediction-per-target minimum."""
    P, G = cost.shape
    best = math.inf
    for rows in itertools.permutations(range(P), G):
        best = min(best, sum(cost[r, c] for c, r in enumerate(rows)))
    return best


class TestHungarian:
    def test_matches_brute_force(self, rng):
        for _ in range(30):
            P = int(rng.integers(1, 7))
            G = int(rng.integers(1, P + 1))
            cost = rng.normal(size=(P, G))
            a = hungarian(cost)
            got = sum(cost[p, g] for p, g in a.pairs)
            assert_allclose(got, _brute_min_cost(cost), atol=1e-12)

    def test_every_target_covered_once(self, rng):
        cost = rng.normal(size=(6, 4))
        a = hungarian(cost)
        assert sorted(g for _, g in a.pairs) == [0, 1, 2, 3]
        preds = [p for p, _ in a.pairs]
        assert len(set(preds)) == 4
        assert sorted(preds + a.unmatched_preds) == list(range(6))

    def test_pairs_sorted_by_prediction(self, rng):
        a = hungarian(rng.normal(size=(5, 5)))
        assert [p for p, _ in a.pairs] == sorted(p for p, _ in a.pairs)

    def test_no_targets(self):
        a = hungarian(np.zeros((3, 0)))
        assert a.pairs == [] and a.unmatched_preds == [0, 1, 2]

    def test_obvious_diagonal(self):
        cost = np.array([[0.0, 9.0], [9.0, 0.0], [5.0, 5.0]])
        assert hungarian(cost).pairs == [(0, 0), (1, 1)]

    def test_contract_violations(self):
        with pytest.raises(MatchError):
            hungarian(np.zeros((2, 3)))
        with pytest.raises(MatchError):
            hungarian(np.zeros(4))
        with pytest.raises(MatchError):
            hungarian(np.array([[np.nan, 0.0], [0.0, 1.0]]))
        with pytest.raises(MatchError):
            hungarian(np.array([[np.inf], [0.0]]))


class TestFocalLoss:
    def test_gamma_zero_alpha_one_is_cross_entropy(self, rng):
        logits = Tensor(rng.normal(size=(7, 4)))
        targets = rng.integers(0, 4, size=7)
        with Tape():
            got = focal_loss(logits, targets, gamma=0.0, alpha_bal=1.0)
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        ce = -np.log(p[np.arange(7), targets]).mean()
        assert_allclose(got.data, ce, atol=1e-12)

    def test_half_probability_hand_value(self):
        # two equal logits put p_t at 1/2; the gamma=2 factor is then 1/4
        logits = Tensor(np.zeros((1, 2)))
        with Tape():
            got = focal_loss(logits, np.array([0]), gamma=2.0, alpha_bal=1.0)
        assert_allclose(got.data, 0.25 * math.log(2.0), atol=1e-12)

    def test_confident_correct_loss_vanishes(self):
        logits = Tensor(np.array([[30.0, 0.0, 0.0]]))
        with Tape():
            got = focal_loss(logits, np.array([0]))
        assert got.data < 1e-10

    def test_gamma_downweights_easy_queries(self, rng):
        logits = Tensor(np.array([[3.0, 0.0]]))
        with Tape():
            ce = focal_loss(logits, np.array([0]), gamma=0.0, alpha_bal=1.0)
        with Tape():
            fl = focal_loss(logits, np.array([0]), gamma=2.0, alpha_bal=1.0)
        assert fl.data < 0.01 * ce.data

    def test_mean_over_queries(self, rng):
        logits = rng.normal(size=(4, 3))
        targets = np.array([0, 1, 2, 0])
        with Tape():
            whole = focal_loss(Tensor(logits), targets)
        singles = []
        for i in range(4):
            with Tape():
                singles.append(
                    focal_loss(Tensor(logits[i : i + 1]), targets[i : i + 1]).data
                )
        assert_allclose(whole.data, np.mean(singles), atol=1e-12)

    def test_alpha_scales_linearly(self, rng):
        logits = Tensor(rng.normal(size=(3, 3)))
        targets = np.array([0, 1, 2])
        with Tape():
            a = focal_loss(logits, targets, alpha_bal=0.25)
        with Tape():
            b = focal_loss(logits, targets, alpha_bal=1.0)
        assert_allclose(a.data * 4.0, b.data, atol=1e-12)

    def test_negative_gamma_rejected(self):
        with pytest.raises(ValueError):
            focal_loss(Tensor(np.zeros((1, 2))), np.array([0]), gamma=-1.0)

    def test_gradient_direction(self, rng):
        """Raising the target logit must lower the loss."""
        logits = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        targets = np.array([1, 2])
        with Tape():
            loss = focal_loss(logits, targets)
            ad.backward(loss)
        assert logits.grad[0, 1] < 0 and logits.grad[1, 2] < 0


def _make_output(logits, centers, sizes, yaws):
    sincos = np.stack([[math.sin(y), math.cos(y)] for y in yaws])
    return IterationOutput(
        logits=Tensor(np.asarray(logits, dtype=float)),
        center=Tensor(np.asarray(centers, dtype=float)),
        size=Tensor(np.asarray(sizes, dtype=float)),
        sincos=Tensor(sincos),
        ref_points=np.zeros((len(yaws), 3)),
    )


def _random_case(rng, P=5, G=3, n_classes=2):
    out = _make_output(
        rng.normal(size=(P, n_classes + 1)),
        rng.uniform(-5, 5, size=(P, 3)),
        rng.uniform(0.5, 3.0, size=(P, 3)),
        rng.uniform(-math.pi, math.pi, size=P),
    )
    gts = [
        Box3D(
            center=rng.uniform(-5, 5, size=3),
            size=rng.uniform(0.5, 3.0, size=3),
            yaw=float(rng.uniform(-math.pi, math.pi)),
            class_id=int(rng.integers(0, n_classes)),
        )
        for _ in range(G)
    ]
    return out, gts


def _iteration_loss_np(out, gts, n_classes, gamma=2.0, alpha=0.25):
    """Reference built from raw numpy plus exhaustive assignment."""
    P = out.logits.data.shape[0]
    cost = match_cost_matrix(out, gts)
    best, best_rows = math.inf, None
    for rows in itertools.permutations(range(P), len(gts)):
        c = sum(cost[r, g] for g, r in enumerate(rows))
        if c < best:
            best, best_rows = c, rows
    targets = np.full(P, n_classes)
    l1 = 0.0
    for g, r in enumerate(best_rows):
        gt = gts[g]
        targets[r] = gt.class_id
        l1 += np.abs(out.center.data[r] - gt.center).sum()
        l1 += np.abs(out.size.data[r] - gt.size).sum()
        l1 += np.abs(
            out.sincos.data[r] - [math.sin(gt.yaw), math.cos(gt.yaw)]
        ).sum()
    z = out.logits.data - out.logits.data.max(axis=1, keepdims=True)
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    p_t = p[np.arange(P), targets]
    focal = (-alpha * (1 - p_t) ** gamma * np.log(p_t)).mean()
    return focal + l1


class TestMatchCost:
    def test_single_pair_hand_value(self):
        out = _make_output(
            [[2.0, 0.0, 0.0]], [[1.0, 2.0, 3.0]], [[2.0, 1.0, 1.0]], [0.0]
        )
        gt = Box3D(
            center=np.array([2.0, 2.0, 3.0]),
            size=np.array([2.0, 1.0, 2.0]),
            yaw=math.pi / 2,
            class_id=0,
        )
        e = np.exp([2.0, 0.0, 0.0])
        p0 = e[0] / e.sum()
        # center differs by 1, size by 1, angle (0,1) vs (1,0) by 2
        assert match_cost(out, 0, gt) == pytest.approx(-p0 + 1.0 + 1.0 + 2.0, abs=1e-12)

    def test_matrix_shape_and_columns(self, rng):
        out, gts = _random_case(rng, P=4, G=2)
        cost = match_cost_matrix(out, gts)
        assert cost.shape == (4, 2)
        for j, gt in enumerate(gts):
            assert cost[1, j] == pytest.approx(match_cost(out, 1, gt), abs=1e-12)


class TestIterationLoss:
    def test_matches_numpy_reference(self, rng):
        for _ in range(10):
            out, gts = _random_case(rng)
            with Tape():
                loss, _ = iteration_loss(out, gts, n_classes=2)
            assert_allclose(loss.data, _iteration_loss_np(out, gts, 2), atol=1e-10)

    def test_perfect_predictions_leave_only_classification(self):
        gts = [
            Box3D(center=np.array([1.0, 0.0, 0.0]), size=np.ones(3), yaw=0.3, class_id=0),
            Box3D(center=np.array([4.0, 1.0, 0.0]), size=np.ones(3), yaw=-0.2, class_id=1),
        ]
        logits = np.full((3, 3), -9.0)
        logits[0, 0] = 9.0
        logits[1, 1] = 9.0
        logits[2, 2] = 9.0
        out = _make_output(
            logits,
            [gts[0].center, gts[1].center, [9.0, 9.0, 0.0]],
            [gts[0].size, gts[1].size, [1.0, 1.0, 1.0]],
            [gts[0].yaw, gts[1].yaw, 0.0],
        )
        with Tape():
            loss, assignment = iteration_loss(out, gts, n_classes=2)
        assert assignment.pairs == [(0, 0), (1, 1)]
        assert assignment.unmatched_preds == [2]
        assert loss.data < 1e-6

    def test_no_ground_truth_targets_background(self, rng):
        out, _ = _random_case(rng, P=4, G=0)
        with Tape():
            loss, assignment = iteration_loss(out, [], n_classes=2)
        with Tape():
            expect = focal_loss(out.logits, np.full(4, 2))
        assert assignment.pairs == []
        assert_allclose(loss.data, expect.data, atol=1e-15)

    def test_gradients_flow_to_all_heads(self, rng):
        out, gts = _random_case(rng)
        for t in (out.logits, out.center, out.size, out.sincos):
            t.requires_grad = True
        with Tape():
            loss, _ = iteration_loss(out, gts, n_classes=2)
            ad.backward(loss)
        assert np.linalg.norm(out.logits.grad) > 0
        assert np.linalg.norm(out.center.grad) > 0
        assert np.linalg.norm(out.size.grad) > 0
        assert np.linalg.norm(out.sincos.grad) > 0


class TestTotalLoss:
    def test_sums_iterations_when_aux(self, rng):
        out1, gts = _random_case(rng)
        out2, _ = _random_case(rng)
        with Tape():
            total = total_loss([out1, out2], gts, n_classes=2, aux_loss=True)
        with Tape():
            a, _ = iteration_loss(out1, gts, n_classes=2)
        with Tape():
            b, _ = iteration_loss(out2, gts, n_classes=2)
        assert_allclose(total.data, a.data + b.data, atol=1e-12)

    def test_last_only_without_aux(self, rng):
        out1, gts = _random_case(rng)
        out2, _ = _random_case(rng)
        with Tape():
            total = total_loss([out1, out2], gts, n_classes=2, aux_loss=False)
        with Tape():
            last, _ = iteration_loss(out2, gts, n_classes=2)
        assert_allclose(total.data, last.data, atol=1e-15)

    def test_ground_truth_order_invariance(self, rng):
        out, gts = _random_case(rng, P=6, G=3)
        with Tape():
            a = total_loss([out], gts, n_classes=2)
        with Tape():
            b = total_loss([out], gts[::-1], n_classes=2)
        assert_allclose(a.data, b.data, atol=1e-12)

    def test_angle_wraps_whole_turns(self, rng):
        out, gts = _random_case(rng, P=4, G=2)
        shifted = [
            Box3D(center=g.center, size=g.size, yaw=g.yaw + 2 * math.pi,
                  class_id=g.class_id)
            for g in gts
        ]
        with Tape():
            a = total_loss([out], gts, n_classes=2)
        with Tape():
            b = total_loss([out], shifted, n_classes=2)
        assert_allclose(a.data, b.data, atol=1e-12)
