import itertools

import numpy as np
import pytest
from scipy.integrate import quad

from conftest import fd_gradcheck
from vitfusion.detection import (
    ContractError,
    DetectionHead,
    DetectionSet,
    GroundTruth,
    LossWeights,
    corner_loss,
    corner_loss_terms,
    focal_loss,
    focal_terms,
    laplace_kl,
    match,
    match_cost_matrix,
    solve_assignment,
    total_loss,
)
from vitfusion.geometry import Box3D, corners_of, wrap_angle
from vitfusion.nn import ConfigError


def random_boxes(rng, n, center=4.0):
    return [Box3D(*rng.uniform(-center, center, 3), *rng.uniform(0.5, 3.0, 3),
                  rng.uniform(-np.pi, np.pi)) for _ in range(n)]


class TestContainers:
    def test_probs_must_normalize(self):
        box = Box3D(0, 0, 0, 1, 1, 1, 0)
        with pytest.raises(ContractError):
            DetectionSet([box], np.array([[0.5, 0.2, 0.1]]))
        ds = DetectionSet([box], np.array([[0.5, 0.2, 0.3]]))
        assert ds.confidences()[0] == pytest.approx(0.5)
        assert ds.argmax_classes()[0] == 0

    def test_proposal_cap(self):
        boxes = [Box3D(i, 0, 0, 1, 1, 1, 0) for i in range(257)]
        probs = np.tile([0.5, 0.5], (257, 1))
        with pytest.raises(ContractError):
            DetectionSet(boxes, probs)

    def test_gt_onehot(self):
        gt = GroundTruth(random_boxes(np.random.default_rng(0), 3), [0, 1, 0], 2)
        oh = gt.onehot()
        np.testing.assert_array_equal(oh, [[1, 0], [0, 1], [1, 0]])


class TestMatching:
    def test_exact_prediction_is_matched(self):
        rng = np.random.default_rng(1)
        gt_box = Box3D(1, 2, 0, 2, 1, 1, 0.3)
        preds = DetectionSet(
            [Box3D(5, 5, 0, 1, 1, 1, 0), gt_box, Box3D(-5, 2, 0, 1, 1, 1, 1.0)],
            np.array([[0.5, 0.5, 0.0], [1.0, 0.0, 0.0], [0.3, 0.3, 0.4]]))
        gt = GroundTruth([gt_box], [0], 2)
        np.testing.assert_array_equal(match(preds, gt), [1])

    def test_identical_rows_tie_break_identity(self):
        cost = np.tile(np.array([3.0, 1.0, 2.0, 5.0]), (4, 1))
        np.testing.assert_array_equal(solve_assignment(cost), [0, 1, 2, 3])
        np.testing.assert_array_equal(solve_assignment(np.ones((3, 3))), [0, 1, 2])

    def test_cost_equals_enumeration_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            M = int(rng.integers(1, 6))
            N = int(rng.integers(M, 9))
            cost = rng.normal(size=(M, N))
            a = solve_assignment(cost)
            mine = cost[np.arange(M), a].sum()
            best = min(sum(cost[i, p[i]] for i in range(M))
                       for p in itertools.permutations(range(N), M))
            assert mine == pytest.approx(best, abs=1e-9)
            assert len(set(a.tolist())) == M   # injective

    def test_constant_shift_invariance(self):
        rng = np.random.default_rng(3)
        cost = rng.normal(size=(4, 7))
        np.testing.assert_array_equal(solve_assignment(cost),
                                      solve_assignment(cost + 11.7))

    def test_m_greater_than_n_rejected(self):
        with pytest.raises(ContractError):
            solve_assignment(np.ones((3, 2)))

    def test_heading_wraps_in_cost(self):
        box_a = np.array([[0, 0, 0, 1, 1, 1, np.pi - 0.05]])
        gt = np.array([[0, 0, 0, 1, 1, 1, -np.pi + 0.05]])
        cost = match_cost_matrix(box_a, np.array([[1.0, 0.0]]), gt, [0],
                                 0.0, 1.0, heading_col=6)
        assert cost[0, 0] == pytest.approx(0.1, abs=1e-9)


class TestFocalLoss:
    def test_gamma_zero_is_bce(self):
        rng = np.random.default_rng(4)
        for _ in range(1000):
            p = rng.uniform(0.01, 0.99, size=(1, 4))
            t = np.zeros((1, 4))
            t[0, rng.integers(4)] = 1.0
            focal, _ = focal_terms(p, t, 0.0)
            bce = -(t * np.log(p) + (1 - t) * np.log(1 - p))
            np.testing.assert_allclose(focal, bce, atol=1e-7)

    def test_reference_value(self):
        # v=1, p=0.5, gamma=2 -> 0.25 * (-log 0.5)
        loss, _ = focal_terms(np.array([[0.5]]), np.array([[1.0]]), 2.0)
        assert loss[0, 0] == pytest.approx(0.25 * np.log(2.0), abs=1e-9)
        assert loss[0, 0] == pytest.approx(0.17329, abs=1e-5)

    def test_perfect_prediction_negligible(self):
        t = np.array([[1.0, 0.0, 0.0]])
        p = np.array([[1.0, 0.0, 0.0]])
        loss, _ = focal_terms(p, t, 2.0)
        assert loss.sum() <= 1e-5

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(5)
        for gamma in (0.0, 0.5, 2.0):
            p = rng.uniform(0.05, 0.95, size=(3, 4))
            t = np.zeros((3, 4))
            t[np.arange(3), rng.integers(0, 4, 3)] = 1.0
            _, grad = focal_loss(p, t, gamma, normalizer=3.0)
            for i in np.ndindex(p.shape):
                h = 1e-7
                pp, pm = p.copy(), p.copy()
                pp[i] += h
                pm[i] -= h
                num = (focal_loss(pp, t, gamma, normalizer=3.0)[0]
                       - focal_loss(pm, t, gamma, normalizer=3.0)[0]) / (2 * h)
                assert abs(num - grad[i]) < 1e-5


class TestLaplaceKL:
    def test_zero_delta(self):
        vals, grad = laplace_kl(1.5, 1.5, 1.0)
        assert vals == pytest.approx(0.0)
        assert grad == pytest.approx(0.0)

    def test_unit_delta(self):
        vals, _ = laplace_kl(1.0, 0.0, 1.0)
        assert vals == pytest.approx(np.exp(-1.0) + 1.0 - 1.0)
        assert vals == pytest.approx(0.36788, abs=1e-5)

    def test_matches_numerical_integration(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            b = rng.uniform(0.3, 3.0)
            delta = rng.uniform(-5, 5)

            def integrand(x):
                p = np.exp(-abs(x) / b) / (2 * b)                 # gt at 0
                q = np.exp(-abs(x - delta) / b) / (2 * b)         # pred at delta
                return p * (np.log(p) - np.log(q))

            pieces = sorted([-40.0, 0.0, delta, 40.0])
            numeric = sum(quad(integrand, a, c, limit=200)[0]
                          for a, c in zip(pieces, pieces[1:]))
            closed, _ = laplace_kl(delta, 0.0, b)
            assert abs(closed - numeric) < 1e-6

    def test_linear_tail(self):
        for d in (30.0, 80.0):
            v, _ = laplace_kl(d, 0.0, 1.0)
            assert abs(v - (d - 1.0)) < 1e-9

    def test_heading_wrap_two_pi_invariant(self):
        v1, _ = laplace_kl(0.4, 0.1, 1.0, wrap=True)
        v2, _ = laplace_kl(0.4 + 2 * np.pi, 0.1, 1.0, wrap=True)
        assert v1 == pytest.approx(v2, abs=1e-12)

    def test_bad_scale(self):
        with pytest.raises(ConfigError):
            laplace_kl(1.0, 0.0, 0.0)


class TestCornerLoss:
    def test_identical_boxes_zero(self):
        box = Box3D(1, 2, 0.5, 3, 1.5, 1.2, 0.7)
        assert corner_loss(box, box) == pytest.approx(0.0)

    def test_unit_translation_is_eight(self):
        a = Box3D(0, 0, 0, 2, 1, 1, 0.3)
        b = Box3D(1, 0, 0, 2, 1, 1, 0.3)
        assert corner_loss(b, a) == pytest.approx(8.0, abs=1e-12)

    def test_matches_corner_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            a, b = random_boxes(rng, 2)
            expect = np.linalg.norm(corners_of(a) - corners_of(b), axis=1).sum()
            assert corner_loss(a, b) == pytest.approx(expect, abs=1e-10)

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            pa = np.concatenate([rng.uniform(-3, 3, 3), rng.uniform(0.5, 2.5, 3),
                                 [rng.uniform(-3, 3)]])
            pb = np.concatenate([rng.uniform(-3, 3, 3), rng.uniform(0.5, 2.5, 3),
                                 [rng.uniform(-3, 3)]])
            _, grad = corner_loss_terms(pa[None], pb[None])
            for i in range(7):
                h = 1e-6
                pp, pm = pa.copy(), pa.copy()
                pp[i] += h
                pm[i] -= h
                num = (corner_loss_terms(pp[None], pb[None])[0][0]
                       - corner_loss_terms(pm[None], pb[None])[0][0]) / (2 * h)
                assert abs(num - grad[0, i]) < 1e-5


class TestTotalLoss:
    def _random_instance(self, rng, N=6, M=3):
        box_params = np.concatenate([
            rng.uniform(-4, 4, (N, 3)), rng.uniform(0.5, 2.5, (N, 3)),
            rng.uniform(-np.pi, np.pi, (N, 1))], axis=1)
        logits = rng.normal(size=(N, 3))
        probs = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
        gt_params = np.concatenate([
            rng.uniform(-4, 4, (M, 3)), rng.uniform(0.5, 2.5, (M, 3)),
            rng.uniform(-np.pi, np.pi, (M, 1))], axis=1)
        labels = rng.integers(0, 2, M)
        assignment = rng.permutation(N)[:M]
        return box_params, probs, gt_params, labels, assignment

    def test_breakdown_identity(self):
        rng = np.random.default_rng(9)
        w = LossWeights(cls=1.3, reg=0.7, corner=0.15)
        for _ in range(20):
            bp, pr, gp, lb, asg = self._random_instance(rng)
            breakdown, _, _ = total_loss(bp, pr, gp, lb, asg, w)
            assert breakdown.check_identity(1e-9)
            assert breakdown.total >= 0
            for part in (breakdown.cls, breakdown.center, breakdown.size,
                         breakdown.heading, breakdown.corner):
                assert part >= 0

    def test_empty_scene_confident_no_object(self):
        N = 5
        probs = np.zeros((N, 3))
        probs[:, 2] = 1.0
        box_params = np.tile([0, 0, 0, 1, 1, 1, 0.0], (N, 1)).astype(float)
        breakdown, dbox, dprobs = total_loss(
            box_params, probs, np.zeros((0, 7)), np.zeros(0, dtype=int),
            np.zeros(0, dtype=np.intp), LossWeights())
        assert breakdown.total < 1e-4
        np.testing.assert_array_equal(dbox, 0.0)

    def test_perfect_predictions(self):
        rng = np.random.default_rng(10)
        gt_params = np.array([[1.0, 2.0, 0.0, 2.0, 1.0, 1.5, 0.4],
                              [-3.0, 1.0, 0.2, 1.0, 1.0, 1.8, -1.0]])
        labels = np.array([0, 1])
        N = 4
        box_params = np.concatenate([gt_params, rng.uniform(-4, 4, (2, 7))])
        box_params[2:, 3:6] = 1.0
        probs = np.full((N, 3), 1e-9)
        probs[0, 0] = probs[1, 1] = probs[2, 2] = probs[3, 2] = 1.0 - 2e-9
        probs /= probs.sum(1, keepdims=True)
        assignment = np.array([0, 1])
        breakdown, _, _ = total_loss(box_params, probs, gt_params, labels,
                                     assignment, LossWeights())
        assert breakdown.center < 1e-9
        assert breakdown.size < 1e-9
        assert breakdown.heading < 1e-9
        assert breakdown.corner < 1e-9
        assert breakdown.total == pytest.approx(breakdown.weights.cls * breakdown.cls)

    def test_gradients_match_fd(self):
        rng = np.random.default_rng(11)
        w = LossWeights()
        for _ in range(20):
            bp, pr, gp, lb, asg = self._random_instance(rng)

            def value(bp_, pr_):
                return total_loss(bp_, pr_, gp, lb, asg, w)[0].total

            _, dbox, dprobs = total_loss(bp, pr, gp, lb, asg, w)
            worst = 0.0
            for i in np.ndindex(bp.shape):
                h = 1e-5
                bpp, bpm = bp.copy(), bp.copy()
                bpp[i] += h
                bpm[i] -= h
                num = (value(bpp, pr) - value(bpm, pr)) / (2 * h)
                worst = max(worst, abs(num - dbox[i])
                            / max(abs(num), abs(dbox[i]), 1e-5))
            for i in np.ndindex(pr.shape):
                h = 1e-6
                prp, prm = pr.copy(), pr.copy()
                prp[i] += h
                prm[i] -= h
                num = (value(bp, prp) - value(bp, prm)) / (2 * h)
                worst = max(worst, abs(num - dprobs[i])
                            / max(abs(num), abs(dprobs[i]), 1e-5))
            assert worst < 1e-4


class TestHeads:
    def _head(self, seed=0, **kw):
        rng = np.random.default_rng(seed)
        args = dict(d_in=8, hidden=[12], n_boxes=4, n_classes=2,
                    center_low=(0.0, -8.0, -2.0), center_high=(16.0, 8.0, 2.0),
                    box_dim=7)
        args.update(kw)
        return DetectionHead(rng, **args)

    def test_param_order_and_validity(self):
        head = self._head()
        params, probs = head.forward(np.random.default_rng(1).normal(size=8))
        assert params.shape == (4, 7) and probs.shape == (4, 3)
        # centers inside the configured range, sizes positive, heading wrapped
        assert np.all(params[:, 0] >= 0.0) and np.all(params[:, 0] <= 16.0)
        assert np.all(params[:, 3:6] > 0.0)
        assert np.all(params[:, 6] >= -np.pi) and np.all(params[:, 6] < np.pi)
        np.testing.assert_allclose(probs.sum(1), 1.0)

    def test_zero_class_head_gives_uniform_probs(self):
        head = self._head()
        for p in head.cls_mlp.named_params().values():
            p.data[:] = 0.0
        _, probs = head.forward(np.random.default_rng(2).normal(size=8))
        np.testing.assert_allclose(probs, 1.0 / 3.0)

    def test_cap_enforced(self):
        with pytest.raises(ConfigError):
            self._head(n_boxes=257)

    def test_2d_head(self):
        head = self._head(box_dim=4, center_low=(0.0, 0.0),
                          center_high=(64.0, 64.0), size_scale=16.0)
        params, probs = head.forward(np.random.default_rng(3).normal(size=8))
        assert params.shape == (4, 4)
        dets = head.predictions(params, probs)
        assert len(dets) == 4

    def test_backward_matches_fd(self):
        head = self._head(seed=4)
        rng = np.random.default_rng(5)
        for p in head.named_params().values():
            if p.data.ndim == 2:
                p.data[:] = rng.normal(0, 0.3, p.data.shape)
        x = rng.normal(size=8)
        w_params = rng.normal(size=(4, 7))
        w_probs = rng.normal(size=(4, 3))

        def loss():
            params, probs = head.forward(x)
            return float((params * w_params).sum() + (probs * w_probs).sum())

        head.zero_grad()
        loss()
        head.backward(w_params, w_probs)
        worst = fd_gradcheck(head.named_params(), loss, n_per_tensor=4)
        assert worst < 1e-4
