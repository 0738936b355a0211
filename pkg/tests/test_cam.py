import math

import numpy as np
import pytest

from dscl.autodiff import ShapeError, Tensor, backward, finite_diff_check
from dscl.cam import (
    CamStack,
    CamWeights,
    cam_forward,
    ce_loss,
    classification_logits,
    pseudo_labels,
    refined_cam,
    update_pseudo_labels,
)


def exhaustive_argmax(scores, allowed):
    # independent per-pixel scan, smallest-id tie break
    out = np.zeros(scores.shape[0], dtype=np.uint16)
    for p in range(scores.shape[0]):
        best, best_val = None, None
        for k in sorted(allowed):
            v = scores[p, k]
            if best_val is None or v > best_val:
                best, best_val = k, v
        out[p] = best
    return out


class TestCamForward:
    def test_identity_weights_reproduce_features(self):
        f = Tensor(np.random.default_rng(0).normal(size=(6, 3)))
        stack = cam_forward(f, Tensor(np.eye(3)))
        assert np.allclose(stack.scores.data, f.data, atol=1e-15)
        assert not stack.refined

    def test_zero_features_zero_scores(self):
        stack = cam_forward(Tensor(np.zeros((4, 5))), Tensor(np.ones((3, 5))))
        assert np.all(stack.scores.data == 0.0)

    def test_per_pixel_dot_product_oracle(self):
        rng = np.random.default_rng(1)
        f, w = rng.normal(size=(7, 4)), rng.normal(size=(3, 4))
        stack = cam_forward(Tensor(f), Tensor(w))
        want = np.array([[f[p] @ w[k] for k in range(3)] for p in range(7)])
        assert np.max(np.abs(stack.scores.data - want)) < 1e-12

    def test_depth_mismatch(self):
        with pytest.raises(ShapeError, match="depth"):
            cam_forward(Tensor(np.zeros((4, 5))), Tensor(np.zeros((3, 6))))

    def test_linear_in_features_and_weights(self):
        rng = np.random.default_rng(3)
        f1, f2 = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
        w = rng.normal(size=(2, 4))
        lhs = cam_forward(Tensor(f1 + f2), Tensor(w)).scores.data
        rhs = cam_forward(Tensor(f1), Tensor(w)).scores.data + cam_forward(
            Tensor(f2), Tensor(w)
        ).scores.data
        assert np.allclose(lhs, rhs, atol=1e-12)


class TestRefinedCam:
    def test_identity_case_at_double_depth(self):
        f = Tensor(np.random.default_rng(2).normal(size=(4, 6)))
        stack = refined_cam(f, Tensor(np.eye(6)))
        assert stack.refined
        assert np.allclose(stack.scores.data, f.data, atol=1e-15)

    def test_zero_case(self):
        stack = refined_cam(Tensor(np.zeros((4, 8))), Tensor(np.ones((3, 8))))
        assert np.all(stack.scores.data == 0.0)

    def test_oracle_match(self):
        rng = np.random.default_rng(4)
        f, w = rng.normal(size=(5, 8)), rng.normal(size=(3, 8))
        got = refined_cam(Tensor(f), Tensor(w)).scores.data
        assert np.max(np.abs(got - f @ w.T)) < 1e-12


class TestPseudoLabels:
    def test_one_hot_stack(self):
        scores = np.zeros((6, 4))
        scores[:, 2] = 5.0
        got = pseudo_labels(CamStack(Tensor(scores)), {0, 2}).labels
        assert np.all(got == 2)

    def test_all_equal_scores_tie_to_background(self):
        scores = np.ones((5, 3))
        got = pseudo_labels(CamStack(Tensor(scores)), {0, 1, 2}).labels
        assert np.all(got == 0)

    def test_matches_exhaustive_scan(self):
        rng = np.random.default_rng(5)
        scores = rng.normal(size=(16, 3))
        allowed = {0, 2}
        got = pseudo_labels(CamStack(Tensor(scores)), allowed).labels
        assert np.array_equal(got, exhaustive_argmax(scores, allowed))

    def test_never_emits_class_outside_allowed(self):
        rng = np.random.default_rng(6)
        for trial in range(50):
            scores = rng.normal(size=(12, 5))
            allowed = {0, int(rng.integers(1, 5))}
            got = pseudo_labels(CamStack(Tensor(scores)), allowed).labels
            assert set(np.unique(got)) <= allowed

    def test_argmax_invariances(self):
        rng = np.random.default_rng(7)
        scores = np.abs(rng.normal(size=(10, 4)))  # nonnegative for the scale case
        allowed = {0, 1, 3}
        base = pseudo_labels(CamStack(Tensor(scores)), allowed).labels
        shifted = pseudo_labels(CamStack(Tensor(scores + 3.7)), allowed).labels
        scaled = pseudo_labels(CamStack(Tensor(scores * 2.9)), allowed).labels
        assert np.array_equal(base, shifted)
        assert np.array_equal(base, scaled)

    def test_update_pseudo_labels_same_contract(self):
        rng = np.random.default_rng(8)
        scores = rng.normal(size=(9, 3))
        stack = CamStack(Tensor(scores), refined=True)
        assert np.array_equal(
            update_pseudo_labels(stack, {0, 1}).labels,
            exhaustive_argmax(scores, {0, 1}),
        )


class TestClassificationLogits:
    def test_constant_map(self):
        scores = np.zeros((8, 3))
        scores[:, 1] = 2.5
        logits = classification_logits(CamStack(Tensor(scores)))
        assert logits.data[1] == pytest.approx(2.5, abs=1e-15)

    def test_zero_stack(self):
        logits = classification_logits(CamStack(Tensor(np.zeros((4, 3)))))
        assert np.all(logits.data == 0.0)

    def test_mean_oracle(self):
        rng = np.random.default_rng(9)
        scores = rng.normal(size=(11, 4))
        logits = classification_logits(CamStack(Tensor(scores)))
        assert np.max(np.abs(logits.data - scores.mean(axis=0))) < 1e-12


class TestCeLoss:
    def test_saturated_logits_near_zero_loss(self):
        z = np.array([0.0, 30.0, -30.0, 30.0])
        loss = ce_loss(Tensor(z), {1, 3})
        assert loss.item() < 1e-9

    def test_zero_logits_give_ln2(self):
        loss = ce_loss(Tensor(np.zeros(4)), {1})
        assert loss.item() == pytest.approx(math.log(2.0), abs=1e-12)

    def test_direct_formula_oracle(self):
        rng = np.random.default_rng(10)
        z = rng.normal(size=5)
        present = {2, 4}
        terms = []
        for k in range(1, 5):
            t = 1.0 if k in present else 0.0
            s = 1.0 / (1.0 + math.exp(-z[k]))
            terms.append(-(t * math.log(s) + (1 - t) * math.log(1 - s)))
        want = sum(terms) / 4
        assert ce_loss(Tensor(z), present).item() == pytest.approx(want, abs=1e-12)

    def test_nonnegative_and_decreasing_in_present_logit(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            z = Tensor(rng.normal(size=4), requires_grad=True)
            loss = ce_loss(z, {2})
            assert loss.item() >= 0.0
            grads = backward(loss)
            assert grads[z][2] < 0  # present class: loss decreases as logit grows
            assert grads[z][0] == 0.0  # background logit carries no target

    def test_gradient_matches_finite_differences(self):
        z = Tensor(np.random.default_rng(12).normal(size=6), requires_grad=True)
        report = finite_diff_check(lambda: ce_loss(z, {1, 5}), {"z": z}, tol=1e-6)
        assert report.passed, report.lines()

    def test_background_target_rejected(self):
        with pytest.raises(ValueError):
            ce_loss(Tensor(np.zeros(4)), {0})


def test_cam_weights_init_shaped_and_deterministic():
    a = CamWeights.init(4, 16, seed=5)
    b = CamWeights.init(4, 16, seed=5)
    assert a.base.data.shape == (4, 16) and a.refined.data.shape == (4, 32)
    assert np.array_equal(a.base.data, b.base.data)
    assert np.array_equal(a.refined.data, b.refined.data)
