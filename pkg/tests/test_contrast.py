import math

import numpy as np
import pytest

from dscl.autodiff import ContractError, DegenerateVectorError, Tensor, backward, finite_diff_check
from dscl.contrast import (
    ClassPrototypeBank,
    ContrastConfig,
    build_class_bank,
    contrast_score,
    info_nce,
    pgcl_loss,
    semantic_consistency,
    sgcl_loss,
    similarity_matrix,
)
from dscl.grouping import GroupSet


def np_cos(u, v):
    return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))


def brute_info_nce(a, p, negs, tau, include_pos=True):
    phi_p = math.exp(np_cos(a, p) / tau)
    denom = (phi_p if include_pos else 0.0) + sum(math.exp(np_cos(a, n) / tau) for n in negs)
    return -math.log(phi_p / denom)


def brute_pgcl(protos, classes, tau, include_pos=True):
    # protos: list per image of (G, D) arrays; classes: matching lists of ids
    items = [
        (i, u, protos[i][u], classes[i][u])
        for i in range(len(protos))
        for u in range(len(classes[i]))
    ]
    anchor_losses = []
    for i, u, p, c in items:
        pos = [q for j, v, q, cc in items if cc == c and not (j == i and v == u)]
        neg = [q for _, _, q, cc in items if cc != c]
        if not pos or not neg:
            continue
        anchor_losses.append(
            sum(brute_info_nce(p, q, neg, tau, include_pos) for q in pos) / len(pos)
        )
    return (sum(anchor_losses) / len(anchor_losses)) if anchor_losses else 0.0


def brute_sgcl(consistency, classes, bank_rows, bank_present, tau, include_pos=True):
    present = sorted(bank_present)
    if len(present) < 2:
        return 0.0
    terms = []
    for u, c in enumerate(classes):
        if c not in bank_present:
            continue
        negs = [bank_rows[k] for k in present if k != c]
        terms.append(brute_info_nce(consistency[u], bank_rows[c], negs, tau, include_pos))
    return sum(terms) / len(terms) if terms else 0.0


def group_set(protos):
    protos = np.asarray(protos, dtype=np.float64)
    assignment = np.arange(protos.shape[0])
    return GroupSet(assignment, Tensor(protos, requires_grad=True))


class TestContrastScore:
    def test_identical_vectors_tau_one(self):
        u = Tensor([1.0, 2.0])
        assert contrast_score(u, u, 1.0).item() == pytest.approx(math.e, abs=1e-12)

    def test_orthogonal(self):
        got = contrast_score(Tensor([1.0, 0.0]), Tensor([0.0, 2.0]), 1.0).item()
        assert got == pytest.approx(1.0, abs=1e-12)

    def test_small_tau_direct_evaluation(self):
        u = Tensor([0.5, -0.25, 3.0])
        got = contrast_score(u, u, 0.1).item()
        assert got == pytest.approx(math.exp(10.0), rel=1e-12)

    def test_zero_vector_rejected(self):
        with pytest.raises(DegenerateVectorError):
            contrast_score(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]), 1.0)

    def test_literal_tau_placement_is_vacuous(self):
        # exp(cos(u, v / tau)) ignores tau entirely: cosine is scale invariant.
        from dscl.autodiff import cosine_similarity

        rng = np.random.default_rng(0)
        u, v = rng.normal(size=5), rng.normal(size=5)
        vals = {
            round(cosine_similarity(Tensor(u), Tensor(v / tau)).exp().item(), 12)
            for tau in (0.05, 0.5, 1.0, 7.0)
        }
        assert len(vals) == 1


class TestInfoNce:
    def cfg(self, tau=1.0, include=True):
        return ContrastConfig(tau=tau, include_positive_in_denominator=include)

    def test_hand_value_single_orthogonal_negative(self):
        a = Tensor([1.0, 0.0])
        loss = info_nce(a, a, [Tensor([0.0, 1.0])], self.cfg())
        assert loss.item() == pytest.approx(math.log(1.0 + math.exp(-1.0)), abs=1e-12)

    def test_positive_equals_negative_gives_ln2(self):
        a = Tensor([1.0, 1.0])
        other = Tensor([2.0, -1.0])
        loss = info_nce(a, other, [other], self.cfg())
        assert loss.item() == pytest.approx(math.log(2.0), abs=1e-12)

    def test_three_random_negatives_brute_force(self):
        rng = np.random.default_rng(1)
        for trial in range(60):
            a, p = rng.normal(size=4), rng.normal(size=4)
            negs = [rng.normal(size=4) for _ in range(3)]
            for include in (True, False):
                got = info_nce(
                    Tensor(a), Tensor(p), [Tensor(n) for n in negs], self.cfg(0.7, include)
                ).item()
                want = brute_info_nce(a, p, negs, 0.7, include)
                assert got == pytest.approx(want, abs=1e-12)

    def test_empty_negatives_rejected(self):
        a = Tensor([1.0, 0.0])
        with pytest.raises(ContractError):
            info_nce(a, a, [], self.cfg())

    def test_nonnegative_with_included_positive(self):
        rng = np.random.default_rng(2)
        for _ in range(40):
            a, p = rng.normal(size=3), rng.normal(size=3)
            negs = [rng.normal(size=3) for _ in range(rng.integers(1, 4))]
            loss = info_nce(Tensor(a), Tensor(p), [Tensor(n) for n in negs], self.cfg(0.3))
            assert loss.item() >= 0.0

    def test_strictly_decreasing_in_positive_similarity(self):
        # finite-difference sign: moving the positive toward the anchor lowers the loss
        rng = np.random.default_rng(3)
        a = np.array([1.0, 0.0, 0.0])
        negs = [Tensor(rng.normal(size=3)) for _ in range(2)]
        losses = []
        for t in (0.0, 0.5, 0.9):
            p = (1 - t) * np.array([0.0, 1.0, 0.0]) + t * a
            losses.append(info_nce(Tensor(a), Tensor(p), negs, self.cfg()).item())
        assert losses[0] > losses[1] > losses[2]

    def test_gradients_pass_finite_differences(self):
        rng = np.random.default_rng(4)
        a = Tensor(rng.normal(size=4), requires_grad=True)
        p = Tensor(rng.normal(size=4), requires_grad=True)
        n = Tensor(rng.normal(size=4), requires_grad=True)

        def loss():
            return info_nce(a, p, [n], self.cfg(0.5))

        report = finite_diff_check(loss, {"a": a, "p": p, "n": n}, tol=1e-4)
        assert report.passed, report.lines()


class TestPgclLoss:
    def cfg(self, tau=1.0):
        return ContrastConfig(tau=tau)

    def test_two_image_hand_expansion(self):
        # two images, each one class-1 and one class-2 group; same-class
        # prototypes identical, cross-class orthogonal. Every anchor sees one
        # identical positive and two orthogonal negatives:
        # -log(e / (e + 2)) = ln(1 + 2/e)
        c1, c2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        batch = [
            (group_set([c1, c2]), [1, 2]),
            (group_set([c1, c2]), [1, 2]),
        ]
        out = pgcl_loss(batch, self.cfg())
        want = math.log(1.0 + 2.0 / math.e)
        assert out.item() == pytest.approx(want, abs=1e-12)
        assert out.anchors_used == 4 and not out.degenerate

    def test_all_groups_same_class_degenerate(self):
        batch = [(group_set([[1.0, 0.0], [0.9, 0.1]]), [1, 1])]
        out = pgcl_loss(batch, self.cfg())
        assert out.item() == 0.0
        assert out.degenerate

    def test_exhaustive_enumeration_oracle(self):
        rng = np.random.default_rng(5)
        for trial in range(30):
            protos, classes = [], []
            for _ in range(3):
                g = int(rng.integers(1, 4))
                protos.append(rng.normal(size=(g, 5)))
                classes.append([int(c) for c in rng.integers(0, 3, size=g)])
            batch = [(group_set(p), c) for p, c in zip(protos, classes)]
            got = pgcl_loss(batch, self.cfg(0.4)).item()
            want = brute_pgcl(protos, classes, 0.4)
            assert got == pytest.approx(want, abs=1e-10)

    def test_batch_order_invariance(self):
        rng = np.random.default_rng(6)
        protos = [rng.normal(size=(2, 4)) for _ in range(3)]
        classes = [[1, 2], [2, 1], [1, 2]]
        batch = [(group_set(p), c) for p, c in zip(protos, classes)]
        a = pgcl_loss(batch, self.cfg()).item()
        b = pgcl_loss(batch[::-1], self.cfg()).item()
        assert a == pytest.approx(b, abs=1e-12)

    def test_uniform_prototype_rescale_invariance(self):
        rng = np.random.default_rng(7)
        protos = [rng.normal(size=(2, 4)) for _ in range(2)]
        classes = [[1, 2], [1, 2]]
        a = pgcl_loss([(group_set(p), c) for p, c in zip(protos, classes)], self.cfg()).item()
        scaled = [3.7 * p for p in protos]
        b = pgcl_loss([(group_set(p), c) for p, c in zip(scaled, classes)], self.cfg()).item()
        assert a == pytest.approx(b, abs=1e-12)

    def test_gradients_reach_prototypes(self):
        rng = np.random.default_rng(8)
        gs1 = group_set(rng.normal(size=(2, 4)))
        gs2 = group_set(rng.normal(size=(2, 4)))
        batch = [(gs1, [1, 2]), (gs2, [1, 2])]

        def loss():
            return pgcl_loss(batch, self.cfg(0.5)).value

        report = finite_diff_check(
            loss, {"p1": gs1.prototypes, "p2": gs2.prototypes}, tol=1e-4
        )
        assert report.passed, report.lines()


class TestSimilarityMatrix:
    def test_matching_prototype_goes_one_hot_at_small_tau(self):
        emb = Tensor(np.eye(3))
        protos = Tensor(np.array([[0.0, 1.0, 0.0]]))
        m = similarity_matrix(protos, emb, {1, 2}, tau=0.02)
        assert m.m.data[0, 1] == pytest.approx(1.0, abs=1e-12)

    def test_equal_similarities_give_uniform_rows(self):
        emb = Tensor(np.eye(4))
        protos = Tensor(np.ones((2, 4)))
        m = similarity_matrix(protos, emb, {1, 2}, tau=1.0)
        assert np.allclose(m.m.data[:, [0, 1, 2]], 1 / 3, atol=1e-12)
        assert np.all(m.m.data[:, 3] == 0.0)

    def test_direct_softmax_oracle(self):
        rng = np.random.default_rng(9)
        protos = rng.normal(size=(3, 5))
        emb = rng.normal(size=(4, 5))
        present = {1, 3}
        tau = 0.6
        m = similarity_matrix(Tensor(protos), Tensor(emb), present, tau).m.data
        unmasked = [0, 1, 3]
        for u in range(3):
            sims = np.array([np_cos(protos[u], emb[k]) / tau for k in unmasked])
            soft = np.exp(sims - sims.max())
            soft = soft / soft.sum()
            for col, k in enumerate(unmasked):
                assert m[u, k] == pytest.approx(soft[col], abs=1e-12)
        assert np.all(m[:, 2] == 0.0)

    def test_rows_sum_to_one_over_unmasked(self):
        rng = np.random.default_rng(10)
        m = similarity_matrix(
            Tensor(rng.normal(size=(5, 6))), Tensor(rng.normal(size=(4, 6))), {2}, 0.4
        )
        assert np.allclose(m.m.data.sum(axis=1), 1.0, atol=1e-6)

    def test_depth_mismatch(self):
        from dscl.autodiff import ShapeError

        with pytest.raises(ShapeError):
            similarity_matrix(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))), {1}, 1.0)


class TestSemanticConsistency:
    def _bank(self, rows, present):
        return ClassPrototypeBank(Tensor(np.asarray(rows, dtype=np.float64)), frozenset(present))

    def test_one_hot_row_returns_class_prototype(self):
        m_data = np.array([[0.0, 1.0, 0.0]])
        from dscl.contrast import SemanticMatrix

        bank = self._bank([[0.0, 0.0], [3.0, -1.0], [9.9, 9.9]], {0, 1, 2})
        m = SemanticMatrix(Tensor(m_data), (0, 1, 2))
        s = semantic_consistency(m, bank)
        assert np.allclose(s.data[0], [3.0, -1.0], atol=1e-15)

    def test_uniform_two_class_midpoint(self):
        from dscl.contrast import SemanticMatrix

        bank = self._bank([[1.0, 1.0], [3.0, 5.0], [0.0, 0.0]], {0, 1})
        m = SemanticMatrix(Tensor(np.array([[0.5, 0.5, 0.0]])), (0, 1))
        s = semantic_consistency(m, bank)
        assert np.allclose(s.data[0], [2.0, 3.0], atol=1e-12)

    def test_mixture_oracle(self):
        rng = np.random.default_rng(11)
        protos = Tensor(rng.normal(size=(3, 4)))
        emb = Tensor(rng.normal(size=(4, 4)))
        m = similarity_matrix(protos, emb, {1, 2, 3}, 0.5)
        bank_rows = rng.normal(size=(4, 4))
        bank = self._bank(bank_rows, {0, 1, 2, 3})
        s = semantic_consistency(m, bank).data
        want = m.m.data @ bank_rows
        assert np.max(np.abs(s - want)) < 1e-12

    def test_missing_prototype_rejected(self):
        from dscl.contrast import SemanticMatrix

        bank = self._bank([[1.0, 0.0], [0.0, 0.0]], {0})
        m = SemanticMatrix(Tensor(np.array([[0.5, 0.5]])), (0, 1))
        with pytest.raises(ContractError, match=r"\[1\]"):
            semantic_consistency(m, bank)


class TestSgclLoss:
    def cfg(self, tau=1.0):
        return ContrastConfig(tau=tau)

    def test_hand_expansion_exact_prototype_match(self):
        bank = ClassPrototypeBank(
            Tensor(np.array([[1.0, 0.0], [0.0, 1.0]])), frozenset({0, 1})
        )
        consistency = Tensor(np.array([[0.0, 1.0]]))  # equals r_1 exactly
        out = sgcl_loss(consistency, [1], bank, self.cfg())
        assert out.item() == pytest.approx(math.log(1.0 + math.exp(-1.0)), abs=1e-12)

    def test_single_class_bank_degenerate(self):
        bank = ClassPrototypeBank(Tensor(np.array([[1.0, 2.0]])), frozenset({0}))
        out = sgcl_loss(Tensor(np.ones((2, 2))), [0, 0], bank, self.cfg())
        assert out.item() == 0.0 and out.degenerate

    def test_five_group_brute_force(self):
        rng = np.random.default_rng(12)
        for trial in range(30):
            bank_rows = rng.normal(size=(4, 6))
            present = {0, 1, 3}
            bank = ClassPrototypeBank(Tensor(bank_rows), frozenset(present))
            consistency = rng.normal(size=(5, 6))
            classes = [int(c) for c in rng.integers(0, 4, size=5)]
            got = sgcl_loss(Tensor(consistency), classes, bank, self.cfg(0.3))
            want = brute_sgcl(consistency, classes, bank_rows, present, 0.3)
            assert got.item() == pytest.approx(want, abs=1e-10)

    def test_gradients_via_finite_differences(self):
        rng = np.random.default_rng(13)
        bank_matrix = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        bank = ClassPrototypeBank(bank_matrix, frozenset({0, 1, 2}))
        consistency = Tensor(rng.normal(size=(3, 4)), requires_grad=True)

        def loss():
            return sgcl_loss(consistency, [0, 1, 2], bank, self.cfg(0.5)).value

        report = finite_diff_check(loss, {"bank": bank_matrix, "s": consistency}, tol=1e-4)
        assert report.passed, report.lines()


class TestClassBank:
    def test_masked_mean_per_class(self):
        f1 = Tensor(np.array([[1.0, 0.0], [3.0, 0.0], [0.0, 2.0]]))
        f2 = Tensor(np.array([[0.0, 4.0]]))
        pseudo = [np.array([1, 1, 0], dtype=np.uint16), np.array([0], dtype=np.uint16)]
        bank = build_class_bank([f1, f2], pseudo, num_classes=3)
        assert bank.present == frozenset({0, 1})
        assert np.allclose(bank.matrix.data[0], [0.0, 3.0], atol=1e-15)
        assert np.allclose(bank.matrix.data[1], [2.0, 0.0], atol=1e-15)
        assert np.all(bank.matrix.data[2] == 0.0)

    def test_absent_class_prototype_rejected(self):
        bank = build_class_bank(
            [Tensor(np.ones((2, 2)))], [np.zeros(2, dtype=np.uint16)], num_classes=2
        )
        with pytest.raises(ContractError):
            bank.prototype(1)

    def test_gradients_flow_to_features(self):
        rng = np.random.default_rng(14)
        f = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        pseudo = [np.array([0, 1, 1, 0], dtype=np.uint16)]

        def loss():
            bank = build_class_bank([f], pseudo, num_classes=2)
            return (bank.matrix * bank.matrix).sum()

        assert finite_diff_check(loss, {"f": f}, tol=1e-5).passed
