import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssmfuse import align
from ssmfuse import tensor as tn
from gradcheck import check_gradients, fd_gradients, rel_error, tape_gradients


def exact_assignment_cost(c: np.ndarray) -> float:
    """Brute-force optimum over all permutation plans (uniform equal marginals)."""
    n = c.shape[0]
    return min(sum(c[i, p[i]] for i in range(n)) / n
               for p in itertools.permutations(range(n)))


def mmd_double_sum(x: np.ndarray, y: np.ndarray, gamma: float) -> float:
    """Naive O(T^2) three-double-sum evaluation of the biased estimator."""
    k = lambda a, b: math.exp(-gamma * float(((a - b) ** 2).sum()))
    s_xx = sum(k(a, b) for a in x for b in x) / (len(x) ** 2)
    s_yy = sum(k(a, b) for a in y for b in y) / (len(y) ** 2)
    s_xy = sum(k(a, b) for a in x for b in y) / (len(x) * len(y))
    return s_xx - 2.0 * s_xy + s_yy


class TestCostMatrix:
    def test_identical_unit_vectors(self):
        h = tn.tensor([[1.0, 0.0], [0.0, 1.0]])
        c = align.cost_matrix(h, h)
        assert c.data[0, 0] == 0.0 and c.data[1, 1] == 0.0

    def test_orthogonal_and_antipodal(self):
        a = tn.tensor([[1.0, 0.0]])
        b = tn.tensor([[0.0, 2.0], [-3.0, 0.0]])
        c = align.cost_matrix(a, b)
        assert c.data[0, 0] == pytest.approx(1.0, abs=1e-15)
        assert c.data[0, 1] == pytest.approx(2.0, abs=1e-15)

    def test_matches_elementwise_formula(self):
        rng = np.random.default_rng(0)
        hm, hn = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
        c = align.cost_matrix(tn.Tensor(hm), tn.Tensor(hn)).data
        for i in range(3):
            for j in range(5):
                cos = hm[i] @ hn[j] / (np.linalg.norm(hm[i]) * np.linalg.norm(hn[j]))
                assert c[i, j] == pytest.approx(1.0 - cos, abs=1e-12)

    def test_range_invariant(self):
        rng = np.random.default_rng(1)
        c = align.cost_matrix(tn.Tensor(rng.normal(size=(8, 3))),
                              tn.Tensor(rng.normal(size=(6, 3)))).data
        assert np.all(c >= 0.0) and np.all(c <= 2.0)

    def test_zero_norm_row_rejected(self):
        bad = tn.tensor([[1.0, 1.0], [0.0, 0.0], [2.0, 0.0]])
        good = tn.tensor([[1.0, 0.0]])
        with pytest.raises(ValueError, match="row 1 of first"):
            align.cost_matrix(bad, good)
        with pytest.raises(ValueError, match="second"):
            align.cost_matrix(good, bad)


class TestSinkhorn:
    def test_one_by_one_plan(self):
        res = align.sinkhorn_ot(np.array([[0.7]]), blur=0.05)
        assert res.distance == pytest.approx(0.7, abs=1e-12)
        np.testing.assert_allclose(res.plan, [[1.0]], atol=1e-12)

    def test_identical_inputs_distance_vanishes(self):
        rng = np.random.default_rng(2)
        h = tn.Tensor(rng.normal(size=(6, 4)))
        c = align.cost_matrix(h, h)
        res = align.sinkhorn_ot(c, blur=1e-3)
        assert res.distance < 1e-3

    def test_marginals_within_tolerance(self):
        rng = np.random.default_rng(3)
        c = rng.uniform(0.0, 2.0, (7, 5))
        res = align.sinkhorn_ot(c, blur=0.05)
        n, m = c.shape
        assert np.abs(res.plan.sum(axis=1) - 1.0 / n).max() < 1e-6
        assert np.abs(res.plan.sum(axis=0) - 1.0 / m).max() < 1e-6

    @pytest.mark.parametrize("n", [2, 3, 4, 5, 6])
    def test_distance_brackets_assignment_optimum(self, n):
        rng = np.random.default_rng(100 + n)
        for _ in range(5):
            c = rng.uniform(0.0, 2.0, (n, n))
            res = align.sinkhorn_ot(c, blur=1e-3)
            exact = exact_assignment_cost(c)
            assert res.distance >= exact - 1e-9
            assert res.distance <= exact + 2.0 * 1e-3 * math.log(n)

    def test_returned_plan_is_exactly_feasible(self):
        rng = np.random.default_rng(4)
        c = rng.uniform(0.0, 2.0, (6, 4))
        res = align.sinkhorn_ot(c, blur=0.05)
        assert np.abs(res.plan.sum(axis=1) - 1.0 / 6).max() < 1e-14
        assert np.abs(res.plan.sum(axis=0) - 1.0 / 4).max() < 1e-14
        assert np.all(res.plan >= 0.0)

    def test_nonconvergence_carries_violation(self):
        rng = np.random.default_rng(5)
        c = rng.uniform(0.0, 2.0, (6, 6))
        with pytest.raises(align.SinkhornError) as exc:
            align.sinkhorn_ot(c, blur=1e-4, max_iterations=3)
        assert exc.value.violation > 0

    def test_negative_cost_rejected(self):
        with pytest.raises(ValueError, match="nonnegative"):
            align.sinkhorn_ot(np.array([[-0.1, 0.2], [0.3, 0.4]]), blur=0.05)


class TestOtLoss:
    def test_gradient_matches_full_finite_difference(self):
        # Tight regularization: the plan is locally stable, so central
        # differences of the re-solved loss agree with the fixed-plan gradient.
        rng = np.random.default_rng(6)
        hm = tn.Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        hn = tn.Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        # blur far below the smallest cost gap so the plan is locally constant,
        # and tol well below h * |grad| so solver noise cannot swamp the signal
        f = lambda: align.ot_loss(hm, hn, blur=1e-4, tol=1e-12, max_iterations=50_000)
        analytic = tape_gradients(f, [hm, hn])
        numeric = fd_gradients(f, [hm, hn])
        assert rel_error(analytic, numeric) < 1e-3

    def test_frozen_plan_chain_rule_at_default_blur(self):
        # Envelope gradient = plan; with the plan frozen, the path through the
        # cosine cost must match finite differences tightly.
        rng = np.random.default_rng(7)
        hm = tn.Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        hn = tn.Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        plan = align.sinkhorn_ot(
            align.cost_matrix(hm, hn), blur=0.05).plan
        frozen = tn.Tensor(plan)
        check_gradients(lambda: tn.sum(align.cost_matrix(hm, hn) * frozen), [hm, hn])

    def test_identical_inputs_pull_nothing(self):
        rng = np.random.default_rng(8)
        h = rng.normal(size=(5, 4))
        hm = tn.Tensor(h.copy(), requires_grad=True)
        hn = tn.Tensor(h.copy(), requires_grad=True)
        with tn.record():
            loss = align.ot_loss(hm, hn, blur=1e-3)
        tn.backward(loss)
        assert loss.item() < 1e-3
        assert np.abs(hm.grad).max() < 1e-3
        assert np.abs(hn.grad).max() < 1e-3

    def test_descent_on_two_cluster_instance(self):
        rng = np.random.default_rng(9)
        target = np.vstack([rng.normal(loc=3.0, size=(3, 4)),
                            rng.normal(loc=-3.0, size=(3, 4))])
        hm = tn.Tensor(rng.normal(size=(6, 4)), requires_grad=True)
        hn = tn.Tensor(target)
        losses = []
        for _ in range(50):
            hm.zero_grad()
            with tn.record():
                loss = align.ot_loss(hm, hn, blur=0.05, max_iterations=20_000)
            tn.backward(loss)
            losses.append(loss.item())
            hm.data[...] -= 0.5 * hm.grad
        assert all(b <= a + 1e-9 for a, b in zip(losses, losses[1:]))
        assert losses[-1] < 0.2 * losses[0]


class TestMmd:
    def test_identical_multiset_is_exactly_zero(self):
        rng = np.random.default_rng(10)
        h = rng.normal(size=(5, 3))
        value = align.mmd_loss(tn.Tensor(h), tn.Tensor(h.copy()))
        assert value.item() == 0.0

    def test_two_singletons_analytic(self):
        # coordinates differing by 1 each give |x - y|^2 = d, so k = e^-1
        d = 4
        x = tn.Tensor(np.zeros((1, d)))
        y = tn.Tensor(np.ones((1, d)))
        value = align.mmd_loss(x, y)
        assert value.item() == pytest.approx(2.0 - 2.0 * math.exp(-1.0), abs=1e-12)

    def test_matches_double_sum_oracle(self):
        rng = np.random.default_rng(11)
        x, y = rng.normal(size=(5, 3)), rng.normal(size=(4, 3))
        value = align.mmd_loss(tn.Tensor(x), tn.Tensor(y))
        assert value.item() == pytest.approx(mmd_double_sum(x, y, 1.0 / 3), abs=1e-12)

    def test_fixed_bandwidth_rule(self):
        rng = np.random.default_rng(12)
        x, y = rng.normal(size=(3, 2)), rng.normal(size=(4, 2))
        sigma = 0.8
        value = align.mmd_loss(tn.Tensor(x), tn.Tensor(y), "fixed", sigma=sigma)
        oracle = mmd_double_sum(x, y, 1.0 / (2 * sigma * sigma))
        assert value.item() == pytest.approx(oracle, abs=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(13)
        x, y = rng.normal(size=(6, 3)), rng.normal(size=(4, 3))
        ab = align.mmd_loss(tn.Tensor(x), tn.Tensor(y)).item()
        ba = align.mmd_loss(tn.Tensor(y), tn.Tensor(x)).item()
        assert abs(ab - ba) < 1e-12

    @given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 4), st.integers(0, 10_000))
    @settings(max_examples=40, deadline=None)
    def test_nonnegative(self, tm, tnn, d, seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(-1.0, 1.0, (tm, d))
        y = rng.uniform(-1.0, 1.0, (tnn, d))
        assert align.mmd_loss(tn.Tensor(x), tn.Tensor(y)).item() >= 0.0

    def test_unbiased_variant_drops_self_pairs(self):
        rng = np.random.default_rng(14)
        x, y = rng.normal(size=(6, 3)), rng.normal(size=(5, 3))
        biased = align.mmd_loss(tn.Tensor(x), tn.Tensor(y)).item()
        unbiased = align.mmd_loss(tn.Tensor(x), tn.Tensor(y), biased=False).item()
        assert biased != unbiased
        # self-pairs inflate the biased statistic, so it upper-bounds here
        assert biased > unbiased

    def test_gradient(self):
        rng = np.random.default_rng(15)
        x = tn.Tensor(rng.uniform(-1.0, 1.0, (4, 3)), requires_grad=True)
        y = tn.Tensor(rng.uniform(-1.0, 1.0, (3, 3)), requires_grad=True)
        check_gradients(lambda: align.mmd_loss(x, y), [x, y])


class TestAlignmentLoss:
    def make_reps(self, rng, names=("audio", "video", "text")):
        return {name: tn.Tensor(rng.normal(size=(4 + i, 5)))
                for i, name in enumerate(names)}

    def test_zero_weights_give_zero(self):
        reps = self.make_reps(np.random.default_rng(16))
        cfg = align.AlignConfig(lambda_ot=0.0, lambda_mmd=0.0)
        assert align.alignment_loss(reps, cfg).item() == 0.0

    def test_single_term_decomposition(self):
        rng = np.random.default_rng(17)
        reps = self.make_reps(rng, names=("audio", "text"))
        cfg = align.AlignConfig(lambda_ot=0.5, lambda_mmd=0.0, blur=0.05)
        value = align.alignment_loss(reps, cfg).item()
        direct = 0.5 * align.ot_loss(reps["audio"], reps["text"], 0.05).item()
        assert value == pytest.approx(direct, abs=1e-12)

    def test_three_modalities_sum_of_pairs(self):
        rng = np.random.default_rng(18)
        reps = self.make_reps(rng)
        cfg = align.AlignConfig(lambda_ot=0.3, lambda_mmd=0.7, blur=0.05)
        value = align.alignment_loss(reps, cfg).item()
        expected = 0.0
        for name in ("audio", "video"):
            expected += 0.3 * align.ot_loss(reps[name], reps["text"], 0.05).item()
            expected += 0.7 * align.mmd_loss(reps[name], reps["text"]).item()
        assert value == pytest.approx(expected, abs=1e-10)

    def test_missing_anchor_rejected(self):
        reps = self.make_reps(np.random.default_rng(19))
        cfg = align.AlignConfig(anchor="depth")
        with pytest.raises(ValueError, match="depth"):
            align.alignment_loss(reps, cfg)

    def test_single_modality_rejected(self):
        cfg = align.AlignConfig()
        with pytest.raises(ValueError, match="two"):
            align.alignment_loss({"text": tn.zeros((3, 4))}, cfg)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            align.AlignConfig(lambda_ot=-1.0)
        with pytest.raises(ValueError):
            align.AlignConfig(blur=0.0)
        with pytest.raises(ValueError):
            align.AlignConfig(mmd_bandwidth_rule="fixed")
