import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from visprompt import transport as T
from visprompt.errors import ConfigError, DimensionError
from visprompt.kernels import l2_normalize_rows


def high_precision_plan(cost, a, b, epsilon, iters=10_000):
    """Independent kernel-domain fixed-point solver used as the oracle."""
    kernel = np.exp(-np.asarray(cost, dtype=np.float64) / epsilon)
    u = np.ones_like(a)
    v = np.ones_like(b)
    for _ in range(iters):
        u = a / (kernel @ v)
        v = b / (kernel.T @ u)
    return np.diag(u) @ kernel @ np.diag(v)


class TestSimilarityMatrix:
    def test_equal_similarities(self):
        feats = np.tile(l2_normalize_rows(np.ones((1, 4))), (3, 1))
        out = T.similarity_matrix(feats, feats[:2], tau=1.0)
        npt.assert_allclose(out, np.full((3, 2), 1.0 / 3.0))

    def test_columns_sum_to_one(self):
        rng = np.random.default_rng(0)
        text = l2_normalize_rows(rng.normal(size=(5, 8)))
        image = l2_normalize_rows(rng.normal(size=(20, 8)))
        out = T.similarity_matrix(text, image, tau=0.07)
        npt.assert_allclose(out.sum(axis=0), 1.0, atol=1e-12)

    def test_hand_softmax(self):
        text = np.array([[1.0, 0.0], [0.0, 1.0]])
        image = np.array([[1.0, 0.0]])
        out = T.similarity_matrix(text, image, tau=1.0)
        npt.assert_allclose(out[:, 0], [0.7311, 0.2689], atol=1e-4)

    def test_tau_validation(self):
        with pytest.raises(ConfigError):
            T.similarity_matrix(np.eye(2), np.eye(2), tau=0.0)


class TestCostMatrix:
    def test_values(self):
        npt.assert_allclose(T.cost_matrix(np.array([[1.0]])), [[0.0]])
        npt.assert_allclose(T.cost_matrix(np.array([[np.exp(-2.0)]])),
                            [[2.0]])

    def test_clamps_zero(self):
        out = T.cost_matrix(np.array([[0.0]]))
        npt.assert_allclose(out, [[-np.log(1e-12)]])

    def test_order_reversal(self):
        s = np.random.default_rng(1).uniform(0.01, 1.0, (4, 6))
        d = T.cost_matrix(s)
        assert ((s[0] < s[1]) == (d[0] > d[1])).all()


def random_problem(seed, n_classes=5, n_samples=30, epsilon=0.05,
                   uniform=True, max_iters=5000):
    rng = np.random.default_rng(seed)
    sims = rng.normal(0.0, 1.0, (n_classes, n_samples))
    cost = T.cost_matrix(np.exp(sims) / np.exp(sims).sum(0, keepdims=True))
    if uniform:
        a, b = T.uniform_marginals(n_classes, n_samples)
    else:
        a = rng.dirichlet(np.ones(n_classes))
        b = rng.dirichlet(np.ones(n_samples))
    return T.TransportProblem(cost=cost, a=a, b=b, epsilon=epsilon,
                              max_iters=max_iters)


class TestSinkhorn:
    def test_constant_cost_gives_product_coupling(self):
        rng = np.random.default_rng(2)
        a = rng.dirichlet(np.ones(4))
        b = rng.dirichlet(np.ones(7))
        plan = T.sinkhorn(T.TransportProblem(
            cost=np.full((4, 7), 2.5), a=a, b=b, epsilon=0.05))
        npt.assert_allclose(plan.pi, np.outer(a, b), atol=1e-10)

    def test_entropy_dominated_limit(self):
        # cost oscillation well below epsilon so entropy dominates
        rng = np.random.default_rng(3)
        cost = rng.uniform(0.0, 0.05, (5, 30))
        a, b = T.uniform_marginals(5, 30)
        plan = T.sinkhorn(T.TransportProblem(cost=cost, a=a, b=b,
                                             epsilon=100.0))
        npt.assert_allclose(plan.pi, np.outer(a, b), atol=1e-4)

    def test_two_by_two_against_high_precision_oracle(self):
        cost = np.array([[0.0, 1.0], [1.0, 0.0]])
        a = b = np.array([0.5, 0.5])
        plan = T.sinkhorn(T.TransportProblem(cost=cost, a=a, b=b,
                                             epsilon=0.1, max_iters=10_000))
        oracle = high_precision_plan(cost, a, b, 0.1)
        npt.assert_allclose(plan.pi, oracle, atol=1e-9)
        closed_form_diag = 0.5 / (1.0 + np.exp(-10.0))
        npt.assert_allclose(np.diag(plan.pi), closed_form_diag, atol=1e-12)
        assert (np.diag(plan.pi) > 0.4999).all()

    @pytest.mark.parametrize("seed", range(5))
    def test_marginal_feasibility(self, seed):
        plan = T.sinkhorn(random_problem(seed, uniform=False))
        assert plan.converged
        assert plan.marginal_violation < 1e-8

    def test_transport_cost_monotone_in_epsilon(self):
        rng = np.random.default_rng(7)
        sims = rng.normal(0.0, 0.3, (4, 12))
        cost = T.cost_matrix(np.exp(sims) / np.exp(sims).sum(0, keepdims=True))
        a, b = T.uniform_marginals(4, 12)
        costs = []
        for eps in (0.01, 0.05, 0.1, 1.0):
            plan = T.sinkhorn(T.TransportProblem(
                cost=cost, a=a, b=b, epsilon=eps, max_iters=50_000))
            assert plan.converged
            costs.append(float((plan.pi * cost).sum()))
        assert all(x <= y + 1e-12 for x, y in zip(costs, costs[1:]))

    def test_permutation_equivariance(self):
        prob = random_problem(8, uniform=False)
        rng = np.random.default_rng(9)
        perm = rng.permutation(prob.b.size)
        base = T.sinkhorn(prob)
        permuted = T.sinkhorn(T.TransportProblem(
            cost=prob.cost[:, perm], a=prob.a, b=prob.b[perm],
            epsilon=prob.epsilon, max_iters=prob.max_iters))
        npt.assert_allclose(permuted.pi, base.pi[:, perm], atol=1e-12)

    def test_non_convergence_flagged(self):
        prob = random_problem(10, epsilon=0.01, max_iters=1)
        plan = T.sinkhorn(prob)
        assert not plan.converged
        assert plan.marginal_violation > prob.tol

    def test_problem_validation(self):
        with pytest.raises(ConfigError):
            T.TransportProblem(cost=np.ones((2, 2)), a=np.array([0.7, 0.7]),
                               b=np.array([0.5, 0.5]))
        with pytest.raises(ConfigError):
            T.TransportProblem(cost=-np.ones((2, 2)),
                               a=np.array([0.5, 0.5]),
                               b=np.array([0.5, 0.5]))
        with pytest.raises(DimensionError):
            T.TransportProblem(cost=np.ones((2, 3)), a=np.array([0.5, 0.5]),
                               b=np.array([0.5, 0.5]))


class TestPseudoLabels:
    def test_one_hot_columns(self):
        pi = np.array([[0.25, 0.0, 0.0, 0.25],
                       [0.0, 0.25, 0.25, 0.0]])
        plan = T.TransportPlan(pi=pi, iters_used=1, marginal_violation=0.0,
                               converged=True)
        labels, conf = T.pseudo_labels_and_confidences(plan)
        npt.assert_array_equal(labels, [0, 1, 1, 0])
        npt.assert_allclose(conf, 0.25)

    def test_uniform_ties_break_low(self):
        pi = np.full((3, 4), 1.0 / 12.0)
        plan = T.TransportPlan(pi=pi, iters_used=1, marginal_violation=0.0,
                               converged=True)
        labels, conf = T.pseudo_labels_and_confidences(plan)
        npt.assert_array_equal(labels, np.zeros(4, dtype=np.intp))
        npt.assert_allclose(conf, 1.0 / 12.0)

    def test_near_diagonal_plan(self):
        plan = T.sinkhorn(T.TransportProblem(
            cost=np.array([[0.0, 1.0], [1.0, 0.0]]),
            a=np.array([0.5, 0.5]), b=np.array([0.5, 0.5]), epsilon=0.1))
        labels, _ = T.pseudo_labels_and_confidences(plan)
        npt.assert_array_equal(labels, [0, 1])


class TestPartition:
    def test_all_reliable(self):
        y = np.array([0, 1, 2, 0])
        r = np.full(4, 0.25)
        res = T.partition(y, r, y, delta=0.125)
        npt.assert_array_equal(res.reliable, np.arange(4))
        assert res.unreliable.size == 0

    def test_mismatch_always_unreliable(self):
        y = np.array([0, 1])
        res = T.partition(y, np.ones(2), 1 - y, delta=0.0)
        assert res.reliable.size == 0

    def test_mixed_membership(self):
        pseudo = np.array([0, 0, 1])
        observed = np.array([0, 0, 0])
        conf = np.array([0.9, 0.1, 0.9])
        res = T.partition(pseudo, conf, observed, delta=0.5)
        npt.assert_array_equal(res.reliable, [0])
        npt.assert_array_equal(res.unreliable, [1, 2])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_disjoint_cover(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 40))
        pseudo = rng.integers(0, 5, n)
        observed = rng.integers(0, 5, n)
        conf = rng.uniform(0.0, 1.0, n)
        res = T.partition(pseudo, conf, observed, delta=0.5)
        combined = np.sort(np.concatenate([res.reliable, res.unreliable]))
        npt.assert_array_equal(combined, np.arange(n))

    def test_reliable_membership_condition(self):
        rng = np.random.default_rng(11)
        pseudo = rng.integers(0, 3, 30)
        observed = rng.integers(0, 3, 30)
        conf = rng.uniform(0, 1, 30)
        res = T.partition(pseudo, conf, observed, delta=0.4)
        for i in res.reliable:
            assert pseudo[i] == observed[i] and conf[i] >= 0.4


def test_partition_from_features_end_to_end():
    rng = np.random.default_rng(12)
    text = l2_normalize_rows(rng.normal(size=(4, 8)))
    # image features clustered on their class's text feature
    labels = np.repeat(np.arange(4), 10)
    image = l2_normalize_rows(text[labels] + 0.1 * rng.normal(size=(40, 8)))
    result, plan = T.partition_from_features(text, image, labels, tau=1.0,
                                             epsilon=0.1, max_iters=20_000)
    # near-block-structured costs converge slowly; the split itself is
    # what matters: clean clustered data keeps everything reliable
    assert plan.marginal_violation < 1e-6
    assert result.reliable.size == 40
    assert result.delta == 0.5 / 40
