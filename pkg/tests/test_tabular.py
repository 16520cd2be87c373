import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from macpf import tabular as tb
from macpf.envs import MatrixGame, random_mmdp
from macpf.numerics import RngStream


def linear_solve_q(mmdp, policy, alpha):
    """Second code path: solve the entropy-augmented evaluation equations directly."""
    S, A = mmdp.reward.shape
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.where(policy > 0, policy * np.log(policy), 0.0).sum(-1)
    r = mmdp.reward + mmdp.gamma * alpha * mmdp.transition @ ent
    M = np.einsum("sat,tb->satb", mmdp.transition, policy).reshape(S * A, S * A)
    return np.linalg.solve(np.eye(S * A) - mmdp.gamma * M, r.ravel()).reshape(S, A)


def random_policy(rng, S, A):
    w = rng.exponential(1.0, size=(S, A))
    return w / w.sum(-1, keepdims=True)


def test_evaluation_matches_linear_solve():
    mmdp = random_mmdp(11, 3, 2, 2, 0.9)
    pi = random_policy(RngStream(2), 3, 4)
    q = tb.joint_soft_policy_evaluation(mmdp, pi, 0.3, tol=1e-12)
    np.testing.assert_allclose(q, linear_solve_q(mmdp, pi, 0.3), atol=1e-8)
    np.testing.assert_allclose(tb.soft_policy_evaluation_linear(mmdp, pi, 0.3), q, atol=1e-8)


def test_evaluation_residuals_contract():
    mmdp = random_mmdp(4, 4, 2, 3, 0.9)
    res = []
    tb.joint_soft_policy_evaluation(mmdp, random_policy(RngStream(0), 4, 9), 0.2, residuals=res)
    res = np.array([r for r in res if r > 1e-8])  # rounding dominates below this
    assert np.all(res[1:] <= 0.9 * res[:-1] * (1 + 1e-6))


def test_evaluation_raises_when_iterations_run_out():
    mmdp = random_mmdp(0, 2, 2, 2, 0.99)
    with pytest.raises(tb.ConvergenceError) as err:
        tb.joint_soft_policy_evaluation(mmdp, np.full((2, 4), 0.25), 0.2, max_iters=3)
    assert err.value.iterations == 3 and err.value.residual > 0


def test_rejects_bad_policy():
    mmdp = random_mmdp(0, 2, 2, 2, 0.9)
    with pytest.raises(ValueError):
        tb.joint_soft_policy_evaluation(mmdp, np.full((2, 4), 0.3), 0.2)
    with pytest.raises(ValueError):
        tb.joint_soft_policy_evaluation(mmdp, np.full((2, 4), 0.25), 0.0)


def test_boltzmann_on_payoff_is_bimodal():
    q = MatrixGame().payoff.reshape(1, -1)
    p = tb.boltzmann_joint(q, 0.05).reshape(4, 4)
    assert p[0, 0] == pytest.approx(0.5) and p[3, 3] == pytest.approx(0.5)
    assert p[0, 0] + p[3, 3] > 1 - 1e-12


def test_chain_rule_on_two_mode_example():
    # half the mass on (A, A), half on (B, B)
    joint = np.array([[0.5, 0.0, 0.0, 0.5]])
    b = tb.chain_rule_conditionals(joint, (2, 2))
    np.testing.assert_allclose(b.conditional(0), [[0.5, 0.5]])
    np.testing.assert_allclose(b.conditional(1)[0], [[1.0, 0.0], [0.0, 1.0]])


@settings(max_examples=30)
@given(st.integers(0, 10_000), st.sampled_from([(0, 1), (1, 0)]))
def test_chain_rule_reconstructs_joint(seed, ordering):
    rng = RngStream(seed)
    joint = random_policy(rng, 2, 9)
    if seed % 3 == 0:
        joint[:, rng.integers(0, 9, size=3)] = 0.0
        joint /= joint.sum(-1, keepdims=True)
    b = tb.chain_rule_conditionals(joint, (3, 3), ordering)
    np.testing.assert_allclose(b.joint(), joint, atol=1e-10)
    # brute-force product over every joint action
    first, second = ordering
    for a in range(3):
        for c in range(3):
            acts = {0: a, 1: c}
            p = b.tables[0][0, acts[first]] * b.tables[1][0, acts[first], acts[second]]
            assert p == pytest.approx(joint[0, 3 * a + c], abs=1e-10)


def test_zero_probability_prefix_is_uniform():
    b = tb.chain_rule_conditionals(np.array([[1.0, 0.0, 0.0, 0.0]]), (2, 2))
    np.testing.assert_allclose(b.conditional(1)[0, 1], [0.5, 0.5])


@settings(max_examples=30)
@given(st.integers(0, 10_000), st.floats(0.05, 5.0))
def test_conditional_q_gives_boltzmann_conditionals(seed, alpha):
    q = RngStream(seed).normal(0, 3, size=(1, 4))
    tables = tb.conditional_q_values(q, alpha, (2, 2))
    b = tb.conditionals_from_q(tables, (0, 1), alpha, (alpha, alpha))
    ref = tb.chain_rule_conditionals(tb.boltzmann_joint(q, alpha), (2, 2))
    for mine, theirs in zip(b.tables, ref.tables):
        np.testing.assert_allclose(mine, theirs, atol=1e-10)


def test_solver_on_matrix_game():
    mmdp = MatrixGame().to_mmdp()
    bundle, q = tb.conditional_factorized_soft_policy_iteration(mmdp, 0.05)
    value = float(bundle.joint()[0] @ mmdp.reward[0])
    assert abs(value - 8.0) < 0.2


@pytest.mark.parametrize("seed", range(5))
def test_solver_matches_value_iteration(seed):
    mmdp = random_mmdp(seed, 1 + seed % 5, 2 + seed % 2, 2 + seed % 2, 0.9)
    _, q = tb.conditional_factorized_soft_policy_iteration(mmdp, 0.2, tol=1e-12)
    np.testing.assert_allclose(q, tb.joint_soft_value_iteration_oracle(mmdp, 0.2, tol=1e-11), atol=1e-6)


def test_solver_improves_monotonically():
    mmdp = random_mmdp(3, 3, 2, 3, 0.9)
    qs = []
    tb.conditional_factorized_soft_policy_iteration(mmdp, 0.3, callback=lambda k, q, p: qs.append(q))
    for before, after in zip(qs[:-1], qs[1:]):
        assert np.all(after >= before - 1e-8)


def test_solver_with_other_ordering_and_temperatures():
    mmdp = random_mmdp(5, 2, 3, 2, 0.9)
    _, q = tb.conditional_factorized_soft_policy_iteration(mmdp, 0.2, ordering=(2, 0, 1), tol=1e-12)
    np.testing.assert_allclose(q, tb.joint_soft_value_iteration_oracle(mmdp, 0.2, tol=1e-11), atol=1e-6)
    with pytest.raises(ValueError):
        tb.conditional_factorized_soft_policy_iteration(mmdp, 0.2, ordering=(0, 0, 1))


def test_value_iteration_rejects_bad_tolerance():
    with pytest.raises(ValueError):
        tb.joint_soft_value_iteration_oracle(random_mmdp(0, 1, 2, 2, 0.5), 0.2, tol=0.0)


def test_counterpart_two_mode_example():
    q = np.array([5.0, -1.0, -1.0, 5.0])
    dep = np.array([0.5, 0.0, 0.0, 0.5])
    ind = tb.independent_counterpart(q, dep, (2, 2))
    np.testing.assert_allclose(ind[0], [1.0, 0.0])
    np.testing.assert_allclose(ind[1], [1.0, 0.0])
    assert tb.expected_value_under_policy(q, ind) == pytest.approx(5.0)
    assert tb.expected_value_under_policy(q, dep) == pytest.approx(5.0)


@settings(max_examples=60)
@given(st.integers(0, 100_000), st.integers(1, 3), st.integers(2, 3))
def test_counterpart_matches_expectation(seed, k1, k2):
    rng = RngStream(seed)
    q = rng.uniform(-10, 10, size=k1 * k2)
    dep = rng.exponential(1.0, size=k1 * k2)
    dep /= dep.sum()
    ind = tb.independent_counterpart(q, dep, (k1, k2))
    assert [p.size for p in ind] == [k1, k2]
    assert all(abs(p.sum() - 1) < 1e-12 for p in ind)
    assert abs(tb.expected_value_under_policy(q, ind) - dep @ q) <= 1e-6


def test_counterpart_rejects_bad_input():
    with pytest.raises(ValueError):
        tb.independent_counterpart(np.zeros(4), np.full(4, 0.3), (2, 2))
    with pytest.raises(ValueError):
        tb.independent_counterpart(np.zeros(5), np.full(5, 0.2), (2, 2))


def test_mmdp_document_round_trip(tmp_path):
    mmdp = random_mmdp(9, 2, 2, (2, 3), 0.8)
    path = tmp_path / "m.json"
    mmdp.save(path)
    back = tb.TabularMMDP.load(path)
    np.testing.assert_array_equal(back.transition, mmdp.transition)
    np.testing.assert_array_equal(back.reward, mmdp.reward)
    assert back.actions_per_agent == (2, 3) and back.gamma == 0.8
    doc = json.loads(path.read_text())
    doc["version"] = 99
    with pytest.raises(ValueError):
        tb.TabularMMDP.from_document(doc)


def test_mmdp_validation():
    with pytest.raises(ValueError):
        tb.TabularMMDP((2,), np.ones((1, 2, 1)), np.zeros((1, 2)), 1.0)
    with pytest.raises(ValueError):
        tb.TabularMMDP((2,), np.full((1, 2, 1), 0.5), np.zeros((1, 2)), 0.9)
    with pytest.raises(ValueError):
        tb.TabularMMDP((2,), np.ones((1, 2, 1)), np.array([[0.0, np.nan]]), 0.9)
