import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from laser.envs import chain, prop2_bandit
from laser.estimators import (ClipConfig, PaddedBatch, advantages, argmax_set, implied_policy,
                              implied_policy_table, is_return, min_alpha, omega, policy_gradient_estimate,
                              q_alpha, q_omega, vtrace_batch, vtrace_return)
from laser.mdp import Mdp, TabularPolicy, Trajectory, sample_episode, softmax, solve_v_exact
from laser.oracle import (central_difference, enumerate_trajectories, estimator_operator,
                          monte_carlo_expectation, vtrace_fixed_point)

from conftest import random_mdp, random_policy


def bandit_traj(action, behaviour_row, reward, n_actions=2):
    return Trajectory([0], [action], [reward], [behaviour_row], 1, True)


def test_clip_config_ordering():
    ClipConfig(2.0, 1.0)
    ClipConfig.unclipped()
    with pytest.raises(ValueError, match="rho_bar >= c_bar"):
        ClipConfig(1.0, 2.0)
    with pytest.raises(ValueError):
        ClipConfig(0.5, 0.5)


def test_is_return_on_policy_discounted_sum():
    mdp = chain(5)
    pol = TabularPolicy.constant([0.0, 1.0], mdp.n_states)
    traj = Trajectory([0, 1, 2], [1, 1, 1], [1.0, 1.0, 1.0], [[0.0, 1.0]] * 3, 3, False)
    est = is_return(traj, pol, np.zeros(mdp.n_states), 0.5)
    assert est.value == pytest.approx(1.75, abs=1e-15)
    assert est.bootstrap_step == 3 and est.masked.all()


def test_is_return_single_step_ratio():
    target = TabularPolicy(np.array([[0.8, 0.2], [0.5, 0.5]]))
    traj = bandit_traj(0, [0.4, 0.6], 2.0)
    est = is_return(traj, target, np.zeros(2), 0.9)
    assert est.value == pytest.approx(4.0, abs=1e-15)


def test_is_return_truncation_bootstraps():
    pol = TabularPolicy.constant([0.0, 1.0], 6)
    traj = Trajectory([0, 1, 2], [1, 1, 1], [1.0, 2.0, 3.0], [[0.0, 1.0]] * 3, 3, False)
    v = np.arange(6, dtype=float)
    est = is_return(traj, pol, v, 0.5, K=2)
    assert est.value == pytest.approx(1.0 + 0.5 * 2.0 + 0.25 * v[2])
    with pytest.raises(ValueError):
        is_return(traj, pol, v, 0.5, K=4)


def test_vtrace_clips_rho():
    target = TabularPolicy(np.array([[0.5, 0.5], [0.5, 0.5]]))
    traj = bandit_traj(0, [0.1, 0.9], 1.0)
    est = vtrace_return(traj, target, np.zeros(2), 0.9)
    assert est.per_step_weights[0] == 1.0
    assert est.value == pytest.approx(1.0)
    assert is_return(traj, target, np.zeros(2), 0.9).value == pytest.approx(5.0)


def test_vtrace_unclipped_equals_is():
    mdp = random_mdp(1, terminal_prob=0.1)
    rng = np.random.default_rng(1)
    pi, mu = random_policy(rng, mdp.n_states, 3), random_policy(rng, mdp.n_states, 3)
    v = rng.normal(size=mdp.n_states)
    for seed in range(20):
        traj = sample_episode(mdp, mu, seed, 30)
        a = vtrace_return(traj, pi, v, mdp.discount, ClipConfig.unclipped()).value
        b = is_return(traj, pi, v, mdp.discount).value
        assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


def test_vtrace_on_policy_recovers_monte_carlo_return():
    mdp = random_mdp(5, terminal_prob=0.2)
    rng = np.random.default_rng(5)
    pi = random_policy(rng, mdp.n_states, 3)
    v = rng.normal(size=mdp.n_states)
    traj = sample_episode(mdp, pi, 0, 10_000)
    assert traj.terminal
    mc = sum(mdp.discount ** k * r for k, r in enumerate(traj.rewards))
    assert vtrace_return(traj, pi, v, mdp.discount).value == pytest.approx(mc, rel=1e-12, abs=1e-13)


def test_is_return_unbiased_by_monte_carlo():
    mdp = random_mdp(11, n_states=4, n_actions=2, terminal_prob=0.3)
    rng = np.random.default_rng(11)
    pi, mu = random_policy(rng, mdp.n_states, 2, floor=0.3), random_policy(rng, mdp.n_states, 2, floor=0.3)
    v_pi = solve_v_exact(mdp, pi)
    boot = rng.normal(size=mdp.n_states)
    boot[mdp.terminal] = 0.0

    def sampler(g):
        traj = sample_episode(mdp, mu, int(g.integers(2 ** 62)), 200, start_state=0)
        return is_return(traj, pi, boot, mdp.discount).value

    est = monte_carlo_expectation(sampler, 100_000, seed=3)
    assert est.within(v_pi[0], 3.0)


def test_vtrace_expectation_matches_operator_and_fixed_point():
    # two non-terminal states plus an absorbing end, enumerated to depth 6
    P = np.zeros((3, 2, 3))
    P[0, 0] = [0.2, 0.5, 0.3]
    P[0, 1] = [0.6, 0.1, 0.3]
    P[1, 0] = [0.3, 0.3, 0.4]
    P[1, 1] = [0.1, 0.6, 0.3]
    P[2, :, 2] = 1.0
    R = np.array([[1.0, -0.5], [0.3, 2.0], [0.0, 0.0]])
    mdp = Mdp(P, R, 0.9, terminal=[False, False, True])
    pi = TabularPolicy(np.array([[0.7, 0.3], [0.2, 0.8], [0.5, 0.5]]))
    mu = TabularPolicy(np.array([[0.4, 0.6], [0.5, 0.5], [0.5, 0.5]]))
    fp = vtrace_fixed_point(mdp, pi, mu)
    v_z = fp.values
    np.testing.assert_allclose(v_z, solve_v_exact(mdp, implied_policy_table(pi, mu)), atol=1e-8)
    v = np.array([0.5, -1.0, 0.0])
    depth = 6

    # depth-truncated operator written out by hand from the clipped ratios
    clipped = np.minimum(1.0, pi.probs / mu.probs) * mu.probs
    live = P * (~mdp.terminal)[None, None, :]
    trace = np.einsum("sa,sat->st", clipped, live)
    td = np.einsum("sa,sa->s", clipped, R + 0.9 * live @ v) - clipped.sum(1) * v
    td[mdp.terminal] = 0.0
    truncated = v.copy()
    mass = np.eye(3)
    for _ in range(depth):
        truncated += mass @ td
        mass = 0.9 * mass @ trace
    op = estimator_operator(mdp, pi, mu, "vtrace")
    for s in (0, 1):
        leaves = enumerate_trajectories(mdp, mu, s, depth)
        assert sum(p for p, _ in leaves) == pytest.approx(1.0, abs=1e-12)
        exp_v = sum(p * vtrace_return(t, pi, v, mdp.discount).value for p, t in leaves)
        exp_fp = sum(p * vtrace_return(t, pi, v_z, mdp.discount).value for p, t in leaves)
        assert exp_v == pytest.approx(truncated[s], abs=1e-12)
        # the tail beyond that depth is what separates the truncated and full operators
        tail = np.abs(mass @ td).max() / (1 - 0.9 * np.abs(trace).sum(1).max())
        assert abs(exp_v - op(v)[s]) <= tail + 1e-12
        assert exp_fp == pytest.approx(v_z[s], abs=1e-10)


def test_implied_policy_examples():
    for phi in (1e-3, 1e-6, 1e-9):
        np.testing.assert_allclose(implied_policy([1 - phi, phi], [phi, 1 - phi]), [0.5, 0.5], atol=1e-9)
    row = np.array([0.2, 0.3, 0.5])
    np.testing.assert_array_equal(implied_policy(row, row), row)
    np.testing.assert_allclose(implied_policy([0.5, 0.5], [0.9, 0.1], 1.0), [5 / 6, 1 / 6], atol=1e-15)


def test_implied_policy_rejects_disjoint_support():
    with pytest.raises(ValueError, match="overlap"):
        implied_policy([1.0, 0.0], [0.0, 1.0])


@settings(max_examples=200, deadline=None)
@given(p=st.lists(st.floats(0.01, 1.0), min_size=2, max_size=5),
       q=st.lists(st.floats(0.01, 1.0), min_size=5, max_size=5),
       r1=st.floats(1.0, 10.0), extra=st.floats(0.0, 10.0))
def test_implied_policy_monotone_in_rho_bar(p, q, r1, extra):
    pi = np.array(p) / sum(p)
    mu = np.array(q[:len(p)]) / sum(q[:len(p)])
    d1 = np.abs(implied_policy(pi, mu, r1) - pi).sum()
    d2 = np.abs(implied_policy(pi, mu, r1 + extra) - pi).sum()
    assert d2 <= d1 + 1e-12


def test_omega_examples():
    np.testing.assert_allclose(omega([0.5, 0.5], [0.9, 0.1]), [1.0, 0.2])
    np.testing.assert_array_equal(omega([0.3, 0.7], [0.3, 0.7]), [1.0, 1.0])
    assert omega([0.5, 0.5], [0.85, 0.15], rho_bar=2.0, action=1) == pytest.approx(0.6)
    with pytest.raises(ValueError):
        omega([1.0, 0.0], [0.5, 0.5], action=1)


def test_q_omega_examples():
    np.testing.assert_allclose(q_omega([2.0, 5.0], [1.0, 0.2]), [2.0, 1.0])
    np.testing.assert_array_equal(q_omega([2.0, 5.0], [1.0, 1.0]), [2.0, 5.0])
    np.testing.assert_array_equal(q_omega([0.0, 0.0], [0.3, 0.9]), [0.0, 0.0])


def test_q_alpha_examples():
    q, qw = np.array([2.0, 5.0]), np.array([2.0, 1.0])
    np.testing.assert_array_equal(q_alpha(q, qw, 1.0, 0.3, 1.0), q)
    np.testing.assert_array_equal(q_alpha(q, qw, 0.3, 1.0, 0.0), qw)
    np.testing.assert_allclose(q_alpha(q, qw, 1.0, 1.0, 0.25), [2.0, 2.0], atol=1e-15)
    with pytest.raises(ValueError):
        q_alpha(q, qw, 1.0, 1.0, 1.5)


def test_argmax_set_keeps_ties():
    np.testing.assert_array_equal(argmax_set([1.0, 3.0, 3.0]), [1, 2])


def test_min_alpha_examples():
    assert min_alpha([2.0, 5.0], [2.0, 1.0], 1.0, 1.0) == pytest.approx(0.25, abs=1e-12)
    assert min_alpha([2.0, 5.0], [1.0, 4.0], 1.0, 1.0) == 0.0
    assert min_alpha([2.0, 5.0], [2.0, 5.0], 1.0, 1.0) == 0.0
    # halving the online visitation doubles the required odds
    assert min_alpha([2.0, 5.0], [2.0, 1.0], 0.5, 1.0) == pytest.approx(0.4)
    with pytest.raises(ValueError, match="unreachable"):
        min_alpha([2.0, 5.0], [2.0, 1.0], 0.0, 1.0)


def test_min_alpha_ties_exclude_whole_best_set():
    q = np.array([5.0, 5.0, 2.0])
    qw = np.array([1.0, 1.5, 2.0])
    # b = 2 must beat both tied optima: min over a* of (2-1)/3, (2-1.5)/3
    assert min_alpha(q, qw, 1.0, 1.0) == pytest.approx((0.5 / 3) / (1 + 0.5 / 3))


# values on a 0.01 grid so that distinct entries are never within argmax_set's tie tolerance
@settings(max_examples=100, deadline=None)
@given(q=st.lists(st.integers(-500, 500).map(lambda k: k / 100), min_size=2, max_size=4),
       w=st.lists(st.floats(0.05, 1.0), min_size=4, max_size=4),
       d_pi=st.floats(0.05, 1.0), d_mu=st.floats(0.0, 1.0), slack=st.floats(1e-6, 0.5))
def test_argmax_preserved_above_min_alpha(q, w, d_pi, d_mu, slack):
    q = np.array(q)
    qw = q * np.array(w[:len(q)])
    a_star = min_alpha(q, qw, d_pi, d_mu)
    alpha = min(1.0, a_star + slack)
    best = set(argmax_set(q).tolist())
    got = set(argmax_set(q_alpha(q, qw, d_pi, d_mu, alpha)).tolist())
    if alpha > a_star + 1e-9:
        assert got <= best


def test_policy_gradient_zero_advantage():
    # on-policy, V equal to the realised return: A = 0
    target_logits = np.zeros((2, 2))
    traj = bandit_traj(0, [0.5, 0.5], 1.0)
    g = policy_gradient_estimate([traj], target_logits, np.array([1.0, 0.0]), 0.9, mode="on_policy")
    np.testing.assert_array_equal(g, np.zeros((2, 2)))


def test_policy_gradient_softmax_example():
    traj = bandit_traj(0, [0.5, 0.5], 1.0)
    g = policy_gradient_estimate([traj], np.zeros((2, 2)), np.zeros(2), 0.9, mode="vtrace_offpolicy")
    np.testing.assert_allclose(g[0], [0.5, -0.5])
    np.testing.assert_array_equal(g[1], [0.0, 0.0])


def test_mixed_mode_needs_online_data():
    traj = bandit_traj(0, [0.5, 0.5], 1.0)
    with pytest.raises(ValueError, match="online"):
        policy_gradient_estimate([traj], np.zeros((2, 2)), np.zeros(2), 0.9, mode="mixed", alpha=0.5,
                                 online=[False])


def test_mixed_mode_weights_by_alpha():
    t_on = bandit_traj(0, [0.5, 0.5], 1.0)
    t_off = bandit_traj(1, [0.5, 0.5], 1.0)
    logits = np.zeros((2, 2))
    g = policy_gradient_estimate([t_on, t_off], logits, np.zeros(2), 0.9, mode="mixed", alpha=0.25,
                                 online=[True, False])
    g_on = policy_gradient_estimate([t_on], logits, np.zeros(2), 0.9)
    g_off = policy_gradient_estimate([t_off], logits, np.zeros(2), 0.9)
    np.testing.assert_allclose(g, 0.25 * g_on + 0.75 * g_off)


def test_on_policy_gradient_matches_finite_differences():
    mdp = random_mdp(21, terminal_prob=0.2)
    rng = np.random.default_rng(21)
    logits = rng.normal(size=(mdp.n_states, 3))
    pol = TabularPolicy(softmax(logits))
    v = rng.normal(size=mdp.n_states)
    trajs = [sample_episode(mdp, pol, s, 15) for s in range(6)]
    batch = PaddedBatch.from_trajectories(trajs, 3)
    out = vtrace_batch(batch, pol.probs, v, mdp.discount, ClipConfig(), ignore_ratios=True)
    adv = advantages(out, "target")

    def surrogate(theta):
        # frozen advantages; log pi evaluated at theta
        z = theta - theta.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return float(np.sum(batch.valid * adv * logp[batch.states, batch.actions]) / len(trajs))

    g = policy_gradient_estimate(trajs, logits, v, mdp.discount, mode="on_policy")
    fd = central_difference(surrogate, logits)
    assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) < 1e-5


def test_counterexample_gradient_field_prefers_first_action():
    """Expected off-policy gradient (no baseline) under mu = (0.9, 0.1) on the two-action problem."""
    mdp = prop2_bandit()
    mu = [0.9, 0.1]

    def expected_grad(p):
        logits = np.log(np.array([[p, 1 - p], [0.5, 0.5]]))
        g = np.zeros(2)
        for a in (0, 1):
            traj = Trajectory([0], [a], [mdp.reward[0, a]], [mu], 1, True)
            g += mu[a] * policy_gradient_estimate([traj], logits, np.zeros(2), mdp.discount,
                                                  advantage="q")[0]
        return g[0]

    grid = np.linspace(0.02, 0.98, 97)
    field = np.array([expected_grad(p) for p in grid])
    crossings = grid[np.flatnonzero(np.diff(np.sign(field)) < 0)]
    # single stable zero of p (1.5 - 2p) at p = 0.75: greedy on the first action
    assert len(crossings) == 1
    assert crossings[0] == pytest.approx(0.75, abs=0.011)
    low = grid <= 0.9
    np.testing.assert_allclose(field[low], grid[low] * (1.5 - 2 * grid[low]), atol=1e-12)
