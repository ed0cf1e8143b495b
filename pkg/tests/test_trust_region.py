import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from laser.envs import prop2_bandit
from laser.estimators import ClipConfig, is_return, vtrace_return
from laser.mdp import Mdp, TabularPolicy, Trajectory, sample_episode, solve_v_exact
from laser.oracle import (EnumerationSpec, acceptance_matrix, enumerate_trajectories,
                          exact_estimator_expectation, trusted_operator, vtrace_fixed_point)
from laser.trust_region import (MaskedTrajectory, RelevanceConfig, compute_mask, kl_divergence,
                                kl_relevance, kl_relevance_rows, trusted_is_return, trusted_value_estimate,
                                trusted_vtrace_return)

from conftest import random_mdp, random_policy


def test_relevance_config_validation():
    with pytest.raises(ValueError):
        RelevanceConfig(0.0)
    with pytest.raises(ValueError):
        RelevanceConfig(math.inf)
    with pytest.raises(ValueError):
        RelevanceConfig(0.5, "reverse")


def test_kl_relevance_examples():
    assert kl_relevance([0.3, 0.7], [0.3, 0.7]) == 0.0
    # independent evaluation: 0.5 ln 0.6 + 0.5 ln 3
    expected = 0.5 * math.log(0.6) + 0.5 * math.log(3.0)
    assert kl_relevance([0.5, 0.5], [0.9, 0.1], 1.0) == pytest.approx(expected, rel=1e-14)
    assert expected == pytest.approx(0.29389333245105953, rel=1e-14)
    assert kl_relevance([0.0, 1.0, 0.0], [0.1, 0.6, 0.3], 2.0) == 0.0


def test_kl_relevance_infinite_without_overlap():
    assert kl_relevance([1.0, 0.0], [0.0, 1.0]) == math.inf
    assert kl_divergence([0.5, 0.5], [1.0, 0.0]) == math.inf


def test_behaviour_kind_is_literal_kl():
    pi, mu = [0.5, 0.5], [0.9, 0.1]
    expected = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
    assert kl_relevance(pi, mu, kind="kl_behaviour") == pytest.approx(expected)


@settings(max_examples=100, deadline=None)
@given(data=st.lists(st.floats(0.001, 1.0), min_size=6, max_size=6), rho=st.floats(1.0, 5.0))
def test_vectorised_relevance_matches_scalar(data, rho):
    pi = np.array(data[:3]) / sum(data[:3])
    mu = np.array(data[3:]) / sum(data[3:])
    for kind in ("kl_implied", "kl_behaviour"):
        assert kl_relevance_rows(pi[None], mu[None], rho, kind)[0] == pytest.approx(
            kl_relevance(pi, mu, rho, kind), rel=1e-12, abs=1e-15)


def make_traj(states, actions, rows, final=0, terminal=False):
    return Trajectory(states, actions, np.ones(len(states)), rows, final, terminal)


def test_mask_all_true_for_huge_threshold():
    rng = np.random.default_rng(0)
    pi = random_policy(rng, 4, 3)
    rows = random_policy(rng, 5, 3).probs
    traj = make_traj([0, 1, 2, 3, 0], [0, 1, 2, 0, 1], rows)
    assert compute_mask(traj, pi, RelevanceConfig(1e9)).mask.all()


def test_mask_all_true_on_policy():
    rng = np.random.default_rng(1)
    pi = random_policy(rng, 4, 3)
    states = [0, 1, 2, 3]
    traj = make_traj(states, [0, 1, 2, 0], pi.probs[states])
    assert compute_mask(traj, pi, RelevanceConfig(1e-6)).mask.all()


def test_mask_rejects_counterexample_behaviour_states():
    pi = TabularPolicy(np.array([[0.5, 0.5], [0.5, 0.5], [0.5, 0.5]]))
    rows = [[0.5, 0.5], [0.9, 0.1], [0.5, 0.5], [0.9, 0.1]]
    traj = make_traj([0, 1, 2, 1], [0, 0, 1, 1], rows)
    mask = compute_mask(traj, pi, RelevanceConfig(0.2)).mask
    np.testing.assert_array_equal(mask, [True, False, True, False])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), b=st.floats(0.01, 3.0))
def test_mask_ignores_sampled_actions(seed, b):
    rng = np.random.default_rng(seed)
    pi = random_policy(rng, 3, 4, floor=0.0 + 1e-3)
    rows = random_policy(rng, 8, 4).probs
    states = rng.integers(3, size=8)
    actions = rng.integers(4, size=8)
    traj = make_traj(states, actions, rows)
    base = compute_mask(traj, pi, RelevanceConfig(b)).mask
    permuted = traj.with_actions(rng.permutation(actions))
    np.testing.assert_array_equal(compute_mask(permuted, pi, RelevanceConfig(b)).mask, base)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), b=st.floats(0.01, 2.0), extra=st.floats(0.0, 2.0))
def test_acceptance_monotone_in_threshold(seed, b, extra):
    rng = np.random.default_rng(seed)
    pi = random_policy(rng, 3, 3)
    rows = random_policy(rng, 6, 3).probs
    traj = make_traj(rng.integers(3, size=6), rng.integers(3, size=6), rows)
    small = compute_mask(traj, pi, RelevanceConfig(b)).mask
    large = compute_mask(traj, pi, RelevanceConfig(b + extra)).mask
    assert np.all(large[small])


def _episode(seed=0):
    mdp = random_mdp(seed, terminal_prob=0.1)
    rng = np.random.default_rng(seed)
    pi, mu = random_policy(rng, mdp.n_states, 3), random_policy(rng, mdp.n_states, 3)
    v = rng.normal(size=mdp.n_states)
    v[mdp.terminal] = 0
    # resample until the episode has a few steps to mask
    traj = next(t for k in range(100) if len(t := sample_episode(mdp, mu, 1000 * seed + k, 12)) >= 3)
    return mdp, pi, mu, v, traj


def test_all_true_mask_reduces_to_plain_estimators():
    mdp, pi, mu, v, traj = _episode(3)
    masked = MaskedTrajectory(traj, np.ones(len(traj), bool))
    assert trusted_is_return(masked, pi, v, mdp.discount).value == is_return(traj, pi, v, mdp.discount).value
    clip = ClipConfig(2.0, 1.0)
    assert (trusted_vtrace_return(masked, pi, v, mdp.discount, clip).value
            == vtrace_return(traj, pi, v, mdp.discount, clip).value)


def test_mask_false_at_second_step_is_one_step_bootstrap():
    mdp, pi, mu, v, traj = _episode(4)
    assert len(traj) >= 2
    mask = np.ones(len(traj), bool)
    mask[1] = False
    s0, a0 = traj.states[0], traj.actions[0]
    ratio = pi.probs[s0, a0] / traj.behaviour[0, a0]
    delta = traj.rewards[0] + mdp.discount * v[traj.states[1]] - v[s0]
    est = trusted_is_return(MaskedTrajectory(traj, mask), pi, v, mdp.discount)
    assert est.value == pytest.approx(v[s0] + ratio * delta, rel=1e-13)
    assert est.bootstrap_step == 1
    est_v = trusted_vtrace_return(MaskedTrajectory(traj, mask), pi, v, mdp.discount)
    assert est_v.value == pytest.approx(v[s0] + min(ratio, 1.0) * delta, rel=1e-13)


def test_head_rejected_trajectory_is_flagged():
    mdp, pi, mu, v, traj = _episode(5)
    mask = np.zeros(len(traj), bool)
    est = trusted_is_return(MaskedTrajectory(traj, mask), pi, v, mdp.discount)
    assert est.rejected and math.isnan(est.value)


def test_masked_trajectory_length_must_match():
    mdp, pi, mu, v, traj = _episode(6)
    with pytest.raises(ValueError):
        MaskedTrajectory(traj, np.ones(len(traj) + 1, bool))


def _three_behaviours(seed):
    mdp = random_mdp(seed, n_states=3, n_actions=2, terminal_prob=0.25)
    rng = np.random.default_rng(seed)
    pi = random_policy(rng, mdp.n_states, 2, floor=0.2)
    mus = [random_policy(rng, mdp.n_states, 2, floor=0.2) for _ in range(3)]
    return mdp, pi, mus


@pytest.mark.parametrize("b", [0.01, 0.1, 0.5, 2.0])
def test_trusted_is_expectation_fixes_target_value(b):
    """Enumerating every trajectory under every accepted behaviour leaves V^pi unchanged."""
    mdp, pi, mus = _three_behaviours(7)
    v_pi = solve_v_exact(mdp, pi)
    acc = acceptance_matrix(pi, mus, b)
    acc[0] |= ~acc.any(axis=0)  # keep one behaviour so every state has an estimate
    spec = EnumerationSpec(max_depth=4000, tail_tolerance=1e-11)
    live = ~mdp.terminal
    ex = exact_estimator_expectation(mdp, pi, mus, v_pi, "is", accept=acc, spec=spec)
    np.testing.assert_allclose(ex.values[live], v_pi[live], atol=1e-8)
    # away from V^pi the truncated bootstraps pull the estimate, but never by more than gamma
    boot = np.where(mdp.terminal, 0.0, np.random.default_rng(0).normal(size=mdp.n_states))
    ex = exact_estimator_expectation(mdp, pi, mus, boot, "is", accept=acc, spec=spec)
    gap = np.abs(ex.values[live] - v_pi[live]).max()
    assert gap <= mdp.discount * np.abs(boot - v_pi).max() + 1e-9


def test_trusted_vtrace_expectation_converges_to_weighted_fixed_points():
    mdp, pi, mus = _three_behaviours(9)
    acc = np.ones((3, mdp.n_states), bool)
    acc[1, 0] = False
    op = trusted_operator(mdp, pi, mus, "vtrace", accept=acc)
    v = np.zeros(mdp.n_states)
    for _ in range(3000):
        v, _ = op(v)
    # fixed point of the averaged operator; check it is a fixed point and finite
    nxt, present = op(v)
    assert present.all()
    np.testing.assert_allclose(nxt, v, atol=1e-10)
    v_z = [vtrace_fixed_point(mdp, pi, mu).values for mu in mus]
    lo = np.min(v_z, axis=0) - 1e-8
    hi = np.max(v_z, axis=0) + 1e-8
    assert np.all((v >= lo) & (v <= hi))


def test_trusted_value_estimate_single_on_policy_behaviour():
    mdp = random_mdp(12, terminal_prob=0.2)
    rng = np.random.default_rng(12)
    pi = random_policy(rng, mdp.n_states, 3)
    v = rng.normal(size=mdp.n_states)
    trajs = [sample_episode(mdp, pi, s, 20) for s in range(30)]
    est = trusted_value_estimate(trajs, pi, v, mdp.discount, RelevanceConfig(0.5))
    assert est.fraction_rejected == 0.0
    sums = np.zeros(mdp.n_states)
    counts = np.zeros(mdp.n_states)
    for t in trajs:
        for k in range(len(t)):
            sums[t.states[k]] += vtrace_return(t.slice(k), pi, v, mdp.discount).value
            counts[t.states[k]] += 1
    seen = counts > 0
    np.testing.assert_allclose(est.values[seen], sums[seen] / counts[seen], rtol=1e-12)
    assert np.all(np.isnan(est.values[~seen]))
    np.testing.assert_array_equal(est.fallback(v)[~seen], v[~seen])


def test_trusted_value_estimate_drops_irrelevant_behaviour():
    mdp = prop2_bandit()
    pi = TabularPolicy(np.array([[0.5, 0.5], [0.5, 0.5]]))
    good = Trajectory([0], [1], [5.0], [[0.5, 0.5]], 1, True, behaviour_id="good")
    bad = Trajectory([0], [0], [2.0], [[0.9, 0.1]], 1, True, behaviour_id="bad")
    est = trusted_value_estimate([good, bad, bad], pi, np.zeros(2), 0.9, RelevanceConfig(0.2))
    assert est.values[0] == pytest.approx(5.0)
    assert est.fraction_rejected == pytest.approx(0.5)
    rows = est.acceptance_rows(step=3)
    assert rows == [{"step": 3, "state": 0, "fraction_rejected": 0.5}]


def test_trusted_is_by_monte_carlo_matches_enumeration():
    """Sample-based trusted estimate over three behaviours agrees with exact enumeration."""
    mdp, pi, mus = _three_behaviours(13)
    cfg = RelevanceConfig(0.1)
    acc = acceptance_matrix(pi, mus, cfg.threshold_b)
    boot = np.zeros(mdp.n_states)
    starts = [s for s in range(mdp.n_states) if not mdp.terminal[s] and acc[:, s].any()]
    s = starts[0]
    ex = exact_estimator_expectation(mdp, pi, mus, boot, "is", accept=acc)
    vals = []
    rng = np.random.default_rng(0)
    for i in range(30_000):
        z = rng.integers(3)
        if not acc[z, s]:
            continue
        traj = sample_episode(mdp, mus[z], int(rng.integers(2 ** 62)), 300, start_state=s, behaviour_id=int(z))
        m = compute_mask(traj, pi, cfg)
        vals.append(trusted_is_return(m, pi, boot, mdp.discount).value)
    vals = np.array(vals)
    se = vals.std(ddof=1) / math.sqrt(len(vals))
    assert abs(vals.mean() - ex.values[s]) <= 3 * se
