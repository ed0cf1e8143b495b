"""Brute-force verifiers for the estimators.

Nothing here calls into ``laser.estimators`` or ``laser.trust_region``:
ratios, clipping, implied policies and KL divergences are re-derived from
the MDP tensors so that agreement between the two is evidence, not echo.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Literal, Sequence

import numpy as np
from scipy.special import rel_entr

from laser.mdp import Mdp, TabularPolicy, Trajectory, solve_v_exact

Kind = Literal["is", "vtrace"]


class EnumerationBudgetError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnumerationSpec:
    """Depth limit, accepted tail error, optional behaviour weights p(z)."""

    max_depth: int = 2000
    tail_tolerance: float = 1e-10
    weights: tuple[float, ...] | None = None
    max_leaves: int = 10 ** 7

    def __post_init__(self):
        if self.max_depth < 1:
            raise ValueError("max_depth must be positive")
        if not self.tail_tolerance > 0:
            raise ValueError("tail_tolerance must be positive")


@dataclass
class OracleResult:
    values: np.ndarray
    tail_bound: float
    present: np.ndarray
    depth: int

    def to_json(self) -> str:
        return json.dumps({"values": [None if math.isnan(v) else v for v in self.values.tolist()],
                           "tail_bound": self.tail_bound, "present": self.present.tolist(),
                           "depth": self.depth})


def _caps(kind: Kind, rho_bar: float, c_bar: float) -> tuple[float, float]:
    return (math.inf, math.inf) if kind == "is" else (rho_bar, c_bar)


def _ratios(target: np.ndarray, behaviour: np.ndarray) -> np.ndarray:
    if np.any((behaviour <= 0) & (target > 0)):
        raise ValueError("behaviour must be positive wherever the target is")
    out = np.zeros_like(target)
    np.divide(target, behaviour, out=out, where=behaviour > 0)
    return out


def _implied(target: np.ndarray, behaviour: np.ndarray, rho_bar: float) -> np.ndarray:
    m = target.copy() if math.isinf(rho_bar) else np.fmin(rho_bar * behaviour, target)
    return m / m.sum(axis=1, keepdims=True)


def acceptance_matrix(target: TabularPolicy, behaviours: Sequence[TabularPolicy], b: float,
                      rho_bar: float = 1.0) -> np.ndarray:
    """accept[z, s] = KL(pi(.|s) || implied_z(.|s)) < b, via scipy's rel_entr."""
    rows = []
    for mu in behaviours:
        kl = rel_entr(target.probs, _implied(target.probs, mu.probs, rho_bar)).sum(axis=1)
        rows.append(kl < b)
    return np.array(rows)


@dataclass
class AffineOperator:
    """R V = V + (I - gamma Lambda M_c)^-1 Lambda e_rho(V) for one behaviour, split as A V + c."""

    A: np.ndarray
    c: np.ndarray
    head_ok: np.ndarray

    def __call__(self, v: np.ndarray) -> np.ndarray:
        return self.A @ v + self.c


def estimator_operator(mdp: Mdp, target: TabularPolicy, behaviour: TabularPolicy, kind: Kind,
                       rho_bar: float = 1.0, c_bar: float = 1.0,
                       accept: np.ndarray | None = None) -> AffineOperator:
    """Exact expected return-estimator operator as an affine map of the bootstrap.

    Terminal states keep value 0 and absorb all trace mass.
    """
    S = mdp.n_states
    pi, mu = target.probs, behaviour.probs
    cap_r, cap_c = _caps(kind, rho_bar, c_bar)
    ratio = _ratios(pi, mu)
    rho = np.fmin(ratio, cap_r)
    c = np.fmin(ratio, cap_c)
    live = ~mdp.terminal
    lam = live.copy() if accept is None else (np.asarray(accept, bool) & live)
    P = mdp.transition * live[None, None, :]     # drop mass that enters terminal states
    g = mdp.discount
    # e_rho(V)(s) = sum_a mu rho (r + g P V) - (sum_a mu rho) V(s)
    w_rho = mu * rho
    e_const = np.einsum("sa,sa->s", w_rho, mdp.reward)
    E_lin = g * np.einsum("sa,sat->st", w_rho, P) - np.diag(w_rho.sum(axis=1))
    M_c = np.einsum("sa,sat->st", mu * c, P)
    L = np.diag(lam.astype(float))
    N = np.linalg.inv(np.eye(S) - g * L @ M_c)
    A = np.eye(S) + N @ L @ E_lin
    const = N @ L @ e_const
    A[~live] = 0.0
    const[~live] = 0.0
    return AffineOperator(A, const, lam | ~live)


def _behaviour_weights(n: int, spec: EnumerationSpec | None) -> np.ndarray:
    if spec is None or spec.weights is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(spec.weights, float)
    if len(w) != n:
        raise ValueError("one weight per behaviour is required")
    return w / w.sum()


def trusted_operator(mdp: Mdp, target: TabularPolicy, behaviours: Sequence[TabularPolicy], kind: Kind,
                     rho_bar: float = 1.0, c_bar: float = 1.0, accept: np.ndarray | None = None,
                     weights: np.ndarray | None = None) -> Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]:
    """V -> (weighted average over accepted behaviours of R_z V, present mask)."""
    Z = len(behaviours)
    acc = np.ones((Z, mdp.n_states), bool) if accept is None else np.asarray(accept, bool)
    w = np.full(Z, 1.0 / Z) if weights is None else np.asarray(weights, float)
    ops = [estimator_operator(mdp, target, mu, kind, rho_bar, c_bar, acc[z]) for z, mu in enumerate(behaviours)]
    live = ~mdp.terminal
    wz = w[:, None] * acc                       # p(z) restricted to accepted pairs
    denom = wz.sum(axis=0)
    present = (denom > 0) | ~live

    def apply(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        v = np.where(live, v, 0.0)
        out = np.zeros(mdp.n_states)
        for z, op in enumerate(ops):
            out += np.where(wz[z] > 0, wz[z] * op(v), 0.0)
        with np.errstate(invalid="ignore", divide="ignore"):
            res = np.where(denom > 0, out / np.where(denom > 0, denom, 1.0), np.nan)
        res[~live] = 0.0
        return res, present

    return apply


def exact_estimator_expectation(mdp: Mdp, target: TabularPolicy, behaviours: Sequence[TabularPolicy],
                                bootstrap: np.ndarray, kind: Kind = "is", rho_bar: float = 1.0,
                                c_bar: float = 1.0, accept: np.ndarray | None = None,
                                spec: EnumerationSpec = EnumerationSpec(),
                                method: Literal["messages", "enumerate"] = "messages") -> OracleResult:
    """E_z[E_{mu_z}[G(s)] | z accepted at s] for every start state s.

    ``messages`` sums over all action/next-state sequences exactly, state by
    state, until the remaining tail is provably below ``spec.tail_tolerance``.
    ``enumerate`` walks every leaf of the depth-``spec.max_depth`` tree and
    bootstraps at the leaves; its result is exact for the depth-truncated
    estimator.
    """
    Z = len(behaviours)
    acc = np.ones((Z, mdp.n_states), bool) if accept is None else np.asarray(accept, bool)
    wz = _behaviour_weights(Z, spec)[:, None] * acc
    live = ~mdp.terminal
    v = np.where(live, np.asarray(bootstrap, float), 0.0)
    total = np.zeros(mdp.n_states)
    worst_tail = 0.0
    depth_used = 0
    for z, mu in enumerate(behaviours):
        if method == "messages":
            vals, tail, depth = _messages(mdp, target.probs, mu.probs, v, kind, rho_bar, c_bar, acc[z], spec)
        elif method == "enumerate":
            vals = np.array([_enumerate_start(mdp, target.probs, mu.probs, v, kind, rho_bar, c_bar,
                                              acc[z], s, spec) if acc[z, s] and live[s] else 0.0
                             for s in range(mdp.n_states)])
            tail, depth = 0.0, spec.max_depth
        else:
            raise ValueError(f"unknown method {method!r}")
        total += np.where(wz[z] > 0, wz[z] * vals, 0.0)
        worst_tail = max(worst_tail, tail)
        depth_used = max(depth_used, depth)
    denom = wz.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.where(denom > 0, total / np.where(denom > 0, denom, 1.0), np.nan)
    values[~live] = 0.0
    return OracleResult(values, worst_tail, (denom > 0) | ~live, depth_used)


def _messages(mdp, pi, mu, v, kind, rho_bar, c_bar, lam, spec):
    cap_r, cap_c = _caps(kind, rho_bar, c_bar)
    ratio = _ratios(pi, mu)
    rho = np.fmin(ratio, cap_r)
    c = np.fmin(ratio, cap_c)
    live = ~mdp.terminal
    lam = lam & live
    g = mdp.discount
    v_next = mdp.transition @ v                                  # (S, A), terminal values are 0
    e = np.einsum("sa,sa->s", mu * rho, mdp.reward + g * v_next - v[:, None]) * lam
    K_c = np.einsum("sa,sat->st", mu * c, mdp.transition * live[None, None, :]) * lam[:, None]
    S = mdp.n_states
    m = np.eye(S)                                                # row i: messages from start i
    acc = np.zeros(S)
    emax = float(np.max(np.abs(e))) if S else 0.0
    tail = math.inf
    for k in range(spec.max_depth):
        acc += g ** k * (m @ e)
        m = m @ K_c
        mass = float(np.max(np.abs(m).sum(axis=1)))
        tail = g ** (k + 1) * mass * emax / (1.0 - g)
        if tail < spec.tail_tolerance:
            break
    else:
        raise EnumerationBudgetError(
            f"tail bound {tail:.3g} above tolerance {spec.tail_tolerance:.3g} at depth {spec.max_depth}")
    vals = np.where(lam, v + acc, 0.0)
    return vals, tail, k + 1


def _enumerate_start(mdp, pi, mu, v, kind, rho_bar, c_bar, lam, start, spec):
    cap_r, cap_c = _caps(kind, rho_bar, c_bar)
    g = mdp.discount
    K = spec.max_depth
    leaves = [0]

    def rec(s, depth, prob, trace, disc):
        # trace = prod_{i<depth} lambda_i c_i ; returns expected sum of remaining terms
        if mdp.terminal[s] or depth == K or not lam[s]:
            leaves[0] += 1
            if leaves[0] > spec.max_leaves:
                raise EnumerationBudgetError("enumeration exceeds the leaf budget; use a smaller MDP or depth")
            return 0.0
        total = 0.0
        for a in range(mdp.n_actions):
            p_a = mu[s, a]
            if p_a == 0.0:
                continue
            r = pi[s, a] / p_a
            rho_t = min(r, cap_r)
            c_t = min(r, cap_c)
            for s2 in np.flatnonzero(mdp.transition[s, a]):
                p = p_a * mdp.transition[s, a, s2]
                nv = 0.0 if mdp.terminal[s2] else v[s2]
                delta = mdp.reward[s, a] + g * nv - v[s]
                total += p * (disc * trace * rho_t * delta
                              + rec(int(s2), depth + 1, prob * p, trace * c_t, disc * g))
        return total

    return v[start] + rec(start, 0, 1.0, 1.0, 1.0)


def enumerate_trajectories(mdp: Mdp, behaviour: TabularPolicy, start_state: int, depth: int,
                           max_leaves: int = 10 ** 7, behaviour_id=0) -> list[tuple[float, Trajectory]]:
    """Every depth-limited trajectory from ``start_state`` under ``behaviour`` with its probability.

    Trajectories stop early at terminal states.
    """
    out: list[tuple[float, Trajectory]] = []
    mu = behaviour.probs

    def rec(s, prob, states, actions, rewards):
        if mdp.terminal[s] or len(states) == depth:
            if len(out) >= max_leaves:
                raise EnumerationBudgetError("trajectory enumeration exceeds the leaf budget")
            n = len(states)
            out.append((prob, Trajectory(states, actions, rewards, mu[states].reshape(n, mdp.n_actions),
                                         s, bool(mdp.terminal[s]), behaviour_id)))
            return
        for a in range(mdp.n_actions):
            if mu[s, a] == 0.0:
                continue
            for s2 in np.flatnonzero(mdp.transition[s, a]):
                rec(int(s2), prob * mu[s, a] * mdp.transition[s, a, s2],
                    states + [s], actions + [a], rewards + [mdp.reward[s, a]])

    rec(int(start_state), 1.0, [], [], [])
    return out


@dataclass
class FixedPointResult:
    values: np.ndarray
    iterations: int
    implied_values: np.ndarray
    discrepancy: float


def vtrace_fixed_point(mdp: Mdp, target: TabularPolicy, behaviour: TabularPolicy,
                       rho_bar: float = 1.0, c_bar: float = 1.0, tol: float = 1e-10,
                       max_iter: int = 100_000) -> FixedPointResult:
    """Iterate the exact expected V-trace operator; cross-check with V of the implied policy."""
    if tol < 1e-10:
        raise ValueError("tol must be >= 1e-10")
    op = estimator_operator(mdp, target, behaviour, "vtrace", rho_bar, c_bar)
    v = np.zeros(mdp.n_states)
    for it in range(1, max_iter + 1):
        nv = op(v)
        change = float(np.max(np.abs(nv - v)))
        v = nv
        if change < tol * 1e-2:
            break
    else:
        raise RuntimeError("V-trace operator iteration did not converge")
    implied = TabularPolicy(_implied(target.probs, behaviour.probs, rho_bar))
    ref = solve_v_exact(mdp, implied)
    gap = float(np.max(np.abs(v - ref)))
    if gap > 10 * tol:
        raise AssertionError(f"iterated fixed point differs from implied-policy value by {gap:.3g}")
    return FixedPointResult(v, it, ref, gap)


@dataclass
class ProbeResult:
    kind: str
    lhs: float
    rhs: float
    ratio: float
    eta: list[float] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.lhs <= self.rhs if self.kind == "is" else self.lhs < self.rhs


def contraction_probe(mdp: Mdp, target: TabularPolicy, behaviours: Sequence[TabularPolicy], kind: Kind,
                      rho_bar: float = 1.0, c_bar: float = 1.0, accept: np.ndarray | None = None,
                      n_probes: int = 50, seed: int = 0, slack: float = 1e-9) -> list[ProbeResult]:
    """Distance-shrinkage of the exact trusted operator on random bootstrap tables.

    IS: ratio = |T V - V^pi| / |V - V^pi| against gamma + slack.
    V-trace: |T V - V^beta| against max_z |V - V^z| over accepted z.
    """
    rng = np.random.default_rng(seed)
    live = ~mdp.terminal
    Z = len(behaviours)
    acc = np.ones((Z, mdp.n_states), bool) if accept is None else np.asarray(accept, bool)
    op = trusted_operator(mdp, target, behaviours, kind, rho_bar, c_bar, acc)
    scale = max(1.0, float(np.max(np.abs(mdp.reward)))) / (1.0 - mdp.discount)
    v_pi = solve_v_exact(mdp, target)
    if kind == "vtrace":
        v_z = np.array([vtrace_fixed_point(mdp, target, mu, rho_bar, c_bar).implied_values for mu in behaviours])
        wz = acc & live[None, :]
        with np.errstate(invalid="ignore"):
            v_beta = np.where(wz.any(axis=0), (v_z * wz).sum(axis=0) / np.maximum(wz.sum(axis=0), 1), 0.0)
        single = [estimator_operator(mdp, target, mu, kind, rho_bar, c_bar, acc[z]) for z, mu in enumerate(behaviours)]
    results = []
    for _ in range(n_probes):
        v = np.where(live, rng.uniform(-scale, scale, mdp.n_states), 0.0)
        tv, present = op(v)
        if not present.all():
            raise ValueError(f"states {np.flatnonzero(~present).tolist()} have no accepted behaviour")
        if kind == "is":
            lhs = float(np.max(np.abs(tv - v_pi)))
            d = float(np.max(np.abs(v - v_pi)))
            results.append(ProbeResult("is", lhs, (mdp.discount + slack) * d, lhs / d if d else 0.0))
        else:
            lhs = float(np.max(np.abs(tv - v_beta)))
            used = [z for z in range(Z) if (acc[z] & live).any()]
            dists = {z: float(np.max(np.abs(v - v_z[z]))) for z in used}
            rhs = max(dists.values())
            eta = []
            for z in used:
                heads = acc[z] & live
                num = float(np.max(np.abs(single[z](v) - v_z[z])[heads]))
                eta.append(num / dists[z] if dists[z] else 0.0)
            results.append(ProbeResult("vtrace", lhs, rhs, lhs / rhs if rhs else 0.0, eta))
    return results


@dataclass
class McEstimate:
    mean: float
    stderr: float
    n: int

    def within(self, value: float, n_se: float = 3.0) -> bool:
        return abs(self.mean - value) <= n_se * self.stderr + 1e-12


def monte_carlo_expectation(sampler: Callable[[np.random.Generator], float], n_samples: int,
                            seed: int = 0) -> McEstimate:
    if n_samples < 100:
        raise ValueError("n_samples must be >= 100")
    rng = np.random.default_rng(seed)
    xs = np.fromiter((sampler(rng) for _ in range(n_samples)), float, n_samples)
    return McEstimate(float(xs.mean()), float(xs.std(ddof=1) / math.sqrt(n_samples)), n_samples)


def monte_carlo_values(mdp: Mdp, policy: TabularPolicy, n_episodes: int, horizon: int,
                       seed: int = 0, start_state: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised rollouts: per-start-state mean discounted return and its standard error.

    Each of the ``n_episodes`` runs starts at ``start_state`` or, when None,
    at a uniformly random state (so every state gets samples).
    """
    rng = np.random.default_rng(seed)
    S = mdp.n_states
    starts = np.full(n_episodes, start_state) if start_state is not None else rng.integers(S, size=n_episodes)
    s = starts.copy()
    ret = np.zeros(n_episodes)
    disc = np.ones(n_episodes)
    pol_cdf = np.cumsum(policy.probs, axis=1)
    tr_cdf = np.cumsum(mdp.transition, axis=2)
    for _ in range(horizon):
        a = np.minimum((rng.random(n_episodes)[:, None] > pol_cdf[s]).sum(axis=1), mdp.n_actions - 1)
        ret += disc * mdp.reward[s, a]
        s = np.minimum((rng.random(n_episodes)[:, None] > tr_cdf[s, a]).sum(axis=1), S - 1)
        disc *= mdp.discount
    means = np.full(S, np.nan)
    ses = np.full(S, np.nan)
    for st in range(S):
        x = ret[starts == st]
        if len(x) > 1:
            means[st] = x.mean()
            ses[st] = x.std(ddof=1) / math.sqrt(len(x))
    return means, ses


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of a scalar function."""
    x = np.array(x, float)
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f(x)
        flat[i] = old - eps
        lo = f(x)
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def report(obj) -> str:
    """Serialise oracle results to JSON for the harness and tests."""
    def conv(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if hasattr(o, "__dataclass_fields__"):
            return {k: conv(v) for k, v in asdict(o).items()}
        if isinstance(o, dict):
            return {str(k): conv(v) for k, v in o.items()}
        if isinstance(o, (list, tuple)):
            return [conv(x) for x in o]
        if isinstance(o, float) and not math.isfinite(o):
            return str(o)
        return o
    return json.dumps(conv(obj), indent=1)
