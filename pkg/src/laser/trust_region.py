"""Behaviour relevance, per-state lambda masks and trust-region return estimators."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Hashable, Literal, Sequence

import numpy as np

from laser.estimators import ClipConfig, ReturnEstimate, corrected_return, implied_policy
from laser.mdp import TabularPolicy, Trajectory

RelevanceKind = Literal["kl_implied", "kl_behaviour"]


@dataclass(frozen=True)
class RelevanceConfig:
    """Threshold ``b`` on a behaviour relevance function.

    ``kl_implied`` is KL(pi || implied policy of mu); ``kl_behaviour`` is the
    literal KL(pi || mu).
    """

    threshold_b: float = 0.5
    relevance_kind: RelevanceKind = "kl_implied"

    def __post_init__(self):
        if not (self.threshold_b > 0 and math.isfinite(self.threshold_b)):
            raise ValueError(f"threshold b must be finite and positive, got {self.threshold_b}")
        if self.relevance_kind not in ("kl_implied", "kl_behaviour"):
            raise ValueError(f"unknown relevance kind {self.relevance_kind!r}")


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Forward KL(p || q) with 0 log 0/q = 0 and +inf where p > 0 = q."""
    p = np.asarray(p, float)
    q = np.asarray(q, float)
    support = p > 0
    if np.any(q[support] <= 0):
        return math.inf
    return float(np.sum(p[support] * (np.log(p[support]) - np.log(q[support]))))


def kl_relevance(target_row, behaviour_row, rho_bar: float = 1.0,
                 kind: RelevanceKind = "kl_implied") -> float:
    """KL(pi(.|s) || pi~_mu(.|s)); +inf when mu has no overlap with pi."""
    if kind == "kl_behaviour":
        return kl_divergence(target_row, behaviour_row)
    try:
        implied = implied_policy(target_row, behaviour_row, rho_bar)
    except ValueError:
        return math.inf
    return kl_divergence(target_row, implied)


def kl_relevance_rows(target_rows: np.ndarray, behaviour_rows: np.ndarray, rho_bar: float = 1.0,
                      kind: RelevanceKind = "kl_implied") -> np.ndarray:
    """Vectorised ``kl_relevance`` over matching rows (any leading shape)."""
    pi = np.asarray(target_rows, float)
    mu = np.asarray(behaviour_rows, float)
    if kind == "kl_behaviour":
        q = mu
    else:
        m = pi if math.isinf(rho_bar) else np.minimum(rho_bar * mu, pi)
        z = m.sum(axis=-1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            q = np.where(z > 0, m / np.where(z > 0, z, 1.0), 0.0)
    support = pi > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(support, pi * (np.log(np.where(support, pi, 1.0)) - np.log(np.where(support, q, 1.0))), 0.0)
    kl = terms.sum(axis=-1)
    blocked = np.any(support & (q <= 0), axis=-1)
    return np.where(blocked, math.inf, np.maximum(kl, 0.0))


@dataclass(frozen=True, eq=False)
class MaskedTrajectory:
    base: Trajectory
    mask: np.ndarray

    def __post_init__(self):
        m = np.array(self.mask, bool)
        if m.shape != (len(self.base),):
            raise ValueError("mask length must equal trajectory length")
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)

    def __len__(self) -> int:
        return len(self.base)


def compute_mask(traj: Trajectory, target: TabularPolicy, cfg: RelevanceConfig,
                 rho_bar: float = 1.0) -> MaskedTrajectory:
    """lambda_t = [beta(pi, mu, s_t) < b]; reads only states and stored behaviour rows."""
    beta = kl_relevance_rows(target.probs[traj.states], traj.behaviour, rho_bar, cfg.relevance_kind)
    return MaskedTrajectory(traj, beta < cfg.threshold_b)


def trusted_is_return(masked: MaskedTrajectory, target: TabularPolicy, bootstrap: np.ndarray,
                      discount: float) -> ReturnEstimate:
    """Importance-sampled return whose ratio product is zeroed from the first rejected state."""
    return corrected_return(masked.base, target, bootstrap, discount, math.inf, math.inf, masked.mask)


def trusted_vtrace_return(masked: MaskedTrajectory, target: TabularPolicy, bootstrap: np.ndarray,
                          discount: float, clip: ClipConfig = ClipConfig()) -> ReturnEstimate:
    return corrected_return(masked.base, target, bootstrap, discount, clip.rho_bar, clip.c_bar,
                            masked.mask)


@dataclass
class TrustedEstimate:
    """Per-state trusted value estimates; NaN where every behaviour was rejected."""

    values: np.ndarray
    present: np.ndarray
    counts: np.ndarray
    fraction_rejected: float
    state_rejected: np.ndarray

    def fallback(self, bootstrap: np.ndarray) -> np.ndarray:
        """Absent states keep their current bootstrap value."""
        return np.where(self.present, self.values, np.asarray(bootstrap, float))

    def acceptance_rows(self, step: int) -> list[dict]:
        return [{"step": step, "state": int(s), "fraction_rejected": float(self.state_rejected[s])}
                for s in np.flatnonzero(~np.isnan(self.state_rejected))]


def trusted_value_estimate(trajectories: Sequence[Trajectory], target: TabularPolicy,
                           bootstrap: np.ndarray, discount: float, cfg: RelevanceConfig | None,
                           clip: ClipConfig = ClipConfig(),
                           estimator_kind: Literal["is", "vtrace"] = "vtrace",
                           weighting: Literal["samples", "behaviours"] = "samples") -> TrustedEstimate:
    """Conditional-expectation value estimate over accepted behaviours.

    Every suffix of every trajectory yields one return estimate for its head
    state. ``samples`` averages all accepted estimates of a state;
    ``behaviours`` first averages within each behaviour id, then uniformly
    over the accepted ids. ``cfg=None`` accepts everything.
    """
    n_states = target.n_states
    sums: dict[tuple[int, Hashable], float] = defaultdict(float)
    counts: dict[tuple[int, Hashable], int] = defaultdict(int)
    pair_seen: dict[tuple[int, Hashable], list[int]] = defaultdict(lambda: [0, 0])
    for traj in trajectories:
        if cfg is None:
            masked = MaskedTrajectory(traj, np.ones(len(traj), bool))
        else:
            masked = compute_mask(traj, target, cfg, clip.rho_bar)
        for t in range(len(traj)):
            s = int(traj.states[t])
            key = (s, traj.behaviour_id)
            pair_seen[key][0] += 1
            if not masked.mask[t]:
                pair_seen[key][1] += 1
                continue
            sub = MaskedTrajectory(traj.slice(t), masked.mask[t:])
            if estimator_kind == "is":
                est = trusted_is_return(sub, target, bootstrap, discount)
            elif estimator_kind == "vtrace":
                est = trusted_vtrace_return(sub, target, bootstrap, discount, clip)
            else:
                raise ValueError(f"unknown estimator kind {estimator_kind!r}")
            sums[key] += est.value
            counts[key] += 1
    values = np.full(n_states, np.nan)
    n = np.zeros(n_states, np.int64)
    per_state: dict[int, list[tuple[float, int]]] = defaultdict(list)
    for (s, _z), c in counts.items():
        per_state[s].append((sums[(s, _z)], c))
    for s, items in per_state.items():
        if weighting == "samples":
            values[s] = sum(x for x, _ in items) / sum(c for _, c in items)
        else:
            values[s] = float(np.mean([x / c for x, c in items]))
        n[s] = sum(c for _, c in items)
    state_rej = np.full(n_states, np.nan)
    rejected_pairs = 0
    per_state_pairs: dict[int, list[bool]] = defaultdict(list)
    for (s, _z), (seen, rej) in pair_seen.items():
        # a (state, behaviour) pair is rejected when its relevance fails
        is_rej = rej == seen
        rejected_pairs += is_rej
        per_state_pairs[s].append(is_rej)
    for s, flags in per_state_pairs.items():
        state_rej[s] = float(np.mean(flags))
    frac = rejected_pairs / len(pair_seen) if pair_seen else 0.0
    return TrustedEstimate(values, n > 0, n, frac, state_rej)
