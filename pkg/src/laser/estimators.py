"""Off-policy return and policy-gradient estimators.

Multi-step importance sampling, V-trace, the implied policy of clipped
V-trace, the action-value distortion ``omega`` it induces, and the mixed
on/off-policy action values used to pick a safe online fraction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from laser.mdp import TabularPolicy, Trajectory, softmax

Advantage = Literal["target", "td", "q"]


@dataclass(frozen=True)
class ClipConfig:
    """V-trace truncation levels; requires rho_bar >= c_bar >= 1."""

    rho_bar: float = 1.0
    c_bar: float = 1.0

    def __post_init__(self):
        if math.isnan(self.rho_bar) or math.isnan(self.c_bar):
            raise ValueError("clipping constants must not be NaN")
        if not self.rho_bar >= self.c_bar >= 1.0:
            raise ValueError(
                f"ClipConfig requires rho_bar >= c_bar >= 1, got rho_bar={self.rho_bar}, c_bar={self.c_bar}")

    @classmethod
    def unclipped(cls) -> "ClipConfig":
        return cls(math.inf, math.inf)


@dataclass
class ReturnEstimate:
    """A return target G plus the coefficients that produced it.

    ``per_step_weights[k]`` multiplies gamma^k * delta_k; ``masked`` holds the
    trust-region indicator per step (all True for the plain estimators).
    A ``rejected`` estimate carries no value: its head state failed the
    relevance test.
    """

    value: float
    bootstrap_step: int
    per_step_weights: np.ndarray
    masked: np.ndarray
    rejected: bool = False

    def as_row(self) -> dict:
        return {
            "value": self.value,
            "bootstrap_step": self.bootstrap_step,
            "rejected": self.rejected,
            "per_step_weights": " ".join(repr(float(w)) for w in self.per_step_weights),
            "masked": "".join("1" if m else "0" for m in self.masked),
        }


def td_errors(traj: Trajectory, bootstrap: np.ndarray, discount: float) -> np.ndarray:
    """delta_t = r_t + gamma V(s_{t+1}) - V(s_t); a terminal final state has value 0."""
    v = np.asarray(bootstrap, float)
    v_now = v[traj.states]
    v_next = v[traj.next_states].copy()
    if traj.terminal and len(traj):
        v_next[-1] = 0.0
    return traj.rewards + discount * v_next - v_now


def log_ratios(traj: Trajectory, target: TabularPolicy) -> np.ndarray:
    """log pi(a_t|s_t) - log mu(a_t|s_t) for every step."""
    idx = np.arange(len(traj))
    pi = target.probs[traj.states, traj.actions]
    mu = traj.behaviour[idx, traj.actions]
    if np.any(mu <= 0.0):
        raise ValueError("behaviour probability is zero on a taken action")
    with np.errstate(divide="ignore"):
        return np.log(pi) - np.log(mu)


def _log_cap(x: float) -> float:
    return math.inf if math.isinf(x) else math.log(x)


def corrected_return(traj: Trajectory, target: TabularPolicy, bootstrap: np.ndarray,
                     discount: float, rho_bar: float, c_bar: float,
                     mask: np.ndarray | None = None, K: int | None = None) -> ReturnEstimate:
    """V(s_0) + sum_k gamma^k (prod_{i<k} lambda_i c_i) lambda_k rho_k delta_k.

    With both caps infinite this is the importance-sampled return; ratio
    products are accumulated in log space.
    """
    n = len(traj)
    K = n if K is None else K
    if not 1 <= K <= n:
        raise ValueError(f"K must lie in [1, {n}], got {K}")
    lr = log_ratios(traj, target)[:K]
    lam = np.ones(K, bool) if mask is None else np.asarray(mask, bool)[:K]
    v0 = float(np.asarray(bootstrap, float)[traj.states[0]])
    if not lam[0]:
        return ReturnEstimate(math.nan, 0, np.zeros(0), lam.copy(), rejected=True)
    stop = K if lam.all() else int(np.argmin(lam))
    log_rho = np.minimum(lr[:stop], _log_cap(rho_bar))
    log_c = np.minimum(lr[:stop], _log_cap(c_bar))
    prefix = np.concatenate(([0.0], np.cumsum(log_c)[:-1]))
    weights = np.exp(prefix + log_rho)
    disc = discount ** np.arange(stop)
    # The telescoped sum regrouped per reward and per bootstrap value: every
    # value coefficient is a difference of weights, exactly zero when pi = mu,
    # so the on-policy estimate is the discounted reward sum to the last bit.
    v = np.asarray(bootstrap, float)
    end = 0.0 if (stop == n and traj.terminal) else float(v[traj.next_states[stop - 1]])
    value = float(np.sum(disc * weights * traj.rewards[:stop]))
    value += (1.0 - weights[0]) * v0
    if stop > 1:
        value += float(np.sum(disc[1:] * (weights[:-1] - weights[1:]) * v[traj.states[1:stop]]))
    value += discount ** stop * weights[-1] * end
    return ReturnEstimate(value, stop, weights, lam.copy())


def is_return(traj: Trajectory, target: TabularPolicy, bootstrap: np.ndarray, discount: float,
              K: int | None = None) -> ReturnEstimate:
    return corrected_return(traj, target, bootstrap, discount, math.inf, math.inf, None, K)


def vtrace_return(traj: Trajectory, target: TabularPolicy, bootstrap: np.ndarray, discount: float,
                  clip: ClipConfig = ClipConfig(), K: int | None = None) -> ReturnEstimate:
    return corrected_return(traj, target, bootstrap, discount, clip.rho_bar, clip.c_bar, None, K)


def _as_row(x) -> np.ndarray:
    row = np.asarray(x, float)
    if row.ndim != 1 or np.any(row < 0) or abs(row.sum() - 1.0) > 1e-10:
        raise ValueError(f"not a probability row: {x!r}")
    return row


def implied_policy(target_row, behaviour_row, rho_bar: float = 1.0) -> np.ndarray:
    """pi~(a) proportional to min(rho_bar mu(a), pi(a))."""
    pi, mu = _as_row(target_row), _as_row(behaviour_row)
    if rho_bar < 1.0:
        raise ValueError("rho_bar must be >= 1")
    m = pi.copy() if math.isinf(rho_bar) else np.minimum(rho_bar * mu, pi)
    z = m.sum()
    if z <= 0.0:
        raise ValueError("behaviour has no overlap with the target policy's support")
    return m / z


def implied_policy_table(target: TabularPolicy, behaviour: TabularPolicy,
                         rho_bar: float = 1.0) -> TabularPolicy:
    return TabularPolicy(np.array([implied_policy(p, m, rho_bar)
                                   for p, m in zip(target.probs, behaviour.probs)]))


def omega(target_row, behaviour_row, rho_bar: float = 1.0, action: int | None = None):
    """Distortion min(1, rho_bar mu/pi) of action values; a row if ``action`` is None."""
    pi, mu = _as_row(target_row), _as_row(behaviour_row)
    idx = np.arange(len(pi)) if action is None else np.array([action])
    if np.any(pi[idx] <= 0.0):
        raise ValueError("omega is undefined where the target probability is zero")
    w = np.minimum(1.0, rho_bar * mu[idx] / pi[idx])
    return w if action is None else float(w[0])


def q_omega(q_row, omega_row) -> np.ndarray:
    return np.asarray(q_row, float) * np.asarray(omega_row, float)


def q_alpha(q_row, q_omega_row, d_pi: float, d_mu: float, alpha: float) -> np.ndarray:
    """Q d_pi alpha + Q^omega d_mu (1 - alpha)."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if d_pi < 0 or d_mu < 0:
        raise ValueError("state distributions must be non-negative")
    return np.asarray(q_row, float) * d_pi * alpha + np.asarray(q_omega_row, float) * d_mu * (1.0 - alpha)


def argmax_set(row, rtol: float = 1e-12) -> np.ndarray:
    row = np.asarray(row, float)
    best = row.max()
    return np.flatnonzero(row >= best - rtol * max(1.0, abs(best)))


def min_alpha(q_row, q_omega_row, d_pi: float, d_mu: float) -> float:
    """Smallest online fraction above which argmax Q^alpha stays inside argmax Q.

    Solves alpha / (1 - alpha) > max_{b not in A*} min_{a* in A*}
    (Q^w(b) - Q^w(a*)) / (Q(a*) - Q(b)) * d_mu / d_pi for its threshold.
    """
    q = np.asarray(q_row, float)
    qw = np.asarray(q_omega_row, float)
    best = argmax_set(q)
    others = np.setdiff1d(np.arange(len(q)), best)
    if len(others) == 0 or d_mu == 0.0:
        return 0.0
    ratio = max(min((qw[b] - qw[a]) / (q[a] - q[b]) for a in best) for b in others)
    if ratio <= 0.0:
        return 0.0
    if d_pi == 0.0:
        raise ValueError("no online fraction suffices: the state is unreachable under pi (d_pi = 0)")
    odds = ratio * d_mu / d_pi
    return odds / (1.0 + odds)


# -- batched estimators ------------------------------------------------------


@dataclass
class PaddedBatch:
    """B trajectories padded to a common length T; ``valid`` marks real steps."""

    states: np.ndarray        # [B, T]
    actions: np.ndarray       # [B, T]
    rewards: np.ndarray       # [B, T]
    behaviour: np.ndarray     # [B, T, A]
    valid: np.ndarray         # [B, T] bool
    lengths: np.ndarray       # [B]
    final_state: np.ndarray   # [B]
    terminal: np.ndarray      # [B] bool
    online: np.ndarray        # [B] bool
    behaviour_id: list = field(default_factory=list)

    @classmethod
    def from_trajectories(cls, trajectories: Sequence[Trajectory], n_actions: int,
                          online: Sequence[bool] | None = None) -> "PaddedBatch":
        B = len(trajectories)
        if B == 0:
            raise ValueError("empty batch")
        T = max(1, max(len(t) for t in trajectories))
        states = np.zeros((B, T), np.int64)
        actions = np.zeros((B, T), np.int64)
        rewards = np.zeros((B, T))
        beh = np.full((B, T, n_actions), 1.0 / n_actions)
        valid = np.zeros((B, T), bool)
        lengths = np.array([len(t) for t in trajectories], np.int64)
        for b, tr in enumerate(trajectories):
            n = len(tr)
            states[b, :n] = tr.states
            actions[b, :n] = tr.actions
            rewards[b, :n] = tr.rewards
            beh[b, :n] = tr.behaviour
            valid[b, :n] = True
            states[b, n:] = tr.final_state
        return cls(states, actions, rewards, beh, valid, lengths,
                   np.array([t.final_state for t in trajectories], np.int64),
                   np.array([t.terminal for t in trajectories], bool),
                   np.zeros(B, bool) if online is None else np.asarray(online, bool),
                   [t.behaviour_id for t in trajectories])

    @property
    def shape(self) -> tuple[int, int]:
        return self.states.shape

    def mu_taken(self) -> np.ndarray:
        return np.take_along_axis(self.behaviour, self.actions[..., None], axis=2)[..., 0]


@dataclass
class VtraceOutput:
    vs: np.ndarray          # V-trace targets v_t, [B, T]
    rho: np.ndarray         # clipped rho_t, [B, T]
    q_hat: np.ndarray       # r_t + gamma v_{t+1}, [B, T]
    values: np.ndarray      # V(s_t) with bootstrap appended, [B, T + 1]


def vtrace_batch(batch: PaddedBatch, target_probs: np.ndarray, bootstrap: np.ndarray,
                 discount: float, clip: ClipConfig, mask: np.ndarray | None = None,
                 ignore_ratios: bool = False) -> VtraceOutput:
    """Backward recursion v_t - V(s_t) = lambda_t (rho_t delta_t + gamma c_t (v_{t+1} - V(s_{t+1}))).

    ``target_probs`` is the (S, A) table of pi; ``mask`` the lambda indicator
    (default all ones). ``ignore_ratios`` forces rho = c = 1.
    """
    B, T = batch.shape
    v = np.asarray(bootstrap, float)
    valid = batch.valid
    values = np.zeros((B, T + 1))
    values[:, :T] = np.where(valid, v[batch.states], 0.0)
    boot = np.where(batch.terminal, 0.0, v[batch.final_state])
    values[np.arange(B), batch.lengths] = boot
    if ignore_ratios:
        rho = np.where(valid, 1.0, 0.0)
        c = rho.copy()
    else:
        pi_taken = target_probs[batch.states, batch.actions]
        ratio = np.where(valid, pi_taken / batch.mu_taken(), 0.0)
        rho = np.minimum(ratio, clip.rho_bar)
        c = np.minimum(ratio, clip.c_bar)
    lam = valid if mask is None else (np.asarray(mask, bool) & valid)
    delta = np.where(valid, batch.rewards + discount * values[:, 1:] - values[:, :T], 0.0)
    acc = np.zeros((B, T + 1))
    for t in range(T - 1, -1, -1):
        acc[:, t] = lam[:, t] * (rho[:, t] * delta[:, t] + discount * c[:, t] * acc[:, t + 1])
    vs_full = values + acc
    vs = np.where(valid, vs_full[:, :T], 0.0)
    q_hat = np.where(valid, batch.rewards + discount * vs_full[:, 1:], 0.0)
    return VtraceOutput(vs, np.where(valid, rho, 0.0), q_hat, values)


def advantages(out: VtraceOutput, form: Advantage = "target") -> np.ndarray:
    """Policy-gradient coefficient per step (before multiplying by rho).

    ``target``: v_t - V(s_t); ``td``: r_t + gamma v_{t+1} - V(s_t);
    ``q``: r_t + gamma v_{t+1} with no baseline.
    """
    T = out.vs.shape[1]
    if form == "target":
        return out.vs - out.values[:, :T]
    if form == "td":
        return out.q_hat - out.values[:, :T]
    if form == "q":
        return out.q_hat
    raise ValueError(f"unknown advantage form {form!r}")


def logit_gradient(n_states: int, probs: np.ndarray, states: np.ndarray, actions: np.ndarray,
                   weights: np.ndarray) -> np.ndarray:
    """sum_i weights_i * d log softmax(theta)[s_i, a_i] / d theta, as an (S, A) table."""
    grad = np.zeros((n_states, probs.shape[1]))
    s = states.ravel()
    w = weights.ravel()
    np.add.at(grad, s, -w[:, None] * probs[s])
    np.add.at(grad, (s, actions.ravel()), w)
    return grad


def trajectory_weights(online: np.ndarray, mode: str, alpha: float | None) -> np.ndarray:
    B = len(online)
    if mode in ("on_policy", "vtrace_offpolicy", "vtrace"):
        return np.full(B, 1.0 / B)
    if mode != "mixed":
        raise ValueError(f"unknown gradient mode {mode!r}")
    if alpha is None or not 0.0 <= alpha <= 1.0:
        raise ValueError("mixed mode needs alpha in [0, 1]")
    n_on = int(online.sum())
    n_rep = B - n_on
    if n_on == 0:
        raise ValueError("mixed mode without online trajectories; request vtrace_offpolicy explicitly")
    w = np.where(online, alpha / n_on, 0.0)
    if n_rep:
        w = np.where(online, w, (1.0 - alpha) / n_rep)
    return w


def policy_gradient_estimate(trajectories: Sequence[Trajectory], logits: np.ndarray,
                             bootstrap: np.ndarray, discount: float,
                             clip: ClipConfig = ClipConfig(), mode: str = "vtrace_offpolicy",
                             alpha: float | None = None, online: Sequence[bool] | None = None,
                             advantage: Advantage = "target") -> np.ndarray:
    """Ascent direction of sum_b w_b sum_t rho_t A_t log pi(a_t|s_t) w.r.t. the logits.

    ``rho`` and ``A`` are held fixed (they are targets). ``on_policy`` sets
    every ratio to one; ``mixed`` weights online trajectories by alpha and
    replayed ones by 1 - alpha.
    """
    logits = np.asarray(logits, float)
    probs = softmax(logits)
    if mode == "mixed" and online is None:
        online = getattr(trajectories, "online", None)
        if online is None:
            raise ValueError("mixed mode requires online/replay labels")
    trajs = list(getattr(trajectories, "trajectories", trajectories))
    batch = PaddedBatch.from_trajectories(trajs, logits.shape[1], online)
    out = vtrace_batch(batch, probs, bootstrap, discount, clip, ignore_ratios=(mode == "on_policy"))
    adv = advantages(out, advantage)
    w = trajectory_weights(batch.online, mode, alpha)
    coef = w[:, None] * out.rho * adv * batch.valid
    return logit_gradient(logits.shape[0], probs, batch.states, batch.actions, coef)
