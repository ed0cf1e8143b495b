"""Finite MDPs, tabular policies, trajectories and exact policy evaluation."""

from __future__ import annotations

import bisect
import json
from dataclasses import dataclass, field
from typing import Hashable, Iterator, Literal

import numpy as np
from scipy.sparse.csgraph import connected_components

PROB_ATOL = 1e-12
DOWNSTREAM_ATOL = 1e-10


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def _check_simplex(rows: np.ndarray, atol: float, what: str) -> None:
    if not np.all(np.isfinite(rows)):
        raise ValueError(f"{what} contains non-finite entries")
    if np.any(rows < -atol):
        raise ValueError(f"{what} has negative probabilities")
    sums = rows.sum(axis=-1)
    bad = np.abs(sums - 1.0) > atol
    if np.any(bad):
        idx = np.argwhere(bad)[0]
        raise ValueError(f"{what} row {tuple(idx)} sums to {sums[tuple(idx)]!r}, not 1")


@dataclass(frozen=True, eq=False)
class Mdp:
    """Finite MDP with deterministic rewards r(s, a).

    ``transition[s, a, s']`` is P(s'|s,a). Terminal states must self-loop
    with reward 0 under every action.
    """

    transition: np.ndarray
    reward: np.ndarray
    discount: float
    terminal: np.ndarray | None = None
    initial_distribution: np.ndarray | None = None
    name: str = "mdp"

    def __post_init__(self):
        P = _frozen(self.transition)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {P.shape}")
        n_states, n_actions = P.shape[:2]
        if n_states < 1 or n_actions < 1:
            raise ValueError("need at least one state and one action")
        _check_simplex(P, PROB_ATOL, "transition")
        R = _frozen(self.reward)
        if R.shape != (n_states, n_actions):
            raise ValueError(f"reward must have shape {(n_states, n_actions)}, got {R.shape}")
        if not np.all(np.isfinite(R)):
            raise ValueError("reward contains non-finite entries")
        if not 0.0 <= self.discount < 1.0:
            raise ValueError(f"discount must lie in [0, 1), got {self.discount}")
        term = np.zeros(n_states, bool) if self.terminal is None else np.asarray(self.terminal, bool)
        if term.shape != (n_states,):
            raise ValueError("terminal must have one flag per state")
        for s in np.flatnonzero(term):
            if np.any(np.abs(P[s, :, s] - 1.0) > PROB_ATOL) or np.any(R[s] != 0.0):
                raise ValueError(f"terminal state {s} must self-loop with reward 0")
        if self.initial_distribution is None:
            init = np.full(n_states, 1.0 / n_states)
        else:
            init = np.asarray(self.initial_distribution, float)
        if init.shape != (n_states,):
            raise ValueError("initial_distribution must have one entry per state")
        _check_simplex(init, PROB_ATOL, "initial_distribution")
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", R)
        object.__setattr__(self, "discount", float(self.discount))
        object.__setattr__(self, "terminal", _frozen(term, bool))
        object.__setattr__(self, "initial_distribution", _frozen(init))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def with_reward(self, reward) -> "Mdp":
        return Mdp(self.transition, reward, self.discount, self.terminal,
                   self.initial_distribution, self.name)

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "discount": self.discount,
            "terminal": self.terminal.tolist(),
            "initial_distribution": self.initial_distribution.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict, name: str = "mdp") -> "Mdp":
        mdp = cls(
            transition=data["transition"],
            reward=data["reward"],
            discount=data["discount"],
            terminal=data["terminal"],
            initial_distribution=data["initial_distribution"],
            name=name,
        )
        if (mdp.n_states, mdp.n_actions) != (data["n_states"], data["n_actions"]):
            raise ValueError("n_states/n_actions disagree with the tensors")
        return mdp

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def loads(cls, text: str, name: str = "mdp") -> "Mdp":
        return cls.from_dict(json.loads(text), name=name)


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    """Per-state action distribution; rows of ``probs`` are simplex points."""

    probs: np.ndarray

    def __post_init__(self):
        p = _frozen(self.probs)
        if p.ndim != 2:
            raise ValueError("probs must be a (n_states, n_actions) matrix")
        _check_simplex(p, PROB_ATOL, "policy")
        object.__setattr__(self, "probs", p)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "TabularPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def from_logits(cls, logits) -> "TabularPolicy":
        return cls(softmax(np.asarray(logits, float)))

    @classmethod
    def constant(cls, row, n_states: int) -> "TabularPolicy":
        return cls(np.tile(np.asarray(row, float), (n_states, 1)))

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]

    def __getitem__(self, s) -> np.ndarray:
        return self.probs[s]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """A logged unroll: states, actions, rewards and the behaviour rows mu(.|s_t).

    ``final_state`` is the state reached after the last transition; when
    ``terminal`` is set it is a terminal state and bootstraps with value 0.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    behaviour: np.ndarray
    final_state: int
    terminal: bool
    behaviour_id: Hashable = 0
    episode_id: int = -1
    first_step: int = 0

    def __post_init__(self):
        states = _frozen(self.states, np.int64)
        actions = _frozen(self.actions, np.int64)
        rewards = _frozen(self.rewards)
        beh = np.array(self.behaviour, float)
        n = len(states)
        if beh.size == 0:
            beh = beh.reshape(0, beh.shape[-1] if beh.ndim == 2 else 0)
        if len(actions) != n or len(rewards) != n or beh.shape[0] != n:
            raise ValueError("states, actions, rewards and behaviour rows must align")
        if n:
            _check_simplex(beh, DOWNSTREAM_ATOL, "behaviour")
            taken = beh[np.arange(n), actions]
            if np.any(taken <= 0.0):
                t = int(np.argmax(taken <= 0.0))
                raise ValueError(f"behaviour probability of the taken action is zero at step {t}")
        beh.setflags(write=False)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)
        object.__setattr__(self, "rewards", rewards)
        object.__setattr__(self, "behaviour", beh)
        object.__setattr__(self, "final_state", int(self.final_state))
        object.__setattr__(self, "terminal", bool(self.terminal))

    @classmethod
    def _trusted(cls, states, actions, rewards, behaviour, final_state, terminal, behaviour_id=0,
                 episode_id=-1, first_step=0) -> "Trajectory":
        """Skip validation for data produced by this package's own actors and slices."""
        obj = object.__new__(cls)
        arrays = (("states", states, np.int64), ("actions", actions, np.int64),
                  ("rewards", rewards, float), ("behaviour", behaviour, float))
        for name, value, dtype in arrays:
            arr = np.asarray(value, dtype)
            if arr.flags.writeable:
                arr = arr.copy()
                arr.setflags(write=False)
            object.__setattr__(obj, name, arr)
        for name, value in (("final_state", int(final_state)), ("terminal", bool(terminal)),
                            ("behaviour_id", behaviour_id), ("episode_id", episode_id),
                            ("first_step", first_step)):
            object.__setattr__(obj, name, value)
        return obj

    def __len__(self) -> int:
        return len(self.states)

    @property
    def start_state(self) -> int:
        return int(self.states[0]) if len(self) else self.final_state

    @property
    def next_states(self) -> np.ndarray:
        return np.append(self.states[1:], self.final_state)

    @property
    def transitions(self) -> Iterator[tuple[int, int, float, np.ndarray]]:
        for t in range(len(self)):
            yield int(self.states[t]), int(self.actions[t]), float(self.rewards[t]), self.behaviour[t]

    def slice(self, start: int, stop: int | None = None) -> "Trajectory":
        """Contiguous sub-trajectory; ``terminal`` only survives on the tail slice."""
        n = len(self)
        stop = n if stop is None else min(stop, n)
        if not 0 <= start <= stop:
            raise IndexError(f"bad slice [{start}:{stop}] of length {n}")
        final = self.final_state if stop == n else int(self.states[stop])
        return Trajectory._trusted(
            self.states[start:stop], self.actions[start:stop], self.rewards[start:stop],
            self.behaviour[start:stop], final, self.terminal and stop == n,
            self.behaviour_id, self.episode_id, self.first_step + start,
        )

    def with_actions(self, actions) -> "Trajectory":
        return Trajectory(self.states, actions, self.rewards, self.behaviour, self.final_state,
                          self.terminal, self.behaviour_id, self.episode_id, self.first_step)


def policy_matrices(mdp: Mdp, policy: TabularPolicy) -> tuple[np.ndarray, np.ndarray]:
    """State-to-state kernel P_pi and expected reward r_pi."""
    if policy.probs.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"policy shape {policy.probs.shape} does not match the MDP")
    P_pi = np.einsum("sa,sat->st", policy.probs, mdp.transition)
    r_pi = np.einsum("sa,sa->s", policy.probs, mdp.reward)
    return P_pi, r_pi


def solve_v_exact(mdp: Mdp, policy: TabularPolicy) -> np.ndarray:
    """V^pi from the linear system (I - gamma P_pi) V = r_pi."""
    P_pi, r_pi = policy_matrices(mdp, policy)
    A = np.eye(mdp.n_states) - mdp.discount * P_pi
    try:
        return np.linalg.solve(A, r_pi)
    except np.linalg.LinAlgError as exc:  # unreachable for discount < 1
        raise RuntimeError("policy evaluation system is singular") from exc


def solve_q_exact(mdp: Mdp, policy: TabularPolicy) -> np.ndarray:
    v = solve_v_exact(mdp, policy)
    return mdp.reward + mdp.discount * mdp.transition @ v


def solve_optimal(mdp: Mdp, tol: float = 1e-12, max_iter: int = 100_000) -> tuple[np.ndarray, np.ndarray]:
    """Optimal (V*, Q*) by policy iteration."""
    policy = np.zeros(mdp.n_states, dtype=int)
    eye = np.eye(mdp.n_actions)
    for _ in range(max_iter):
        q = solve_q_exact(mdp, TabularPolicy(eye[policy]))
        best = q.max(axis=1)
        keep = q[np.arange(mdp.n_states), policy] >= best - tol
        if keep.all():
            return q[np.arange(mdp.n_states), policy], q
        policy = np.where(keep, policy, q.argmax(axis=1))
    raise RuntimeError("policy iteration did not converge")


def bellman_residual(mdp: Mdp, policy: TabularPolicy, v: np.ndarray) -> float:
    P_pi, r_pi = policy_matrices(mdp, policy)
    return float(np.max(np.abs(r_pi + mdp.discount * P_pi @ v - v)))


class StationaryDistributionError(ValueError):
    pass


def state_distribution(mdp: Mdp, policy: TabularPolicy,
                       kind: Literal["discounted", "stationary"] = "discounted") -> np.ndarray:
    """State visitation distribution d^pi.

    ``discounted``: (1 - gamma) sum_k gamma^k init P_pi^k.
    ``stationary``: the unique stationary distribution of P_pi; raises if the
    chain has more than one closed class.
    """
    P_pi, _ = policy_matrices(mdp, policy)
    n = mdp.n_states
    if kind == "discounted":
        g = mdp.discount
        d = (1.0 - g) * np.linalg.solve((np.eye(n) - g * P_pi).T, mdp.initial_distribution)
        return d / d.sum()
    if kind not in ("stationary", "undiscounted-stationary"):
        raise ValueError(f"unknown state distribution kind {kind!r}")
    adj = P_pi > 0
    n_comp, labels = connected_components(adj, directed=True, connection="strong")
    closed = []
    for c in range(n_comp):
        members = labels == c
        if not adj[members][:, ~members].any():
            closed.append(np.flatnonzero(members).tolist())
    if len(closed) != 1:
        raise StationaryDistributionError(
            f"stationary distribution is not unique; closed classes: {closed}")
    members = np.array(closed[0])
    sub = P_pi[np.ix_(members, members)]
    m = len(members)
    A = np.vstack([sub.T - np.eye(m), np.ones((1, m))])
    b = np.zeros(m + 1)
    b[-1] = 1.0
    x, *_ = np.linalg.lstsq(A, b, rcond=None)
    d = np.zeros(n)
    d[members] = np.clip(x, 0.0, None)
    return d / d.sum()


def _draw(cdf_row: np.ndarray, u: float) -> int:
    i = int(np.searchsorted(cdf_row, u, side="right"))
    return min(i, len(cdf_row) - 1)


def sample_episode(mdp: Mdp, policy: TabularPolicy, rng_seed: int, max_steps: int,
                   start_state: int | None = None, behaviour_id: Hashable = 0) -> Trajectory:
    """Roll out ``policy`` until a terminal state or ``max_steps`` transitions.

    A pure function of its arguments: the same seed gives a bit-identical trajectory.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    rng = np.random.default_rng(rng_seed)
    probs = policy.probs
    pol_cdf = np.cumsum(probs, axis=1)
    trans_cdf = np.cumsum(mdp.transition, axis=2)
    s = _draw(np.cumsum(mdp.initial_distribution), rng.random()) if start_state is None else int(start_state)
    states, actions, rewards = [], [], []
    for _ in range(max_steps):
        if mdp.terminal[s]:
            break
        a = _draw(pol_cdf[s], rng.random())
        while probs[s, a] <= 0.0:  # float edge of the cdf
            a -= 1
        states.append(s)
        actions.append(a)
        rewards.append(mdp.reward[s, a])
        s = _draw(trans_cdf[s, a], rng.random())
    n = len(states)
    return Trajectory(states, actions, rewards, probs[states].reshape(n, mdp.n_actions),
                      s, bool(mdp.terminal[s]), behaviour_id)


@dataclass
class EpisodeRunner:
    """Stateful actor over one environment; emits unrolls that never cross episode boundaries.

    Finished episodes are returned whole so they can be stored in replay.
    """

    mdp: Mdp
    rng: np.random.Generator
    max_episode_steps: int
    behaviour_id: Hashable = 0
    _state: int = field(default=-1, init=False)
    _t: int = field(default=0, init=False)
    _episode: list = field(default_factory=list, init=False)
    _episode_return: float = field(default=0.0, init=False)
    _episode_counter: int = field(default=0, init=False)
    _succ: list = field(default=None, init=False, repr=False)
    _init_cdf: np.ndarray = field(default=None, init=False, repr=False)

    def __post_init__(self):
        # sparse successor lists with cumulative probabilities, for bisect
        P = self.mdp.transition
        self._succ = [[(np.flatnonzero(P[s, a]).tolist(), np.cumsum(P[s, a][P[s, a] > 0]).tolist())
                       for a in range(self.mdp.n_actions)] for s in range(self.mdp.n_states)]
        self._reward = self.mdp.reward.tolist()
        self._terminal = self.mdp.terminal.tolist()
        self._init_cdf = np.cumsum(self.mdp.initial_distribution)
        self._reset()

    def _reset(self):
        self._state = _draw(self._init_cdf, self.rng.random())
        self._t = 0
        self._episode = []
        self._episode_return = 0.0
        self._episode_counter += 1

    def unroll(self, probs: np.ndarray, length: int):
        """Act for up to ``length`` steps with policy rows ``probs``.

        Returns ``(unroll, finished)`` where ``finished`` is a list of
        ``(episode_trajectory, undiscounted_return)`` completed during the call.
        """
        probs = np.asarray(probs, float)
        cdf = np.cumsum(probs, axis=1).tolist()
        n_act = probs.shape[1]
        finished = []
        states, actions, rewards = [], [], []
        start_t = self._t
        s = self._state
        u = self.rng.random(2 * length).tolist()
        for i in range(length):
            a = min(bisect.bisect_right(cdf[s], u[2 * i]), n_act - 1)
            while probs[s, a] <= 0.0:
                a -= 1
            r = self._reward[s][a]
            states.append(s)
            actions.append(a)
            rewards.append(r)
            self._episode_return += r
            succ, cum = self._succ[s][a]
            s = succ[min(bisect.bisect_right(cum, u[2 * i + 1]), len(succ) - 1)]
            self._t += 1
            if self._terminal[s] or self._t >= self.max_episode_steps:
                break
        terminal = self._terminal[s]
        done = terminal or self._t >= self.max_episode_steps
        beh = probs[states]
        traj = Trajectory._trusted(states, actions, rewards, beh, s, terminal,
                                   self.behaviour_id, self._episode_counter, start_t)
        self._episode.append(traj)
        if done:
            parts = self._episode
            episode = Trajectory._trusted(
                np.concatenate([p.states for p in parts]), np.concatenate([p.actions for p in parts]),
                np.concatenate([p.rewards for p in parts]), np.concatenate([p.behaviour for p in parts]),
                s, terminal, self.behaviour_id, self._episode_counter, 0)
            finished.append((episode, self._episode_return))
            self._reset()
        else:
            self._state = s
        return traj, finished
