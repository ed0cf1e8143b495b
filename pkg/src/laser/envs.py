"""Named environment zoo: every experiment runs on one of these."""

from __future__ import annotations

from typing import Callable

import numpy as np

from laser.mdp import Mdp


def _absorbing(P: np.ndarray, s: int) -> None:
    P[s] = 0.0
    P[s, :, s] = 1.0


def prop2_bandit(discount: float = 0.9) -> Mdp:
    """Two-action decision state followed by termination, Q* = (2, 5).

    State 0 is the decision state; state 1 is terminal.
    """
    P = np.zeros((2, 2, 2))
    P[0, :, 1] = 1.0
    _absorbing(P, 1)
    R = np.array([[2.0, 5.0], [0.0, 0.0]])
    return Mdp(P, R, discount, terminal=[False, True], initial_distribution=[1.0, 0.0],
               name="prop2")


def two_armed_bandit(discount: float = 0.9, rewards=(0.2, 1.0)) -> Mdp:
    P = np.zeros((2, 2, 2))
    P[0, :, 1] = 1.0
    _absorbing(P, 1)
    R = np.array([list(rewards), [0.0, 0.0]])
    return Mdp(P, R, discount, terminal=[False, True], initial_distribution=[1.0, 0.0],
               name="bandit")


def chain(n: int = 5, discount: float = 0.9, reward: float = 1.0) -> Mdp:
    """Corridor of ``n`` states; action 1 moves right, action 0 moves left.

    Stepping right from the last corridor state pays ``reward`` and terminates.
    """
    S = n + 1
    P = np.zeros((S, 2, S))
    R = np.zeros((S, 2))
    for s in range(n):
        P[s, 0, max(s - 1, 0)] = 1.0
        P[s, 1, s + 1] = 1.0
    R[n - 1, 1] = reward
    _absorbing(P, n)
    init = np.zeros(S)
    init[0] = 1.0
    return Mdp(P, R, discount, terminal=[False] * n + [True], initial_distribution=init,
               name="chain")


def deterministic_chain(rewards=(1.0, 2.0, 3.0), discount: float = 0.9) -> Mdp:
    """Single-action chain visiting ``len(rewards)`` states before terminating."""
    n = len(rewards)
    P = np.zeros((n + 1, 1, n + 1))
    R = np.zeros((n + 1, 1))
    for s in range(n):
        P[s, 0, s + 1] = 1.0
        R[s, 0] = rewards[s]
    _absorbing(P, n)
    init = np.zeros(n + 1)
    init[0] = 1.0
    return Mdp(P, R, discount, terminal=[False] * n + [True], initial_distribution=init,
               name="det-chain")


def garnet(n_states: int = 5, n_actions: int = 3, branching: int = 2, seed: int = 0,
           discount: float = 0.9, terminal_prob: float = 0.0) -> Mdp:
    """Random MDP with ``branching`` successors per (s, a) and N(0, 1) rewards.

    With ``terminal_prob`` > 0 an extra absorbing state is appended and every
    transition ends the episode with that probability.
    """
    rng = np.random.default_rng(seed)
    branching = min(branching, n_states)
    extra = 1 if terminal_prob > 0 else 0
    S = n_states + extra
    P = np.zeros((S, n_actions, S))
    for s in range(n_states):
        for a in range(n_actions):
            succ = rng.choice(n_states, size=branching, replace=False)
            P[s, a, succ] = rng.dirichlet(np.ones(branching))
    R = np.zeros((S, n_actions))
    R[:n_states] = rng.normal(size=(n_states, n_actions))
    terminal = [False] * S
    if extra:
        P[:n_states] *= 1.0 - terminal_prob
        P[:n_states, :, n_states] = terminal_prob
        _absorbing(P, n_states)
        terminal[-1] = True
    init = np.zeros(S)
    init[:n_states] = 1.0 / n_states
    return Mdp(P, R, discount, terminal=terminal, initial_distribution=init,
               name=f"garnet-{seed}")


MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))


def gridworld_suite(n_tasks: int = 4, size: int = 6, distractor: float = 0.3, goal: float = 1.0,
                    step_cost: float = 0.0, slip: float = 0.0, discount: float = 0.95,
                    seed: int = 0) -> Mdp:
    """Multi-task gridworld: ``n_tasks`` open ``size`` x ``size`` rooms in one MDP.

    Each episode starts in a uniformly chosen task. A task's start sits in
    one corner; a distractor exit paying ``distractor`` lies one step away
    and the goal paying ``goal`` sits in the opposite corner. Tasks differ by
    the corner they start in, so a single state-action table must learn four
    distinct routes. With probability ``slip`` a move goes in a uniformly
    random direction.
    """
    rng = np.random.default_rng(seed)
    cells = size * size
    S = n_tasks * cells + 1
    term = S - 1
    A = len(MOVES)
    P = np.zeros((S, A, S))
    R = np.zeros((S, A))
    init = np.zeros(S)
    corners = [(0, 0), (0, size - 1), (size - 1, size - 1), (size - 1, 0)]
    for task in range(n_tasks):
        base = task * cells
        k = (task + int(rng.integers(4))) % 4 if seed else task % 4
        sr, sc = corners[k]
        gr, gc = corners[(k + 2) % 4]
        # distractor: the cell next to the start along the row
        dr, dc = sr, sc + (1 if sc == 0 else -1)
        init[base + sr * size + sc] = 1.0
        for r in range(size):
            for c in range(size):
                s = base + r * size + c
                if (r, c) in ((gr, gc), (dr, dc)):
                    # exits: any action pays and terminates
                    P[s, :, term] = 1.0
                    R[s, :] = goal if (r, c) == (gr, gc) else distractor
                    continue
                for a in range(A):
                    outcomes = [(1.0 - slip, a)] + [(slip / A, b) for b in range(A)]
                    for p, b in outcomes:
                        if p == 0.0:
                            continue
                        nr, nc = r + MOVES[b][0], c + MOVES[b][1]
                        if not (0 <= nr < size and 0 <= nc < size):
                            nr, nc = r, c
                        P[s, a, base + nr * size + nc] += p
                    R[s, a] = -step_cost
    _absorbing(P, term)
    terminal = np.zeros(S, bool)
    terminal[term] = True
    init /= init.sum()
    return Mdp(P, R, discount, terminal=terminal, initial_distribution=init, name="gridworld4")


ENVIRONMENTS: dict[str, Callable[..., Mdp]] = {
    "prop2": lambda seed=0, **kw: prop2_bandit(**kw),
    "bandit": lambda seed=0, **kw: two_armed_bandit(**kw),
    "chain": lambda seed=0, **kw: chain(**kw),
    "det-chain": lambda seed=0, **kw: deterministic_chain(**kw),
    "garnet": lambda seed=0, **kw: garnet(seed=seed, **kw),
    "gridworld4": lambda seed=0, **kw: gridworld_suite(seed=seed, **kw),
}


def make_env(name: str, seed: int = 0, **params) -> Mdp:
    try:
        factory = ENVIRONMENTS[name]
    except KeyError:
        raise KeyError(f"unknown environment {name!r}; known: {sorted(ENVIRONMENTS)}") from None
    return factory(seed=seed, **params)
