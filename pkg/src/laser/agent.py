"""Tabular softmax actor-critic learning from mixed online and replayed data.

One agent owns a logits table and a value table and runs rounds of
"act, then take one SGD step". A sweep runs several agents side by side,
optionally writing to and sampling from a single replay buffer.
"""

from __future__ import annotations

import csv
import logging
import math
import queue
import threading
from dataclasses import dataclass, field, replace
from typing import Hashable, Literal, Sequence

import numpy as np

from laser.envs import make_env
from laser.estimators import Advantage, ClipConfig, PaddedBatch, advantages, logit_gradient, vtrace_batch
from laser.mdp import EpisodeRunner, Mdp, TabularPolicy, Trajectory, softmax, solve_v_exact
from laser.replay import Batch, BatchSpec, ReplayBuffer, compose_batch
from laser.trust_region import RelevanceConfig, kl_relevance_rows

log = logging.getLogger(__name__)

CURVE_HEADER = ("env_steps", "mean_return", "mask_acceptance", "value_loss", "policy_loss", "policy_value")


@dataclass
class AgentParams:
    policy_logits: np.ndarray
    value_table: np.ndarray
    iteration: int = 0

    @classmethod
    def zeros(cls, n_states: int, n_actions: int) -> "AgentParams":
        return cls(np.zeros((n_states, n_actions)), np.zeros(n_states))

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.policy_logits)

    def policy(self) -> TabularPolicy:
        return TabularPolicy(self.probs)

    def copy(self) -> "AgentParams":
        return AgentParams(self.policy_logits.copy(), self.value_table.copy(), self.iteration)


@dataclass(frozen=True)
class HyperParams:
    """Learner and actor settings of one agent.

    ``trust_region=None`` disables the relevance mask. ``advantage`` selects
    the policy-gradient coefficient (see ``estimators.advantages``);
    ``learn_value=False`` freezes the value table at its initial contents.
    Each learner step is paid for by ``T * max(B * alpha, actor_unrolls_per_step)``
    env steps, so with ``online_fraction == 0`` the actor still feeds replay.
    """

    learning_rate: float = 0.5
    entropy_cost: float = 0.01
    online_fraction: float = 0.125
    clip: ClipConfig = ClipConfig()
    trust_region: RelevanceConfig | None = None
    unroll_length: int = 19
    batch_size: int = 8
    discount: float | None = None
    value_cost: float = 1.0
    advantage: Advantage = "target"
    learn_value: bool = True
    actor_unrolls_per_step: int = 1
    max_episode_steps: int = 200

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.entropy_cost < 0 or self.value_cost < 0:
            raise ValueError("entropy_cost and value_cost must be non-negative")
        if self.discount is not None and not 0.0 <= self.discount < 1.0:
            raise ValueError("discount must lie in [0, 1)")
        if self.actor_unrolls_per_step < 1 or self.max_episode_steps < 1:
            raise ValueError("actor_unrolls_per_step and max_episode_steps must be positive")
        if self.advantage not in ("target", "td", "q"):
            raise ValueError(f"unknown advantage form {self.advantage!r}")
        BatchSpec(self.batch_size, self.online_fraction, self.unroll_length)

    @property
    def batch_spec(self) -> BatchSpec:
        return BatchSpec(self.batch_size, self.online_fraction, self.unroll_length)

    @property
    def unrolls_per_round(self) -> int:
        return max(self.batch_spec.n_online, self.actor_unrolls_per_step)

    def with_(self, **changes) -> "HyperParams":
        return replace(self, **changes)


@dataclass
class StepDiagnostics:
    mask_acceptance: float
    acceptance_implied: float
    acceptance_behaviour: float
    mean_abs_advantage: float
    value_loss: float
    policy_loss: float
    entropy: float
    noop: bool


@dataclass
class LearnerTargets:
    """Everything a learner step treats as constant: indices, mask and stop-gradient targets."""

    states: np.ndarray
    actions: np.ndarray
    weight: np.ndarray          # mask / B, zero on padding
    entropy_weight: np.ndarray  # weight restricted to online trajectories
    vs: np.ndarray
    pg_coef: np.ndarray         # rho * A
    diagnostics: dict = field(default_factory=dict)


def _batch_parts(batch) -> tuple[list[Trajectory], np.ndarray]:
    if isinstance(batch, Batch):
        return batch.trajectories, np.asarray(batch.online, bool)
    trajs = list(batch)
    return trajs, np.zeros(len(trajs), bool)


def compute_targets(params: AgentParams, batch, hp: HyperParams, discount: float) -> LearnerTargets:
    trajs, online = _batch_parts(batch)
    probs = params.probs
    pb = PaddedBatch.from_trajectories(trajs, probs.shape[1], online)
    valid = pb.valid
    rho_bar = hp.clip.rho_bar
    pi_rows = probs[pb.states]
    acc_impl = (kl_relevance_rows(pi_rows, pb.behaviour, rho_bar, "kl_implied") <
                (hp.trust_region.threshold_b if hp.trust_region else math.inf)) & valid
    acc_beh = (kl_relevance_rows(pi_rows, pb.behaviour, rho_bar, "kl_behaviour") <
               (hp.trust_region.threshold_b if hp.trust_region else math.inf)) & valid
    if hp.trust_region is None:
        mask = None
        m = valid
    else:
        m = acc_impl if hp.trust_region.relevance_kind == "kl_implied" else acc_beh
        mask = m
    out = vtrace_batch(pb, probs, params.value_table, discount, hp.clip, mask)
    adv = advantages(out, hp.advantage)
    B = len(trajs)
    w = m.astype(float) / B
    n_valid = max(int(valid.sum()), 1)
    diag = {
        "mask_acceptance": float(m.sum() / n_valid),
        "acceptance_implied": float(acc_impl.sum() / n_valid),
        "acceptance_behaviour": float(acc_beh.sum() / n_valid),
        "mean_abs_advantage": float(np.abs(adv)[m].mean()) if m.any() else 0.0,
    }
    return LearnerTargets(pb.states, pb.actions, w, w * pb.online[:, None], out.vs,
                          np.where(m, out.rho * adv, 0.0), diag)


def loss_and_grads(logits: np.ndarray, values: np.ndarray, tg: LearnerTargets,
                   hp: HyperParams) -> tuple[float, np.ndarray, np.ndarray, dict]:
    """Batch loss and its exact gradients w.r.t. (logits, values) with targets held fixed.

    loss = sum_bt w_bt [c_v/2 (v_bt - V(s_bt))^2 - rho A log pi(a_bt|s_bt)] - c_H sum_bt w_bt^online H(pi(.|s_bt))
    """
    S, A = logits.shape
    s, a = tg.states, tg.actions
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(logp)
    ent = -(probs * logp).sum(axis=1)
    diff = values[s] - tg.vs
    value_loss = 0.5 * hp.value_cost * float(np.sum(tg.weight * diff ** 2))
    policy_loss = -float(np.sum(tg.weight * tg.pg_coef * logp[s, a]))
    ent_term = float(np.sum(tg.entropy_weight * ent[s]))
    loss = value_loss + policy_loss - hp.entropy_cost * ent_term

    g_v = np.zeros(S)
    np.add.at(g_v, s.ravel(), (hp.value_cost * tg.weight * diff).ravel())
    g_theta = -logit_gradient(S, probs, s, a, tg.weight * tg.pg_coef)
    if hp.entropy_cost:
        # d H / d theta_j = -pi_j (log pi_j + H)
        ew = (hp.entropy_cost * tg.entropy_weight).ravel()
        ss = s.ravel()
        np.add.at(g_theta, ss, ew[:, None] * probs[ss] * (logp[ss] + ent[ss, None]))
    parts = {"value_loss": value_loss, "policy_loss": policy_loss,
             "entropy": float(ent_term / max(tg.entropy_weight.sum(), 1e-300)) if tg.entropy_weight.any() else 0.0}
    return loss, g_theta, g_v, parts


def learner_step(params: AgentParams, batch, hp: HyperParams,
                 discount: float | None = None) -> tuple[AgentParams, StepDiagnostics]:
    """One SGD step on the masked actor-critic loss; returns new parameters."""
    gamma = hp.discount if discount is None else discount
    if gamma is None:
        raise ValueError("discount must be given by the hyper-parameters or the caller")
    tg = compute_targets(params, batch, hp, gamma)
    noop = not tg.weight.any()
    if noop:
        d = tg.diagnostics
        return (AgentParams(params.policy_logits.copy(), params.value_table.copy(), params.iteration + 1),
                StepDiagnostics(d["mask_acceptance"], d["acceptance_implied"], d["acceptance_behaviour"],
                                0.0, 0.0, 0.0, 0.0, True))
    _, g_theta, g_v, parts = loss_and_grads(params.policy_logits, params.value_table, tg, hp)
    if not (np.all(np.isfinite(g_theta)) and np.all(np.isfinite(g_v))):
        raise FloatingPointError("non-finite gradient in learner step")
    logits = params.policy_logits - hp.learning_rate * g_theta
    values = params.value_table - hp.learning_rate * g_v if hp.learn_value else params.value_table.copy()
    d = tg.diagnostics
    return (AgentParams(logits, values, params.iteration + 1),
            StepDiagnostics(d["mask_acceptance"], d["acceptance_implied"], d["acceptance_behaviour"],
                            d["mean_abs_advantage"], parts["value_loss"], parts["policy_loss"],
                            parts["entropy"], False))


# -- single agent --------------------------------------------------------------


@dataclass
class Curve:
    """Learning curve averaged in fixed env-step buckets."""

    interval: int
    rows: list[dict]

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], float)

    @property
    def env_steps(self) -> np.ndarray:
        return self.column("env_steps")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(CURVE_HEADER))
            w.writeheader()
            for r in self.rows:
                w.writerow({k: _fmt(r[k]) for k in CURVE_HEADER})


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


class _CurveRecorder:
    def __init__(self, interval: int, total_steps: int, mdp: Mdp, discount: float):
        self.interval = interval
        self.n = max(1, math.ceil(total_steps / interval))
        self.ret_sum = np.zeros(self.n)
        self.ret_cnt = np.zeros(self.n)
        self.diag = np.zeros((self.n, 3))
        self.diag_cnt = np.zeros(self.n)
        self.value = np.full(self.n, np.nan)
        self.mdp = mdp
        self.discount = discount
        self._lock = threading.Lock()

    def _bucket(self, step: int) -> int:
        return min(max(step - 1, 0) // self.interval, self.n - 1)

    def episode(self, step: int, ret: float) -> None:
        with self._lock:
            b = self._bucket(step)
            self.ret_sum[b] += ret
            self.ret_cnt[b] += 1

    def learner(self, step: int, d: StepDiagnostics) -> None:
        with self._lock:
            b = self._bucket(step)
            self.diag[b] += (d.mask_acceptance, d.value_loss, d.policy_loss)
            self.diag_cnt[b] += 1

    def policy(self, step_before: int, step_after: int, probs: np.ndarray) -> None:
        """Exact start-distribution value of ``probs`` at every bucket edge crossed."""
        b0 = step_before // self.interval
        b1 = step_after // self.interval
        if b1 > b0 and b0 < self.n:
            mdp = self.mdp if self.discount == self.mdp.discount else replace_discount(self.mdp, self.discount)
            v = float(mdp.initial_distribution @ solve_v_exact(mdp, TabularPolicy(probs)))
            with self._lock:
                self.value[b0:min(b1, self.n)] = v

    def curve(self) -> Curve:
        rows = []
        for b in range(self.n):
            with np.errstate(invalid="ignore"):
                mr = self.ret_sum[b] / self.ret_cnt[b] if self.ret_cnt[b] else math.nan
                dg = self.diag[b] / self.diag_cnt[b] if self.diag_cnt[b] else [math.nan] * 3
            rows.append({"env_steps": (b + 1) * self.interval, "mean_return": float(mr),
                         "mask_acceptance": float(dg[0]), "value_loss": float(dg[1]),
                         "policy_loss": float(dg[2]), "policy_value": float(self.value[b])})
        return Curve(self.interval, rows)


def replace_discount(mdp: Mdp, discount: float) -> Mdp:
    return Mdp(mdp.transition, mdp.reward, discount, mdp.terminal, mdp.initial_distribution, mdp.name)


@dataclass
class AgentResult:
    curve: Curve
    params: AgentParams
    env_steps: int
    learner_steps: int
    noop_steps: int
    episodes: list[tuple[int, float]]


class Agent:
    """An actor and a learner advancing in rounds: one round = act, then one SGD step.

    ``B * alpha`` of a round's unrolls feed the batch fresh; the rest reach
    the learner only through replay. Whole episodes enter the buffer when
    they finish. When ``pinned_behaviour`` is given, a second actor following
    that fixed policy spends ``T * actor_unrolls_per_step`` env steps per
    round and is the only source of replay; the agent's own unrolls are then
    used online only.
    """

    def __init__(self, mdp: Mdp, hp: HyperParams, buffer: ReplayBuffer | None, seed,
                 agent_id: Hashable = 0, total_steps: int = 10 ** 5, eval_interval: int = 1000,
                 pinned_behaviour: TabularPolicy | None = None, init: AgentParams | None = None,
                 record_policy_value: bool = True):
        self.mdp = mdp
        self.hp = hp
        self.spec = hp.batch_spec
        self.discount = mdp.discount if hp.discount is None else hp.discount
        if self.spec.n_replay and buffer is None:
            raise ValueError("an agent with a replayed share needs a replay buffer")
        self.buffer = buffer
        self.agent_id = agent_id
        ss = np.random.SeedSequence(_seed_entropy(seed, agent_id))
        a_seq, l_seq, p_seq = ss.spawn(3)
        self.runner = EpisodeRunner(mdp, np.random.default_rng(a_seq), hp.max_episode_steps, agent_id)
        self.learner_rng = np.random.default_rng(l_seq)
        self.pinned = pinned_behaviour
        self.pinned_runner = (EpisodeRunner(mdp, np.random.default_rng(p_seq), hp.max_episode_steps,
                                            ("pinned", agent_id)) if pinned_behaviour is not None else None)
        self.params = init.copy() if init is not None else AgentParams.zeros(mdp.n_states, mdp.n_actions)
        self.total_steps = total_steps
        self.env_steps = 0
        self.learner_steps = 0
        self.noop_steps = 0
        self.episodes: list[tuple[int, float]] = []
        self.recorder = _CurveRecorder(eval_interval, total_steps, mdp, self.discount)
        self.record_policy_value = record_policy_value
        self._published = self.params.probs

    @property
    def done(self) -> bool:
        return self.env_steps >= self.total_steps

    def _act(self, runner: EpisodeRunner, probs: np.ndarray, own: bool, length: int) -> Trajectory:
        traj, finished = runner.unroll(probs, length)
        self.env_steps += len(traj)
        for episode, ret in finished:
            if self.buffer is not None and (self.pinned is None or not own):
                self.buffer.add_episode(episode, runner.behaviour_id)
            if own:
                self.episodes.append((self.env_steps, ret))
                self.recorder.episode(self.env_steps, ret)
        return traj

    def act_round(self) -> list[Trajectory]:
        """Actor half of a round; returns the fresh unrolls destined for the batch.

        A round spends exactly ``T * unrolls_per_round`` env steps. Episodes
        shorter than T yield short unrolls, so the actor keeps unrolling
        until that quota is met; the first ``B * alpha`` unrolls go online.
        """
        probs = self._published
        T = self.hp.unroll_length
        n_on = self.spec.n_online
        quota = T * self.hp.unrolls_per_round
        online: list[Trajectory] = []
        used = 0
        while len(online) < n_on:
            online.append(self._act(self.runner, probs, True, T))
            used += len(online[-1])
        if self.pinned_runner is not None:
            quota = used + T * self.hp.actor_unrolls_per_step
            runner, rows, own = self.pinned_runner, self.pinned.probs, False
        else:
            runner, rows, own = self.runner, probs, True
        while used < quota:
            used += len(self._act(runner, rows, own, min(T, quota - used)))
        return online

    def learn(self, online: list[Trajectory], step_before: int) -> StepDiagnostics | None:
        if self.spec.n_replay and (self.buffer is None or len(self.buffer) == 0):
            return None
        batch = compose_batch(self.buffer, list(online), self.spec, self.learner_rng, insert_online=False)
        self.params, diag = learner_step(self.params, batch, self.hp, self.discount)
        self.learner_steps += 1
        self.noop_steps += diag.noop
        self.recorder.learner(self.env_steps, diag)
        if self.record_policy_value:
            self.recorder.policy(step_before, self.env_steps, self.params.probs)
        self._published = self.params.probs
        return diag

    def round(self) -> int:
        before = self.env_steps
        online = self.act_round()
        self.learn(online, before)
        return self.env_steps - before

    def result(self) -> AgentResult:
        if self.record_policy_value and self.env_steps:
            self.recorder.policy(self.env_steps - 1, self.total_steps + self.recorder.interval,
                                 self.params.probs)
        return AgentResult(self.recorder.curve(), self.params, self.env_steps, self.learner_steps,
                           self.noop_steps, self.episodes)


def _seed_entropy(seed, agent_id) -> list[int]:
    tag = agent_id if isinstance(agent_id, int) else sum(ord(ch) for ch in str(agent_id)) + 10 ** 6
    return [int(seed), int(tag)]


def run_agent(env: Mdp | str, hp: HyperParams, replay: ReplayBuffer | int | None = None,
              total_steps: int = 10 ** 5, seed: int = 0, eval_interval: int = 1000,
              pinned_behaviour: TabularPolicy | None = None, init: AgentParams | None = None,
              env_params: dict | None = None) -> AgentResult:
    """Train one agent for ``total_steps`` env steps; bit-reproducible from the seed.

    ``replay`` is a buffer, a capacity for a fresh private buffer, or None
    (allowed only for purely online agents).
    """
    mdp = make_env(env, seed=seed, **(env_params or {})) if isinstance(env, str) else env
    buffer = ReplayBuffer(replay) if isinstance(replay, int) else replay
    agent = Agent(mdp, hp, buffer, seed, 0, total_steps, eval_interval, pinned_behaviour, init)
    while not agent.done:
        agent.round()
    return agent.result()


# -- sweeps ----------------------------------------------------------------------


def sweep_grid(base: HyperParams, lr_factors: Sequence[float] = (0.5, 1.0, 2.0),
               entropy_factors: Sequence[float] = (0.5, 1.0, 2.0)) -> list[HyperParams]:
    """Learning rate x entropy cost grid around ``base``."""
    return [base.with_(learning_rate=base.learning_rate * f, entropy_cost=base.entropy_cost * g)
            for f in lr_factors for g in entropy_factors]


@dataclass
class SweepConfig:
    agents: Sequence[HyperParams]
    shared_replay: bool = False
    replay_capacity: int = 10_000
    total_env_steps: int = 100_000
    environment: str = "gridworld4"
    seed: int = 0
    env_params: dict = field(default_factory=dict)
    eval_interval: int = 2000
    threaded: bool = False

    def __post_init__(self):
        if len(self.agents) < 1:
            raise ValueError("a sweep needs at least one agent")
        if self.replay_capacity < 1 or self.total_env_steps < 1 or self.eval_interval < 1:
            raise ValueError("replay_capacity, total_env_steps and eval_interval must be positive")


@dataclass
class SweepResult:
    agents: list[AgentResult]
    best: np.ndarray
    env_steps: np.ndarray
    max_lead: int
    buffer_sizes: list[int]

    def final_best(self, window: float = 0.2, column: str | None = None) -> float:
        """Mean of the sweep-best curve over the last ``window`` fraction of buckets."""
        curve = self.best if column is None else sweep_best([a.curve for a in self.agents], column)
        k = max(1, int(round(len(curve) * window)))
        tail = curve[-k:]
        return float(np.nanmean(tail)) if np.any(~np.isnan(tail)) else math.nan

    def steps_to_threshold(self, threshold: float, column: str | None = None) -> float:
        curve = self.best if column is None else sweep_best([a.curve for a in self.agents], column)
        hit = np.flatnonzero(np.nan_to_num(curve, nan=-np.inf) >= threshold)
        return float(self.env_steps[hit[0]]) if len(hit) else math.inf

    def write_csvs(self, directory, prefix: str = "agent") -> list[str]:
        import os
        paths = []
        for i, a in enumerate(self.agents):
            p = os.path.join(directory, f"{prefix}{i}.csv")
            a.curve.write_csv(p)
            paths.append(p)
        p = os.path.join(directory, f"{prefix}_sweep_summary.csv")
        with open(p, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["env_steps", "sweep_best_return"])
            for s, v in zip(self.env_steps, self.best):
                w.writerow([int(s), _fmt(float(v))])
        paths.append(p)
        return paths


def sweep_best(curves: Sequence[Curve], column: str = "mean_return") -> np.ndarray:
    data = np.array([c.column(column) for c in curves])
    with np.errstate(all="ignore"):
        out = np.full(data.shape[1], np.nan)
        has = ~np.all(np.isnan(data), axis=0)
        out[has] = np.nanmax(data[:, has], axis=0)
    return out


def _make_agents(cfg: SweepConfig):
    mdp = make_env(cfg.environment, seed=cfg.seed, **cfg.env_params)
    shared = ReplayBuffer(cfg.replay_capacity) if cfg.shared_replay else None
    agents = []
    for i, hp in enumerate(cfg.agents):
        buf = shared if cfg.shared_replay else (ReplayBuffer(cfg.replay_capacity) if hp.batch_spec.n_replay else None)
        agents.append(Agent(mdp, hp, buf, cfg.seed, i, cfg.total_env_steps, cfg.eval_interval))
    return agents


def run_sweep(cfg: SweepConfig) -> SweepResult:
    """Run every agent of the sweep at matched env-step rates.

    The default scheduler is deterministic: the agent with the fewest env
    steps always plays the next round, so no agent leads another by more than
    one round (at most B * T steps). ``threaded`` runs a real actor and
    learner thread per agent behind a shared step barrier instead.
    """
    agents = _make_agents(cfg)
    max_lead = _run_threaded(agents) if cfg.threaded else _run_lockstep(agents)
    results = [a.result() for a in agents]
    best = sweep_best([r.curve for r in results])
    bufs = []
    for a in agents:
        if a.buffer is not None and all(a.buffer is not b for b in bufs):
            bufs.append(a.buffer)
    return SweepResult(results, best, results[0].curve.env_steps, max_lead, [b.current_size for b in bufs])


def _run_lockstep(agents: list[Agent]) -> int:
    max_lead = 0
    active = list(agents)
    while active:
        i = min(range(len(active)), key=lambda k: (active[k].env_steps, k))
        active[i].round()
        if active[i].done:
            active.pop(i)
        if len(active) > 1:
            steps = [a.env_steps for a in active]
            max_lead = max(max_lead, max(steps) - min(steps))
    return max_lead


class StepBarrier:
    """Blocks an actor while it is more than ``lead`` env steps ahead of the slowest running agent."""

    def __init__(self, n: int, lead: int = 0):
        self.steps = [0] * n
        self.running = set(range(n))
        self.lead = lead
        self.max_lead = 0
        self._cv = threading.Condition()

    def wait_turn(self, i: int) -> None:
        with self._cv:
            self._cv.wait_for(lambda: self.steps[i] - min(self.steps[j] for j in self.running) <= self.lead)

    def advance(self, i: int, n: int) -> None:
        with self._cv:
            self.steps[i] += n
            if len(self.running) > 1:
                live = [self.steps[j] for j in self.running]
                self.max_lead = max(self.max_lead, max(live) - min(live))
            self._cv.notify_all()

    def finish(self, i: int) -> None:
        with self._cv:
            self.running.discard(i)
            self._cv.notify_all()


_STOP = object()


def _run_threaded(agents: list[Agent]) -> int:
    """Actor and learner threads per agent; actors publish unrolls on bounded queues.

    An actor starts a round only when no running agent has fewer env steps,
    which keeps every lead within one round as in the lock-step scheduler.
    Unroll contents depend on thread interleaving through the shared buffer,
    so this mode is not bit-reproducible.
    """
    barrier = StepBarrier(len(agents), 0)
    queues = [queue.Queue(maxsize=max(2, 2 * a.hp.unrolls_per_round)) for a in agents]
    errors: list[BaseException] = []

    def actor(i: int, a: Agent):
        try:
            while not a.done:
                barrier.wait_turn(i)
                before = a.env_steps
                online = a.act_round()
                barrier.advance(i, a.env_steps - before)
                queues[i].put((online, before))
        except BaseException as e:  # surfaced after join
            errors.append(e)
        finally:
            barrier.finish(i)
            queues[i].put(_STOP)

    def learner(i: int, a: Agent):
        try:
            while True:
                item = queues[i].get()
                if item is _STOP:
                    return
                online, before = item
                a.learn(online, before)
        except BaseException as e:
            errors.append(e)

    threads = []
    for i, a in enumerate(agents):
        threads.append(threading.Thread(target=actor, args=(i, a), daemon=True))
        threads.append(threading.Thread(target=learner, args=(i, a), daemon=True))
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return barrier.max_lead
