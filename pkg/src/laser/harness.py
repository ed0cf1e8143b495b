"""Named experiments, their acceptance predicates and the invariant verifier.

Every experiment writes one CSV per seed under ``output_dir/<name>/`` and a
``verdict.json`` whose contents are computed only from those per-seed rows.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import chisquare

from laser.agent import Agent, AgentParams, HyperParams, SweepConfig, compute_targets, loss_and_grads, run_sweep, sweep_grid
from laser.envs import garnet, prop2_bandit
from laser.estimators import (ClipConfig, implied_policy_table, min_alpha, omega, q_alpha, q_omega,
                              vtrace_return)
from laser.mdp import TabularPolicy, sample_episode, solve_q_exact, solve_v_exact
from laser.oracle import acceptance_matrix, central_difference, contraction_probe, vtrace_fixed_point
from laser.replay import Batch, ReplayBuffer
from laser.trust_region import RelevanceConfig, MaskedTrajectory, compute_mask, kl_relevance_rows

log = logging.getLogger(__name__)

OUT_DIR_ENV = "LASER_OUT_DIR"


class ExperimentError(ValueError):
    pass


# -- parameters --------------------------------------------------------------------


def _floats(text) -> tuple[float, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(float(x) for x in text)
    return tuple(float(x) for x in str(text).split(",") if x.strip())


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    if str(text).lower() in ("1", "true", "yes", "on"):
        return True
    if str(text).lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class Param:
    default: object
    parse: Callable
    doc: str


GRID_PARAMS = {
    "steps": Param(50_000, int, "env steps per agent"),
    "size": Param(5, int, "side length of each gridworld room"),
    "distractor": Param(0.3, float, "reward of the exit next to the start"),
    "learning_rate": Param(1.0, float, "base learning rate of the sweep grid"),
    "entropy_cost": Param(0.03, float, "base entropy cost of the sweep grid"),
    "lr_factors": Param((0.5, 2.0), _floats, "learning-rate multipliers of the sweep grid"),
    "entropy_factors": Param((0.5, 2.0), _floats, "entropy-cost multipliers of the sweep grid"),
    "capacity": Param(20_000, int, "replay capacity in transitions"),
    "advantage": Param("q", str, "policy-gradient coefficient: target, td or q"),
    "eval_interval": Param(5_000, int, "env steps per curve bucket"),
    "window": Param(0.2, float, "fraction of final buckets averaged for the final return"),
}


@dataclass(frozen=True)
class Experiment:
    name: str
    summary: str
    params: Mapping[str, Param]
    run_seed: Callable[[dict, int], tuple[list[str], list[list]]]
    verdict: Callable[[dict, dict[int, tuple[list[str], list[list]]]], dict]


@dataclass
class ExperimentSpec:
    name: str
    parameters: dict = field(default_factory=dict)
    seeds: Sequence[int] = (0,)
    output_dir: str = "results"

    def __post_init__(self):
        if self.name not in EXPERIMENTS:
            raise ExperimentError(f"unknown experiment {self.name!r}; known: {', '.join(EXPERIMENTS)}")
        if not len(self.seeds):
            raise ExperimentError("seeds must be nonempty")
        self.seeds = [int(s) for s in self.seeds]
        if len(set(self.seeds)) != len(self.seeds):
            raise ExperimentError(f"duplicate seeds in {self.seeds}")

    def resolved(self) -> dict:
        """Defaults overlaid with parsed parameters; unknown keys are errors."""
        table = EXPERIMENTS[self.name].params
        out = {k: p.default for k, p in table.items()}
        for key, raw in self.parameters.items():
            if key not in table:
                raise ExperimentError(f"unknown parameter {key!r} for {self.name}; known: {', '.join(table)}")
            try:
                out[key] = table[key].parse(raw)
            except (TypeError, ValueError) as e:
                raise ExperimentError(f"invalid value {raw!r} for parameter {key!r}: {e}") from None
        return out


@dataclass
class ExperimentResult:
    status: int
    verdict: dict
    artifacts: list[str]


# -- shared helpers -----------------------------------------------------------------


def _random_policy(rng: np.random.Generator, n_states: int, n_actions: int) -> TabularPolicy:
    probs = rng.dirichlet(np.ones(n_actions), size=n_states)
    probs = 0.05 / n_actions + 0.95 * probs
    return TabularPolicy(probs / probs.sum(axis=1, keepdims=True))


def _grid_sweep(p: dict, seed: int, online_fraction: float, shared: bool, trust_b: float | None,
                rho_bar: float = 1.0, capacity: int | None = None):
    base = HyperParams(learning_rate=p["learning_rate"], entropy_cost=p["entropy_cost"],
                       online_fraction=online_fraction, advantage=p["advantage"],
                       clip=ClipConfig(rho_bar, 1.0),
                       trust_region=RelevanceConfig(trust_b) if trust_b is not None else None)
    cfg = SweepConfig(sweep_grid(base, p["lr_factors"], p["entropy_factors"]), shared_replay=shared,
                      replay_capacity=capacity or p["capacity"], total_env_steps=p["steps"],
                      environment="gridworld4", seed=seed,
                      env_params={"size": p["size"], "distractor": p["distractor"]},
                      eval_interval=p["eval_interval"])
    return run_sweep(cfg)


def _final(curve: np.ndarray, window: float) -> float:
    k = max(1, int(round(len(curve) * window)))
    tail = np.asarray(curve[-k:], float)
    return float(np.nanmean(tail)) if np.any(~np.isnan(tail)) else math.nan


def _first_at(steps: np.ndarray, curve: np.ndarray, threshold: float) -> float:
    hit = np.flatnonzero(np.nan_to_num(np.asarray(curve, float), nan=-np.inf) >= threshold)
    return float(steps[hit[0]]) if len(hit) else math.inf


def _curves_table(arms: dict[str, object]) -> tuple[list[str], list[list]]:
    names = list(arms)
    steps = next(iter(arms.values())).env_steps
    header = ["env_steps"] + [f"best_{n}" for n in names]
    rows = [[int(s)] + [float(arms[n].best[i]) for n in names] for i, s in enumerate(steps)]
    return header, rows


def _columns(table: tuple[list[str], list[list]]) -> dict[str, np.ndarray]:
    header, rows = table
    data = np.array(rows, float).reshape(len(rows), len(header))
    return {h: data[:, i] for i, h in enumerate(header)}


def _medians(p: dict, tables: dict[int, tuple[list[str], list[list]]], arms: Sequence[str]) -> dict[str, float]:
    finals = {a: [] for a in arms}
    for table in tables.values():
        cols = _columns(table)
        for a in arms:
            finals[a].append(_final(cols[f"best_{a}"], p["window"]))
    return {a: float(np.median(v)) for a, v in finals.items()}


# -- prop2-counterexample -----------------------------------------------------------


PROP2_PARAMS = {
    "steps": Param(24_000, int, "env steps per agent"),
    "behaviour": Param((0.9, 0.1), _floats, "pinned behaviour policy at the decision state"),
    "initial": Param((0.5, 0.5), _floats, "initial target policy at the decision state"),
    "mixed_alpha": Param(0.3, float, "online fraction of the mixed agent"),
    "learning_rate": Param(0.025, float, "SGD step size"),
    "batch_size": Param(10, int, "trajectories per batch"),
    "replay_unrolls": Param(7, int, "pinned-behaviour unrolls per learner step"),
    "record_every": Param(500, int, "env steps between recorded policy snapshots"),
}


def _prop2_agent(p: dict, alpha: float, seed: int, agent_id: int) -> Agent:
    mdp = prop2_bandit()
    hp = HyperParams(learning_rate=p["learning_rate"], entropy_cost=0.0, online_fraction=alpha,
                     batch_size=p["batch_size"], unroll_length=1, advantage="q", learn_value=False,
                     actor_unrolls_per_step=p["replay_unrolls"])
    logits = np.zeros((2, 2))
    logits[0] = np.log(np.asarray(p["initial"], float))
    pinned = TabularPolicy(np.array([p["behaviour"], [0.5, 0.5]]))
    return Agent(mdp, hp, ReplayBuffer(10 * p["steps"] + 10), seed, agent_id, p["steps"], p["steps"],
                 pinned_behaviour=pinned, init=AgentParams(logits, np.zeros(2)), record_policy_value=False)


def _prop2_seed(p: dict, seed: int):
    header = ["env_steps", "p_first_offpolicy", "p_first_mixed"]
    traces = []
    for k, alpha in enumerate((0.0, p["mixed_alpha"])):
        agent = _prop2_agent(p, alpha, seed, k)
        marks, probs = [], []
        next_mark = p["record_every"]
        while not agent.done:
            agent.round()
            while agent.env_steps >= next_mark and next_mark <= p["steps"]:
                marks.append(next_mark)
                probs.append(float(agent.params.probs[0, 0]))
                next_mark += p["record_every"]
        traces.append(probs)
    n = min(len(t) for t in traces)
    rows = [[marks[i], traces[0][i], traces[1][i]] for i in range(n)]
    return header, rows


def _prop2_verdict(p: dict, tables):
    mdp = prop2_bandit()
    q = solve_q_exact(mdp, TabularPolicy(np.array([p["initial"], [0.5, 0.5]])))[0]
    correct = int(np.argmax(q))
    per_seed = {}
    for seed, table in tables.items():
        cols = _columns(table)
        out = {}
        for key in ("offpolicy", "mixed"):
            p_first = cols[f"p_first_{key}"]
            tail = p_first[-max(1, len(p_first) // 4):]
            greedy = 0 if p_first[-1] > 0.5 else 1
            out[key] = {"final_p_first": float(p_first[-1]), "tail_mean_p_first": float(tail.mean()),
                        "greedy": greedy, "settled": bool(np.all((tail > 0.5) == (greedy == 0)))}
        per_seed[str(seed)] = out
    wrong = all(s["offpolicy"]["greedy"] != correct and s["offpolicy"]["settled"] for s in per_seed.values())
    right = all(s["mixed"]["greedy"] == correct and s["mixed"]["settled"] for s in per_seed.values())
    w = omega(p["initial"], p["behaviour"])
    threshold = min_alpha(q, q_omega(q, w), 1.0, 1.0)
    return {"off-policy-converges-wrong": wrong, "mixed-converges-right": right, "correct_action": correct,
            "q": q.tolist(), "q_omega": q_omega(q, w).tolist(), "min_alpha": float(threshold),
            "per_seed": per_seed, "passed": wrong and right}


# -- implied-policy-fixpoint -----------------------------------------------------------


FIXPOINT_PARAMS = {
    "n_mdps": Param(20, int, "random MDPs per seed"),
    "n_states": Param(5, int, "states per MDP"),
    "n_actions": Param(3, int, "actions per state"),
    "rho_bar": Param(1.0, float, "V-trace rho clip"),
    "discount": Param(0.9, float, "discount of the random MDPs"),
    "tolerance": Param(1e-8, float, "sup-norm agreement required"),
}


def _fixpoint_seed(p: dict, seed: int):
    rows = []
    for i in range(p["n_mdps"]):
        mdp = garnet(p["n_states"], p["n_actions"], branching=3, seed=seed * 1000 + i,
                     discount=p["discount"])
        rng = np.random.default_rng([seed, i])
        pi = _random_policy(rng, mdp.n_states, mdp.n_actions)
        mu = _random_policy(rng, mdp.n_states, mdp.n_actions)
        try:
            fp = vtrace_fixed_point(mdp, pi, mu, p["rho_bar"], 1.0, tol=1e-10)
            iterated, iters = fp.values, fp.iterations
        except AssertionError as e:  # the oracle's own cross-check failed; still record the gap
            log.warning("fixed point cross-check: %s", e)
            iterated, iters = np.full(mdp.n_states, np.nan), -1
        implied = solve_v_exact(mdp, implied_policy_table(pi, mu, p["rho_bar"]))
        v_pi = solve_v_exact(mdp, pi)
        rows.append([i, float(np.max(np.abs(iterated - implied))), iters, float(np.max(np.abs(v_pi - implied)))])
    return ["mdp", "sup_error", "iterations", "distance_to_target_value"], rows


def _fixpoint_verdict(p: dict, tables):
    errs = [r[1] for _, rows in tables.values() for r in rows]
    worst = float(np.max(errs)) if errs else math.nan
    return {"max_sup_error": worst, "tolerance": p["tolerance"], "n_checked": len(errs),
            "passed": bool(np.isfinite(worst) and worst <= p["tolerance"])}


# -- contraction ------------------------------------------------------------------------


CONTRACTION_PARAMS = {
    "n_mdps": Param(20, int, "random MDPs per seed"),
    "n_states": Param(5, int, "states per MDP"),
    "n_actions": Param(3, int, "actions per state"),
    "gamma": Param(0.9, float, "discount"),
    "n_probes": Param(50, int, "random bootstrap tables per MDP"),
    "n_behaviours": Param(3, int, "behaviour policies per MDP"),
    "threshold_b": Param(0.5, float, "relevance threshold"),
    "terminal_prob": Param(0.2, float, "probability that a state is terminal"),
}


def contraction_setup(p: dict, seed: int, i: int):
    """Random MDP, target and behaviours with an acceptance matrix covering every state.

    Behaviours mix the target with random policies at random strengths so
    that some are relevant and some are not; where no behaviour passes the
    threshold the most relevant one is accepted.
    """
    mdp = garnet(p["n_states"], p["n_actions"], branching=2, seed=seed * 1000 + i, discount=p["gamma"],
                 terminal_prob=p["terminal_prob"])
    rng = np.random.default_rng([seed, i, 7])
    pi = _random_policy(rng, mdp.n_states, mdp.n_actions)
    mus = []
    for _ in range(p["n_behaviours"]):
        w = rng.uniform(0.1, 1.0)
        mus.append(TabularPolicy((1 - w) * pi.probs + w * _random_policy(rng, mdp.n_states, mdp.n_actions).probs))
    acc = acceptance_matrix(pi, mus, p["threshold_b"])
    uncovered = ~acc.any(axis=0)
    if uncovered.any():
        relevance = np.array([kl_relevance_rows(pi.probs, m.probs) for m in mus])
        best = np.argmin(relevance, axis=0)
        acc[best[uncovered], np.flatnonzero(uncovered)] = True
    return mdp, pi, mus, acc


def _contraction_seed(p: dict, seed: int):
    rows = []
    for i in range(p["n_mdps"]):
        mdp, pi, mus, acc = contraction_setup(p, seed, i)
        for kind in ("is", "vtrace"):
            probes = contraction_probe(mdp, pi, mus, kind, accept=acc, n_probes=p["n_probes"],
                                       seed=seed * 1000 + i)
            for k, pr in enumerate(probes):
                rows.append([i, k, kind, pr.lhs, pr.rhs, pr.ratio, int(pr.ok),
                             max(pr.eta) if pr.eta else math.nan])
    return ["mdp", "probe", "kind", "lhs", "rhs", "ratio", "ok", "max_eta"], rows


def _contraction_verdict(p: dict, tables):
    is_rows = [r for _, rows in tables.values() for r in rows if r[2] == "is"]
    vt_rows = [r for _, rows in tables.values() for r in rows if r[2] == "vtrace"]
    max_ratio = max((r[5] for r in is_rows), default=math.nan)
    is_ok = all(r[5] <= p["gamma"] + 1e-9 for r in is_rows)
    vt_ok = all(r[3] < r[4] for r in vt_rows)
    return {"is_max_ratio": max_ratio, "is_all_ratios_within_gamma": is_ok, "vtrace_strict_shrinkage": vt_ok,
            "vtrace_max_eta": max((r[7] for r in vt_rows), default=math.nan),
            "n_is_probes": len(is_rows), "n_vtrace_probes": len(vt_rows), "passed": is_ok and vt_ok}


# -- gridworld sweeps -------------------------------------------------------------------


MIXING_PARAMS = dict(GRID_PARAMS, alphas=Param((0.0, 0.125, 0.25, 0.5, 1.0), _floats, "online fractions"),
                     threshold=Param(0.6, float, "sweep-best return that counts as solved"))


def _alpha_name(a: float) -> str:
    return f"alpha_{a:g}"


def _mixing_seed(p: dict, seed: int):
    arms = {_alpha_name(a): _grid_sweep(p, seed, a, shared=False, trust_b=None) for a in p["alphas"]}
    return _curves_table(arms)


def _mixing_verdict(p: dict, tables):
    names = [_alpha_name(a) for a in p["alphas"]]
    med = _medians(p, tables, names)
    steps_to = {}
    for n in names:
        hits = []
        for table in tables.values():
            cols = _columns(table)
            hits.append(_first_at(cols["env_steps"], cols[f"best_{n}"], p["threshold"]))
        steps_to[n] = float(np.median(hits))
    zero, one = _alpha_name(0.0), _alpha_name(1.0)
    mid = [_alpha_name(a) for a in p["alphas"] if 0.0 < a < 1.0]
    ordering = zero in med and all(med[zero] < med[m] for m in mid)
    faster = one in steps_to and any(steps_to[m] < steps_to[one] for m in mid)
    return {"median_final_best": med, "median_steps_to_threshold": steps_to,
            "offpolicy_strictly_below_mixed": ordering,
            "offpolicy_strictly_worst": zero in med and all(med[zero] < med[n] for n in names if n != zero),
            "replay_reaches_threshold_first": faster, "passed": bool(ordering and faster)}


CAPACITY_PARAMS = dict(GRID_PARAMS, capacities=Param((1_000, 5_000, 20_000), _floats, "replay capacities"),
                       alpha=Param(0.125, float, "online fraction"))


def _capacity_seed(p: dict, seed: int):
    arms = {f"capacity_{int(c)}": _grid_sweep(p, seed, p["alpha"], shared=False, trust_b=None, capacity=int(c))
            for c in p["capacities"]}
    return _curves_table(arms)


def _capacity_verdict(p: dict, tables):
    names = [f"capacity_{int(c)}" for c in p["capacities"]]
    med = _medians(p, tables, names)
    return {"median_final_best": med, "largest_beats_smallest": med[names[-1]] > med[names[0]],
            "passed": bool(med[names[-1]] > med[names[0]])}


SHARED_PARAMS = dict(GRID_PARAMS, threshold_b=Param(0.5, float, "trust-region relevance threshold"),
                     private_arm=Param(False, _bool, "also run private replay with the trust region"))


def _shared_seed(p: dict, seed: int):
    arms = {"no_replay": _grid_sweep(p, seed, 1.0, shared=False, trust_b=None),
            "shared": _grid_sweep(p, seed, 0.125, shared=True, trust_b=None),
            "shared_trust_region": _grid_sweep(p, seed, 0.125, shared=True, trust_b=p["threshold_b"])}
    if p["private_arm"]:
        arms["private_trust_region"] = _grid_sweep(p, seed, 0.125, shared=False, trust_b=p["threshold_b"])
    return _curves_table(arms)


def _shared_verdict(p: dict, tables):
    names = ["no_replay", "shared", "shared_trust_region"] + (["private_trust_region"] if p["private_arm"] else [])
    med = _medians(p, tables, names)
    below_baseline = med["shared"] < med["no_replay"]
    below_trusted = med["shared"] < med["shared_trust_region"]
    trusted_best = med["shared_trust_region"] > max(med["shared"], med["no_replay"])
    return {"median_final_best": med, "shared_below_no_replay": below_baseline,
            "shared_below_trust_region": below_trusted, "trust_region_best": trusted_best,
            "passed": bool(below_baseline and below_trusted and trusted_best)}


CLIPPING_PARAMS = dict(GRID_PARAMS, rho_bars=Param((1.0, 2.0, 4.0), _floats, "rho clip values without trust region"),
                       threshold_b=Param(0.5, float, "trust-region relevance threshold of the reference arm"))


def _clip_name(r: float) -> str:
    return f"shared_rho_{r:g}"


def _clipping_seed(p: dict, seed: int):
    arms = {_clip_name(r): _grid_sweep(p, seed, 0.125, shared=True, trust_b=None, rho_bar=r) for r in p["rho_bars"]}
    arms["shared_trust_region"] = _grid_sweep(p, seed, 0.125, shared=True, trust_b=p["threshold_b"])
    return _curves_table(arms)


def _clipping_verdict(p: dict, tables):
    names = [_clip_name(r) for r in p["rho_bars"]] + ["shared_trust_region"]
    med = _medians(p, tables, names)
    raised = [_clip_name(r) for r in p["rho_bars"] if r > 1.0]
    recovered = any(med[n] >= med["shared_trust_region"] for n in raised)
    return {"median_final_best": med, "raised_clip_recovers_trust_region": recovered, "passed": not recovered}


EXPERIMENTS: dict[str, Experiment] = {
    "prop2-counterexample": Experiment(
        "prop2-counterexample", "off-policy V-trace picks the wrong arm; enough online data fixes it",
        PROP2_PARAMS, _prop2_seed, _prop2_verdict),
    "implied-policy-fixpoint": Experiment(
        "implied-policy-fixpoint", "iterated V-trace operator lands on the implied policy's value",
        FIXPOINT_PARAMS, _fixpoint_seed, _fixpoint_verdict),
    "contraction": Experiment(
        "contraction", "trusted IS contracts with gamma; trusted V-trace shrinks towards the mixture value",
        CONTRACTION_PARAMS, _contraction_seed, _contraction_verdict),
    "mixing-ratio-sweep": Experiment(
        "mixing-ratio-sweep", "sweep-best return of private-replay sweeps across online fractions",
        MIXING_PARAMS, _mixing_seed, _mixing_verdict),
    "replay-capacity-sweep": Experiment(
        "replay-capacity-sweep", "sweep-best return across replay capacities",
        CAPACITY_PARAMS, _capacity_seed, _capacity_verdict),
    "shared-replay": Experiment(
        "shared-replay", "no replay vs shared replay with and without the trust region",
        SHARED_PARAMS, _shared_seed, _shared_verdict),
    "clipping-sweep": Experiment(
        "clipping-sweep", "shared replay without trust region at larger rho clips",
        CLIPPING_PARAMS, _clipping_seed, _clipping_verdict),
}


# -- running ------------------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_table(path: str, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(x) for x in r])


def read_table(path: str) -> tuple[list[str], list[list]]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        rows = [[_parse_cell(x) for x in r] for r in reader]
    return header, rows


def _parse_cell(x: str):
    try:
        return int(x)
    except ValueError:
        pass
    try:
        return float(x)
    except ValueError:
        return x


def _json_safe(o):
    if isinstance(o, dict):
        return {str(k): _json_safe(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_json_safe(v) for v in o]
    if isinstance(o, (np.bool_, bool)):
        return bool(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (float, np.floating)):
        return float(o) if math.isfinite(o) else str(float(o))
    return o


def output_root(default: str) -> str:
    return os.environ.get(OUT_DIR_ENV) or default


def _seed_job(name: str, params: dict, seed: int):
    return EXPERIMENTS[name].run_seed(params, seed)


def run_experiment(spec: ExperimentSpec, workers: int = 1) -> ExperimentResult:
    """Run every seed, write per-seed CSVs, then derive the verdict from the written rows.

    With ``workers`` > 1 seeds run in separate processes; results are keyed
    by seed so completion order never affects the output.
    """
    exp = EXPERIMENTS[spec.name]
    params = spec.resolved()
    out = os.path.join(output_root(spec.output_dir), spec.name)
    os.makedirs(out, exist_ok=True)
    started = time.perf_counter()
    if workers > 1 and len(spec.seeds) > 1:
        with ProcessPoolExecutor(min(workers, len(spec.seeds))) as pool:
            futures = {seed: pool.submit(_seed_job, spec.name, params, seed) for seed in spec.seeds}
            produced = {seed: f.result() for seed, f in futures.items()}
    else:
        produced = {seed: exp.run_seed(params, seed) for seed in spec.seeds}
    artifacts = []
    tables = {}
    for seed in spec.seeds:
        path = os.path.join(out, f"seed_{seed}.csv")
        write_table(path, *produced[seed])
        artifacts.append(path)
        # re-read so the verdict sees exactly the emitted data
        tables[seed] = read_table(path)
    verdict = exp.verdict(params, dict(sorted(tables.items())))
    verdict = {"experiment": spec.name, "seeds": list(spec.seeds),
               "parameters": {k: list(v) if isinstance(v, tuple) else v for k, v in params.items()},
               **verdict}
    log.info("%s finished in %.1fs", spec.name, time.perf_counter() - started)
    path = os.path.join(out, "verdict.json")
    with open(path, "w") as f:
        json.dump(_json_safe(verdict), f, indent=1, sort_keys=True)
    artifacts.append(path)
    return ExperimentResult(0 if verdict["passed"] else 1, verdict, artifacts)


def catalog() -> str:
    lines = []
    for name, exp in EXPERIMENTS.items():
        lines.append(f"{name}: {exp.summary}")
        for key, prm in exp.params.items():
            default = ",".join(f"{x:g}" for x in prm.default) if isinstance(prm.default, tuple) else prm.default
            lines.append(f"    {key} (default {default}): {prm.doc}")
    return "\n".join(lines)


# -- invariant verification ---------------------------------------------------------------


@dataclass
class Check:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


TAMPERS = ("clipping", "mask")


def _check_clip(seed: int, tamper: str | None) -> str:
    rho_bar, c_bar = (0.5, 1.0) if tamper == "clipping" else (1.0, 1.0)
    try:
        ClipConfig(rho_bar, c_bar)
    except ValueError as e:
        raise AssertionError(f"ClipConfig invariant violated for rho_bar={rho_bar}, c_bar={c_bar}: {e}") from None
    return f"rho_bar={rho_bar} c_bar={c_bar}"


def _action_dependent_mask(traj, target, cfg, rho_bar=1.0):
    masked = compute_mask(traj, target, cfg, rho_bar)
    ratio = target.probs[traj.states, traj.actions] / traj.behaviour[np.arange(len(traj)), traj.actions]
    return MaskedTrajectory(traj, masked.mask & (ratio < 1.0))


def _check_mask_actions(seed: int, tamper: str | None) -> str:
    mask_fn = _action_dependent_mask if tamper == "mask" else compute_mask
    rng = np.random.default_rng(seed)
    cfg = RelevanceConfig(0.3)
    for i in range(20):
        mdp = garnet(5, 3, seed=seed * 100 + i, terminal_prob=0.1)
        pi, mu = _random_policy(rng, mdp.n_states, 3), _random_policy(rng, mdp.n_states, 3)
        traj = sample_episode(mdp, mu, int(rng.integers(2 ** 62)), 30)
        other = traj.with_actions((traj.actions + 1 + rng.integers(2, size=len(traj))) % 3)
        a, b = mask_fn(traj, pi, cfg).mask, mask_fn(other, pi, cfg).mask
        if not np.array_equal(a, b):
            t = int(np.flatnonzero(a != b)[0])
            raise AssertionError(f"mask depends on sampled actions (mdp {i}, step {t}, state {traj.states[t]})")
    return "20 trajectories with resampled actions give identical masks"


def _check_fixpoint(seed: int, tamper: str | None) -> str:
    table = _fixpoint_seed(dict({k: v.default for k, v in FIXPOINT_PARAMS.items()}, n_mdps=5), seed)[1]
    worst = max(r[1] for r in table)
    assert worst <= 1e-8, f"implied-policy fixed point off by {worst:.3g}"
    return f"max sup error {worst:.2e} over 5 MDPs"


def _check_contraction(seed: int, tamper: str | None) -> str:
    p = dict({k: v.default for k, v in CONTRACTION_PARAMS.items()}, n_mdps=4, n_probes=20)
    rows = _contraction_seed(p, seed)[1]
    bad = [r for r in rows if not r[6]]
    assert not bad, f"{len(bad)} probes violate their bound, first: mdp {bad[0][0]} probe {bad[0][1]} kind {bad[0][2]}"
    return f"{len(rows)} probes within bounds"


def _check_on_policy(seed: int, tamper: str | None) -> str:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(50):
        mdp = garnet(5, 3, seed=seed * 100 + i, terminal_prob=0.2)
        pi = _random_policy(rng, mdp.n_states, 3)
        v = rng.normal(size=mdp.n_states)
        traj = sample_episode(mdp, pi, int(rng.integers(2 ** 62)), 10_000)
        if not traj.terminal:
            continue
        mc = float(np.sum(traj.rewards * mdp.discount ** np.arange(len(traj))))
        est = vtrace_return(traj, pi, v, mdp.discount).value
        worst = max(worst, abs(est - mc) / max(abs(mc), 1e-12))
    assert worst <= 1e-12, f"on-policy V-trace differs from the Monte-Carlo return by {worst:.3g}"
    return f"max relative error {worst:.2e}"


def _check_gradients(seed: int, tamper: str | None) -> str:
    worst = fd_gradient_errors(seed, 10).max()
    assert worst < 1e-5, f"finite-difference mismatch {worst:.3g}"
    return f"max relative error {worst:.2e}"


def _check_threshold(seed: int, tamper: str | None) -> str:
    q = solve_q_exact(prop2_bandit(), TabularPolicy(np.array([[0.5, 0.5], [0.5, 0.5]])))[0]
    qw = q_omega(q, omega([0.5, 0.5], [0.9, 0.1]))
    a = min_alpha(q, qw, 1.0, 1.0)
    assert abs(a - 0.25) <= 1e-12, f"threshold {a}"
    assert np.argmax(q_alpha(q, qw, 1.0, 1.0, 0.26)) == 1 and np.argmax(q_alpha(q, qw, 1.0, 1.0, 0.24)) == 0
    return f"min_alpha = {a}"


def _check_replay(seed: int, tamper: str | None) -> str:
    rng = np.random.default_rng(seed)
    buf = ReplayBuffer(60)
    mdp = garnet(4, 2, seed=seed, terminal_prob=0.3)
    pol = _random_policy(rng, mdp.n_states, 2)
    order = []
    for k in range(200):
        traj = sample_episode(mdp, pol, int(rng.integers(2 ** 62)), 20)
        if len(traj):
            order.append(buf.add_episode(traj))
        assert buf.current_size <= 60
    ids = [e.episode_id for e in buf.snapshot()]
    assert ids == [i for i in order if i >= ids[0]], "replay buffer lost FIFO order"
    counts = np.zeros(len(ids))
    pos = {e: j for j, e in enumerate(ids)}
    for _ in range(20_000):
        counts[pos[buf.sample_episode(rng).episode_id]] += 1
    pval = chisquare(counts).pvalue
    assert pval > 0.01, f"episode sampling not uniform (p={pval:.3g})"
    return f"{len(ids)} episodes retained, chi-square p={pval:.3f}"


def fd_gradient_errors(seed: int, n_batches: int) -> np.ndarray:
    """Relative error max|analytic - numeric| / max|numeric| of learner gradients on frozen batches."""
    errors = []
    for i in range(n_batches):
        rng = np.random.default_rng([seed, i])
        mdp = garnet(5, 3, seed=seed * 1000 + i, terminal_prob=0.15)
        params = AgentParams(rng.normal(size=(mdp.n_states, 3)), rng.normal(size=mdp.n_states))
        beh = _random_policy(rng, mdp.n_states, 3)
        trajs = []
        for b in range(8):
            pol = params.policy() if b < 2 else beh
            ep = sample_episode(mdp, pol, int(rng.integers(2 ** 62)), 40)
            start = int(rng.integers(max(1, len(ep) - 5 + 1)))
            trajs.append(ep.slice(start, start + 5))
        batch = Batch(trajs, np.arange(8) < 2)
        hp = HyperParams(online_fraction=0.25, trust_region=RelevanceConfig(0.5), entropy_cost=0.05,
                         value_cost=0.5, advantage=("target", "td", "q")[i % 3])
        tg = compute_targets(params, batch, hp, mdp.discount)
        _, g_theta, g_v, _ = loss_and_grads(params.policy_logits, params.value_table, tg, hp)
        n_theta = central_difference(lambda th: loss_and_grads(th, params.value_table, tg, hp)[0],
                                     params.policy_logits)
        n_v = central_difference(lambda v: loss_and_grads(params.policy_logits, v, tg, hp)[0], params.value_table)
        a = np.concatenate([g_theta.ravel(), g_v.ravel()])
        n = np.concatenate([n_theta.ravel(), n_v.ravel()])
        errors.append(np.abs(a - n).max() / max(np.abs(n).max(), 1e-300))
    return np.array(errors)


CHECKS: list[tuple[str, Callable[[int, str | None], str]]] = [
    ("clip-config", _check_clip),
    ("mask-action-independence", _check_mask_actions),
    ("implied-policy-fixpoint", _check_fixpoint),
    ("trusted-contraction", _check_contraction),
    ("on-policy-reduction", _check_on_policy),
    ("learner-gradients", _check_gradients),
    ("mixing-threshold", _check_threshold),
    ("replay-fifo-uniformity", _check_replay),
]


def verify_all(seed: int = 0, tamper: str | None = None) -> list[Check]:
    """Run every invariant check; ``tamper`` injects a known fault to prove the check bites."""
    if tamper is not None and tamper not in TAMPERS:
        raise ValueError(f"unknown tamper {tamper!r}; known: {', '.join(TAMPERS)}")
    results = []
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            detail, ok = fn(seed, tamper), True
        except AssertionError as e:
            detail, ok = str(e), False
        results.append(Check(name, ok, detail, time.perf_counter() - t0))
    return results


def format_checks(checks: Sequence[Check]) -> str:
    width = max(len(c.name) for c in checks)
    lines = [f"{c.name:<{width}}  {'PASS' if c.passed else 'FAIL'}  {c.seconds:6.2f}s  {c.detail}" for c in checks]
    lines.append(f"{sum(c.passed for c in checks)}/{len(checks)} checks passed")
    return "\n".join(lines)
