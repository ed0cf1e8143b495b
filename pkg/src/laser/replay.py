"""Shared uniform FIFO episodic replay and the online/replay batch composer."""

from __future__ import annotations

import csv
import json
import logging
import math
import queue
import threading
from collections import deque
from dataclasses import dataclass
from fractions import Fraction
from typing import Hashable, Sequence

import numpy as np

from laser.mdp import Trajectory

log = logging.getLogger(__name__)


def _rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


@dataclass(frozen=True)
class ReplayEntry:
    episode_id: int
    agent_id: Hashable
    length: int
    insertion_step: int
    trajectory: Trajectory


class ReplayBuffer:
    """Bounded store of whole episodes, evicted oldest first.

    Capacity counts transitions. All public methods take one lock, so adds
    and samples from many threads are linearizable and eviction is atomic
    with the insertion that triggers it.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self._episodes: deque[ReplayEntry] = deque()
        self._size = 0
        self._next_id = 0
        self._lock = threading.Lock()
        self.evicted = 0

    def __len__(self) -> int:
        return len(self._episodes)

    @property
    def current_size(self) -> int:
        return self._size

    def add_episode(self, traj: Trajectory, agent_id: Hashable | None = None) -> int:
        n = len(traj)
        if n > self.capacity:
            raise ValueError(f"episode of {n} transitions exceeds replay capacity {self.capacity}")
        if n == 0:
            return -1
        with self._lock:
            eid = self._next_id
            self._next_id += 1
            agent = traj.behaviour_id if agent_id is None else agent_id
            self._episodes.append(ReplayEntry(eid, agent, n, eid, traj))
            self._size += n
            while self._size > self.capacity:
                old = self._episodes.popleft()
                self._size -= old.length
                self.evicted += 1
            return eid

    def snapshot(self) -> list[ReplayEntry]:
        with self._lock:
            return list(self._episodes)

    def sample_episode(self, rng: np.random.Generator) -> ReplayEntry:
        with self._lock:
            if not self._episodes:
                raise IndexError("cannot sample from an empty replay buffer")
            return self._episodes[int(rng.integers(len(self._episodes)))]

    def dump(self, path) -> None:
        """Write (episode_id, agent_id, length, insertion_step) rows; ``.json`` or CSV."""
        rows = [{"episode_id": e.episode_id, "agent_id": e.agent_id, "length": e.length,
                 "insertion_step": e.insertion_step} for e in self.snapshot()]
        path = str(path)
        if path.endswith(".json"):
            with open(path, "w") as f:
                json.dump(rows, f, indent=1, default=str)
            return
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["episode_id", "agent_id", "length", "insertion_step"])
            w.writeheader()
            w.writerows(rows)


def sample_trajectory(buffer: ReplayBuffer, rng_seed, unroll_length: int) -> Trajectory:
    """Uniform episode, then a uniformly chosen aligned chunk [kT, (k+1)T) of it.

    An episode shorter than T comes back whole (with its terminal flag).
    """
    rng = _rng(rng_seed)
    entry = buffer.sample_episode(rng)
    n_chunks = math.ceil(entry.length / unroll_length)
    k = int(rng.integers(n_chunks))
    return entry.trajectory.slice(k * unroll_length, (k + 1) * unroll_length)


class ReplayCursor:
    """Replays one uniformly sampled episode from its beginning in consecutive unrolls."""

    def __init__(self, buffer: ReplayBuffer, rng: np.random.Generator):
        self.buffer = buffer
        self.rng = rng
        self._episode: Trajectory | None = None
        self._pos = 0

    def next(self, unroll_length: int) -> Trajectory:
        if self._episode is None or self._pos >= len(self._episode):
            self._episode = self.buffer.sample_episode(self.rng).trajectory
            self._pos = 0
        out = self._episode.slice(self._pos, self._pos + unroll_length)
        self._pos += unroll_length
        return out


@dataclass(frozen=True)
class BatchSpec:
    batch_size: int = 8
    online_fraction: float = 0.125
    unroll_length: int = 19

    def __post_init__(self):
        if self.batch_size < 1 or self.unroll_length < 1:
            raise ValueError("batch_size and unroll_length must be positive")
        if not 0.0 <= self.online_fraction <= 1.0:
            raise ValueError("online_fraction must lie in [0, 1]")
        n_on = self.batch_size * self.online_fraction
        if abs(n_on - round(n_on)) > 1e-9:
            raise ValueError(
                f"batch_size * online_fraction = {n_on} is not an integer number of trajectories")

    @classmethod
    def from_replay_ratio(cls, batch_size: int, replay_ratio: float, unroll_length: int = 19) -> "BatchSpec":
        return cls(batch_size, float(1 - Fraction(replay_ratio).limit_denominator(1 << 16)), unroll_length)

    @property
    def n_online(self) -> int:
        return int(round(self.batch_size * self.online_fraction))

    @property
    def n_replay(self) -> int:
        return self.batch_size - self.n_online

    @property
    def replay_ratio(self) -> float:
        return 1.0 - self.online_fraction


@dataclass
class Batch:
    """Training batch; ``online[i]`` labels trajectory i as freshly acted."""

    trajectories: list[Trajectory]
    online: np.ndarray
    pure_off_policy: bool = False

    def __len__(self) -> int:
        return len(self.trajectories)


def compose_batch(buffer: ReplayBuffer, online_queue: "queue.Queue | Sequence[Trajectory]",
                  spec: BatchSpec, rng_seed, cursors: Sequence[ReplayCursor] | None = None,
                  insert_online: bool = True, timeout: float | None = None) -> Batch:
    """Dequeue B*alpha online unrolls, then draw B*(1 - alpha) from replay.

    Online trajectories are used fresh and only afterwards inserted into the
    buffer (``insert_online``). ``cursors`` replaces stateless sampling with
    sequential per-slot replay.
    """
    rng = _rng(rng_seed)
    online = []
    for _ in range(spec.n_online):
        if isinstance(online_queue, queue.Queue):
            online.append(online_queue.get(timeout=timeout))
        else:
            if not online_queue:
                raise ValueError("online source ran dry")
            online.append(online_queue.pop(0))
    replayed = []
    if spec.n_replay:
        if cursors is not None:
            if len(cursors) < spec.n_replay:
                raise ValueError("need one replay cursor per replay slot")
            replayed = [c.next(spec.unroll_length) for c in cursors[:spec.n_replay]]
        else:
            replayed = [sample_trajectory(buffer, rng, spec.unroll_length) for _ in range(spec.n_replay)]
    pure = spec.n_online == 0
    if pure:
        log.debug("composing a batch with no online data (pure off-policy)")
    if insert_online:
        for t in online:
            buffer.add_episode(t)
    flags = np.array([True] * len(online) + [False] * len(replayed))
    return Batch(online + replayed, flags, pure)
