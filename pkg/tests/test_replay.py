import queue
import threading

import numpy as np
import pytest
from scipy import stats

from laser.mdp import Trajectory
from laser.replay import (Batch, BatchSpec, ReplayBuffer, ReplayCursor, compose_batch,
                          sample_trajectory)


def make_episode(length, behaviour_id=0, episode_id=-1, terminal=True, n_states=4, n_actions=2):
    states = np.arange(length) % n_states
    actions = np.zeros(length, np.int64)
    rewards = np.arange(length, dtype=float)
    behaviour = np.full((length, n_actions), 1.0 / n_actions)
    return Trajectory(states, actions, rewards, behaviour, final_state=0, terminal=terminal,
                      behaviour_id=behaviour_id, episode_id=episode_id)


def test_capacity_holds_exactly_ten_episodes_of_ten():
    buf = ReplayBuffer(100)
    for i in range(10):
        buf.add_episode(make_episode(10, episode_id=i))
    assert len(buf) == 10 and buf.current_size == 100
    buf.add_episode(make_episode(10, episode_id=10))
    assert buf.current_size == 100
    ids = [e.trajectory.episode_id for e in buf.snapshot()]
    assert ids == list(range(1, 11))
    assert buf.evicted == 1


def test_eviction_removes_whole_oldest_episodes():
    buf = ReplayBuffer(20)
    for n in (7, 7, 7):
        buf.add_episode(make_episode(n))
    assert buf.current_size == 14 and len(buf) == 2
    buf.add_episode(make_episode(19))
    assert [e.length for e in buf.snapshot()] == [19]


def test_oversized_episode_is_rejected():
    buf = ReplayBuffer(5)
    with pytest.raises(ValueError):
        buf.add_episode(make_episode(6))
    assert buf.current_size == 0


def test_empty_buffer_sampling_fails():
    with pytest.raises(IndexError):
        sample_trajectory(ReplayBuffer(10), 0, 5)


def test_concurrent_writers_keep_arrival_order():
    # every add logs its arrival under the buffer lock so the serialized replay is exact
    capacity = 500
    buf = ReplayBuffer(capacity)
    arrivals = []
    log_lock = threading.Lock()
    per_writer = 2500

    def writer(w):
        rng = np.random.default_rng(w)
        for k in range(per_writer):
            traj = make_episode(int(rng.integers(1, 12)), behaviour_id=w, episode_id=w * per_writer + k)
            with log_lock:
                buf.add_episode(traj, agent_id=w)
                arrivals.append(traj)
            assert buf.current_size <= capacity

    threads = [threading.Thread(target=writer, args=(w,)) for w in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(arrivals) == 4 * per_writer

    reference = ReplayBuffer(capacity)
    for traj in arrivals:
        reference.add_episode(traj, agent_id=traj.behaviour_id)
    got = [e.trajectory.episode_id for e in buf.snapshot()]
    want = [e.trajectory.episode_id for e in reference.snapshot()]
    assert got == want
    assert buf.current_size == reference.current_size <= capacity
    assert buf.current_size + len(arrivals[-len(got) - 1]) > capacity
    ids = [e.episode_id for e in buf.snapshot()]
    assert ids == sorted(ids)


def test_concurrent_writers_without_external_lock_preserve_invariants():
    buf = ReplayBuffer(300)
    sizes = []
    stop = threading.Event()

    def writer(w):
        for k in range(2000):
            buf.add_episode(make_episode(1 + (k % 9), behaviour_id=w))

    def reader():
        rng = np.random.default_rng(0)
        while not stop.is_set():
            sizes.append(buf.current_size)
            if len(buf):
                entry = buf.sample_episode(rng)
                assert entry.length == len(entry.trajectory)

    r = threading.Thread(target=reader)
    r.start()
    ws = [threading.Thread(target=writer, args=(w,)) for w in range(4)]
    for t in ws:
        t.start()
    for t in ws:
        t.join()
    stop.set()
    r.join()
    assert max(sizes) <= 300
    ids = [e.episode_id for e in buf.snapshot()]
    # FIFO: the survivors are a contiguous run of the most recent insertions
    assert ids == list(range(ids[0], ids[0] + len(ids)))
    assert ids[-1] == 4 * 2000 - 1


def test_single_episode_always_returned():
    buf = ReplayBuffer(50)
    buf.add_episode(make_episode(6, episode_id=3))
    rng = np.random.default_rng(1)
    for _ in range(20):
        out = sample_trajectory(buf, rng, 10)
        assert out.episode_id == 3 and len(out) == 6 and out.terminal


def test_slices_are_aligned_chunks_with_original_behaviour_rows():
    buf = ReplayBuffer(50)
    ep = make_episode(10)
    buf.add_episode(ep)
    rng = np.random.default_rng(2)
    seen = set()
    for _ in range(200):
        out = sample_trajectory(buf, rng, 4)
        seen.add((out.first_step, len(out), out.terminal))
        np.testing.assert_array_equal(out.behaviour, ep.behaviour[out.first_step:out.first_step + len(out)])
    assert seen == {(0, 4, False), (4, 4, False), (8, 2, True)}


def test_two_episodes_split_evenly():
    buf = ReplayBuffer(100)
    buf.add_episode(make_episode(5, episode_id=0))
    buf.add_episode(make_episode(5, episode_id=1))
    rng = np.random.default_rng(3)
    n = 100_000
    hits = sum(sample_trajectory(buf, rng, 5).episode_id == 0 for _ in range(n))
    se = np.sqrt(n * 0.25)
    assert abs(hits - n / 2) <= 3 * se


def test_episode_selection_passes_chi_square():
    buf = ReplayBuffer(1000)
    lengths = [3, 7, 1, 12, 5, 9, 2, 8, 4, 6]
    for i, n in enumerate(lengths):
        buf.add_episode(make_episode(n, episode_id=i))
    rng = np.random.default_rng(4)
    counts = np.zeros(len(lengths), int)
    for _ in range(100_000):
        counts[buf.sample_episode(rng).trajectory.episode_id] += 1
    assert stats.chisquare(counts).pvalue > 0.01


def test_sampling_is_reproducible_with_fixed_seeds():
    def build():
        buf = ReplayBuffer(60)
        rng = np.random.default_rng(9)
        for i in range(20):
            buf.add_episode(make_episode(int(rng.integers(1, 9)), episode_id=i))
        return buf

    a, b = build(), build()
    assert [e.trajectory.episode_id for e in a.snapshot()] == [e.trajectory.episode_id for e in b.snapshot()]
    ra, rb = np.random.default_rng(5), np.random.default_rng(5)
    for _ in range(50):
        x, y = sample_trajectory(a, ra, 3), sample_trajectory(b, rb, 3)
        assert (x.episode_id, x.first_step) == (y.episode_id, y.first_step)
        np.testing.assert_array_equal(x.rewards, y.rewards)


def test_cursor_replays_an_episode_from_its_start():
    buf = ReplayBuffer(50)
    buf.add_episode(make_episode(7, episode_id=0))
    cur = ReplayCursor(buf, np.random.default_rng(0))
    parts = [cur.next(3) for _ in range(3)]
    assert [p.first_step for p in parts] == [0, 3, 6]
    assert [len(p) for p in parts] == [3, 3, 1]
    assert parts[-1].terminal and not parts[0].terminal
    assert cur.next(3).first_step == 0


def test_batch_spec_requires_integer_split():
    with pytest.raises(ValueError):
        BatchSpec(batch_size=6, online_fraction=0.125)
    spec = BatchSpec(8, 0.125)
    assert (spec.n_online, spec.n_replay, spec.replay_ratio) == (1, 7, 0.875)
    assert BatchSpec.from_replay_ratio(8, 0.875) == spec


def test_one_online_and_seven_replayed():
    buf = ReplayBuffer(100)
    for i in range(5):
        buf.add_episode(make_episode(4, episode_id=i))
    online = [make_episode(4, episode_id=99)]
    batch = compose_batch(buf, online, BatchSpec(8, 0.125, 4), 0)
    assert isinstance(batch, Batch) and len(batch) == 8
    assert batch.online.tolist() == [True] + [False] * 7
    assert batch.trajectories[0].episode_id == 99
    assert all(t.episode_id != 99 for t in batch.trajectories[1:])
    assert buf.snapshot()[-1].trajectory.episode_id == 99


def test_all_online_leaves_replay_untouched():
    buf = ReplayBuffer(100)
    q = queue.Queue()
    for i in range(4):
        q.put(make_episode(3, episode_id=i))
    batch = compose_batch(buf, q, BatchSpec(4, 1.0, 3), 0, insert_online=False)
    assert batch.online.all() and len(buf) == 0 and not batch.pure_off_policy


def test_pure_off_policy_batch_is_flagged():
    buf = ReplayBuffer(100)
    buf.add_episode(make_episode(3))
    batch = compose_batch(buf, [], BatchSpec(4, 0.0, 3), 0)
    assert batch.pure_off_policy and not batch.online.any()


def test_dry_online_source_is_an_error():
    buf = ReplayBuffer(100)
    buf.add_episode(make_episode(3))
    with pytest.raises(ValueError):
        compose_batch(buf, [], BatchSpec(8, 0.25, 3), 0)


def test_replayed_behaviour_ids_spread_over_contributing_agents():
    buf = ReplayBuffer(10_000)
    n_agents = 4
    rng = np.random.default_rng(6)
    for i in range(400):
        buf.add_episode(make_episode(int(rng.integers(1, 10)), behaviour_id=i % n_agents))
    spec = BatchSpec(32, 0.125, 5)
    counts = np.zeros(n_agents, int)
    for step in range(10_000):
        batch = compose_batch(buf, [make_episode(1, behaviour_id=-1)] * spec.n_online, spec, rng,
                              insert_online=False)
        for t in batch.trajectories[spec.n_online:]:
            counts[t.behaviour_id] += 1
    assert counts.sum() == 10_000 * 28
    assert stats.chisquare(counts).pvalue > 0.01


def test_dump_writes_one_row_per_episode(tmp_path):
    buf = ReplayBuffer(100)
    for i in range(3):
        buf.add_episode(make_episode(2 + i, behaviour_id=i), agent_id=f"agent{i}")
    buf.dump(tmp_path / "replay.csv")
    lines = (tmp_path / "replay.csv").read_text().splitlines()
    assert lines[0] == "episode_id,agent_id,length,insertion_step"
    assert lines[1:] == ["0,agent0,2,0", "1,agent1,3,1", "2,agent2,4,2"]
    buf.dump(tmp_path / "replay.json")
    assert '"agent_id": "agent2"' in (tmp_path / "replay.json").read_text()
