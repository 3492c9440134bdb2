import csv

import numpy as np
import pytest

from a2c2.asyncexec import (Schedule, ScheduleError, compute_delay, run_episode, staleness_stats,
                            validate_schedule, write_trace_csv)
from a2c2.envsim import EnvConfig, observe, reset, step
from a2c2.policies import ExpertChunkPolicy, zero_head

from conftest import random_base, random_head

LONG = EnvConfig("pursuit", episode_len=48, r_catch=1e-9)  # never caught: runs full length


def test_validate_schedule_examples():
    assert validate_schedule(8, 4, 4) is None
    assert "e < d" in validate_schedule(8, 3, 4) and "waiting gap" in validate_schedule(8, 3, 4)
    assert "e > H - d" in validate_schedule(8, 5, 4)
    assert validate_schedule(8, 1, 0) is None
    assert validate_schedule(8, 0, 0) is not None
    with pytest.raises(ScheduleError, match="chunk exhausted"):
        Schedule(8, 5, 4).check()


def test_compute_delay_examples():
    assert compute_delay(0.0, 0.05) == 0
    assert compute_delay(2.5 * 0.05, 0.05) == 2
    assert compute_delay(0.101, 0.05) == 2
    assert compute_delay(3 * 0.02, 0.02) == 3
    with pytest.raises(ValueError):
        compute_delay(0.1, 0.0)


def test_k_cycle_d2_e3():
    tr = run_episode(LONG, random_base(LONG), None, Schedule(8, 3, 2), 0)
    assert len(tr) == 48
    assert tr.k == [2, 3, 4] * 16
    assert tr.staleness_in_effect[:3] == [3, 4, 5]
    assert tr.adoptions == list(range(0, 48, 3))


def test_staleness_stats_examples():
    base = random_base(LONG)
    assert staleness_stats(run_episode(LONG, base, None, Schedule(8, 1, 0), 0)) == (0, 0, 0.0)
    lo, hi, mean = staleness_stats(run_episode(LONG, base, None, Schedule(8, 4, 4), 0))
    assert (lo, hi) == (4, 7) and mean == 4 + 3 / 2
    for d, e in ((1, 3), (2, 6), (3, 4)):
        lo, hi, mean = staleness_stats(run_episode(LONG, base, None, Schedule(8, e, d), 1))
        assert (lo, hi, mean) == (d, d + e - 1, d + (e - 1) / 2)


def test_synchronous_schedule_matches_replanning_loop(pursuit):
    base = random_base(pursuit)
    for seed in range(4):
        tr = run_episode(pursuit, base, None, Schedule(8, 1, 0), seed)
        s, acts = reset(pursuit, seed), []
        while not s.done:
            a = base.chunk(observe(pursuit, s))[0][0]
            acts.append(a)
            s, _, _ = step(pursuit, s, a)
        assert np.stack(acts).tobytes() == tr.actions().tobytes()


def test_zero_head_matches_naive():
    base = random_base(LONG)
    zh = zero_head(random_head(LONG))
    for d, e in ((0, 1), (2, 3), (4, 4)):
        a = run_episode(LONG, base, None, Schedule(8, e, d), 3)
        b = run_episode(LONG, base, zh, Schedule(8, e, d), 3)
        assert a.actions().tobytes() == b.actions().tobytes()
        assert a.state_hash == b.state_hash


def test_head_changes_actions_and_is_deterministic():
    base, head = random_base(LONG), random_head(LONG, scale=1.0)
    a = run_episode(LONG, base, head, Schedule(8, 2, 2), 5)
    b = run_episode(LONG, base, head, Schedule(8, 2, 2), 5)
    assert a.digest() == b.digest()
    assert a.mean_delta_norm() > 0
    assert a.digest() != run_episode(LONG, base, None, Schedule(8, 2, 2), 5).digest()


def test_invalid_schedule_and_dims_rejected(pursuit, holdzone):
    base = random_base(pursuit)
    with pytest.raises(ScheduleError):
        run_episode(pursuit, base, None, Schedule(8, 3, 4), 0)
    with pytest.raises(ScheduleError):
        run_episode(pursuit, base, None, Schedule(6, 1, 0), 0)
    with pytest.raises(ScheduleError):
        run_episode(holdzone, base, None, Schedule(8, 1, 0), 0)
    with pytest.raises(ScheduleError):
        run_episode(pursuit, base, random_head(pursuit, H=4), Schedule(8, 1, 0), 0)


def test_expert_chunks_succeed_synchronously(holdzone):
    pol = ExpertChunkPolicy(holdzone, 8)
    assert all(run_episode(holdzone, pol, None, Schedule(8, 1, 0), s).success for s in range(16))


def test_trace_csv(tmp_path):
    tr = run_episode(LONG, random_base(LONG), random_head(LONG), Schedule(8, 2, 1), 0)
    write_trace_csv(tr, tmp_path / "t.csv")
    rows = list(csv.DictReader(open(tmp_path / "t.csv")))
    assert len(rows) == len(tr)
    assert [int(r["k"]) for r in rows] == tr.k
    assert [int(r["staleness_in_effect"]) for r in rows] == [k + 1 for k in tr.k]
    assert float(rows[0]["exec_0"]) == float(tr.executed[0][0])
    assert set(rows[0]) >= {"t", "staleness", "delta_norm", "success_so_far", "state_hash"}
