"""Acceptance criteria 1-12, each reported as one PASS/FAIL line."""
import dataclasses
import math
import socket
import time
import timeit

import numpy as np
import pytest

from a2c2.asyncexec import Schedule, run_episode, validate_schedule
from a2c2.bench import compare, read_csv
from a2c2.cli import main
from a2c2.datastore import (BaseDataset, BiasedReplay, Episode, ExpertReplay, build_dcor,
                            record_expert_dataset)
from a2c2.envsim import EnvConfig, observe, reset, step
from a2c2.numkit import make_rng, mlp_forward
from a2c2.policies import (HEAD_TRAIN_DEFAULTS, correction_inputs, load_policy, predict_chunk,
                           predict_residual, train_correction, zero_head)
from a2c2.wire import (CHUNK, ERR, ERR_BUSY, OBS, ClientConfig, Message, ServerConfig, client_run,
                       encode, read_message, serve)

from conftest import ACCEPTANCE, random_base, record_acceptance

H = 8
PIPELINE_BUDGET_S = 600.0


@pytest.fixture(scope="session")
def pursuit_pipeline(tmp_path_factory):
    """Full default pipeline on pursuit (every stage at its default settings)."""
    work = tmp_path_factory.mktemp("pursuit")
    t0 = time.perf_counter()
    assert main(["pipeline", "--workdir", str(work)]) == 0
    elapsed = time.perf_counter() - t0
    return {"dir": work, "elapsed": elapsed, "cells": read_csv(work / "sweep.csv"),
            "base": load_policy(work / "base.pol"), "head": load_policy(work / "head.pol")}


@pytest.fixture(scope="session")
def holdzone_pipeline(tmp_path_factory):
    work = tmp_path_factory.mktemp("holdzone")
    assert main(["pipeline", "--env", "holdzone", "--cells", "0:1,0:7",
                 "--workdir", str(work)]) == 0
    return {"cells": read_csv(work / "sweep.csv")}


def _cell(cells, method, d, e):
    return next(c for c in cells if (c.method, c.d, c.e) == (method, d, e))


def _valid_schedules(H):
    return [(d, e) for d in range(H + 1) for e in range(1, H + 1) if validate_schedule(H, e, d) is None]


def test_c01_gradient_correctness(capsys):
    t0 = time.perf_counter()
    code = main(["gradcheck", "--specs", "16"])
    elapsed = time.perf_counter() - t0
    out = capsys.readouterr().out
    worst = float(out.strip().splitlines()[-1].split()[3])
    ok = code == 0 and worst < 1e-3 and elapsed < 30
    with capsys.disabled():
        record_acceptance(1, "gradient check", ok,
                          f"max rel err {worst:.2e} (< 1e-3) over 16 specs in {elapsed:.1f}s (< 30s)")
    assert ok


def test_c02_residual_identity(pursuit_pipeline, capsys):
    env = EnvConfig("pursuit")
    base, zh = pursuit_pipeline["base"], zero_head(pursuit_pipeline["head"])
    sched = _valid_schedules(H)
    mismatches = 0
    for d, e in sched:
        for seed in range(32):
            a = run_episode(env, base, None, Schedule(H, e, d), seed)
            b = run_episode(env, base, zh, Schedule(H, e, d), seed)
            same = (a.actions().tobytes() == b.actions().tobytes() and a.state_hash == b.state_hash
                    and a.success == b.success)
            mismatches += not same
    ok = mismatches == 0
    with capsys.disabled():
        record_acceptance(2, "zero head == naive", ok,
                          f"{len(sched)} valid (d, e) x 32 seeds, {mismatches} non-identical traces")
    assert ok


def _sync_reference(env, base, seed):
    """Independent per-step replanning loop: infer on o_t, execute element 0."""
    s = reset(env, seed)
    acts, hashes = [], []
    while not s.done:
        chunk, _ = predict_chunk(base, observe(env, s))
        acts.append(chunk[0])
        s, _, _ = step(env, s, chunk[0])
        hashes.append(s.snapshot_hash())
    return np.stack(acts), hashes, s.success


def test_c03_synchronous_equivalence(pursuit_pipeline, capsys):
    env = EnvConfig("pursuit")
    base = pursuit_pipeline["base"]
    bad = 0
    for seed in range(32):
        tr = run_episode(env, base, None, Schedule(H, 1, 0), seed)
        acts, hashes, success = _sync_reference(env, base, seed)
        bad += not (tr.actions().tobytes() == acts.tobytes() and tr.state_hash == hashes
                    and tr.success == success)
    with capsys.disabled():
        record_acceptance(3, "d=0, e=1 == synchronous loop", bad == 0,
                          f"32 seeds, {bad} non-identical traces")
    assert bad == 0


def test_c04_dcor_combinatorics(capsys):
    rng = make_rng(2024, "acceptance-dcor")
    bad = 0
    for case in range(100):
        T, h = int(rng.integers(1, 51)), int(rng.integers(1, 11))
        ep = Episode(0, rng.standard_normal((T, 3)).astype(np.float32),
                     rng.uniform(-1, 1, (T, 2)).astype(np.float32))
        ds = build_dcor(BaseDataset.from_episodes([ep]), ExpertReplay(h), h)
        brute = sorted((t, k) for t in range(T) for k in range(h) if k <= t)
        closed = h * T - h * (h - 1) // 2 if T >= h else T * (T + 1) // 2
        got = sorted(zip(ds.t.tolist(), ds.k.tolist()))
        bad += not (len(ds) == closed == len(brute) and got == brute)
    with capsys.disabled():
        record_acceptance(4, "correction-record counts", bad == 0,
                          f"100 random (T, H) cases, {bad} disagree with closed form / enumeration")
    assert bad == 0


def _brute_timeline(H, e, d, cycles=6):
    """Simulate requests every e steps on a one-at-a-time server with delay d.

    Returns (waiting_gap, exhausted): a request that finds the server busy
    means the next chunk cannot arrive in time; an executed index past H-1
    means the chunk ran out.
    """
    if e < 1:
        return True, False
    busy_until = -math.inf
    gap = exhausted = False
    for m in range(cycles):
        r = m * e - d  # the chunk used from step m*e must be requested d steps earlier
        if r < busy_until:
            gap = True
        busy_until = max(busy_until, r) + d
        for t in range(m * e, (m + 1) * e):
            if t - r > H - 1:
                exhausted = True
    return gap, exhausted


def test_c05_schedule_validity(capsys):
    bad, n = 0, 0
    for h in range(1, 13):
        for d in range(0, 14):
            for e in range(0, 15):
                n += 1
                gap, exhausted = _brute_timeline(h, e, d)
                v = validate_schedule(h, e, d)
                if v is None:
                    bad += gap or exhausted
                elif v.startswith("e < 1") or v.startswith("e < d"):
                    bad += not gap
                elif v.startswith("e > H - d"):
                    bad += not exhausted or gap
                else:
                    bad += 1
    # The engine runs every valid schedule without violating its own bounds.
    env = EnvConfig("pursuit", episode_len=40, r_catch=1e-9)
    engine_runs = 0
    for h in range(1, 13):
        base = random_base(env, h, hidden=(8,))
        for d, e in _valid_schedules(h):
            tr = run_episode(env, base, None, Schedule(h, e, d), 0)
            bad += not all(d <= k <= d + e - 1 for k in tr.k)
            engine_runs += 1
    with capsys.disabled():
        record_acceptance(5, "schedule validity", bad == 0,
                          f"{n} (H <= 12, e, d) triples vs brute-force timeline, "
                          f"{engine_runs} valid schedules run, {bad} disagreements")
    assert bad == 0


def test_c06_oracle_residual_convergence(capsys):
    t0 = time.perf_counter()
    env = EnvConfig("pursuit")
    train = record_expert_dataset(env, 2000, 601)
    # Held-out episodes use the training normalizer, as the head expects.
    held = dataclasses.replace(record_expert_dataset(env, 100, 602), norm=train.norm)
    # 32 epochs: at the table's 16 the zero-target fit is still falling (see notes).
    cfg = dataclasses.replace(HEAD_TRAIN_DEFAULTS, epochs=32)
    bias = np.float32([0.1, -0.15])

    head, _ = train_correction(build_dcor(train, ExpertReplay(H), H), cfg)
    x, _ = correction_inputs(build_dcor(held, ExpertReplay(H), H), False)
    zero_err = float(np.abs(mlp_forward(head.weights, x)).mean())

    head, _ = train_correction(build_dcor(train, BiasedReplay(H, bias), H), cfg)
    x, _ = correction_inputs(build_dcor(held, BiasedReplay(H, bias), H), False)
    bias_err = float(np.abs(mlp_forward(head.weights, x) + bias).max(axis=1).mean())
    elapsed = time.perf_counter() - t0
    ok = zero_err < 1e-3 and bias_err < 0.02 and elapsed < 300
    with capsys.disabled():
        record_acceptance(6, "oracle residual convergence", ok,
                          f"expert replay mean |da| {zero_err:.2e} (< 1e-3), bias recovery "
                          f"err {bias_err:.4f} (< 0.02), {elapsed:.0f}s (< 300s)")
    assert ok


def test_c07_delay_degradation(pursuit_pipeline, capsys):
    cells = pursuit_pipeline["cells"]
    rates = [_cell(cells, "naive", d, max(d, 1)).success_rate for d in range(5)]
    n = {_cell(cells, "naive", d, max(d, 1)).n for d in range(5)}
    ok = all(rates[d + 1] <= rates[d] + 0.03 for d in range(4)) and min(n) >= 512
    with capsys.disabled():
        record_acceptance(7, "naive degrades with delay", ok,
                          "naive rate d=0..4: " + ", ".join(f"{r:.3f}" for r in rates)
                          + f" ({min(n)} rollouts per cell)")
    assert ok


def test_c08_delay_robustness(pursuit_pipeline, capsys):
    cells = pursuit_pipeline["cells"]
    a, b = _cell(cells, "a2c2", 4, 4), _cell(cells, "naive", 4, 4)
    cmp = compare(a, b)
    ok = cmp.difference >= 0.10 and cmp.significant and a.n >= 512
    with capsys.disabled():
        record_acceptance(8, "corrected beats naive at d=4, e=4", ok,
                          f"corrected {a.success_rate:.3f} [{a.wilson_lo:.3f}, {a.wilson_hi:.3f}] vs "
                          f"naive {b.success_rate:.3f} [{b.wilson_lo:.3f}, {b.wilson_hi:.3f}], "
                          f"gap {100 * cmp.difference:.1f} pts (>= 10)")
    assert ok


def test_c09_long_horizon_robustness(holdzone_pipeline, capsys):
    cells = holdzone_pipeline["cells"]
    drop = {m: _cell(cells, m, 0, 1).success_rate - _cell(cells, m, 0, 7).success_rate
            for m in ("naive", "a2c2")}
    ok = drop["naive"] - drop["a2c2"] >= 0.05 and min(c.n for c in cells) >= 512
    with capsys.disabled():
        record_acceptance(9, "long-horizon robustness (holdzone)", ok,
                          f"e=1 -> e=7 drop: naive {100 * drop['naive']:.1f} pts, corrected "
                          f"{100 * drop['a2c2']:.1f} pts (difference >= 5)")
    assert ok


def test_c10_harness_equivalence(pursuit_pipeline, capsys):
    env = EnvConfig("pursuit")
    base, head = pursuit_pipeline["base"], pursuit_pipeline["head"]
    dt = 0.05
    worst, k_bad, runs = 0.0, 0, 0
    with serve(ServerConfig(base, latency=3 * dt)) as srv:
        for h in (None, head):
            for seed in range(8):
                tr = client_run(ClientConfig(srv.address, dt, Schedule(H, 3, 3), env, seed, head=h,
                                             latency=3 * dt))
                ref = run_episode(env, base, h, Schedule(H, 3, 3), seed)
                k_bad += tr.k != ref.k or tr.success != ref.success
                if tr.k == ref.k:
                    worst = max(worst, float(np.abs(tr.actions() - ref.actions()).max()))
                runs += 1
        sock = socket.create_connection(srv.address)
        obs = np.zeros(env.obs_dim, np.float32)
        sock.sendall(encode(Message(OBS, 1, (obs,))) + encode(Message(OBS, 2, (obs,))))
        replies = [read_message(sock), read_message(sock)]
        sock.close()
    busy = (replies[0].type, replies[0].code, replies[1].type) == (ERR, ERR_BUSY, CHUNK)
    ok = k_bad == 0 and worst <= 1e-6 and busy
    with capsys.disabled():
        record_acceptance(10, "networked == in-process at latency 3 dt", ok,
                          f"{runs} episodes (8 seeds naive + 8 corrected), {k_bad} schedule/outcome "
                          f"mismatches, max action diff {worst:.1e} (<= 1e-6), BUSY on double-send: {busy}")
    assert ok


def test_c11_latency_asymmetry(pursuit_pipeline, capsys):
    base, head = pursuit_pipeline["base"], pursuit_pipeline["head"]
    obs = np.linspace(-1, 1, base.obs_dim).astype(np.float32)
    chunk, z = predict_chunk(base, obs)
    predict_residual(head, obs, chunk[3], 3, H)
    t_base = min(timeit.repeat(lambda: predict_chunk(base, obs), number=200, repeat=7)) / 200
    t_head = min(timeit.repeat(lambda: predict_residual(head, obs, chunk[3], 3, H),
                               number=2000, repeat=7)) / 2000
    ratio = t_base / t_head
    ok = ratio >= 20 and t_head < 0.05
    with capsys.disabled():
        record_acceptance(11, "head vs base inference time", ok,
                          f"base {1e3 * t_base:.3f} ms, head {1e3 * t_head:.4f} ms per call, "
                          f"ratio {ratio:.1f}x (>= 20), head < 50 ms")
    assert ok


def test_c12_end_to_end_budget(pursuit_pipeline, capsys):
    elapsed = pursuit_pipeline["elapsed"]
    earlier = [ACCEPTANCE.get(n, "") for n in range(1, 12)]
    gates = all(" PASS " in line for line in earlier)
    ok = elapsed < PIPELINE_BUDGET_S and gates
    with capsys.disabled():
        record_acceptance(12, "end-to-end pipeline budget", ok,
                          f"default pursuit pipeline {elapsed:.0f}s (< {PIPELINE_BUDGET_S:.0f}s), "
                          f"criteria 1-11 all passing: {gates}")
    assert ok
