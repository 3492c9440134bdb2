"""Asynchronous chunk execution with simulated inference delay.

Timeline for a schedule (H, e, d): inference requests are issued at steps
``-d + m*e`` (m = 0, 1, ...) on the observation of that step, and the chunk
from a request at step ``r`` is adopted at step ``r + d``. At step ``t`` the
active chunk (source step ``s``) contributes element ``k = t - s``, so every
executed index lies in ``[d, d + e - 1]``.

Episode start: the request for m = 0 sits at step ``-d``. The environment is
frozen before step 0, so that chunk is computed on ``o_0`` and steps
``0 .. e-1`` execute its elements ``d .. d+e-1``.
"""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envsim import EnvConfig, EnvState, observe, reset, step
from .policies import (BasePolicy, CorrectionHead, ExpertChunkPolicy, apply_correction,
                       predict_residual)


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class Schedule:
    H: int
    e: int
    d: int

    def violation(self) -> str | None:
        return validate_schedule(self.H, self.e, self.d)

    def check(self) -> "Schedule":
        v = self.violation()
        if v:
            raise ScheduleError(f"invalid schedule H={self.H} e={self.e} d={self.d}: {v}")
        return self


def validate_schedule(H: int, e: int, d: int) -> str | None:
    """``None`` if ``max(d, 1) <= e <= H - d``; otherwise the violated bound."""
    if H < 1:
        return "H < 1"
    if d < 0:
        return "d < 0"
    if e < 1:
        return "e < 1 (no action executed per chunk)"
    if e < d:
        return "e < d (waiting gap: no action while the next chunk is inferred)"
    if e > H - d:
        return "e > H - d (chunk exhausted before the next one arrives)"
    return None


def compute_delay(delta_seconds: float, dt_seconds: float) -> int:
    """Delay in whole control steps, ``floor(delta / dt)``."""
    if not dt_seconds > 0 or delta_seconds < 0:
        raise ValueError("need dt > 0 and delta >= 0")
    # Tolerate representation error when delta is an exact multiple of dt.
    return int(np.floor(delta_seconds / dt_seconds + 1e-9))


@dataclass
class EpisodeTrace:
    seed: int
    schedule: Schedule
    env_hash: str
    t: list[int] = field(default_factory=list)
    k: list[int] = field(default_factory=list)
    base: list[np.ndarray] = field(default_factory=list)
    delta: list[np.ndarray] = field(default_factory=list)
    executed: list[np.ndarray] = field(default_factory=list)
    state_hash: list[str] = field(default_factory=list)
    success_so_far: list[bool] = field(default_factory=list)
    adoptions: list[int] = field(default_factory=list)
    success: bool = False
    overruns: int = 0

    def __len__(self) -> int:
        return len(self.t)

    @property
    def staleness(self) -> list[int]:
        """Age of the underlying observation when the action is issued."""
        return self.k

    @property
    def staleness_in_effect(self) -> list[int]:
        """Age counted through the end of the step the action stays applied."""
        return [k + 1 for k in self.k]

    def actions(self) -> np.ndarray:
        return np.stack(self.executed) if self.executed else np.zeros((0, 0), np.float32)

    def mean_delta_norm(self) -> float:
        if not self.delta:
            return 0.0
        return float(np.mean([np.abs(d).max() for d in self.delta]))

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.env_hash.encode())
        for i in range(len(self)):
            h.update(np.int64([self.t[i], self.k[i]]).tobytes())
            h.update(self.base[i].tobytes() + self.delta[i].tobytes() + self.executed[i].tobytes())
            h.update(self.state_hash[i].encode())
        h.update(bytes([self.success]))
        return h.hexdigest()


def env_event_hash(state: EnvState) -> str:
    """Hash of the episode's exogenous randomness (turn schedule / disturbance)."""
    h = hashlib.blake2b(digest_size=8)
    h.update(repr((state.target_pos, state.target_vel, state.turns, state.x, state.dist)).encode())
    return h.hexdigest()


def corrected_action(cfg: EnvConfig, state: EnvState, chunk: np.ndarray, k: int, H: int,
                     head: CorrectionHead | None, z) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(base action, residual, executed action) for chunk element ``k``."""
    base_a = chunk[k]
    if head is None:
        return base_a, np.zeros_like(base_a), base_a
    delta = predict_residual(head, observe(cfg, state), base_a, k, H, z)
    return base_a, delta, apply_correction(base_a, delta)


def run_episode(env_cfg: EnvConfig, base: BasePolicy | ExpertChunkPolicy, head: CorrectionHead | None,
                schedule: Schedule, seed: int) -> EpisodeTrace:
    """Simulate one episode under the asynchronous schedule."""
    H, e, d = schedule.check().H, schedule.e, schedule.d
    if base.H != H:
        raise ScheduleError(f"base policy has H={base.H}, schedule has H={H}")
    if base.obs_dim != env_cfg.obs_dim or base.act_dim != env_cfg.act_dim:
        raise ScheduleError("policy dims do not match the environment")
    if head is not None and (head.obs_dim, head.act_dim, head.H) != (base.obs_dim, base.act_dim, H):
        raise ScheduleError("correction head dims do not match the base policy")

    s = reset(env_cfg, seed)
    trace = EpisodeTrace(seed=seed, schedule=schedule, env_hash=env_event_hash(s))
    chunk, z = base.chunk(observe(env_cfg, s))
    src = -d
    pending = None  # (request step, chunk, latent)
    next_req = -d + e
    trace.adoptions.append(0)
    t = 0
    while not s.done:
        if pending is not None and pending[0] + d == t:
            src, chunk, z = pending
            pending = None
            trace.adoptions.append(t)
        if t == next_req:
            assert pending is None, "second inference submitted while one is pending"
            c, zz = base.chunk(observe(env_cfg, s))
            pending = (t, c, zz)
            next_req += e
            if d == 0:
                src, chunk, z = pending
                pending = None
                trace.adoptions.append(t)
        k = t - src
        assert d <= k <= d + e - 1, (t, k)
        base_a, delta, a = corrected_action(env_cfg, s, chunk, k, H, head, z)
        s, _, _ = step(env_cfg, s, a)
        trace.t.append(t)
        trace.k.append(k)
        trace.base.append(base_a)
        trace.delta.append(delta)
        trace.executed.append(a)
        trace.state_hash.append(s.snapshot_hash())
        trace.success_so_far.append(s.success)
        t += 1
    trace.success = s.success
    return trace


def staleness_stats(trace: EpisodeTrace) -> tuple[int, int, float]:
    if not len(trace):
        raise ValueError("empty trace")
    k = np.asarray(trace.staleness)
    return int(k.min()), int(k.max()), float(k.mean())


def write_trace_csv(trace: EpisodeTrace, path: str | Path) -> None:
    """Columns: t, k, staleness, staleness_in_effect, base_*, delta_*, exec_*,
    delta_norm (max-abs), success_so_far, state_hash."""
    act_dim = trace.base[0].shape[0] if trace.base else 0
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "k", "staleness", "staleness_in_effect",
                    *[f"base_{i}" for i in range(act_dim)],
                    *[f"delta_{i}" for i in range(act_dim)],
                    *[f"exec_{i}" for i in range(act_dim)],
                    "delta_norm", "success_so_far", "state_hash"])
        for i in range(len(trace)):
            w.writerow([trace.t[i], trace.k[i], trace.k[i], trace.k[i] + 1,
                        *map(repr, trace.base[i].tolist()), *map(repr, trace.delta[i].tolist()),
                        *map(repr, trace.executed[i].tolist()),
                        repr(float(np.abs(trace.delta[i]).max())),
                        int(trace.success_so_far[i]), trace.state_hash[i]])
