"""Deterministic toy control tasks with scripted experts.

``pursuit``: a double-integrator agent must stay within ``r_catch`` of a
target for 3 consecutive steps. The target moves at constant speed and picks a
new random heading at geometrically distributed intervals, so open-loop
action chunks go stale quickly.

``holdzone``: an unstable scalar plant ``x' = x + dt (alpha x + u_gain a + w)``
under a band-limited random disturbance ``w``. The episode fails when
``|x| > 1``; surviving ``episode_len`` steps is a success.

All episode randomness (turn schedule, disturbance) is drawn at reset, so a
state is a plain value and the trajectory depends only on
``(config, episode_seed, actions)``.
"""
from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .numkit import make_rng

ENV_IDS = ("pursuit", "holdzone")


class EpisodeDone(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    env_id: str = "pursuit"
    episode_len: int = 200
    dt_env: float = 0.05
    seed: int = 0
    # pursuit
    a_gain: float = 4.0
    v_max: float = 1.5
    target_speed: float = 0.8
    turn_mean_steps: float = 15.0
    r_catch: float = 0.15
    catch_steps: int = 3
    spawn_min: float = 1.0
    spawn_max: float = 2.0
    arena: float = 4.0
    # holdzone
    alpha: float = 0.6
    u_gain: float = 6.0
    dist_amp: float = 1.5
    dist_fmin: float = 0.4
    dist_fmax: float = 1.6
    dist_terms: int = 3
    x0_max: float = 0.1

    def __post_init__(self):
        if self.env_id not in ENV_IDS:
            raise ValueError(f"env_id must be one of {ENV_IDS}, got {self.env_id!r}")
        if self.episode_len < 1:
            raise ValueError("episode_len must be >= 1")
        if not self.dt_env > 0:
            raise ValueError("dt_env must be > 0")

    @property
    def obs_dim(self) -> int:
        return 10 if self.env_id == "pursuit" else 2

    @property
    def act_dim(self) -> int:
        return 2 if self.env_id == "pursuit" else 1

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass(frozen=True)
class EnvState:
    """Union state for both tasks; unused fields stay zero."""

    t: int = 0
    done: bool = False
    success: bool = False
    # pursuit
    pos: tuple[float, float] = (0.0, 0.0)
    vel: tuple[float, float] = (0.0, 0.0)
    target_pos: tuple[float, float] = (0.0, 0.0)
    target_vel: tuple[float, float] = (0.0, 0.0)
    turn_countdown: int = 0
    catch_count: int = 0
    turns: tuple[tuple[int, float], ...] = field(default=(), repr=False)
    # holdzone
    x: float = 0.0
    dist: tuple[tuple[float, float, float], ...] = field(default=(), repr=False)

    def snapshot_hash(self) -> str:
        h = hashlib.blake2b(digest_size=8)
        h.update(struct.pack("<i??", self.t, self.done, self.success))
        h.update(struct.pack("<9di", *self.pos, *self.vel, *self.target_pos,
                             *self.target_vel, self.x, self.catch_count))
        return h.hexdigest()


def _clamp(v: float, lo: float = -1.0, hi: float = 1.0) -> float:
    return lo if v < lo else hi if v > hi else v


def clamp_action(action) -> np.ndarray:
    return np.clip(np.asarray(action, dtype=np.float32), -1.0, 1.0)


def disturbance(cfg: EnvConfig, state: EnvState, t: int | None = None) -> float:
    t = state.t if t is None else t
    time = t * cfg.dt_env
    return sum(a * math.sin(2.0 * math.pi * f * time + ph) for a, f, ph in state.dist)


def reset(cfg: EnvConfig, episode_seed: int) -> EnvState:
    rng = make_rng(cfg.seed, cfg.env_id, "episode", episode_seed)
    if cfg.env_id == "pursuit":
        r = rng.uniform(cfg.spawn_min, cfg.spawn_max)
        ang = rng.uniform(0.0, 2.0 * math.pi)
        heading = rng.uniform(0.0, 2.0 * math.pi)
        # Turn schedule: (step index, new heading), geometric gaps of mean turn_mean_steps.
        turns = []
        p = 1.0 / cfg.turn_mean_steps
        t = 0
        while True:
            t += int(rng.geometric(p))
            if t >= cfg.episode_len:
                break
            turns.append((t, float(rng.uniform(0.0, 2.0 * math.pi))))
        countdown = (turns[0][0] if turns else cfg.episode_len)
        s = cfg.target_speed
        return EnvState(
            target_pos=(float(r * math.cos(ang)), float(r * math.sin(ang))),
            target_vel=(float(s * math.cos(heading)), float(s * math.sin(heading))),
            turn_countdown=countdown,
            turns=tuple(turns),
        )
    dist = []
    for j in range(cfg.dist_terms):
        f = rng.uniform(cfg.dist_fmin, cfg.dist_fmax)
        ph = rng.uniform(0.0, 2.0 * math.pi)
        dist.append((cfg.dist_amp / cfg.dist_terms * rng.uniform(0.5, 1.0), float(f), float(ph)))
    return EnvState(x=float(rng.uniform(-cfg.x0_max, cfg.x0_max)), dist=tuple(dist))


def observe(cfg: EnvConfig, state: EnvState) -> np.ndarray:
    """Flat observation vector (float32).

    pursuit: pos, vel, target_pos, target_vel, target_pos - pos (10 dims);
    holdzone: x, t / episode_len (2 dims).
    """
    if cfg.env_id == "pursuit":
        (px, py), (tx, ty) = state.pos, state.target_pos
        return np.array([px, py, *state.vel, tx, ty, *state.target_vel, tx - px, ty - py],
                        dtype=np.float32)
    return np.array([state.x, state.t / cfg.episode_len], dtype=np.float32)


def step(cfg: EnvConfig, state: EnvState, action) -> tuple[EnvState, bool, bool]:
    """Advance one control step; returns ``(next_state, done, success)``."""
    if state.done:
        raise EpisodeDone(f"episode already finished at t={state.t}")
    a = [_clamp(float(v)) for v in np.asarray(action).ravel()]
    if len(a) != cfg.act_dim:
        raise ValueError(f"action dim {len(a)} != {cfg.act_dim}")
    if cfg.env_id == "pursuit":
        nxt = _step_pursuit(cfg, state, a)
    else:
        nxt = _step_holdzone(cfg, state, a[0])
    return nxt, nxt.done, nxt.success


def _step_pursuit(cfg: EnvConfig, s: EnvState, a: list[float]) -> EnvState:
    dt, L = cfg.dt_env, cfg.arena
    vx = s.vel[0] + a[0] * dt * cfg.a_gain
    vy = s.vel[1] + a[1] * dt * cfg.a_gain
    sp = math.hypot(vx, vy)
    if sp > cfg.v_max:
        vx, vy = vx * cfg.v_max / sp, vy * cfg.v_max / sp
    px, py = s.pos[0] + vx * dt, s.pos[1] + vy * dt
    if abs(px) > L:
        px, vx = math.copysign(L, px), 0.0
    if abs(py) > L:
        py, vy = math.copysign(L, py), 0.0

    t = s.t + 1
    tvx, tvy = s.target_vel
    countdown = s.turn_countdown - 1
    if countdown <= 0:
        nxt_turn = None
        for turn_t, heading in s.turns:
            if turn_t == t:
                tvx = cfg.target_speed * math.cos(heading)
                tvy = cfg.target_speed * math.sin(heading)
            elif turn_t > t:
                nxt_turn = turn_t
                break
        countdown = (nxt_turn if nxt_turn is not None else cfg.episode_len + 1) - t
    tx, ty = s.target_pos[0] + tvx * dt, s.target_pos[1] + tvy * dt
    # Target reflects off the arena wall.
    tl = L - 1.0
    if abs(tx) > tl:
        tx, tvx = math.copysign(2 * tl, tx) - tx, -tvx
    if abs(ty) > tl:
        ty, tvy = math.copysign(2 * tl, ty) - ty, -tvy

    near = math.hypot(tx - px, ty - py) < cfg.r_catch
    catch = s.catch_count + 1 if near else 0
    success = s.success or catch >= cfg.catch_steps
    done = success or t >= cfg.episode_len
    return replace(s, t=t, done=done, success=success, pos=(px, py), vel=(vx, vy),
                   target_pos=(tx, ty), target_vel=(tvx, tvy), turn_countdown=countdown,
                   catch_count=catch)


def _step_holdzone(cfg: EnvConfig, s: EnvState, a: float) -> EnvState:
    w = disturbance(cfg, s)
    x = s.x + cfg.dt_env * (cfg.alpha * s.x + cfg.u_gain * a + w)
    t = s.t + 1
    failed = abs(x) > 1.0
    # Failure ends the episode; x is clipped so states stay bounded.
    x = _clamp(x, -1.0 - 1e-6, 1.0 + 1e-6) if failed else x
    success = (not failed) and t >= cfg.episode_len
    done = failed or t >= cfg.episode_len
    return replace(s, t=t, done=done, success=success, x=x)


# Expert gains, frozen after checking the closed-loop success oracle.
PURSUIT_KP = 2.0
PURSUIT_KV = 2.5
HOLDZONE_K = 3.0


def expert_action(cfg: EnvConfig, state: EnvState) -> np.ndarray:
    """Scripted expert: lead-pursuit PD (pursuit) or P stabilizer (holdzone)."""
    if state.done:
        raise EpisodeDone("no expert action for a finished episode")
    if cfg.env_id == "pursuit":
        (px, py), (vx, vy) = state.pos, state.vel
        (tx, ty), (tvx, tvy) = state.target_pos, state.target_vel
        dvx = tvx + PURSUIT_KP * (tx - px)
        dvy = tvy + PURSUIT_KP * (ty - py)
        sp = math.hypot(dvx, dvy)
        if sp > cfg.v_max:
            dvx, dvy = dvx * cfg.v_max / sp, dvy * cfg.v_max / sp
        return np.array([_clamp(PURSUIT_KV * (dvx - vx)), _clamp(PURSUIT_KV * (dvy - vy))],
                        dtype=np.float32)
    return np.array([_clamp(-HOLDZONE_K * state.x)], dtype=np.float32)


def state_from_obs(cfg: EnvConfig, obs) -> EnvState:
    """Rebuild a state from an observation; future turns/disturbance are unknown (none)."""
    o = [float(v) for v in np.asarray(obs).ravel()]
    if cfg.env_id == "pursuit":
        return EnvState(pos=(o[0], o[1]), vel=(o[2], o[3]), target_pos=(o[4], o[5]),
                        target_vel=(o[6], o[7]), turn_countdown=cfg.episode_len + 1)
    return EnvState(x=o[0], t=int(round(o[1] * cfg.episode_len)))


def expert_chunk(cfg: EnvConfig, obs, H: int) -> np.ndarray:
    """Expert actions for H steps, simulated open-loop from ``obs`` with nominal dynamics."""
    s = replace(state_from_obs(cfg, obs), t=0)
    nominal = replace(cfg, episode_len=H + 1)
    out = []
    for _ in range(H):
        if s.done:
            out.append(out[-1])
            continue
        a = expert_action(nominal, s)
        out.append(a)
        s, _, _ = step(nominal, s, a)
    return np.stack(out)


def rollout_expert(cfg: EnvConfig, episode_seed: int):
    """Closed-loop expert episode; returns (observations, actions, success)."""
    s = reset(cfg, episode_seed)
    obs, acts = [], []
    while not s.done:
        a = expert_action(cfg, s)
        obs.append(observe(cfg, s))
        acts.append(a)
        s, _, _ = step(cfg, s, a)
    return np.stack(obs), np.stack(acts), s.success
