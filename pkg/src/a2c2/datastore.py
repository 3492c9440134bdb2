"""Expert datasets and the correction-head dataset built from base-policy chunks.

Binary layout (little-endian), shared by both dataset kinds::

    8s   magic "A2C2DS\\0\\0"
    u16  version
    u8   kind (0 = base, 1 = correction)
    u8   reserved (0)
    u32  obs_dim, act_dim, H, latent_dim, n_episodes
    u64  n_records
    f32  obs_mean[obs_dim], obs_std[obs_dim], act_mean[act_dim], act_std[act_dim]

base payload::

    u32  episode_len[n_episodes], task_id[n_episodes]
    f32  obs[n_records, obs_dim], act[n_records, act_dim]

correction payload::

    u32  episode[n], t[n], k[n]
    f32  obs[n, obs_dim], target[n, act_dim], base_action[n, act_dim],
         tau[n, 2], latent[n, latent_dim]
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from .envsim import EnvConfig, rollout_expert
from .numkit import derive_seed, sin_embed

DATASET_MAGIC = b"A2C2DS\0\0"
DATASET_VERSION = 1
KIND_BASE, KIND_CORRECTION = 0, 1
_HEADER = struct.Struct("<8sHBB5IQ")


class DatasetError(ValueError):
    pass


@dataclass
class Normalizer:
    obs_mean: np.ndarray
    obs_std: np.ndarray
    act_mean: np.ndarray
    act_std: np.ndarray

    @classmethod
    def fit(cls, obs: np.ndarray, act: np.ndarray) -> "Normalizer":
        def stats(a):
            a64 = a.astype(np.float64)
            std = a64.std(axis=0)
            std[std < 1e-6] = 1.0
            return a64.mean(axis=0).astype(np.float32), std.astype(np.float32)
        return cls(*stats(obs), *stats(act))

    @classmethod
    def identity(cls, obs_dim: int, act_dim: int) -> "Normalizer":
        return cls(np.zeros(obs_dim, np.float32), np.ones(obs_dim, np.float32),
                   np.zeros(act_dim, np.float32), np.ones(act_dim, np.float32))

    def norm_obs(self, obs):
        return ((obs - self.obs_mean) / self.obs_std).astype(np.float32)

    def norm_act(self, act):
        return ((act - self.act_mean) / self.act_std).astype(np.float32)

    def denorm_act(self, act):
        return (act * self.act_std + self.act_mean).astype(np.float32)

    def arrays(self):
        return [self.obs_mean, self.obs_std, self.act_mean, self.act_std]


@dataclass
class Episode:
    task_id: int
    obs: np.ndarray
    act: np.ndarray

    def __len__(self) -> int:
        return self.obs.shape[0]


@dataclass
class BaseDataset:
    obs: np.ndarray
    act: np.ndarray
    episode_lengths: np.ndarray
    task_ids: np.ndarray
    norm: Normalizer

    kind = KIND_BASE

    @property
    def obs_dim(self) -> int:
        return self.obs.shape[1]

    @property
    def act_dim(self) -> int:
        return self.act.shape[1]

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.episode_lengths)]).astype(np.int64)

    def episodes(self):
        off = self.offsets
        for i, tid in enumerate(self.task_ids):
            yield Episode(int(tid), self.obs[off[i]:off[i + 1]], self.act[off[i]:off[i + 1]])

    @classmethod
    def from_episodes(cls, episodes: list[Episode], norm: Normalizer | None = None) -> "BaseDataset":
        if not episodes:
            raise DatasetError("need at least one episode")
        obs = np.concatenate([e.obs for e in episodes]).astype(np.float32)
        act = np.concatenate([e.act for e in episodes]).astype(np.float32)
        return cls(obs, act,
                   np.array([len(e) for e in episodes], np.uint32),
                   np.array([e.task_id for e in episodes], np.uint32),
                   norm or Normalizer.fit(obs, act))


@dataclass
class CorrectionRecord:
    t: int
    obs: np.ndarray
    target: np.ndarray
    k: int
    base_action: np.ndarray
    tau: np.ndarray
    latent: np.ndarray | None = None


@dataclass
class CorrectionDataset:
    episode: np.ndarray
    t: np.ndarray
    k: np.ndarray
    obs: np.ndarray
    target: np.ndarray
    base_action: np.ndarray
    tau: np.ndarray
    latent: np.ndarray
    H: int
    n_episodes: int
    norm: Normalizer

    kind = KIND_CORRECTION

    def __len__(self) -> int:
        return self.t.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.obs.shape[1]

    @property
    def act_dim(self) -> int:
        return self.target.shape[1]

    @property
    def latent_dim(self) -> int:
        return self.latent.shape[1]

    def record(self, i: int) -> CorrectionRecord:
        return CorrectionRecord(int(self.t[i]), self.obs[i], self.target[i], int(self.k[i]),
                                self.base_action[i], self.tau[i],
                                self.latent[i] if self.latent_dim else None)

    def residuals(self) -> np.ndarray:
        return self.target - self.base_action


def residual_target(record: CorrectionRecord) -> np.ndarray:
    return (record.target - record.base_action).astype(np.float32)


def dcor_count(T: int, H: int) -> int:
    """Number of correction records one episode of length T yields."""
    return sum(min(t, H - 1) + 1 for t in range(T))


# --------------------------------------------------------------------------
# Expert recording
# --------------------------------------------------------------------------

def expert_episode_seed(seed: int, i: int) -> int:
    return derive_seed(seed, "gen-expert", i)


def record_expert_dataset(env: EnvConfig, n_episodes: int, seed: int,
                          path: str | Path | None = None) -> BaseDataset:
    """Roll out the scripted expert ``n_episodes`` times (task_id = episode seed index)."""
    if n_episodes < 1:
        raise DatasetError("n_episodes must be >= 1")
    episodes = []
    for i in range(n_episodes):
        obs, act, _ = rollout_expert(env, expert_episode_seed(seed, i))
        episodes.append(Episode(i, obs, act))
    ds = BaseDataset.from_episodes(episodes)
    if path is not None:
        write_dataset(path, ds)
    return ds


# --------------------------------------------------------------------------
# D_cor construction
# --------------------------------------------------------------------------

class ChunkSource(Protocol):
    def chunks_for_episode(self, obs: np.ndarray, act: np.ndarray
                           ) -> tuple[np.ndarray, np.ndarray | None]:
        """Chunks (T, H, act_dim) and optional latents (T, latent_dim)."""


def build_dcor(dbase: BaseDataset, base_policy: ChunkSource, H: int,
               capture_latent: bool = False, path: str | Path | None = None
               ) -> CorrectionDataset:
    """Pair every target action with each chunk element that could execute at its step.

    For step t and every k <= min(t, H-1) the record holds chunk element k of
    the chunk inferred on o_{t-k}. Each chunk is computed once per step.
    """
    if H < 1:
        raise DatasetError("H must be >= 1")
    pol_obs = getattr(base_policy, "obs_dim", dbase.obs_dim)
    pol_act = getattr(base_policy, "act_dim", dbase.act_dim)
    pol_H = getattr(base_policy, "H", H)
    if (pol_obs, pol_act, pol_H) != (dbase.obs_dim, dbase.act_dim, H):
        raise DatasetError(
            f"base policy dims (obs {pol_obs}, act {pol_act}, H {pol_H}) do not match "
            f"dataset (obs {dbase.obs_dim}, act {dbase.act_dim}, H {H})")
    cols: dict[str, list] = {k: [] for k in ("episode", "t", "k", "obs", "target", "base", "latent")}
    taus = np.stack([sin_embed(k, H) for k in range(H)])
    latent_dim = 0
    for ei, ep in enumerate(dbase.episodes()):
        chunks, latents = base_policy.chunks_for_episode(ep.obs, ep.act)
        if chunks.shape != (len(ep), H, dbase.act_dim):
            raise DatasetError(f"chunk block shape {chunks.shape} for episode {ei}")
        if capture_latent:
            if latents is None:
                raise DatasetError("capture_latent requested but base policy exposes no latent")
            latent_dim = latents.shape[1]
        T = len(ep)
        t_idx = np.concatenate([np.full(min(t, H - 1) + 1, t) for t in range(T)])
        k_idx = np.concatenate([np.arange(min(t, H - 1) + 1) for t in range(T)])
        src = t_idx - k_idx
        cols["episode"].append(np.full(t_idx.shape, ei, np.uint32))
        cols["t"].append(t_idx.astype(np.uint32))
        cols["k"].append(k_idx.astype(np.uint32))
        cols["obs"].append(ep.obs[t_idx])
        cols["target"].append(ep.act[t_idx])
        cols["base"].append(chunks[src, k_idx])
        if capture_latent:
            cols["latent"].append(latents[src])
    n = sum(a.shape[0] for a in cols["t"])
    k_all = np.concatenate(cols["k"])
    ds = CorrectionDataset(
        episode=np.concatenate(cols["episode"]),
        t=np.concatenate(cols["t"]),
        k=k_all,
        obs=np.concatenate(cols["obs"]).astype(np.float32),
        target=np.concatenate(cols["target"]).astype(np.float32),
        base_action=np.concatenate(cols["base"]).astype(np.float32),
        tau=taus[k_all],
        latent=(np.concatenate(cols["latent"]).astype(np.float32) if capture_latent
                else np.zeros((n, 0), np.float32)),
        H=H,
        n_episodes=len(dbase.episode_lengths),
        norm=dbase.norm,
    )
    if path is not None:
        write_dataset(path, ds)
    return ds


class ExpertReplay:
    """Chunk source that returns the dataset's own future actions (tail-padded)."""

    def __init__(self, H: int, bias=None):
        self.H = H
        self.bias = bias

    def chunks_for_episode(self, obs, act):
        T = act.shape[0]
        idx = np.minimum(np.arange(T)[:, None] + np.arange(self.H)[None, :], T - 1)
        return act[idx], None


class BiasedReplay(ExpertReplay):
    """Expert replay with a constant offset added to every chunk element."""

    def chunks_for_episode(self, obs, act):
        chunks, _ = super().chunks_for_episode(obs, act)
        return (chunks + np.asarray(self.bias, np.float32)).astype(np.float32), None


# --------------------------------------------------------------------------
# File I/O
# --------------------------------------------------------------------------

def _payload_size(kind: int, obs_dim: int, act_dim: int, latent_dim: int, n_ep: int, n: int) -> int:
    if kind == KIND_BASE:
        return 8 * n_ep + 4 * n * (obs_dim + act_dim)
    return 12 * n + 4 * n * (obs_dim + 2 * act_dim + 2 + latent_dim)


def write_dataset(path: str | Path, ds: BaseDataset | CorrectionDataset) -> None:
    path = Path(path)
    if ds.kind == KIND_BASE:
        H, latent_dim, n_ep, n = 0, 0, len(ds.episode_lengths), ds.obs.shape[0]
    else:
        H, latent_dim, n_ep, n = ds.H, ds.latent_dim, ds.n_episodes, len(ds)
    header = _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, ds.kind, 0, ds.obs_dim, ds.act_dim,
                          H, latent_dim, n_ep, n)
    try:
        with open(path, "wb") as f:
            f.write(header)
            for a in ds.norm.arrays():
                f.write(np.ascontiguousarray(a, "<f4").tobytes())
            if ds.kind == KIND_BASE:
                parts = [(ds.episode_lengths, "<u4"), (ds.task_ids, "<u4"), (ds.obs, "<f4"),
                         (ds.act, "<f4")]
            else:
                parts = [(ds.episode, "<u4"), (ds.t, "<u4"), (ds.k, "<u4"), (ds.obs, "<f4"),
                         (ds.target, "<f4"), (ds.base_action, "<f4"), (ds.tau, "<f4"),
                         (ds.latent, "<f4")]
            for a, dt in parts:
                f.write(np.ascontiguousarray(a, dt).tobytes())
    except OSError as exc:
        raise OSError(f"cannot write dataset {path}: {exc}") from exc


def read_dataset(path: str | Path) -> BaseDataset | CorrectionDataset:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read dataset {path}: {exc}") from exc
    if len(data) < _HEADER.size:
        raise DatasetError(f"{path}: truncated header: expected {_HEADER.size} bytes, got {len(data)}")
    magic, version, kind, _, obs_dim, act_dim, H, latent_dim, n_ep, n = _HEADER.unpack_from(data)
    if magic != DATASET_MAGIC:
        raise DatasetError(f"{path}: bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise DatasetError(f"{path}: unsupported dataset version {version} (expected {DATASET_VERSION})")
    if kind not in (KIND_BASE, KIND_CORRECTION):
        raise DatasetError(f"{path}: unknown dataset kind {kind}")
    if obs_dim == 0 or act_dim == 0 or (kind == KIND_CORRECTION and H == 0):
        raise DatasetError(f"{path}: zero dimension in header")
    expected = (_HEADER.size + 8 * (obs_dim + act_dim)
                + _payload_size(kind, obs_dim, act_dim, latent_dim, n_ep, n))
    if len(data) != expected:
        raise DatasetError(f"{path}: size mismatch: expected {expected} bytes, got {len(data)}")
    off = _HEADER.size

    def take(count, dt, shape=None):
        nonlocal off
        a = np.frombuffer(data, dtype=dt, count=count, offset=off)
        off += a.nbytes
        a = a.astype(dt[1:] if dt[0] == "<" else dt)
        return a.reshape(shape) if shape else a

    norm = Normalizer(take(obs_dim, "<f4"), take(obs_dim, "<f4"),
                      take(act_dim, "<f4"), take(act_dim, "<f4"))
    if kind == KIND_BASE:
        lengths = take(n_ep, "<u4")
        task_ids = take(n_ep, "<u4")
        if int(lengths.sum()) != n:
            raise DatasetError(f"{path}: episode lengths sum to {int(lengths.sum())}, header says {n}")
        return BaseDataset(take(n * obs_dim, "<f4", (n, obs_dim)),
                           take(n * act_dim, "<f4", (n, act_dim)), lengths, task_ids, norm)
    return CorrectionDataset(
        episode=take(n, "<u4"), t=take(n, "<u4"), k=take(n, "<u4"),
        obs=take(n * obs_dim, "<f4", (n, obs_dim)),
        target=take(n * act_dim, "<f4", (n, act_dim)),
        base_action=take(n * act_dim, "<f4", (n, act_dim)),
        tau=take(2 * n, "<f4", (n, 2)),
        latent=take(n * latent_dim, "<f4", (n, latent_dim)),
        H=H, n_episodes=n_ep, norm=norm)


def export_csv(ds: BaseDataset | CorrectionDataset, path: str | Path) -> None:
    """One row per record.

    base columns: episode, t, obs_0.., act_0..
    correction columns: episode, t, k, obs_0.., target_0.., base_0.., tau_sin, tau_cos, latent_0..
    """
    obs_cols = [f"obs_{i}" for i in range(ds.obs_dim)]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        if ds.kind == KIND_BASE:
            w.writerow(["episode", "t", *obs_cols, *[f"act_{i}" for i in range(ds.act_dim)]])
            off = ds.offsets
            for e in range(len(ds.episode_lengths)):
                for t in range(int(ds.episode_lengths[e])):
                    r = off[e] + t
                    w.writerow([e, t, *map(repr, ds.obs[r].tolist()), *map(repr, ds.act[r].tolist())])
            return
        w.writerow(["episode", "t", "k", *obs_cols,
                    *[f"target_{i}" for i in range(ds.act_dim)],
                    *[f"base_{i}" for i in range(ds.act_dim)], "tau_sin", "tau_cos",
                    *[f"latent_{i}" for i in range(ds.latent_dim)]])
        for r in range(len(ds)):
            w.writerow([int(ds.episode[r]), int(ds.t[r]), int(ds.k[r]),
                        *map(repr, ds.obs[r].tolist()), *map(repr, ds.target[r].tolist()),
                        *map(repr, ds.base_action[r].tolist()), *map(repr, ds.tau[r].tolist()),
                        *map(repr, ds.latent[r].tolist())])
