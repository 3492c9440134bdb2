"""Behavior-cloned chunk policy and the per-step residual correction head."""
from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .envsim import EnvConfig, expert_chunk
from .datastore import BaseDataset, CorrectionDataset, DatasetError, Normalizer, KIND_BASE, KIND_CORRECTION
from .numkit import (AdamWState, MlpSpec, MlpWeights, ShapeError, adamw_step, derive_seed,
                     forward_one, init_mlp, make_rng, mlp_forward, mse_loss_and_grad,
                     sin_embed, weights_from_bytes, weights_to_bytes)

log = logging.getLogger(__name__)

POLICY_MAGIC = b"A2C2PL\0\0"
POLICY_VERSION = 1
KIND_BASE_POLICY, KIND_HEAD = 0, 1
_POLICY_HEADER = struct.Struct("<8sHB5IB")

BASE_HIDDEN = (512, 512, 512)
HEAD_HIDDEN = (64, 64)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    batch_size: int
    epochs: int
    weight_decay: float
    grad_clip: float
    warmup_steps: int
    seed: int = 0
    eval_fraction: float = 0.1

    def __post_init__(self):
        if min(self.learning_rate, self.batch_size, self.epochs, self.grad_clip) <= 0:
            raise ValueError(f"non-positive training hyperparameter in {self}")
        if self.weight_decay < 0 or self.warmup_steps < 0:
            raise ValueError("weight_decay and warmup_steps must be >= 0")
        if not 0 < self.eval_fraction <= 0.5:
            raise ValueError("eval_fraction must be in (0, 0.5]")


# Flow-policy and correction-head tables of the method's appendix.
BASE_TRAIN_DEFAULTS = TrainConfig(learning_rate=3e-4, batch_size=512, epochs=32,
                                  weight_decay=1e-2, grad_clip=10.0, warmup_steps=1000)
HEAD_TRAIN_DEFAULTS = TrainConfig(learning_rate=1e-4, batch_size=512, epochs=16,
                                  weight_decay=1e-3, grad_clip=5.0, warmup_steps=500)


@dataclass
class LossCurve:
    train: list[float] = field(default_factory=list)
    heldout: list[float] = field(default_factory=list)


@dataclass
class BasePolicy:
    weights: MlpWeights
    obs_dim: int
    act_dim: int
    H: int
    norm: Normalizer
    latent_tap: int = -1

    def __post_init__(self):
        sizes = self.weights.layer_sizes
        if sizes[0] != self.obs_dim or sizes[-1] != self.H * self.act_dim:
            raise ShapeError(f"base MLP sizes {sizes} do not map obs {self.obs_dim} -> "
                             f"{self.H}x{self.act_dim}")
        n_hidden = len(sizes) - 2
        if self.latent_tap < 0:
            self.latent_tap = n_hidden - 1
        if not 0 <= self.latent_tap < n_hidden:
            raise ShapeError(f"latent tap {self.latent_tap} is not a hidden layer")

    @property
    def latent_dim(self) -> int:
        return self.weights.layer_sizes[self.latent_tap + 1]

    def chunk(self, obs):
        return predict_chunk(self, obs)

    def chunks_for_episode(self, obs, act=None):
        chunks, latents = zip(*(predict_chunk(self, o) for o in obs))
        return np.stack(chunks), np.stack(latents)


@dataclass
class ExpertChunkPolicy:
    """Scripted expert as a chunk source (open-loop on nominal dynamics)."""

    env: EnvConfig
    H: int

    @property
    def obs_dim(self) -> int:
        return self.env.obs_dim

    @property
    def act_dim(self) -> int:
        return self.env.act_dim

    latent_dim = 0

    def chunk(self, obs):
        return expert_chunk(self.env, obs, self.H), np.zeros(0, np.float32)


@dataclass
class CorrectionHead:
    weights: MlpWeights
    obs_dim: int
    act_dim: int
    H: int
    norm: Normalizer
    latent_dim: int = 0
    use_latent: bool = False

    def __post_init__(self):
        n_in = self.obs_dim + self.act_dim + 2 + (self.latent_dim if self.use_latent else 0)
        sizes = self.weights.layer_sizes
        if sizes[0] != n_in or sizes[-1] != self.act_dim:
            raise ShapeError(f"head MLP sizes {sizes} do not match input {n_in} -> {self.act_dim}")


def zero_head(like: CorrectionHead | None = None, *, obs_dim=None, act_dim=None, H=8,
              norm=None) -> CorrectionHead:
    """Head whose output is identically zero."""
    if like is not None:
        w = like.weights.zeros_like()
        return replace(like, weights=w)
    n_in = obs_dim + act_dim + 2
    w = init_mlp(MlpSpec((n_in, *HEAD_HIDDEN, act_dim), True)).zeros_like()
    return CorrectionHead(w, obs_dim, act_dim, H, norm or Normalizer.identity(obs_dim, act_dim))


# --------------------------------------------------------------------------
# Inference
# --------------------------------------------------------------------------

def predict_chunk(policy: BasePolicy, obs) -> tuple[np.ndarray, np.ndarray]:
    """Chunk (H, act_dim) clamped to [-1, 1] plus the tapped hidden activation."""
    obs = np.asarray(obs, np.float32).ravel()
    if obs.shape[0] != policy.obs_dim:
        raise ShapeError(f"observation dim {obs.shape[0]} != {policy.obs_dim}")
    out, z = forward_one(policy.weights, policy.norm.norm_obs(obs), policy.latent_tap)
    chunk = policy.norm.denorm_act(out.reshape(policy.H, policy.act_dim))
    return np.clip(chunk, -1.0, 1.0), z


def head_input(head: CorrectionHead, obs, base_action, k: int, z=None) -> np.ndarray:
    obs = np.asarray(obs, np.float32).ravel()
    if obs.shape[0] != head.obs_dim:
        raise ShapeError(f"observation dim {obs.shape[0]} != {head.obs_dim}")
    parts = [head.norm.norm_obs(obs),
             np.asarray(base_action, np.float32).ravel(), sin_embed(k, head.H)]
    if head.use_latent:
        if z is None:
            raise ShapeError("head conditions on the base latent but none was given")
        parts.append(np.asarray(z, np.float32).ravel())
    return np.concatenate(parts)


def predict_residual(head: CorrectionHead, obs, base_action, k: int, H: int, z=None) -> np.ndarray:
    """Residual for chunk element ``k`` given the current observation."""
    if H != head.H:
        raise ShapeError(f"head trained for H={head.H}, called with H={H}")
    x = head_input(head, obs, base_action, k, z)
    if x.shape[0] != head.weights.layer_sizes[0]:
        raise ShapeError(f"head input dim {x.shape[0]} != {head.weights.layer_sizes[0]}")
    out, _ = forward_one(head.weights, x)
    return out


def apply_correction(base_action, delta) -> np.ndarray:
    base_action = np.asarray(base_action, np.float32)
    delta = np.asarray(delta, np.float32)
    if base_action.shape != delta.shape:
        raise ShapeError(f"base {base_action.shape} vs delta {delta.shape}")
    return np.clip(base_action + delta, -1.0, 1.0)


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

def _split_episodes(n_episodes: int, cfg: TrainConfig) -> np.ndarray:
    """Boolean mask of held-out episodes (at least one, never all)."""
    rng = make_rng(cfg.seed, "heldout-split")
    n_eval = min(max(1, int(round(n_episodes * cfg.eval_fraction))), max(n_episodes - 1, 0))
    mask = np.zeros(n_episodes, bool)
    mask[rng.permutation(n_episodes)[:n_eval]] = True
    return mask


def _fit(weights: MlpWeights, x: np.ndarray, y: np.ndarray, xv: np.ndarray, yv: np.ndarray,
         cfg: TrainConfig, tag: str) -> LossCurve:
    opt = AdamWState(learning_rate=cfg.learning_rate, weight_decay=cfg.weight_decay,
                     grad_clip_norm=cfg.grad_clip, warmup_steps=cfg.warmup_steps)
    curve = LossCurve()
    n = x.shape[0]
    for epoch in range(cfg.epochs):
        order = make_rng(cfg.seed, tag, "shuffle", epoch).permutation(n)
        total, seen = 0.0, 0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            loss, grads = mse_loss_and_grad(weights, x[idx], y[idx])
            adamw_step(opt, weights, grads)
            total += loss * len(idx)
            seen += len(idx)
        curve.train.append(total / seen)
        curve.heldout.append(_mse(weights, xv, yv) if len(xv) else float("nan"))
        log.info("%s epoch %d train %.5g heldout %.5g", tag, epoch, curve.train[-1], curve.heldout[-1])
    return curve


def _mse(weights: MlpWeights, x: np.ndarray, y: np.ndarray, batch: int = 4096) -> float:
    total = 0.0
    for s in range(0, x.shape[0], batch):
        d = mlp_forward(weights, x[s:s + batch]) - y[s:s + batch]
        total += float(np.einsum("ij,ij->", d, d, dtype=np.float64))
    return total / x.shape[0]


def base_training_pairs(dbase: BaseDataset, H: int, episodes: np.ndarray | None = None):
    """(normalized obs, normalized flattened chunk) for every full-chunk start."""
    obs_rows, chunk_rows = [], []
    off = dbase.offsets
    for e, T in enumerate(dbase.episode_lengths):
        if episodes is not None and not episodes[e]:
            continue
        T = int(T)
        starts = np.arange(0, T - H + 1) + off[e]
        if starts.size == 0:
            continue
        obs_rows.append(starts)
        chunk_rows.append(starts[:, None] + np.arange(H)[None, :])
    if not obs_rows:
        return (np.zeros((0, dbase.obs_dim), np.float32),
                np.zeros((0, H * dbase.act_dim), np.float32))
    rows = np.concatenate(obs_rows)
    crow = np.concatenate(chunk_rows)
    x = dbase.norm.norm_obs(dbase.obs[rows])
    y = dbase.norm.norm_act(dbase.act[crow]).reshape(len(rows), H * dbase.act_dim)
    return x, y


def train_base(dbase: BaseDataset, cfg: TrainConfig = BASE_TRAIN_DEFAULTS, H: int = 8,
               hidden: tuple[int, ...] = BASE_HIDDEN) -> tuple[BasePolicy, LossCurve]:
    """Regress the next H expert actions from the current observation (MSE)."""
    if dbase.kind != KIND_BASE:
        raise DatasetError("train_base needs a base (expert) dataset")
    held = _split_episodes(len(dbase.episode_lengths), cfg)
    x, y = base_training_pairs(dbase, H, ~held)
    xv, yv = base_training_pairs(dbase, H, held)
    if len(x) == 0:
        raise DatasetError(f"no episode is long enough for a full chunk of H={H}")
    spec = MlpSpec((dbase.obs_dim, *hidden, H * dbase.act_dim), False,
                   derive_seed(cfg.seed, "base-init"))
    weights = init_mlp(spec)
    curve = _fit(weights, x, y, xv, yv, cfg, "base")
    weights.invalidate()
    return BasePolicy(weights, dbase.obs_dim, dbase.act_dim, H, dbase.norm), curve


def correction_inputs(dcor: CorrectionDataset, use_latent: bool,
                      rows: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    sel = slice(None) if rows is None else rows
    parts = [dcor.norm.norm_obs(dcor.obs[sel]), dcor.base_action[sel], dcor.tau[sel]]
    if use_latent:
        parts.append(dcor.latent[sel])
    x = np.concatenate(parts, axis=1).astype(np.float32)
    y = (dcor.target[sel] - dcor.base_action[sel]).astype(np.float32)
    return x, y


def train_correction(dcor: CorrectionDataset, cfg: TrainConfig = HEAD_TRAIN_DEFAULTS,
                     use_latent: bool = False, hidden: tuple[int, ...] = HEAD_HIDDEN
                     ) -> tuple[CorrectionHead, LossCurve]:
    """Fit the residual ``target - base_action`` with MSE over all records (all k)."""
    if dcor.kind != KIND_CORRECTION:
        raise DatasetError("train_correction needs a correction dataset, got a base dataset")
    if use_latent and dcor.latent_dim == 0:
        raise DatasetError("use_latent requested but the dataset carries no latent")
    held_ep = _split_episodes(dcor.n_episodes, cfg)
    held = held_ep[dcor.episode]
    x, y = correction_inputs(dcor, use_latent, np.flatnonzero(~held))
    xv, yv = correction_inputs(dcor, use_latent, np.flatnonzero(held))
    spec = MlpSpec((x.shape[1], *hidden, dcor.act_dim), True, derive_seed(cfg.seed, "head-init"))
    weights = init_mlp(spec)
    curve = _fit(weights, x, y, xv, yv, cfg, "head")
    weights.invalidate()
    head = CorrectionHead(weights, dcor.obs_dim, dcor.act_dim, dcor.H, dcor.norm,
                          dcor.latent_dim if use_latent else 0, use_latent)
    return head, curve


# --------------------------------------------------------------------------
# Policy files
# --------------------------------------------------------------------------
#
# Little-endian layout:
#   8s  magic "A2C2PL\0\0"; u16 version; u8 kind (0 base, 1 head)
#   u32 obs_dim, act_dim, H, latent_dim, latent_tap; u8 use_latent
#   f32 obs_mean, obs_std (obs_dim each), act_mean, act_std (act_dim each)
#   u64 weight blob length, then the A2C2NN weight blob

def policy_to_bytes(policy: BasePolicy | CorrectionHead) -> bytes:
    is_head = isinstance(policy, CorrectionHead)
    buf = io.BytesIO()
    buf.write(_POLICY_HEADER.pack(
        POLICY_MAGIC, POLICY_VERSION, KIND_HEAD if is_head else KIND_BASE_POLICY,
        policy.obs_dim, policy.act_dim, policy.H,
        policy.latent_dim if is_head else 0,
        0 if is_head else policy.latent_tap,
        int(is_head and policy.use_latent)))
    for a in policy.norm.arrays():
        buf.write(np.ascontiguousarray(a, "<f4").tobytes())
    blob = weights_to_bytes(policy.weights)
    buf.write(struct.pack("<Q", len(blob)))
    buf.write(blob)
    return buf.getvalue()


def policy_from_bytes(data: bytes) -> BasePolicy | CorrectionHead:
    if len(data) < _POLICY_HEADER.size or data[:8] != POLICY_MAGIC:
        raise ValueError("not an A2C2 policy file (bad magic)")
    _, version, kind, obs_dim, act_dim, H, latent_dim, tap, use_latent = \
        _POLICY_HEADER.unpack_from(data)
    if version != POLICY_VERSION:
        raise ValueError(f"unsupported policy version {version}")
    off = _POLICY_HEADER.size
    arrs = []
    for n in (obs_dim, obs_dim, act_dim, act_dim):
        arrs.append(np.frombuffer(data, "<f4", n, off).astype(np.float32))
        off += 4 * n
    (blob_len,) = struct.unpack_from("<Q", data, off)
    off += 8
    if len(data) != off + blob_len:
        raise ValueError(f"policy file is {len(data)} bytes, expected {off + blob_len}")
    weights = weights_from_bytes(data[off:])
    norm = Normalizer(*arrs)
    if kind == KIND_BASE_POLICY:
        return BasePolicy(weights, obs_dim, act_dim, H, norm, tap)
    if kind == KIND_HEAD:
        return CorrectionHead(weights, obs_dim, act_dim, H, norm, latent_dim, bool(use_latent))
    raise ValueError(f"unknown policy kind {kind}")


def save_policy(path: str | Path, policy: BasePolicy | CorrectionHead) -> None:
    Path(path).write_bytes(policy_to_bytes(policy))


def load_policy(path: str | Path) -> BasePolicy | CorrectionHead:
    return policy_from_bytes(Path(path).read_bytes())
