"""Small dense-network toolkit: MLP forward/backward, layer norm, AdamW,
sinusoidal chunk-position features and a finite-difference gradient check.

Tensors are plain 2-D ``float32`` numpy arrays (rows = batch). Batched
forward/backward go through numpy; single-vector inference goes through a
numba kernel (:func:`forward_one`) because per-call numpy overhead dominates
at these sizes.
"""
from __future__ import annotations

import hashlib
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numba
import numpy as np

LN_EPS = 1e-5

WEIGHTS_MAGIC = b"A2C2NN\0\0"
WEIGHTS_VERSION = 1


class ShapeError(ValueError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


# --------------------------------------------------------------------------
# Random streams
# --------------------------------------------------------------------------

def derive_seed(seed: int, *labels: object) -> int:
    """Split a 64-bit seed into a named child seed.

    The child is the first 8 bytes (little-endian) of
    blake2b(seed_le64 || "/".join(labels)), so streams are reproducible in any
    language that has blake2b.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(struct.pack("<Q", seed & 0xFFFFFFFFFFFFFFFF))
    h.update("/".join(str(x) for x in labels).encode())
    return int.from_bytes(h.digest(), "little")


def make_rng(seed: int, *labels: object) -> np.random.Generator:
    """PCG64 generator for the named stream ``labels`` under ``seed``."""
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *labels)))


# --------------------------------------------------------------------------
# MLP definition
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple[int, ...]
    layer_norm: tuple[bool, ...] = ()
    seed: int = 0

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ValueError(f"need >=2 positive layer sizes, got {sizes}")
        n_hidden = len(sizes) - 2
        ln = self.layer_norm
        if isinstance(ln, bool):
            ln = (ln,) * n_hidden
        ln = tuple(bool(x) for x in ln) or (False,) * n_hidden
        if len(ln) != n_hidden:
            raise ValueError(f"layer_norm needs {n_hidden} flags, got {len(ln)}")
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "layer_norm", ln)

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1


@dataclass
class MlpWeights:
    """Per-layer ``W`` (in x out), ``b`` (out) and optional LN gain/shift."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    ln_gain: list[np.ndarray | None]
    ln_shift: list[np.ndarray | None]
    _packed: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def has_ln(self, i: int) -> bool:
        return self.ln_gain[i] is not None

    def params(self) -> list[np.ndarray]:
        """Flat parameter list in canonical order (W, b[, gain, shift]) per layer."""
        out = []
        for i in range(self.n_layers):
            out += [self.weights[i], self.biases[i]]
            if self.has_ln(i):
                out += [self.ln_gain[i], self.ln_shift[i]]
        return out

    def zeros_like(self) -> "MlpWeights":
        z = lambda a: None if a is None else np.zeros_like(a)
        return MlpWeights([z(w) for w in self.weights], [z(b) for b in self.biases],
                          [z(g) for g in self.ln_gain], [z(s) for s in self.ln_shift])

    def copy(self) -> "MlpWeights":
        c = lambda a: None if a is None else a.copy()
        return MlpWeights([c(w) for w in self.weights], [c(b) for b in self.biases],
                          [c(g) for g in self.ln_gain], [c(s) for s in self.ln_shift])

    def invalidate(self) -> None:
        """Drop the packed inference copy; call after mutating parameters."""
        self._packed = None

    def digest(self) -> str:
        h = hashlib.sha256()
        for p in self.params():
            h.update(np.ascontiguousarray(p).tobytes())
        return h.hexdigest()


def init_mlp(spec: MlpSpec) -> MlpWeights:
    """Glorot-uniform weights, zero biases, unit LN gain."""
    rng = make_rng(spec.seed, "mlp-init")
    ws, bs, gs, ss = [], [], [], []
    sizes = spec.layer_sizes
    for i in range(spec.n_layers):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(np.float32))
        bs.append(np.zeros(fan_out, np.float32))
        if i < spec.n_layers - 1 and spec.layer_norm[i]:
            gs.append(np.ones(fan_out, np.float32))
            ss.append(np.zeros(fan_out, np.float32))
        else:
            gs.append(None)
            ss.append(None)
    return MlpWeights(ws, bs, gs, ss)


# --------------------------------------------------------------------------
# Forward / backward (batched)
# --------------------------------------------------------------------------

def _as_batch(x, n_in: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != n_in:
        raise ShapeError(f"input shape {x.shape} incompatible with first layer size {n_in}")
    return x


def _forward_cache(weights: MlpWeights, x: np.ndarray):
    """Forward pass keeping what backward needs.

    Per hidden layer, order is linear -> layer norm -> ReLU.
    """
    cache = []
    h = x
    last = weights.n_layers - 1
    for i in range(weights.n_layers):
        inp = h
        z = inp @ weights.weights[i] + weights.biases[i]
        if i == last:
            cache.append((inp, None, None, None))
            return z, cache
        xhat = inv_std = None
        if weights.has_ln(i):
            mu = z.mean(axis=1, keepdims=True)
            zc = z - mu
            var = (zc * zc).mean(axis=1, keepdims=True)
            inv_std = (1.0 / np.sqrt(var + LN_EPS)).astype(np.float32)
            xhat = zc * inv_std
            z = xhat * weights.ln_gain[i] + weights.ln_shift[i]
        h = np.maximum(z, 0.0)
        cache.append((inp, xhat, inv_std, z))
    raise AssertionError("unreachable")


def mlp_forward(weights: MlpWeights, x) -> np.ndarray:
    """Batched forward pass; ``x`` is (batch, in) or a single vector."""
    x = _as_batch(x, weights.layer_sizes[0])
    out, _ = _forward_cache(weights, x)
    return out


def mlp_forward_hidden(weights: MlpWeights, x, tap: int) -> tuple[np.ndarray, np.ndarray]:
    """Forward pass also returning post-ReLU activations of hidden layer ``tap``."""
    x = _as_batch(x, weights.layer_sizes[0])
    out, cache = _forward_cache(weights, x)
    return out, cache[tap + 1][0]


def _backward_cache(weights: MlpWeights, cache, grad_out: np.ndarray):
    n = weights.n_layers
    grads: list[list[np.ndarray | None]] = [[None] * 4 for _ in range(n)]
    g = grad_out
    for i in range(n - 1, -1, -1):
        inp, xhat, inv_std, z = cache[i]
        if i != n - 1:
            g = g * (z > 0)
            if xhat is not None:
                grads[i][2] = (g * xhat).sum(axis=0)
                grads[i][3] = g.sum(axis=0)
                gx = g * weights.ln_gain[i]
                m1 = gx.mean(axis=1, keepdims=True)
                m2 = (gx * xhat).mean(axis=1, keepdims=True)
                g = inv_std * (gx - m1 - xhat * m2)
        grads[i][0] = inp.T @ g
        grads[i][1] = g.sum(axis=0)
        g = g @ weights.weights[i].T
    pg = MlpWeights([gr[0] for gr in grads], [gr[1] for gr in grads],
                    [gr[2] for gr in grads], [gr[3] for gr in grads])
    return pg, g


def mlp_backward(weights: MlpWeights, x, output_grad) -> tuple[MlpWeights, np.ndarray]:
    """Reverse-mode gradients of ``sum(output * output_grad)``.

    Returns parameter gradients (same layout as ``weights``) and the gradient
    with respect to the input.
    """
    x = _as_batch(x, weights.layer_sizes[0])
    output_grad = np.asarray(output_grad, dtype=np.float32)
    if output_grad.ndim == 1:
        output_grad = output_grad[None, :]
    expect = (x.shape[0], weights.layer_sizes[-1])
    if output_grad.shape != expect:
        raise ShapeError(f"output_grad shape {output_grad.shape}, expected {expect}")
    _, cache = _forward_cache(weights, x)
    return _backward_cache(weights, cache, output_grad)


def mse_loss_and_grad(weights: MlpWeights, x: np.ndarray, target: np.ndarray):
    """Mean over rows of the squared L2 error; returns (loss, param grads)."""
    pred, cache = _forward_cache(weights, x)
    diff = pred - target
    n = x.shape[0]
    loss = float(np.einsum("ij,ij->", diff, diff, dtype=np.float64)) / n
    pg, _ = _backward_cache(weights, cache, (2.0 / n) * diff)
    return loss, pg


# --------------------------------------------------------------------------
# Single-vector inference kernel
# --------------------------------------------------------------------------

@numba.njit(cache=True)
def _forward_packed(x, flat, meta, tap, out, tap_out):
    # meta rows: n_in, n_out, has_ln, w_off, b_off, g_off, s_off
    n_layers = meta.shape[0]
    width = 0
    for i in range(n_layers):
        width = max(width, meta[i, 0], meta[i, 1])
    cur = np.empty(width, np.float64)
    nxt = np.empty(width, np.float64)
    for j in range(x.shape[0]):
        cur[j] = x[j]
    for li in range(n_layers):
        n_in = meta[li, 0]
        n_out = meta[li, 1]
        w_off = meta[li, 3]
        b_off = meta[li, 4]
        for j in range(n_out):
            nxt[j] = flat[b_off + j]
        for i in range(n_in):
            xi = cur[i]
            row = w_off + i * n_out
            for j in range(n_out):
                nxt[j] += xi * flat[row + j]
        if li == n_layers - 1:
            for j in range(n_out):
                out[j] = np.float32(nxt[j])
            return
        if meta[li, 2] == 1:
            mu = 0.0
            for j in range(n_out):
                mu += nxt[j]
            mu /= n_out
            var = 0.0
            for j in range(n_out):
                d = nxt[j] - mu
                var += d * d
            var /= n_out
            inv = 1.0 / math.sqrt(var + 1e-5)
            g_off = meta[li, 5]
            s_off = meta[li, 6]
            for j in range(n_out):
                nxt[j] = (nxt[j] - mu) * inv * flat[g_off + j] + flat[s_off + j]
        for j in range(n_out):
            v = nxt[j]
            cur[j] = v if v > 0.0 else 0.0
        if li == tap:
            for j in range(n_out):
                tap_out[j] = np.float32(cur[j])


def _pack(weights: MlpWeights):
    if weights._packed is None:
        chunks, meta, off = [], [], 0
        for i in range(weights.n_layers):
            n_in, n_out = weights.weights[i].shape
            row = [n_in, n_out, int(weights.has_ln(i)), off, 0, 0, 0]
            chunks.append(weights.weights[i].ravel())
            off += n_in * n_out
            row[4] = off
            chunks.append(weights.biases[i])
            off += n_out
            if weights.has_ln(i):
                row[5] = off
                chunks.append(weights.ln_gain[i])
                off += n_out
                row[6] = off
                chunks.append(weights.ln_shift[i])
                off += n_out
            meta.append(row)
        flat = np.concatenate(chunks).astype(np.float32)
        weights._packed = (flat, np.asarray(meta, dtype=np.int64))
    return weights._packed


def forward_one(weights: MlpWeights, x, tap: int = -1) -> tuple[np.ndarray, np.ndarray | None]:
    """Single-vector forward with float64 accumulation.

    Returns ``(output, hidden)``, where ``hidden`` is the post-ReLU activation
    of hidden layer ``tap`` (``None`` when ``tap < 0``). Deterministic, but not
    bit-identical to the batched numpy path.
    """
    x = np.asarray(x, dtype=np.float32).ravel()
    sizes = weights.layer_sizes
    if x.shape[0] != sizes[0]:
        raise ShapeError(f"input dim {x.shape[0]} != first layer size {sizes[0]}")
    flat, meta = _pack(weights)
    out = np.empty(sizes[-1], np.float32)
    tap_out = np.empty(sizes[tap + 1] if tap >= 0 else 0, np.float32)
    _forward_packed(x, flat, meta, tap, out, tap_out)
    return out, (tap_out if tap >= 0 else None)


# --------------------------------------------------------------------------
# Gradient check
# --------------------------------------------------------------------------

def _loss_and_pattern(weights: MlpWeights, x: np.ndarray, r: np.ndarray) -> tuple[float, bytes]:
    out, cache = _forward_cache(weights, x)
    pattern = b"".join(np.packbits(c[3] > 0).tobytes() for c in cache if c[3] is not None)
    return float(np.sum(out.astype(np.float64) * r)), pattern


def grad_check(spec: MlpSpec, trials: int = 16, step: float = 1e-3, batch: int = 2,
               backward: Callable = mlp_backward) -> float:
    """Max over trials of ||g_analytic - g_fd||_inf / (||g_fd||_inf + 1e-8).

    The loss is a random projection ``sum(r * mlp_forward(x))``. Central
    differences are taken on float32 parameters; coordinates whose +/- step
    crosses a ReLU kink are excluded since the derivative is undefined there.
    Weights are re-drawn each trial, with non-trivial LN gains and biases.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    worst = 0.0
    for trial in range(trials):
        rng = make_rng(spec.seed, "gradcheck", trial)
        w = init_mlp(MlpSpec(spec.layer_sizes, spec.layer_norm, derive_seed(spec.seed, trial)))
        for p in w.params():
            if p.ndim == 1:
                p[...] = rng.uniform(-0.5, 0.5, p.shape).astype(np.float32) + (p == 1)
        x = rng.standard_normal((batch, spec.layer_sizes[0])).astype(np.float32)
        r = rng.standard_normal((batch, spec.layer_sizes[-1])).astype(np.float32)

        analytic, _ = backward(w, x, r)
        _, base_pattern = _loss_and_pattern(w, x, r)
        num, ana = [], []
        for p, g in zip(w.params(), analytic.params()):
            flat = p.reshape(-1)
            gflat = g.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                hi = np.float32(orig + np.float32(step))
                lo = np.float32(orig - np.float32(step))
                flat[j] = hi
                lp, pat_p = _loss_and_pattern(w, x, r)
                flat[j] = lo
                lm, pat_m = _loss_and_pattern(w, x, r)
                flat[j] = orig
                kink = pat_p != base_pattern or pat_m != base_pattern
                eff = float(hi) - float(lo)
                if kink:
                    continue
                num.append((lp - lm) / eff)
                ana.append(float(gflat[j]))
        num_a = np.asarray(num)
        ana_a = np.asarray(ana)
        err = np.max(np.abs(ana_a - num_a)) / (np.max(np.abs(num_a)) + 1e-8)
        worst = max(worst, float(err))
    return worst


# --------------------------------------------------------------------------
# AdamW
# --------------------------------------------------------------------------

@dataclass
class AdamWState:
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    grad_clip_norm: float = 0.0
    warmup_steps: int = 0
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def current_lr(self, step: int | None = None) -> float:
        t = self.step + 1 if step is None else step
        if self.warmup_steps > 0 and t < self.warmup_steps:
            return self.learning_rate * t / self.warmup_steps
        return self.learning_rate


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.dot(g.ravel().astype(np.float64), g.ravel())) for g in grads))


def adamw_step(state: AdamWState, params: MlpWeights, grads: MlpWeights) -> float:
    """One in-place AdamW update of ``params``; returns the pre-clip grad norm.

    Order: reject non-finite grads, clip to ``grad_clip_norm`` (global L2),
    update moments, decoupled decay ``w *= 1 - lr*wd``, bias-corrected Adam
    step. The learning rate ramps linearly over ``warmup_steps``.
    """
    ps, gs = params.params(), grads.params()
    if len(ps) != len(gs) or any(p.shape != g.shape for p, g in zip(ps, gs)):
        raise ShapeError("gradient layout does not match parameters")
    norm = global_norm(gs)
    if not math.isfinite(norm):
        raise NonFiniteGradient(f"non-finite gradient at step {state.step + 1}")
    scale = 1.0
    if state.grad_clip_norm > 0 and norm > state.grad_clip_norm:
        scale = state.grad_clip_norm / norm
    if not state.m:
        state.m = [np.zeros_like(p) for p in ps]
        state.v = [np.zeros_like(p) for p in ps]
    state.step += 1
    t = state.step
    lr = state.current_lr(t)
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(ps, gs, state.m, state.v):
        if scale != 1.0:
            g = g * np.float32(scale)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay:
            p *= np.float32(1.0 - lr * state.weight_decay)
        p -= (lr / c1) * m / (np.sqrt(v / c2) + state.epsilon)
    params.invalidate()
    return norm


# --------------------------------------------------------------------------
# Chunk-position feature
# --------------------------------------------------------------------------

def sin_embed(k: int, H: int) -> np.ndarray:
    """(sin(2*pi*k/H), cos(2*pi*k/H)) as float32."""
    if H < 1 or not 0 <= k <= H - 1:
        raise ValueError(f"chunk index k={k} outside [0, {H - 1}]")
    ang = 2.0 * math.pi * k / H
    return np.array([math.sin(ang), math.cos(ang)], dtype=np.float32)


# --------------------------------------------------------------------------
# Weight file
# --------------------------------------------------------------------------
#
# Little-endian layout:
#   8s   magic "A2C2NN\0\0"
#   u16  version
#   u16  layer count L
#   L x (u32 n_in, u32 n_out, u8 has_ln)
#   per layer: W (n_in*n_out f32, row-major), b (n_out f32),
#              [gain (n_out f32), shift (n_out f32)] if has_ln

def weights_to_bytes(weights: MlpWeights) -> bytes:
    buf = io.BytesIO()
    buf.write(WEIGHTS_MAGIC)
    buf.write(struct.pack("<HH", WEIGHTS_VERSION, weights.n_layers))
    for i in range(weights.n_layers):
        n_in, n_out = weights.weights[i].shape
        buf.write(struct.pack("<IIB", n_in, n_out, int(weights.has_ln(i))))
    for p in weights.params():
        buf.write(np.ascontiguousarray(p, dtype="<f4").tobytes())
    return buf.getvalue()


def weights_from_bytes(data: bytes) -> MlpWeights:
    if len(data) < 12 or data[:8] != WEIGHTS_MAGIC:
        raise ValueError("not an A2C2NN weight blob (bad magic)")
    version, n_layers = struct.unpack_from("<HH", data, 8)
    if version != WEIGHTS_VERSION:
        raise ValueError(f"unsupported weight version {version}")
    off = 12
    dims = []
    for _ in range(n_layers):
        dims.append(struct.unpack_from("<IIB", data, off))
        off += 9
    expected = off + 4 * sum(i * o + o + (2 * o if ln else 0) for i, o, ln in dims)
    if len(data) != expected:
        raise ValueError(f"weight blob is {len(data)} bytes, expected {expected}")

    def take(n, shape):
        nonlocal off
        a = np.frombuffer(data, dtype="<f4", count=n, offset=off).astype(np.float32).reshape(shape)
        off += 4 * n
        return a

    ws, bs, gs, ss = [], [], [], []
    for n_in, n_out, ln in dims:
        ws.append(take(n_in * n_out, (n_in, n_out)))
        bs.append(take(n_out, (n_out,)))
        gs.append(take(n_out, (n_out,)) if ln else None)
        ss.append(take(n_out, (n_out,)) if ln else None)
    return MlpWeights(ws, bs, gs, ss)


def save_weights(path: str | Path, weights: MlpWeights) -> None:
    Path(path).write_bytes(weights_to_bytes(weights))


def load_weights(path: str | Path) -> MlpWeights:
    return weights_from_bytes(Path(path).read_bytes())
