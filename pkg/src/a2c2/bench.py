"""(d, e) sweeps over naive and corrected execution with Wilson intervals."""
from __future__ import annotations

import csv
import logging
import math
import multiprocessing as mp
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .asyncexec import Schedule, run_episode, validate_schedule, write_trace_csv
from .envsim import EnvConfig
from .numkit import derive_seed
from .policies import CorrectionHead

log = logging.getLogger(__name__)

METHODS = ("naive", "a2c2")
Z95 = 1.959963984540054


def wilson_interval(successes: int, n: int, z: float = Z95) -> tuple[float, float]:
    if n <= 0:
        raise ValueError("n must be >= 1")
    p = successes / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, center - half), min(1.0, center + half)


@dataclass(frozen=True)
class CellResult:
    method: str
    d: int
    e: int
    successes: int
    n: int
    success_rate: float
    wilson_lo: float
    wilson_hi: float
    mean_staleness: float
    mean_abs_delta: float

    @classmethod
    def from_outcomes(cls, method, d, e, outcomes, staleness, deltas) -> "CellResult":
        n = len(outcomes)
        s = int(sum(outcomes))
        lo, hi = wilson_interval(s, n)
        return cls(method, d, e, s, n, s / n, lo, hi, float(np.mean(staleness)),
                   float(np.mean(deltas)))


@dataclass(frozen=True)
class Comparison:
    difference: float
    lo: float
    hi: float
    significant: bool


def compare(a: CellResult, b: CellResult) -> Comparison:
    """``a - b`` with a Newcombe (Wilson-score) interval.

    ``significant`` means the two cells' Wilson intervals are disjoint.
    """
    if (a.d, a.e, a.n) != (b.d, b.e, b.n):
        raise ValueError(f"cells differ: (d={a.d}, e={a.e}, n={a.n}) vs (d={b.d}, e={b.e}, n={b.n})")
    diff = a.success_rate - b.success_rate
    lo = diff - math.sqrt((a.success_rate - a.wilson_lo) ** 2 + (b.wilson_hi - b.success_rate) ** 2)
    hi = diff + math.sqrt((a.wilson_hi - a.success_rate) ** 2 + (b.success_rate - b.wilson_lo) ** 2)
    disjoint = a.wilson_lo > b.wilson_hi or b.wilson_lo > a.wilson_hi
    return Comparison(diff, lo, hi, disjoint)


def default_cells(H: int = 8) -> list[tuple[int, int]]:
    """Delay axis (d = 0..4, e = max(d, 1)) plus horizon axis (d = 1, e = 1..H-1)."""
    cells = [(d, max(d, 1)) for d in range(5)]
    cells += [(1, e) for e in range(1, H) if (1, e) not in cells]
    return cells


def cross_cells(H: int, delays, horizons) -> list[tuple[int, int]]:
    return [(d, e) for d in delays for e in horizons]


def rollout_seed(base_seed: int, d: int, e: int, i: int) -> int:
    """Episode seed for rollout ``i`` of cell (d, e); shared by every method."""
    return derive_seed(base_seed, "rollout", d, e, i)


@dataclass
class SweepSpec:
    env: EnvConfig
    base: object
    head: CorrectionHead | None
    cells: list[tuple[int, int]]
    H: int = 8
    n_rollouts: int = 512
    base_seed: int = 0
    methods: tuple[str, ...] = METHODS
    jobs: int = 1
    trace_dir: Path | None = None

    def __post_init__(self):
        if self.n_rollouts < 1:
            raise ValueError("n_rollouts must be >= 1")
        bad = [m for m in self.methods if m not in METHODS]
        if bad:
            raise ValueError(f"unknown methods {bad}")
        if "a2c2" in self.methods and self.head is None:
            raise ValueError("method a2c2 needs a correction head")


@dataclass
class SweepResult:
    cells: list[CellResult]
    skipped: list[tuple[int, int, str]]

    def get(self, method: str, d: int, e: int) -> CellResult:
        for c in self.cells:
            if (c.method, c.d, c.e) == (method, d, e):
                return c
        raise KeyError((method, d, e))


_WORKER: dict = {}


def _init_worker(spec: SweepSpec) -> None:
    _WORKER["spec"] = spec


def _run_one(job):
    method, d, e, i = job
    spec: SweepSpec = _WORKER["spec"]
    head = spec.head if method == "a2c2" else None
    trace = run_episode(spec.env, spec.base, head, Schedule(spec.H, e, d),
                        rollout_seed(spec.base_seed, d, e, i))
    if spec.trace_dir is not None:
        write_trace_csv(trace, Path(spec.trace_dir) / f"{method}_d{d}_e{e}_{i:05d}.csv")
    k = np.asarray(trace.k)
    return trace.success, float(k.mean()), trace.mean_delta_norm(), trace.env_hash


def run_sweep(spec: SweepSpec) -> SweepResult:
    """Roll out every valid cell for every method; invalid cells are reported in ``skipped``."""
    skipped, valid = [], []
    for d, e in spec.cells:
        why = validate_schedule(spec.H, e, d)
        if why:
            log.warning("skipping cell d=%d e=%d: %s", d, e, why)
            skipped.append((d, e, why))
        else:
            valid.append((d, e))
    if spec.trace_dir is not None:
        Path(spec.trace_dir).mkdir(parents=True, exist_ok=True)
    jobs = [(m, d, e, i) for m in spec.methods for d, e in valid for i in range(spec.n_rollouts)]
    if spec.jobs > 1:
        with mp.get_context("fork").Pool(spec.jobs, _init_worker, (spec,)) as pool:
            outs = pool.map(_run_one, jobs, chunksize=32)
    else:
        _init_worker(spec)
        outs = [_run_one(j) for j in jobs]
    cells = []
    n = spec.n_rollouts
    for ci, (m, d, e) in enumerate((m, d, e) for m in spec.methods for d, e in valid):
        block = outs[ci * n:(ci + 1) * n]
        cells.append(CellResult.from_outcomes(m, d, e, [b[0] for b in block],
                                              [b[1] for b in block], [b[2] for b in block]))
    return SweepResult(cells, skipped)


CSV_COLUMNS = [f.name for f in fields(CellResult)]


def write_csv(cells: list[CellResult], path: str | Path) -> None:
    """Columns: method, d, e, successes, n, success_rate, wilson_lo, wilson_hi,
    mean_staleness, mean_abs_delta (floats as shortest round-trip repr)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS)
        for c in cells:
            w.writerow([repr(v) if isinstance(v, float) else v
                        for v in (getattr(c, col) for col in CSV_COLUMNS)])


def read_csv(path: str | Path) -> list[CellResult]:
    types = {f.name: f.type for f in fields(CellResult)}
    conv = {"str": str, "int": int, "float": float}
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.append(CellResult(**{k: conv[types[k]](v) for k, v in row.items()}))
    return out
