"""``a2c2`` command line: data generation, training, augmentation, rollouts,
sweeps, serving and self-checks.

Settings resolve as flags > config file (``key = value`` lines, ``#``
comments) > defaults. Environment physics are keys of the form
``env.<field>`` (e.g. ``env.dist_amp = 2.0``), settable from the command line
with ``--set env.dist_amp=2.0``. Every run writes ``<output>.manifest``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .asyncexec import Schedule, ScheduleError, run_episode, staleness_stats, write_trace_csv
from .bench import SweepSpec, compare, default_cells, run_sweep, write_csv
from .datastore import DatasetError, build_dcor, export_csv, read_dataset, record_expert_dataset
from .envsim import EnvConfig
from .numkit import MlpSpec, grad_check, make_rng
from .policies import (BASE_HIDDEN, BASE_TRAIN_DEFAULTS, HEAD_HIDDEN, HEAD_TRAIN_DEFAULTS,
                       BasePolicy, CorrectionHead, ExpertChunkPolicy, TrainConfig, load_policy,
                       save_policy, train_base, train_correction)

log = logging.getLogger("a2c2")

GRADCHECK_BAR = 1e-3
DEFAULT_EPISODES = {"pursuit": 2000, "holdzone": 200}


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class Opt:
    type: type
    default: object
    help: str
    source: str = ""


_BASE_SRC = "reference flow-policy training table"
_HEAD_SRC = "reference correction-head training table"


def _train_opts(d: TrainConfig, src: str, hidden: tuple[int, ...]) -> dict[str, Opt]:
    return {
        "data": Opt(str, None, "input dataset file"),
        "out": Opt(str, None, "output policy file"),
        "lr": Opt(float, d.learning_rate, "learning rate", src),
        "batch_size": Opt(int, d.batch_size, "mini-batch size", src),
        "epochs": Opt(int, d.epochs, "training epochs", src),
        "weight_decay": Opt(float, d.weight_decay, "AdamW decoupled weight decay", src),
        "grad_clip": Opt(float, d.grad_clip, "global gradient-norm clip", src),
        "warmup_steps": Opt(int, d.warmup_steps, "linear learning-rate warmup steps", src),
        "eval_fraction": Opt(float, d.eval_fraction, "held-out episode fraction"),
        "hidden": Opt(str, ",".join(map(str, hidden)), "hidden layer widths"),
    }


COMMON = {
    "seed": Opt(int, 0, "root seed; all streams are split from it"),
    "env": Opt(str, "pursuit", "environment: pursuit | holdzone"),
    "H": Opt(int, 8, "chunk horizon length"),
    "jobs": Opt(int, 1, "worker processes for rollouts"),
}

COMMANDS: dict[str, dict[str, Opt]] = {
    "gen-expert": {
        "episodes": Opt(int, 0, "expert episodes (0 = per-env default: pursuit 2000, holdzone 200)"),
        "out": Opt(str, None, "output expert dataset file"),
    },
    "train-base": _train_opts(BASE_TRAIN_DEFAULTS, _BASE_SRC, BASE_HIDDEN),
    "infer-augment": {
        "data": Opt(str, None, "input expert dataset file"),
        "policy": Opt(str, None, "trained base policy file"),
        "out": Opt(str, None, "output correction dataset file"),
        "capture_latent": Opt(bool, False, "store the base policy's last hidden activation"),
    },
    "train-correction": {
        **_train_opts(HEAD_TRAIN_DEFAULTS, _HEAD_SRC, HEAD_HIDDEN),
        "use_latent": Opt(bool, False, "condition the head on the base latent"),
    },
    "rollout": {
        "policy": Opt(str, None, "base policy file, or 'expert'"),
        "head": Opt(str, "", "correction head file (empty = naive)"),
        "d": Opt(int, 0, "inference delay in control steps"),
        "e": Opt(int, 1, "execution horizon"),
        "episodes": Opt(int, 1, "number of episodes"),
        "out": Opt(str, None, "output directory for per-episode trace CSVs"),
    },
    "sweep": {
        "policy": Opt(str, None, "base policy file, or 'expert'"),
        "head": Opt(str, "", "correction head file (empty = naive only)"),
        "cells": Opt(str, "default", "'default' or a list like '0:1,4:4'"),
        "rollouts": Opt(int, 512, "rollouts per cell"),
        "out": Opt(str, None, "output CSV"),
        "trace_dir": Opt(str, "", "optional per-trace CSV directory"),
    },
    "serve": {
        "policy": Opt(str, None, "base policy file"),
        "host": Opt(str, "127.0.0.1", "bind address"),
        "port": Opt(int, 5555, "bind port"),
        "latency": Opt(float, 0.0, "injected latency in seconds"),
        "jitter": Opt(float, 0.0, "uniform latency jitter half-width in seconds"),
    },
    "client": {
        "host": Opt(str, "127.0.0.1", "server address"),
        "port": Opt(int, 5555, "server port"),
        "dt": Opt(float, 0.05, "control period in seconds"),
        "latency": Opt(float, 0.0, "expected server latency, validates d"),
        "jitter": Opt(float, 0.0, "expected jitter half-width"),
        "grace": Opt(float, 0.5, "wait at an adoption tick for a due reply, in control periods"),
        "d": Opt(int, 0, "schedule delay"),
        "e": Opt(int, 1, "execution horizon"),
        "head": Opt(str, "", "local correction head file"),
        "episodes": Opt(int, 1, "episodes to run"),
        "out": Opt(str, None, "output directory for trace CSVs"),
    },
    "gradcheck": {
        "specs": Opt(int, 16, "random MLP specs to check"),
        "trials": Opt(int, 1, "trials per spec"),
    },
    "export-csv": {
        "data": Opt(str, None, "dataset file"),
        "out": Opt(str, None, "output CSV"),
    },
    "pipeline": {
        "workdir": Opt(str, None, "directory for all artifacts"),
        "episodes": Opt(int, 0, "expert episodes (0 = per-env default)"),
        "rollouts": Opt(int, 512, "rollouts per sweep cell"),
        "cells": Opt(str, "default", "sweep cells"),
    },
}

ENV_KEYS = {f"env.{f.name}": f for f in fields(EnvConfig) if f.name not in ("env_id", "seed")}


def _parse_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _convert(typ, value):
    return _parse_bool(value) if typ is bool else typ(value)


def read_config_file(path: str | Path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError("config", f"{path}:{n}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve_config(command: str, flags: dict, file_values: dict[str, str]) -> dict[str, tuple[object, str]]:
    """Merge defaults, config file and flags; returns key -> (value, origin)."""
    schema = {**COMMON, **COMMANDS[command]}
    env_field_types = {k: f.type for k, f in ENV_KEYS.items()}
    unknown = [k for k in list(file_values) + list(flags) if k not in schema and k not in ENV_KEYS]
    if unknown:
        raise CliError("config", f"unknown keys for {command}: {', '.join(sorted(unknown))}")
    merged: dict[str, tuple[object, str]] = {}
    for k, opt in schema.items():
        merged[k] = (opt.default, "default")
    for k, v in file_values.items():
        merged[k] = (v, "file")
    for k, v in flags.items():
        merged[k] = (v, "flag")
    out = {}
    for k, (v, origin) in merged.items():
        if k in ENV_KEYS:
            typ = {"int": int, "float": float}.get(env_field_types[k], float)
        else:
            typ = schema[k].type
        try:
            out[k] = (None if v is None else _convert(typ, v), origin)
        except ValueError as exc:
            raise CliError("config", f"bad value for {k}: {exc}") from None
    missing = [k for k, (v, _) in out.items() if v is None]
    if missing:
        raise CliError("usage", f"{command}: missing required setting(s): {', '.join(missing)}")
    return out


def format_config(command: str, cfg: dict[str, tuple[object, str]]) -> str:
    schema = {**COMMON, **COMMANDS[command]}
    lines = []
    for k in sorted(cfg):
        v, origin = cfg[k]
        note = origin
        opt = schema.get(k)
        if opt is not None and opt.source and origin == "default":
            note = f"default from {opt.source}"
        lines.append(f"{k} = {v}  # {note}")
    return "\n".join(lines)


def _env_config(cfg) -> EnvConfig:
    overrides = {k[4:]: v for k, (v, _) in cfg.items() if k in ENV_KEYS}
    return EnvConfig(env_id=cfg["env"][0], seed=cfg["seed"][0], **overrides)


def _train_config(cfg) -> TrainConfig:
    v = {k: val for k, (val, _) in cfg.items()}
    return TrainConfig(learning_rate=v["lr"], batch_size=v["batch_size"], epochs=v["epochs"],
                       weight_decay=v["weight_decay"], grad_clip=v["grad_clip"],
                       warmup_steps=v["warmup_steps"], seed=v["seed"],
                       eval_fraction=v["eval_fraction"])


def _hidden(s: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in s.split(",") if x.strip())
    except ValueError:
        raise CliError("config", f"bad hidden layer list {s!r}") from None


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError("path", f"{what} not found: {p}")
    return p


def _writable(path: str) -> Path:
    p = Path(path)
    if not p.parent.exists():
        raise CliError("path", f"output directory does not exist: {p.parent}")
    return p


def _load_base(path: str, env: EnvConfig, H: int):
    if path == "expert":
        return ExpertChunkPolicy(env, H)
    pol = load_policy(_existing(path, "base policy"))
    if not isinstance(pol, BasePolicy):
        raise CliError("input", f"{path} is not a base policy file")
    return pol


def _load_head(path: str) -> CorrectionHead | None:
    if not path:
        return None
    head = load_policy(_existing(path, "correction head"))
    if not isinstance(head, CorrectionHead):
        raise CliError("input", f"{path} is not a correction head file")
    return head


def parse_cells(text: str, H: int) -> list[tuple[int, int]]:
    if text == "default":
        return default_cells(H)
    cells = []
    for part in text.split(","):
        try:
            d, e = part.split(":")
            cells.append((int(d), int(e)))
        except ValueError:
            raise CliError("config", f"bad cell {part!r}; expected d:e") from None
    return cells


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(path: Path, command: str, cfg, inputs: list[Path], outputs: list[Path],
                   extra: dict | None = None) -> None:
    """key=value manifest: command, resolved settings, artifact hashes."""
    lines = [f"command = {command}", f"version = {__version__}",
             f"python = {platform.python_version()}", f"numpy = {np.__version__}"]
    lines += [f"config.{k} = {v}" for k, (v, _) in sorted(cfg.items())]
    for p in inputs:
        lines.append(f"input.{p.name} = sha256:{_sha256(p)}")
    for p in outputs:
        if p.is_file():
            lines.append(f"output.{p.name} = sha256:{_sha256(p)}")
    for k, v in (extra or {}).items():
        lines.append(f"{k} = {v}")
    path.write_text("\n".join(lines) + "\n")


def _manifest_path(out: Path) -> Path:
    return out.parent / (out.name + ".manifest") if not out.is_dir() else out / "run.manifest"


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def cmd_gen_expert(cfg):
    env = _env_config(cfg)
    n = cfg["episodes"][0] or DEFAULT_EPISODES[env.env_id]
    out = _writable(cfg["out"][0])
    ds = record_expert_dataset(env, n, cfg["seed"][0], out)
    print(f"wrote {out}: {n} episodes, {ds.obs.shape[0]} transitions")
    write_manifest(_manifest_path(out), "gen-expert", cfg, [], [out],
                   {"episodes_resolved": n, "transitions": ds.obs.shape[0]})


def cmd_train_base(cfg):
    data = read_dataset(_existing(cfg["data"][0], "dataset"))
    out = _writable(cfg["out"][0])
    if data.kind != 0:
        raise CliError("input", "train-base needs an expert dataset file (got a correction dataset)")
    policy, curve = train_base(data, _train_config(cfg), cfg["H"][0], _hidden(cfg["hidden"][0]))
    save_policy(out, policy)
    print(f"wrote {out}: final train {curve.train[-1]:.5g} held-out {curve.heldout[-1]:.5g}")
    write_manifest(_manifest_path(out), "train-base", cfg, [Path(cfg["data"][0])], [out],
                   {"loss.train": ",".join(f"{x:.6g}" for x in curve.train),
                    "loss.heldout": ",".join(f"{x:.6g}" for x in curve.heldout)})


def cmd_infer_augment(cfg):
    data = read_dataset(_existing(cfg["data"][0], "dataset"))
    if data.kind != 0:
        raise CliError("input", "infer-augment needs an expert dataset file")
    policy = load_policy(_existing(cfg["policy"][0], "base policy"))
    if not isinstance(policy, BasePolicy):
        raise CliError("input", f"{cfg['policy'][0]} is not a base policy file")
    out = _writable(cfg["out"][0])
    dcor = build_dcor(data, policy, policy.H, cfg["capture_latent"][0], out)
    print(f"wrote {out}: {len(dcor)} correction records")
    write_manifest(_manifest_path(out), "infer-augment", cfg,
                   [Path(cfg["data"][0]), Path(cfg["policy"][0])], [out])


def cmd_train_correction(cfg):
    data = read_dataset(_existing(cfg["data"][0], "dataset"))
    if data.kind != 1:
        raise CliError("input", "train-correction needs a correction dataset file, got an expert dataset file")
    out = _writable(cfg["out"][0])
    head, curve = train_correction(data, _train_config(cfg), cfg["use_latent"][0],
                                   _hidden(cfg["hidden"][0]))
    save_policy(out, head)
    print(f"wrote {out}: final train {curve.train[-1]:.5g} held-out {curve.heldout[-1]:.5g}")
    write_manifest(_manifest_path(out), "train-correction", cfg, [Path(cfg["data"][0])], [out],
                   {"loss.train": ",".join(f"{x:.6g}" for x in curve.train),
                    "loss.heldout": ",".join(f"{x:.6g}" for x in curve.heldout)})


def cmd_rollout(cfg):
    env = _env_config(cfg)
    H = cfg["H"][0]
    base = _load_base(cfg["policy"][0], env, H)
    head = _load_head(cfg["head"][0])
    sched = Schedule(H, cfg["e"][0], cfg["d"][0])
    out = Path(cfg["out"][0])
    out.mkdir(parents=True, exist_ok=True)
    wins = 0
    for i in range(cfg["episodes"][0]):
        seed = int(make_rng(cfg["seed"][0], "rollout-cli").integers(2**63)) + i
        tr = run_episode(env, base, head, sched, seed)
        wins += tr.success
        write_trace_csv(tr, out / f"trace_{i:05d}.csv")
        lo, hi, mean = staleness_stats(tr)
        print(f"episode {i} seed {seed} success {int(tr.success)} steps {len(tr)} "
              f"staleness min {lo} max {hi} mean {mean:.3f}")
    print(f"success rate {wins}/{cfg['episodes'][0]}")
    write_manifest(out / "run.manifest", "rollout", cfg, [], [])


def cmd_sweep(cfg):
    env = _env_config(cfg)
    H = cfg["H"][0]
    base = _load_base(cfg["policy"][0], env, H)
    head = _load_head(cfg["head"][0])
    out = _writable(cfg["out"][0])
    spec = SweepSpec(env=env, base=base, head=head, cells=parse_cells(cfg["cells"][0], H), H=H,
                     n_rollouts=cfg["rollouts"][0], base_seed=cfg["seed"][0],
                     methods=("naive", "a2c2") if head else ("naive",), jobs=cfg["jobs"][0],
                     trace_dir=Path(cfg["trace_dir"][0]) if cfg["trace_dir"][0] else None)
    res = run_sweep(spec)
    write_csv(res.cells, out)
    for d, e, why in res.skipped:
        print(f"skipped d={d} e={e}: {why}")
    for c in res.cells:
        print(f"{c.method:6s} d={c.d} e={c.e} rate={c.success_rate:.4f} "
              f"[{c.wilson_lo:.4f}, {c.wilson_hi:.4f}]")
    if head:
        for c in res.cells:
            if c.method == "a2c2":
                cmp = compare(c, res.get("naive", c.d, c.e))
                print(f"a2c2-naive d={c.d} e={c.e} diff={cmp.difference:+.4f} "
                      f"significant={int(cmp.significant)}")
    print(f"wrote {out}")
    inputs = [Path(p) for p in (cfg["policy"][0], cfg["head"][0]) if p and p != "expert"]
    write_manifest(_manifest_path(out), "sweep", cfg, inputs, [out])


def cmd_serve(cfg):
    from .wire import ServerConfig, serve
    v = {k: val for k, (val, _) in cfg.items()}
    srv = serve(ServerConfig(policy=_existing(v["policy"], "base policy"), host=v["host"],
                             port=v["port"], latency=v["latency"], jitter=v["jitter"],
                             seed=v["seed"]))
    host, port = srv.address
    print(f"serving on {host}:{port} latency={v['latency']} jitter={v['jitter']}", flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        srv.close()


def cmd_client(cfg):
    from .wire import ClientConfig, client_run
    v = {k: val for k, (val, _) in cfg.items()}
    env = _env_config(cfg)
    head = _load_head(v["head"])
    out = Path(v["out"])
    out.mkdir(parents=True, exist_ok=True)
    wins = 0
    for i in range(v["episodes"]):
        ccfg = ClientConfig(address=(v["host"], v["port"]), dt=v["dt"],
                            schedule=Schedule(v["H"], v["e"], v["d"]), env=env,
                            seed=v["seed"] + i, head=head,
                            latency=v["latency"] if v["latency"] > 0 else None, jitter=v["jitter"],
                            grace=v["grace"])
        tr = client_run(ccfg)
        wins += tr.success
        write_trace_csv(tr, out / f"trace_{i:05d}.csv")
        print(f"episode {i} success {int(tr.success)} steps {len(tr)} measured_d "
              f"{sorted(set(tr.measured_d))} overruns {tr.overruns} late {tr.late_adoptions}")
    print(f"success rate {wins}/{v['episodes']}")
    write_manifest(out / "run.manifest", "client", cfg, [], [])


def gradcheck_specs(n: int, seed: int) -> list[MlpSpec]:
    rng = make_rng(seed, "gradcheck-specs")
    specs = []
    for i in range(n):
        depth = int(rng.integers(1, 4))
        sizes = (int(rng.integers(1, 13)),) + tuple(int(rng.integers(2, 33)) for _ in range(depth - 1)) \
            + (int(rng.integers(1, 9)),)
        ln = tuple(bool(rng.integers(2)) for _ in range(len(sizes) - 2))
        specs.append(MlpSpec(sizes, ln, seed + i))
    return specs


def cmd_gradcheck(cfg):
    start = time.perf_counter()
    worst = 0.0
    for spec in gradcheck_specs(cfg["specs"][0], cfg["seed"][0]):
        err = grad_check(spec, cfg["trials"][0])
        worst = max(worst, err)
        print(f"spec {list(spec.layer_sizes)} ln={list(spec.layer_norm)} max_rel_err {err:.3e}")
    verdict = "PASS" if worst < GRADCHECK_BAR else "FAIL"
    print(f"max relative error {worst:.3e} {verdict} (bar {GRADCHECK_BAR:g}, "
          f"{time.perf_counter() - start:.1f}s)")
    if verdict == "FAIL":
        raise CliError("gradcheck", f"max relative error {worst:.3e} >= {GRADCHECK_BAR:g}")


def cmd_export_csv(cfg):
    ds = read_dataset(_existing(cfg["data"][0], "dataset"))
    out = _writable(cfg["out"][0])
    export_csv(ds, out)
    print(f"wrote {out}")


def cmd_pipeline(cfg):
    """gen-expert -> train-base -> infer-augment -> train-correction -> sweep."""
    work = Path(cfg["workdir"][0])
    work.mkdir(parents=True, exist_ok=True)
    env = _env_config(cfg)
    H, seed = cfg["H"][0], cfg["seed"][0]
    t0 = time.perf_counter()
    n = cfg["episodes"][0] or DEFAULT_EPISODES[env.env_id]
    dbase = record_expert_dataset(env, n, seed, work / "dbase.bin")
    print(f"[{time.perf_counter() - t0:6.1f}s] gen-expert: {dbase.obs.shape[0]} transitions", flush=True)
    base, _ = train_base(dbase, replace(BASE_TRAIN_DEFAULTS, seed=seed), H)
    save_policy(work / "base.pol", base)
    print(f"[{time.perf_counter() - t0:6.1f}s] train-base done", flush=True)
    dcor = build_dcor(dbase, base, H, False, work / "dcor.bin")
    print(f"[{time.perf_counter() - t0:6.1f}s] infer-augment: {len(dcor)} records", flush=True)
    head, _ = train_correction(dcor, replace(HEAD_TRAIN_DEFAULTS, seed=seed))
    save_policy(work / "head.pol", head)
    print(f"[{time.perf_counter() - t0:6.1f}s] train-correction done", flush=True)
    spec = SweepSpec(env=env, base=base, head=head, cells=parse_cells(cfg["cells"][0], H), H=H,
                     n_rollouts=cfg["rollouts"][0], base_seed=seed, jobs=cfg["jobs"][0])
    res = run_sweep(spec)
    write_csv(res.cells, work / "sweep.csv")
    print(f"[{time.perf_counter() - t0:6.1f}s] sweep: {len(res.cells)} cells -> {work / 'sweep.csv'}")
    write_manifest(work / "pipeline.manifest", "pipeline", cfg, [],
                   [work / f for f in ("dbase.bin", "base.pol", "dcor.bin", "head.pol", "sweep.csv")],
                   {"elapsed_s": f"{time.perf_counter() - t0:.1f}"})


HANDLERS = {
    "gen-expert": cmd_gen_expert, "train-base": cmd_train_base,
    "infer-augment": cmd_infer_augment, "train-correction": cmd_train_correction,
    "rollout": cmd_rollout, "sweep": cmd_sweep, "serve": cmd_serve, "client": cmd_client,
    "gradcheck": cmd_gradcheck, "export-csv": cmd_export_csv, "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="a2c2", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--print-config", action="store_true", help="print resolved settings and exit")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any key, including env.<field> physics")
        for key, opt in {**COMMON, **opts}.items():
            flag = "--" + key.replace("_", "-")
            if opt.type is bool:
                p.add_argument(flag, dest=key, nargs="?", const="true", default=None, help=opt.help)
            else:
                p.add_argument(flag, dest=key, default=None, help=opt.help)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        ns = vars(args)
        keys = set(COMMON) | set(COMMANDS[args.command])
        flags = {k: ns[k] for k in keys if ns.get(k) is not None}
        for item in args.set:
            if "=" not in item:
                raise CliError("usage", f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            flags[k.strip()] = v.strip()
        file_values = read_config_file(args.config) if args.config else {}
        if args.print_config:
            # Required paths may be absent when only inspecting settings.
            schema = {**COMMON, **COMMANDS[args.command]}
            filled = {k: "<unset>" for k, o in schema.items() if o.default is None
                      and k not in flags and k not in file_values}
            cfg = resolve_config(args.command, {**filled, **flags}, file_values)
            cfg.update({k: ("<unset>", "required") for k in filled})
            print(format_config(args.command, cfg))
            return 0
        cfg = resolve_config(args.command, flags, file_values)
        HANDLERS[args.command](cfg)
        return 0
    except CliError as exc:
        print(f"error: code={exc.code} msg={json.dumps(str(exc))}", file=sys.stderr)
        if exc.code == "usage":
            parser.print_usage(sys.stderr)
        return 2
    except (DatasetError, ScheduleError, ValueError, OSError, ConnectionError) as exc:
        code = type(exc).__name__
        print(f"error: code={code} msg={json.dumps(str(exc))}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
