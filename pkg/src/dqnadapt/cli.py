"""Command-line experiment runner.

Subcommands::

    oracle   print the exact grid Q-table
    train    train one configuration, write evals.csv and a checkpoint
    adapt    retrain a saved base network on the modified task
    sweep    run a manifest of (algorithm, base, seeds) and aggregate
    report   render an aggregate CSV as aligned text and CSV

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import adapt as adapt_mod
from .envs import GRID_ACTIONS, GRID_ADAPTED, GRID_ORIGINAL, IntersectionParams
from .oracle import STATIONARY, STEP_AUGMENTED, solve_grid_q
from .qlearn import ALGORITHM_ORDER, ALGORITHMS, ConfigError, EvalPoint, RunRecord, TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

EVAL_HEADER = ["episode", "accuracy", "mse_optimal", "mse_all"]
AGGREGATE_HEADER = ["algorithm", "base", "seed", "acc_final", "mse_optimal", "mse_all", "settle_episode"]
ACTION_NAMES = ("up", "down", "left", "right")
BASE_ORDER = ("fresh", "onehot", "dqn")
INTERSECTION_EPISODES = 100_000
INTERSECTION_EPISODES_LONG = 1_500_000


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# --------------------------------------------------------------------------
# Config files
# --------------------------------------------------------------------------

_TRAIN_KEYS = {f.name: f for f in fields(TrainConfig) if f.name != "env_params"}
_ENV_KEYS = {f.name: f for f in fields(IntersectionParams)}
_EXTRA_KEYS = {"outdir": "runs/default"}


def config_keys() -> dict:
    """Every accepted config key and its default."""
    out = {name: f.default for name, f in _TRAIN_KEYS.items()}
    out.update({name: f.default for name, f in _ENV_KEYS.items()})
    out.update(_EXTRA_KEYS)
    return out


def _coerce(raw: str, default):
    text = raw.strip()
    if text.lower() in ("none", ""):
        return None
    if isinstance(default, bool) or default is None:
        if text.lower() in ("true", "yes"):
            return True
        if text.lower() in ("false", "no"):
            return False
        if isinstance(default, bool):
            raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int) or default is None and text.lstrip("-").isdigit():
        try:
            return int(text.replace("_", ""))
        except ValueError:
            return float(text)
    if isinstance(default, float) or default is None:
        try:
            return float(text)
        except ValueError:
            return text
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """``key = value`` lines with ``#`` comments; unknown or repeated keys are errors."""
    known = config_keys()
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = _coerce(raw, known[key])
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return values


def build_config(values: dict) -> tuple[TrainConfig, Path]:
    train_kw = {k: v for k, v in values.items() if k in _TRAIN_KEYS and v is not None}
    env_kw = {k: v for k, v in values.items() if k in _ENV_KEYS and v is not None}
    if env_kw:
        train_kw["env_params"] = env_kw
    outdir = Path(values.get("outdir") or _EXTRA_KEYS["outdir"])
    return TrainConfig(**train_kw), outdir


def load_config(path: Path) -> tuple[TrainConfig, Path, str]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    config, outdir = build_config(parse_config_text(text, str(path)))
    return config, outdir, text


# --------------------------------------------------------------------------
# Output helpers
# --------------------------------------------------------------------------

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_evals(record: RunRecord, path: Path, base_id: Optional[str] = None) -> None:
    header = EVAL_HEADER + (["base_id"] if base_id is not None else [])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for e in record.evals:
        row = [e.episode, _fmt(e.accuracy), _fmt(e.mse_optimal), _fmt(e.mse_all)]
        w.writerow(row + ([base_id] if base_id is not None else []))
    path.write_text(buf.getvalue())


def read_evals(path: Path) -> list[EvalPoint]:
    """Inverse of ``write_evals`` (the base_id column, if any, is dropped)."""
    def num(text):
        return float(text) if text != "" else None

    with Path(path).open(newline="") as fh:
        return [EvalPoint(int(r["episode"]), float(r["accuracy"]), num(r["mse_optimal"]), num(r["mse_all"]))
                for r in csv.DictReader(fh)]


def summary_line(record: RunRecord) -> str:
    last = record.final()
    settle = "none" if record.settle_episode is None else str(record.settle_episode)
    parts = [f"final_accuracy={last.accuracy:.4f}", f"settle_episode={settle}"]
    if record.settle_episode is None:
        parts.append(f"plateau={record.plateau:.4f}")
    if last.mse_optimal is not None:
        parts += [f"mse_optimal={last.mse_optimal:.6g}", f"mse_all={last.mse_all:.6g}"]
    return " ".join(parts)


def _write_run(record: RunRecord, config: TrainConfig, outdir: Path, config_text: Optional[str],
               base_id: Optional[str] = None) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    write_evals(record, outdir / "evals.csv", base_id)
    prov = adapt_mod.provenance_for(config)
    if record.base is not None:
        prov["base"] = record.base
    adapt_mod.save_checkpoint(record.net, prov, outdir / "model.ckpt")
    if config_text is not None:
        (outdir / "config.txt").write_text(config_text)
    (outdir / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    (outdir / "summary.txt").write_text(summary_line(record) + "\n")


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def cmd_oracle(args) -> int:
    task = {"original": GRID_ORIGINAL, "adapted": GRID_ADAPTED}[args.task]
    table = solve_grid_q(task, args.gamma, args.variant)
    steps = sorted({k[1] for k in table.values}) if args.variant == STEP_AUGMENTED else (0,)
    rows = [(c, a, k, table.q(c, a, k)) for k in steps for c in task.white_cells() for a in GRID_ACTIONS]
    width = max(len(n) for n in ACTION_NAMES)
    print(f"# Q-table: task={args.task} gamma={args.gamma} variant={args.variant}")
    for cell in task.white_cells():
        for k in steps:
            label = f"({cell[0]},{cell[1]})" + (f" t={k}" if args.variant == STEP_AUGMENTED else "")
            vals = "  ".join(f"{ACTION_NAMES[a]:>{width}}={table.q(cell, a, k):9.3f}" for a in GRID_ACTIONS)
            print(f"{label:<12}{vals}")
    print()
    head = "cell,action,step,q" if args.variant == STEP_AUGMENTED else "cell,action,q"
    print(head)
    for c, a, k, q in rows:
        cell = f'"({c[0]},{c[1]})"'
        mid = f",{k}" if args.variant == STEP_AUGMENTED else ""
        print(f"{cell},{ACTION_NAMES[a]}{mid},{q!r}")
    return EXIT_OK


def cmd_train(args) -> int:
    config, outdir, text = load_config(args.config)
    if args.outdir:
        outdir = Path(args.outdir)
    record = train(config)
    _write_run(record, config, outdir, text)
    print(summary_line(record))
    return EXIT_OK


def cmd_adapt(args) -> int:
    config, outdir, text = load_config(args.config)
    if args.outdir:
        outdir = Path(args.outdir)
    base = Path(args.base)
    if not base.is_file():
        raise ConfigError(f"base checkpoint {base} does not exist")
    record = adapt_mod.retrain(base, config)
    _write_run(record, config, outdir, text, base_id=record.base["file_sha256"][:16])
    print(summary_line(record))
    return EXIT_OK


# ---- sweeps ----

@dataclass(frozen=True)
class SweepRun:
    algorithm: str
    base: str
    seed: int

    @property
    def name(self) -> str:
        return f"{self.algorithm}-{Path(self.base).stem}-s{self.seed}"


def parse_seeds(text: str) -> list[int]:
    seeds: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        elif part:
            seeds.append(int(part))
    if not seeds:
        raise ValueError("no seeds")
    return seeds


def parse_manifest(text: str, source: str = "<manifest>") -> tuple[dict, list[SweepRun]]:
    """Shared ``key = value`` settings plus ``run <algorithm> <base> <seeds>`` lines.

    ``base`` is ``fresh``, ``onehot``, ``dqn`` or a checkpoint path; seeds are
    a comma list with optional ranges such as ``0-4``.
    """
    settings_lines, runs = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if body.startswith("run ") or body == "run":
            parts = body.split()
            if len(parts) != 4:
                raise ConfigError(f"{source}:{lineno}: expected 'run <algorithm> <base> <seeds>'")
            _, alg, base, seeds = parts
            if alg not in ALGORITHMS:
                raise ConfigError(f"{source}:{lineno}: unknown algorithm {alg!r}")
            try:
                runs.extend(SweepRun(alg, base, s) for s in parse_seeds(seeds))
            except ValueError as exc:
                raise ConfigError(f"{source}:{lineno}: bad seeds {seeds!r} ({exc})") from None
            settings_lines.append("")
        else:
            settings_lines.append(line)
    settings = parse_config_text("\n".join(settings_lines), source)
    if not runs:
        raise ConfigError(f"{source}: manifest lists no runs")
    return settings, runs


def _run_config(settings: dict, run: SweepRun, long: bool) -> tuple[TrainConfig, Path]:
    values = dict(settings, algorithm=run.algorithm, seed=run.seed)
    if values.get("env") == "intersection" and values.get("episodes") is None:
        values["episodes"] = INTERSECTION_EPISODES_LONG if long else INTERSECTION_EPISODES
    if run.base != "fresh" and values.get("task") is None:
        values["task"] = "adapted"
    return build_config(values)


def _base_for(run: SweepRun, config: TrainConfig, cache: Path):
    """Path to the base checkpoint for a run, building named bases on demand."""
    if run.base not in ("onehot", "dqn"):
        return Path(run.base)
    path = cache / f"{run.base}-{config.env}-s{run.seed}.ckpt"
    if not path.exists():
        build = adapt_mod.build_onehot_base if run.base == "onehot" else adapt_mod.build_dqn_base
        cache.mkdir(parents=True, exist_ok=True)
        net, prov, _ = build(config.env, run.seed, env_params=config.env_params)
        adapt_mod.save_checkpoint(net, prov, path)
    return path


def execute_run(settings: dict, run: SweepRun, outroot: Path, long: bool = False) -> dict:
    config, _ = _run_config(settings, run, long)
    outdir = outroot / run.name
    if run.base == "fresh":
        record = train(config)
        base_id = None
    else:
        base_path = _base_for(run, config, outroot / "bases")
        if not base_path.is_file():
            raise ConfigError(f"base checkpoint {base_path} does not exist")
        record = adapt_mod.retrain(base_path, config)
        base_id = record.base["file_sha256"][:16]
    _write_run(record, config, outdir, None, base_id)
    last = record.final()
    return {"algorithm": run.algorithm, "base": run.base, "seed": run.seed, "acc_final": last.accuracy,
            "mse_optimal": last.mse_optimal, "mse_all": last.mse_all, "settle_episode": record.settle_episode}


def _safe_run(payload):
    settings, run, outroot, long = payload
    try:
        return run, execute_run(settings, run, outroot, long), None
    except Exception as exc:  # a failed run must not stop the sweep
        return run, None, f"{type(exc).__name__}: {exc}"


def _mean(values):
    vals = [v for v in values if v is not None]
    if not vals or len(vals) != len(values):
        return None
    return float(np.mean(vals))


def aggregate_rows(rows: Sequence[dict]) -> list[dict]:
    """Per-seed rows followed by one seed-mean row per (algorithm, base)."""
    out = sorted(rows, key=_row_key)
    groups: dict = {}
    for r in out:
        groups.setdefault((r["algorithm"], r["base"]), []).append(r)
    means = []
    for (alg, base), rs in groups.items():
        means.append({"algorithm": alg, "base": base, "seed": "mean",
                      **{k: _mean([r[k] for r in rs]) for k in AGGREGATE_HEADER[3:]}})
    return out + sorted(means, key=_row_key)


def _row_key(r) -> tuple:
    alg = ALGORITHM_ORDER.index(r["algorithm"]) if r["algorithm"] in ALGORITHM_ORDER else len(ALGORITHM_ORDER)
    base = BASE_ORDER.index(r["base"]) if r["base"] in BASE_ORDER else len(BASE_ORDER)
    seed = r["seed"] if isinstance(r["seed"], int) else math.inf
    return base, r["base"], alg, r["algorithm"], seed


def write_aggregate(rows: Sequence[dict], path: Path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(AGGREGATE_HEADER)
    for r in rows:
        w.writerow([_fmt(r[k]) for k in AGGREGATE_HEADER])
    path.write_text(buf.getvalue())


def cmd_sweep(args) -> int:
    try:
        text = Path(args.manifest).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read manifest {args.manifest}: {exc.strerror}") from None
    settings, runs = parse_manifest(text, str(args.manifest))
    settings.pop("outdir", None)
    outroot = Path(args.outdir)
    outroot.mkdir(parents=True, exist_ok=True)
    payloads = [(settings, run, outroot, args.long) for run in runs]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_safe_run, payloads))
    else:
        results = [_safe_run(p) for p in payloads]
    rows = [row for _, row, err in results if err is None]
    failures = [(run, err) for run, _, err in results if err is not None]
    write_aggregate(aggregate_rows(rows), outroot / "aggregate.csv")
    print(f"{len(rows)} of {len(runs)} runs completed; aggregate written to {outroot / 'aggregate.csv'}")
    for run, err in failures:
        print(f"FAILED {run.name}: {err}", file=sys.stderr)
    return EXIT_RUNTIME if failures else EXIT_OK


# ---- reports ----

class ReportParseError(ValueError):
    pass


def read_aggregate(path: Path) -> list[dict]:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines:
        return []
    header = next(csv.reader([lines[0]]))
    if header != AGGREGATE_HEADER:
        raise ReportParseError(f"{path}:1: expected header {','.join(AGGREGATE_HEADER)}")
    rows = []
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        cells = next(csv.reader([line]))
        if len(cells) != len(AGGREGATE_HEADER):
            raise ReportParseError(f"{path}:{lineno}: expected {len(AGGREGATE_HEADER)} fields, got {len(cells)}")
        row = dict(zip(AGGREGATE_HEADER, cells))
        try:
            row["seed"] = row["seed"] if row["seed"] == "mean" else int(row["seed"])
            for k in ("acc_final", "mse_optimal", "mse_all", "settle_episode"):
                row[k] = float(row[k]) if row[k] != "" else None
        except ValueError as exc:
            raise ReportParseError(f"{path}:{lineno}: {exc}") from None
        rows.append(row)
    return rows


def report_table(rows: Sequence[dict]) -> tuple[list[str], list[list]]:
    """One row per (algorithm, base) of seed means, in canonical order."""
    groups: dict = {}
    for r in rows:
        if r["seed"] != "mean":
            groups.setdefault((r["algorithm"], r["base"]), []).append(r)
    retrain = any(base != "fresh" for _, base in groups)
    columns = ["algorithm", "base", "ACC"] + (["EPI"] if retrain else []) + ["MSE*", "MSEq"]
    table = []
    for (alg, base), rs in sorted(groups.items(), key=lambda kv: _row_key(dict(algorithm=kv[0][0], base=kv[0][1], seed=0))):
        row = [alg, base, _mean([r["acc_final"] for r in rs])]
        if retrain:
            row.append(_mean([r["settle_episode"] for r in rs]))
        row += [_mean([r["mse_optimal"] for r in rs]), _mean([r["mse_all"] for r in rs])]
        table.append(row)
    return columns, table


def render_report(columns: list[str], table: list[list]) -> str:
    best = {}
    for j, col in enumerate(columns[2:], 2):
        vals = [row[j] for row in table if row[j] is not None]
        if vals:
            best[j] = max(vals) if col == "ACC" else min(vals)
    cells = []
    for row in table:
        out = list(row[:2])
        for j in range(2, len(columns)):
            v = row[j]
            text = "-" if v is None else (f"{v:.0f}" if columns[j] == "EPI" else f"{v:.4g}")
            out.append(text + ("*" if v is not None and v == best.get(j) else ""))
        cells.append(out)
    widths = [max([len(c)] + [len(r[i]) for r in cells]) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) if i < 2 else c.rjust(w) for i, (c, w) in enumerate(zip(columns, widths)))]
    for r in cells:
        lines.append("  ".join(c.ljust(w) if i < 2 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
    lines.append("(* best in column)")
    lines.append("")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in table:
        w.writerow([_fmt(v) for v in row])
    return "\n".join(lines) + "\n" + buf.getvalue()


def cmd_report(args) -> int:
    try:
        rows = read_aggregate(args.aggregate)
    except OSError as exc:
        raise ConfigError(f"cannot read {args.aggregate}: {exc.strerror}") from None
    columns, table = report_table(rows)
    sys.stdout.write(render_report(columns, table))
    return EXIT_OK


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dqnadapt", description="DQN task-adaptation experiments")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    o = sub.add_parser("oracle", help="print the exact grid Q-table")
    o.add_argument("--task", choices=("original", "adapted"), default="original")
    o.add_argument("--gamma", type=float, default=1.0)
    o.add_argument("--variant", choices=(STATIONARY, STEP_AUGMENTED), default=STATIONARY)
    o.set_defaults(func=cmd_oracle)

    t = sub.add_parser("train", help="train from a config file")
    t.add_argument("config", type=Path)
    t.add_argument("--outdir", type=Path, default=None, help="overrides the config's outdir")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("adapt", help="retrain a base checkpoint on the modified task")
    a.add_argument("--base", required=True, type=Path)
    a.add_argument("config", type=Path)
    a.add_argument("--outdir", type=Path, default=None)
    a.set_defaults(func=cmd_adapt)

    s = sub.add_parser("sweep", help="run a manifest of runs and aggregate")
    s.add_argument("manifest", type=Path)
    s.add_argument("--outdir", type=Path, default=Path("runs/sweep"))
    s.add_argument("--long", action="store_true", help="full-length intersection budget")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="render an aggregate CSV")
    r.add_argument("aggregate", type=Path)
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be at least 1")
        return args.func(args)
    except UsageError as exc:
        print(f"dqnadapt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ReportParseError) as exc:
        print(f"dqnadapt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:
        print(f"dqnadapt: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
