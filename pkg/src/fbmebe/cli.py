"""Command-line entry point: ``fbmebe <train|eval|infer|oracle-check|export>``.

Exit codes: 0 success, 1 usage error, 2 numeric failure, 3 missing artifact.
Every setting of the run config can be overridden with ``--key value``
(``--steps`` is shorthand for ``--total_steps``).
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import MissingArtifact, load_checkpoint
from .config import ConfigError, RunConfig, dump_config, load_config, parse_config_text
from .env import task_grid
from .evaluate import evaluate
from .fb import DegenerateTask, infer_task_embedding
from .flow import density_grid
from .nn import TrainingError, UsageError
from .replay import ReplayBuffer, dump_snapshot, load_snapshot
from .tabular import run_oracle_suite
from .trainer import Trainer, train, write_text_atomic

log = logging.getLogger("fbmebe")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_MISSING = 0, 1, 2, 3
ALIASES = {"steps": "total_steps"}
SNAPSHOT = "replay.bin"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _overrides(extra: list[str]) -> dict[str, str]:
    """Turn ``--key value`` / ``--key=value`` pairs into a dict."""
    out: dict[str, str] = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) < 3:
            raise UsageError(f"unexpected argument {tok!r}")
        if "=" in tok:
            key, value = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"missing value for {tok}")
            key, value = tok[2:], extra[i + 1]
            i += 2
        key = key.replace("-", "_")
        out[ALIASES.get(key, key)] = value
    return out


def _write_csv(path: Path, header: list[str], rows: list[list], comment: str | None = None) -> None:
    buf = io.StringIO()
    if comment:
        for line in comment.splitlines():
            buf.write(f"# {line}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    write_text_atomic(path, buf.getvalue())


def _load_trainer(ckpt_dir: Path) -> Trainer:
    if not (ckpt_dir / "manifest.txt").exists():
        raise MissingArtifact(f"no checkpoint at {ckpt_dir}")
    return Trainer.load(ckpt_dir)


def _checkpoint_dir(path: Path) -> Path:
    """Accept either a run directory or the checkpoint directory itself."""
    return path / "checkpoint" if (path / "checkpoint").is_dir() else path


# subcommands -------------------------------------------------------------------
def cmd_train(args, extra) -> int:
    overrides = _overrides(extra)
    run_dir = Path(args.run_dir)
    resume = None
    if args.resume:
        resume = _checkpoint_dir(Path(args.resume))
        if not (resume / "manifest.txt").exists():
            raise MissingArtifact(f"no checkpoint to resume at {resume}")
        # a resumed run keeps its saved settings unless told otherwise
        _, meta = load_checkpoint(resume)
        base = RunConfig.from_dict(meta["config"]).to_dict()
        if args.config:
            base.update(parse_config_text(Path(args.config).read_text()))
        cfg = RunConfig.from_dict({**base, **overrides})
    else:
        cfg = load_config(args.config, overrides)
    run_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, run_dir / "config.txt")
    arts = train(cfg, run_dir, resume)
    final = arts.entropy[-1] if arts.entropy else float("nan")
    print(f"trained {cfg.mode} seed {cfg.seed} to {arts.trainer.env_steps} steps; "
          f"final behavior entropy {final:.4f}; artifacts in {run_dir}")
    return EXIT_OK


def _eval_inputs(run_dir: Path) -> tuple[Trainer, ReplayBuffer]:
    tr = _load_trainer(_checkpoint_dir(run_dir))
    snap = run_dir / SNAPSHOT
    if not snap.exists():
        raise MissingArtifact(
            f"no replay snapshot at {snap}; export one with `fbmebe export {run_dir} --snapshot`"
        )
    return tr, load_snapshot(snap, tr.env)


def cmd_eval(args, extra) -> int:
    if extra:
        raise UsageError(f"unexpected arguments: {' '.join(extra)}")
    run_dir = Path(args.run_dir)
    tr, replay = _eval_inputs(run_dir)
    report = evaluate(tr.model, replay, task_grid(), args.episodes, args.samples, args.seed, tr.env)
    rows = [[r["task"], r["vx"], r["vy"], r["speed"], r["mean_return"], r["std_return"]]
            for r in report.rows()]
    out = Path(args.out) if args.out else run_dir / "eval.csv"
    _write_csv(
        out, ["task", "vx", "vy", "speed", "mean_return", "std_return"], rows,
        f"mode={tr.cfg.mode} seed={tr.cfg.seed} behavior_entropy={report.behavior_entropy!r} "
        f"mean_action_rate={report.mean_action_rate!r}",
    )
    for row in rows:
        print(f"{row[0]:>14s}  {row[4]:8.2f} +- {row[5]:6.2f}")
    print(f"behavior entropy {report.behavior_entropy:.4f}  "
          f"mean action-rate penalty {report.mean_action_rate:.5f}")
    return EXIT_OK


def _read_samples(path: Path) -> tuple[np.ndarray, np.ndarray]:
    if not path.exists():
        raise MissingArtifact(f"no samples file at {path}")
    rows = []
    first = True
    for raw in path.read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            if not first:
                raise UsageError(f"non-numeric row in {path}: {raw!r}")
        first = False  # only the first data line may be a header
    if not rows:
        raise UsageError(f"{path} holds no samples")
    data = np.array(rows)
    if data.ndim != 2 or data.shape[1] != 3:
        raise UsageError("samples need three columns: vx, vy, reward")
    return data[:, :2], data[:, 2]


def cmd_infer(args, extra) -> int:
    if extra:
        raise UsageError(f"unexpected arguments: {' '.join(extra)}")
    tr = _load_trainer(_checkpoint_dir(Path(args.checkpoint)))
    proj, reward = _read_samples(Path(args.samples))
    z = infer_task_embedding(tr.model, proj, reward)
    text = "\n".join(repr(float(v)) for v in z) + "\n"
    if args.out:
        write_text_atomic(Path(args.out), text)
    else:
        sys.stdout.write(text)
    print(f"norm {float(np.linalg.norm(z.astype(np.float64))):.6f}", file=sys.stderr)
    return EXIT_OK


def cmd_oracle_check(args, extra) -> int:
    if extra:
        raise UsageError(f"unexpected arguments: {' '.join(extra)}")
    report = run_oracle_suite(args.trials, args.dims, args.seed, inject_fault=args.inject_fault)
    sys.stdout.write(report.text())
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_export(args, extra) -> int:
    if extra:
        raise UsageError(f"unexpected arguments: {' '.join(extra)}")
    runs = [Path(p) for p in args.run_dirs]
    for run in runs:
        if not (run / "metrics.csv").exists():
            raise MissingArtifact(f"no metrics.csv in {run}")
    out = Path(args.out) if args.out else runs[0]
    # read and compute everything first so a failure leaves no partial output
    entropy_rows, task_rows, grids, snapshots = [], {}, [], []
    for run in runs:
        with open(run / "metrics.csv") as fh:
            for row in csv.DictReader(fh):
                entropy_rows.append([row["step"], row["mode"], row["seed"], row["behavior_entropy"]])
        tr = _load_trainer(_checkpoint_dir(run))
        if args.snapshot:
            snapshots.append((tr.replay, run / SNAPSHOT))
        if (run / "eval.csv").exists():
            with open(run / "eval.csv") as fh:
                lines = [ln for ln in fh if not ln.startswith("#")]
            for row in csv.DictReader(lines):
                task_rows.setdefault(tr.cfg.mode, {}).setdefault(row["task"], []).append(
                    float(row["mean_return"])
                )
        if tr.flow.fitted:
            lim = tr.cfg.v_max
            grid = density_grid(tr.flow, -lim, lim, args.grid)
            grids.append((tr.cfg.mode, tr.cfg.seed, grid))
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "entropy_vs_steps.csv", ["step", "mode", "seed", "behavior_entropy"],
               entropy_rows, "behavior entropy (nats) of the recent buffer window at each refresh")
    if task_rows:
        modes = sorted(task_rows)
        names = [t.name for t in task_grid()]
        rows = []
        for name in names:
            rows.append([name] + [
                repr(float(np.mean(task_rows[m][name]))) if name in task_rows[m] else "nan"
                for m in modes
            ])
        _write_csv(out / "task_returns.csv", ["task"] + modes, rows,
                   "mean zero-shot return per task, averaged over runs of each mode")
    if grids:
        rows = []
        for mode, seed, grid in grids:
            rows.extend([mode, seed] + [repr(float(v)) for v in g] for g in grid)
        _write_csv(out / "density_grid.csv", ["mode", "seed", "vx", "vy", "log_density"], rows,
                   "flow log-density over the velocity envelope")
    for replay, path in snapshots:
        dump_snapshot(replay, path)
    print(f"exported {len(runs)} run(s) to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fbmebe", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    t = sub.add_parser("train", help="train one run")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--run-dir", default="run", help="output directory")
    t.add_argument("--resume", help="checkpoint or run directory to resume from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="zero-shot evaluation on the 17-task grid")
    e.add_argument("run_dir")
    e.add_argument("--episodes", type=int, default=10)
    e.add_argument("--samples", type=int, default=10_000, help="buffer samples for task inference")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", help="report CSV (default RUN_DIR/eval.csv)")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="infer a task embedding from reward samples")
    i.add_argument("checkpoint", help="checkpoint or run directory")
    i.add_argument("samples", help="CSV with columns vx, vy, reward")
    i.add_argument("--out", help="write z here, one value per line")
    i.set_defaults(func=cmd_infer)

    o = sub.add_parser("oracle-check", help="exact successor-measure identities")
    o.add_argument("--dims", type=int, default=8, help="largest number of states")
    o.add_argument("--trials", type=int, default=50, help="number of random MDPs")
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--inject-fault", action="store_true", help="negative control: corrupt M")
    o.set_defaults(func=cmd_oracle_check)

    x = sub.add_parser("export", help="plot data from one or more runs")
    x.add_argument("run_dirs", nargs="+")
    x.add_argument("--out", help="output directory (default: first run directory)")
    x.add_argument("--grid", type=int, default=64, help="density grid resolution")
    x.add_argument("--snapshot", action="store_true", help="also write replay.bin from the checkpoint")
    x.set_defaults(func=cmd_export)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if extra and args.command != "train":
            raise UsageError(f"unexpected arguments: {' '.join(extra)}")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args, extra)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (TrainingError, DegenerateTask, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
