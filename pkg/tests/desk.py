"""Desk-scale point-mass experiments shared by the acceptance suite.

Each run trains one (mode, beta, seed) configuration for 100k env steps,
evaluates it zero-shot on the 17-task grid and stores a JSON summary under
``tests/desk_cache``. A summary is reused only if its key (run config plus
a hash of the package source) matches, so any code change forces a rerun.

Fill the cache ahead of a test session with::

    python tests/desk.py            # every run the acceptance suite needs
    python tests/desk.py MEBE 0     # one run
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

import fbmebe
from fbmebe.config import RunConfig
from fbmebe.evaluate import evaluate
from fbmebe.trainer import Trainer

CACHE = Path(os.environ.get("FBMEBE_DESK_CACHE", Path(__file__).parent / "desk_cache"))
SEEDS = (0, 1, 2)
STEPS = 100_000
# (label, mode, beta) for every run set the acceptance criteria use
RUN_SETS = [
    ("FB", "FB", 2.0),
    ("FB-Critic", "FB-Critic", 2.0),
    ("MEBE", "MEBE", 2.0),
    ("MEBE-b0", "MEBE", 0.0),
    ("MEBE-b1", "MEBE", 1.0),
]


def source_hash() -> str:
    h = hashlib.sha256()
    root = Path(fbmebe.__file__).parent
    for path in sorted(root.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def desk_config(mode: str, beta: float, seed: int, steps: int = STEPS) -> RunConfig:
    return RunConfig(mode=mode, beta=beta, seed=seed, total_steps=steps)


@dataclass
class DeskResult:
    label: str
    seed: int
    final_entropy: float
    entropy_trace: list
    eval_action_rate: float
    train_action_rate: float
    returns: dict  # task name -> mean return
    speeds: dict  # task name -> commanded speed
    seconds: float

    def mean_return(self, speed: float) -> float:
        vals = [r for name, r in self.returns.items() if abs(self.speeds[name] - speed) < 1e-6]
        return float(np.mean(vals))


def _key(cfg: RunConfig) -> str:
    text = json.dumps(cfg.to_dict(), sort_keys=True, default=list) + source_hash()
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def run_desk(label: str, mode: str, beta: float, seed: int, steps: int = STEPS) -> DeskResult:
    cfg = desk_config(mode, beta, seed, steps)
    key = _key(cfg)
    path = CACHE / f"{label}-s{seed}.json"
    if path.exists():
        data = json.loads(path.read_text())
        if data.get("key") == key:
            return DeskResult(**data["result"])
    start = time.process_time()
    trainer = Trainer(cfg)
    trainer.run()
    report = evaluate(trainer.model, trainer.replay, episodes=cfg.eval_episodes,
                      n_infer=cfg.infer_samples, seed=0)
    seconds = time.process_time() - start
    rows = trainer.rows
    result = DeskResult(
        label=label,
        seed=seed,
        final_entropy=float(rows[-1]["behavior_entropy"]),
        entropy_trace=[float(r["behavior_entropy"]) for r in rows],
        eval_action_rate=float(report.mean_action_rate),
        train_action_rate=float(np.mean([r["mean_action_rate"] for r in rows[-10:]])),
        returns={t.task.name: t.mean for t in report.tasks},
        speeds={t.task.name: t.task.speed for t in report.tasks},
        seconds=seconds,
    )
    CACHE.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps({"key": key, "config": cfg.to_dict(), "result": result.__dict__}, indent=1))
    tmp.replace(path)
    return result


def run_set(label: str) -> list[DeskResult]:
    _, mode, beta = next(r for r in RUN_SETS if r[0] == label)
    return [run_desk(label, mode, beta, s) for s in SEEDS]


if __name__ == "__main__":
    args = sys.argv[1:]
    todo = [(lab, m, b, s) for lab, m, b in RUN_SETS for s in SEEDS]
    if args:
        todo = [t for t in todo if t[0] == args[0] and (len(args) < 2 or t[3] == int(args[1]))]
    for lab, m, b, s in todo:
        res = run_desk(lab, m, b, s)
        print(f"{lab:10s} seed {s}  entropy {res.final_entropy:.3f}  "
              f"action-rate {res.eval_action_rate:.4f}  "
              f"boundary {res.mean_return(1.6):.1f}  cpu {res.seconds:.0f}s", flush=True)
