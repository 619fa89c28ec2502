import csv

import numpy as np
import pytest

from fbmebe.checkpoint import load_checkpoint
from fbmebe.cli import main
from fbmebe.fb import normalize_z
from fbmebe.trainer import Trainer

TINY = [
    "--workers", "4", "--batch_size", "32", "--buffer_capacity", "5000", "--goal_capacity", "1000",
    "--random_steps", "200", "--d", "4", "--forward_hidden", "16", "--backward_hidden", "16",
    "--actor_hidden", "16", "--critic_hidden", "16", "--flow_layers", "2", "--flow_hidden", "8",
    "--flow_epochs", "2", "--flow_refresh", "400", "--pool_size", "32", "--z_refresh", "10",
    "--entropy_window", "2000",
]


def run_train(run_dir, *extra):
    return main(["train", "--run-dir", str(run_dir), *TINY, *extra])


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    assert run_train(root / "fb", "--mode", "FB", "--seed", "1", "--steps", "1200") == 0
    assert run_train(root / "mebe", "--mode=MEBE", "--seed", "2", "--steps", "1200") == 0
    return root


def test_train_names_mode(runs):
    rows = read_rows(runs / "fb" / "metrics.csv")
    assert len(rows) == 3
    assert {r["mode"] for r in rows} == {"FB"} and {r["seed"] for r in rows} == {"1"}
    assert (runs / "fb" / "config.txt").read_text().startswith("mode = FB\n")


def test_train_zero_steps(tmp_path):
    assert run_train(tmp_path / "r", "--steps", "0") == 0
    tensors, meta = load_checkpoint(tmp_path / "r" / "checkpoint")
    assert meta["counters"]["env_steps"] == 0
    assert len(read_rows(tmp_path / "r" / "metrics.csv")) == 0


def test_train_unknown_key_writes_nothing(tmp_path, capsys):
    assert run_train(tmp_path / "r", "--colour", "red") == 1
    assert not (tmp_path / "r").exists()
    assert "colour" in capsys.readouterr().err


def test_train_bad_value_is_usage_error(tmp_path):
    assert run_train(tmp_path / "r", "--gamma", "2") == 1
    assert run_train(tmp_path / "r2", "--seed") == 1


def test_train_resume(tmp_path, runs):
    assert run_train(tmp_path / "half", "--mode", "FB", "--seed", "1", "--steps", "600") == 0
    assert run_train(tmp_path / "full", "--mode", "FB", "--seed", "1", "--steps", "1200",
                     "--resume", str(tmp_path / "half")) == 0
    assert (tmp_path / "full" / "metrics.csv").read_text() == (runs / "fb" / "metrics.csv").read_text()
    assert run_train(tmp_path / "x", "--resume", str(tmp_path / "none")) == 3


def test_resume_keeps_saved_config(tmp_path, runs):
    # only the step count is given; mode and seed come from the checkpoint
    assert run_train(tmp_path / "half", "--mode", "FB", "--seed", "1", "--steps", "600") == 0
    assert main(["train", "--run-dir", str(tmp_path / "full"), "--steps", "1200",
                 "--resume", str(tmp_path / "half")]) == 0
    assert (tmp_path / "full" / "metrics.csv").read_text() == (runs / "fb" / "metrics.csv").read_text()
    assert (tmp_path / "full" / "config.txt").read_text().startswith("mode = FB\n")


def test_eval_writes_report(runs, capsys):
    assert main(["eval", str(runs / "mebe"), "--episodes", "2", "--samples", "500"]) == 0
    rows = read_rows(runs / "mebe" / "eval.csv")
    assert len(rows) == 17
    assert all(0.0 <= float(r["mean_return"]) <= 250.0 for r in rows)
    assert rows[0]["speed"] == "0.0"
    assert "behavior entropy" in capsys.readouterr().out


def test_eval_missing_snapshot(tmp_path, runs, capsys):
    run = tmp_path / "copy"
    run.mkdir()
    (run / "metrics.csv").write_text((runs / "fb" / "metrics.csv").read_text())
    Trainer.load(runs / "fb" / "checkpoint").save(run / "checkpoint")
    assert main(["eval", str(run)]) == 3
    assert "--snapshot" in capsys.readouterr().err
    assert main(["export", str(run), "--snapshot"]) == 0
    assert main(["eval", str(run), "--episodes", "1", "--samples", "100"]) == 0


def test_eval_missing_checkpoint(tmp_path):
    assert main(["eval", str(tmp_path)]) == 3


def write_samples(path, proj, reward, header=True):
    lines = ["vx,vy,reward"] if header else []
    lines += [f"{float(a)!r},{float(b)!r},{float(r)!r}" for (a, b), r in zip(proj, reward)]
    path.write_text("\n".join(lines) + "\n")


def infer_z(runs, path, capsys):
    assert main(["infer", str(runs / "mebe"), str(path)]) == 0
    out = capsys.readouterr()
    z = np.array([float(v) for v in out.out.split()])
    assert float(out.err.split()[-1]) == pytest.approx(2.0, rel=1e-5)
    return z


def test_infer_constant_reward(tmp_path, runs, capsys):
    rng = np.random.default_rng(0)
    proj = rng.uniform(-2, 2, (200, 2))
    write_samples(tmp_path / "s.csv", proj, np.ones(200))
    z = infer_z(runs, tmp_path / "s.csv", capsys)
    model = Trainer.load(runs / "mebe" / "checkpoint").model
    mean_b = model.embed(proj.astype(np.float32)).astype(np.float64).mean(axis=0)
    np.testing.assert_allclose(z, normalize_z(mean_b, 4), rtol=1e-4, atol=1e-5)


def test_infer_scale_invariant(tmp_path, runs, capsys):
    rng = np.random.default_rng(1)
    proj = rng.uniform(-2, 2, (100, 2))
    r = rng.random(100)
    write_samples(tmp_path / "a.csv", proj, r)
    write_samples(tmp_path / "b.csv", proj, 5 * r, header=False)
    za = infer_z(runs, tmp_path / "a.csv", capsys)
    zb = infer_z(runs, tmp_path / "b.csv", capsys)
    np.testing.assert_allclose(za, zb, rtol=1e-5)


def test_infer_errors(tmp_path, runs):
    (tmp_path / "empty.csv").write_text("")
    assert main(["infer", str(runs / "mebe"), str(tmp_path / "empty.csv")]) == 1
    (tmp_path / "header.csv").write_text("vx,vy,reward\n")
    assert main(["infer", str(runs / "mebe"), str(tmp_path / "header.csv")]) == 1
    (tmp_path / "junk.csv").write_text("vx,vy,reward\n0.1,0.2,1\na,b,c\n")
    assert main(["infer", str(runs / "mebe"), str(tmp_path / "junk.csv")]) == 1
    write_samples(tmp_path / "zero.csv", np.zeros((3, 2)), np.zeros(3))
    assert main(["infer", str(runs / "mebe"), str(tmp_path / "zero.csv")]) == 2
    assert main(["infer", str(runs / "mebe"), str(tmp_path / "missing.csv")]) == 3


def test_infer_writes_file(tmp_path, runs, capsys):
    write_samples(tmp_path / "s.csv", [[0.5, 0.5]], [1.0])
    out = tmp_path / "z.txt"
    assert main(["infer", str(runs / "mebe" / "checkpoint"), str(tmp_path / "s.csv"), "--out", str(out)]) == 0
    assert len(out.read_text().split()) == 4


def test_oracle_check(capsys):
    assert main(["oracle-check"]) == 0
    first = capsys.readouterr().out
    assert first.count("PASS") == 4 and "FAIL" not in first
    assert main(["oracle-check"]) == 0
    assert capsys.readouterr().out == first
    assert main(["oracle-check", "--inject-fault", "--trials", "10"]) == 2
    assert "FAIL" in capsys.readouterr().out


def test_export_two_modes(tmp_path, runs):
    for run in ("fb", "mebe"):
        assert main(["eval", str(runs / run), "--episodes", "1", "--samples", "200"]) == 0
    out = tmp_path / "plots"
    assert main(["export", str(runs / "fb"), str(runs / "mebe"), "--out", str(out), "--grid", "8"]) == 0
    entropy = read_rows(out / "entropy_vs_steps.csv")
    assert len(entropy) == 6
    assert {r["mode"] for r in entropy} == {"FB", "MEBE"}
    tasks = read_rows(out / "task_returns.csv")
    assert len(tasks) == 17 and set(tasks[0]) == {"task", "FB", "MEBE"}
    grid = read_rows(out / "density_grid.csv")
    assert len(grid) == 64 and {r["mode"] for r in grid} == {"MEBE"}
    assert (out / "entropy_vs_steps.csv").read_text().startswith("# ")


def test_export_empty_dir_writes_nothing(tmp_path, runs):
    empty = tmp_path / "empty"
    empty.mkdir()
    out = tmp_path / "plots"
    assert main(["export", str(runs / "fb"), str(empty), "--out", str(out)]) == 3
    assert not out.exists()
    assert list(empty.iterdir()) == []


def test_usage_errors():
    assert main([]) == 1
    assert main(["nonsense"]) == 1
    assert main(["oracle-check", "--bogus", "1"]) == 1
