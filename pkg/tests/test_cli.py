import json
import math
import subprocess
import sys

import numpy as np
import pytest

from cnftpr import cli
from cnftpr.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from cnftpr.flow import FlowModel
from cnftpr.training import RunRecord, strip_wall_ms

TINY = ["--iters", "2", "--batch", "8", "--hidden", "4", "--test-size", "16"]


def run(argv, capsys):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def test_train_happy_path(tmp_path, capsys):
    code, out, _ = run(["train", "--dataset", "rings", "--tpr", "on", *TINY, "--out", str(tmp_path)], capsys)
    assert code == EXIT_OK
    summary = json.loads(out)
    assert summary["output_dir"] == str(tmp_path)
    assert len(RunRecord.load(tmp_path).rows) == 2
    resolved = json.loads((tmp_path / "config.resolved.json").read_text())
    assert resolved["tpr"] is True and resolved["dataset"] == "rings" and resolved["hidden"] == [4]


def test_bad_dataset_names_the_flag(capsys):
    code, _, err = run(["train", "--dataset", "nosuch"], capsys)
    assert code == EXIT_USAGE
    assert "--dataset" in err and "nosuch" in err


@pytest.mark.parametrize(
    "argv",
    [
        ["train", "--bogus", "1"],
        ["train", "--iters", "many"],
        ["train", "--tpr", "maybe"],
        ["train", "--hidden", "4,x"],
        ["frobnicate"],
        [],
    ],
)
def test_usage_errors_exit_1(argv, capsys):
    code, _, err = run(argv, capsys)
    assert code == EXIT_USAGE
    assert "usage" in err


def test_invalid_values_rejected_before_running(tmp_path, capsys):
    code, _, err = run(["train", "--iters", "0", "--out", str(tmp_path / "x")], capsys)
    assert code == EXIT_USAGE
    assert "invalid configuration" in err
    assert not (tmp_path / "x").exists()


def test_config_file_and_flag_precedence(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"dataset": "moons", "iters": 5, "lr": 0.01, "tpr": "off"}))
    args = cli.build_parser().parse_args(["train", "--config", str(cfg), "--iters", "3", "--out", str(tmp_path)])
    config = cli.resolve_config(args)
    assert (config.dataset, config.iterations, config.lr, config.tpr) == ("moons", 3, 0.01, False)


def test_config_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"colour": "blue"}))
    code, _, err = run(["train", "--config", str(cfg)], capsys)
    assert code == EXIT_USAGE and "colour" in err


def test_seed_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv(cli.SEED_ENV, "17")
    parse = cli.build_parser().parse_args
    assert cli.resolve_config(parse(["train", "--out", str(tmp_path)])).seed == 17
    assert cli.resolve_config(parse(["train", "--seed", "3", "--out", str(tmp_path)])).seed == 3
    monkeypatch.setenv(cli.SEED_ENV, "x")
    with pytest.raises(cli.UsageError):
        cli.resolve_config(parse(["train", "--out", str(tmp_path)]))


def test_default_output_dir(monkeypatch):
    monkeypatch.delenv(cli.SEED_ENV, raising=False)
    args = cli.build_parser().parse_args(["train", "--dataset", "moons", "--tpr", "off"])
    assert cli.resolve_config(args).output_dir == "runs/moons_baseline_s0"


def test_resolved_config_reproduces_run(tmp_path, capsys):
    first = tmp_path / "first"
    assert main(["train", "--dataset", "pinwheel", *TINY, "--seed", "5", "--out", str(first)]) == EXIT_OK
    second = tmp_path / "second"
    assert main(["train", "--config", str(first / "config.resolved.json"), "--out", str(second)]) == EXIT_OK
    capsys.readouterr()
    a, b = (d / "run.csv" for d in (first, second))
    assert strip_wall_ms(a.read_text()) == strip_wall_ms(b.read_text())
    assert (first / "eval.csv").read_text() == (second / "eval.csv").read_text()


def test_paired_run_layout(tmp_path, capsys):
    code, out, _ = run(["paired-run", "--dataset", "moons", "--seed", "3", *TINY, "--out", str(tmp_path)], capsys)
    assert code == EXIT_OK
    assert (tmp_path / "baseline" / "run.csv").exists() and (tmp_path / "tpr" / "run.csv").exists()
    summary = json.loads((tmp_path / "comparison.json").read_text())
    assert json.loads(out) == summary
    for key in ("dataset", "seed", "nfe_baseline", "nfe_tpr", "nfe_reduction_pct", "nll_baseline", "nll_tpr"):
        assert key in summary
    assert summary["nfe_reduction_pct"] == pytest.approx(
        100 * (summary["nfe_baseline"] - summary["nfe_tpr"]) / summary["nfe_baseline"])
    assert json.loads((tmp_path / "baseline" / "config.resolved.json").read_text())["tpr"] is False


def test_paired_run_has_no_tpr_flag(capsys):
    code, _, _ = run(["paired-run", "--tpr", "on"], capsys)
    assert code == EXIT_USAGE


@pytest.fixture
def zero_checkpoint(tmp_path):
    path = tmp_path / "zero.json"
    FlowModel.init(2, (4,), seed=0, zero_last=True).save(path)
    return path


def test_eval_prints_nll(zero_checkpoint, capsys):
    code, out, _ = run(["eval", "--checkpoint", str(zero_checkpoint), "--dataset", "moons", "--test-size", "50"], capsys)
    assert code == EXIT_OK
    result = json.loads(out)
    assert result["nfe"] == 7 and math.isfinite(result["nll"])


def test_eval_missing_checkpoint(tmp_path, capsys):
    code, _, err = run(["eval", "--checkpoint", str(tmp_path / "none.json"), "--dataset", "moons"], capsys)
    assert code == EXIT_USAGE and "--checkpoint" in err


def test_export_density(zero_checkpoint, tmp_path, capsys):
    out_path = tmp_path / "d" / "grid.csv"
    code, out, _ = run(["export-density", "--checkpoint", str(zero_checkpoint), "--bounds=-2,2",
                        "--resolution", "3", "--out", str(out_path)], capsys)
    assert code == EXIT_OK
    table = np.loadtxt(out_path, delimiter=",", skiprows=1)
    assert table.shape == (9, 3)
    assert table[4, 2] == pytest.approx(-math.log(2 * math.pi))


def test_export_density_bad_bounds(zero_checkpoint, tmp_path, capsys):
    code, _, err = run(["export-density", "--checkpoint", str(zero_checkpoint), "--bounds", "2,-2",
                        "--out", str(tmp_path / "g.csv")], capsys)
    assert code == EXIT_USAGE and "--bounds" in err


def test_export_traj(zero_checkpoint, tmp_path, capsys):
    out_path = tmp_path / "traj.json"
    code, out, _ = run(["export-traj", "--checkpoint", str(zero_checkpoint), "--grid", "2", "--out", str(out_path)], capsys)
    assert code == EXIT_OK
    assert json.loads(out) == {"polylines": 4, "truncated": 0, "mean_straightness": 1.0}
    assert len(json.loads(out_path.read_text())) == 4


def test_solver_abort_exits_2(monkeypatch, tmp_path, capsys):
    from cnftpr import training
    from cnftpr.ode import SolverError

    def broken(*args, **kwargs):
        raise SolverError("stiff")

    monkeypatch.setattr(training, "loss_step", broken)
    code, _, err = run(["train", *TINY, "--iters", "5", "--out", str(tmp_path)], capsys)
    assert code == EXIT_RUNTIME
    assert "consecutive" in err


def test_theory_check_table(capsys):
    code, out, _ = run(["theory-check"], capsys)
    assert code == EXIT_OK
    assert "FAIL" not in out and out.count("PASS") >= 6


def test_selftest_passes(capsys):
    code, out, _ = run(["selftest"], capsys)
    assert code == EXIT_OK, out
    assert "FAIL" not in out


@pytest.mark.parametrize("mutation, check", [("tableau", "solver order"), ("alpha-sign", "loss = nll")])
def test_selftest_mutations_are_caught(mutation, check, capsys):
    code, out, _ = run(["selftest", "--mutate", mutation], capsys)
    assert code == EXIT_RUNTIME
    failed = [line for line in out.splitlines() if "FAIL" in line]
    assert failed and all(check in line for line in failed), out


def test_mutations_do_not_leak(capsys):
    run(["selftest", "--mutate", "alpha-sign"], capsys)
    from cnftpr import training
    from cnftpr.ode import DOPRI5

    assert training._alpha_sign == 1.0
    assert DOPRI5.b[0] == pytest.approx(35 / 384)


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "cnftpr.cli", "train", "--dataset", "nosuch"],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_USAGE
    assert "--dataset" in proc.stderr
