import json
import subprocess
import sys

import pytest

from aoisharing.cli import main

FAST = ["--episodes", "1", "--horizon", "20", "--set", "agent.memory=32", "--warmup", "32"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def last_json(out):
    return json.loads(out.strip().splitlines()[-1])


def test_train_then_eval_checkpoint(tmp_path, capsys):
    code, out, _ = run(capsys, "train", "--scheme", "dqn", "--seed", "3", "--out", str(tmp_path), *FAST)
    assert code == 0
    info = last_json(out)
    assert info["episodes"] == 1 and (tmp_path / "dqn_seed3.aoiq").exists()
    assert (tmp_path / "reward_curve.csv").read_text().startswith("episode,reward,smoothed\n")
    code, out, _ = run(capsys, "eval", "--scheme", "checkpoint", "--checkpoint", info["checkpoint"],
                       "--eval-episodes", "2", "--horizon", "20")
    res = last_json(out)
    assert code == 0 and res["episodes"] == 2 and 0 <= res["access"] <= 1


def test_eval_baseline_writes_csv(tmp_path, capsys):
    code, out, _ = run(capsys, "eval", "--scheme", "baseline", "--eval-episodes", "2", "--horizon", "30",
                       "--out", str(tmp_path))
    assert code == 0 and last_json(out)["scheme"] == "baseline"
    assert (tmp_path / "eval.csv").read_text().splitlines()[0].split(",")[0] == "access"


def test_sweep_writes_csvs_and_compare(tmp_path, capsys):
    code, out, _ = run(capsys, "sweep", "--axis", "B_max", "--values", "5", "10", "--seeds", "0",
                       "--eval-episodes", "1", "--out", str(tmp_path), *FAST)
    assert code == 0
    assert "scheme" in out and "%" in out
    for name in ("metrics.csv", "reward_curve.csv", "access.csv", "manifest.json"):
        assert (tmp_path / name).exists()


def test_oracle_toy(tmp_path, capsys):
    code, out, _ = run(capsys, "oracle", "--toy", "--gamma", "0.5", "--q-sweeps", "2000", "--out", str(tmp_path))
    res = last_json(out)
    assert code == 0 and res["states"] == 40 and res["residual"] < 1e-9
    assert res["q_sup_error"] < 0.1
    assert (tmp_path / "oracle.csv").read_text().startswith("aoi,battery_bin,pu_active,v,policy\n")


def test_gradcheck_passes(capsys):
    code, out, _ = run(capsys, "gradcheck", "--nets", "3")
    assert code == 0 and last_json(out)["pass"]


def test_reproduce_fig8(tmp_path, capsys):
    code, out, _ = run(capsys, "reproduce", "--figure", "8", "--seed", "1", "--eval-episodes", "1",
                       "--out", str(tmp_path), *FAST)
    assert code == 0
    assert (tmp_path / "fig8_access.dat").read_text().startswith("# scheme access ci")


@pytest.mark.parametrize("argv,kind,code", [
    (["sweep", "--axis", "alpha"], "usage", 2),
    (["reproduce", "--figure", "9"], "usage", 2),
    (["eval", "--scheme", "checkpoint"], "usage", 2),
    (["eval", "--set", "geometry.nope=1"], "ValueError", 1),
    (["eval", "--config", "/nonexistent/exp.json"], "FileNotFoundError", 1),
    (["eval", "--scheme", "checkpoint", "--checkpoint", "/nonexistent.aoiq"], "FileNotFoundError", 1),
])
def test_errors_are_one_line(argv, kind, code, capsys):
    rc, _, err = run(capsys, *argv)
    assert rc == code
    lines = err.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith(f"aoisharing: error: {kind}: ")


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "aoisharing.cli", "sweep", "--axis", "bogus"],
                          capture_output=True, text=True)
    assert proc.returncode == 2 and proc.stderr.count("\n") == 1
