import json
from dataclasses import replace

import numpy as np
import pytest

from aoisharing import harness
from aoisharing.agents import AgentConfig, FixedPolicy, run_episode
from aoisharing.env import Action, EnvConfig, SpectrumEnv
from aoisharing.harness import (ExperimentConfig, MetricsRow, access_fraction, apply_overrides, compare_table,
                                config_from_dict, emit_plot_data, format_compare, load_config, mean_ci, run_sweep,
                                trailing_mean)

TINY_AGENT = AgentConfig(episodes=2, horizon=30, memory=64, warmup=32)


def tiny(tmp_path=None, **kw):
    base = dict(agent=TINY_AGENT, seeds=(0,), sweep="P_pu", values=(0.0, 10.0), eval_episodes=2,
                out_dir=str(tmp_path) if tmp_path else None)
    base.update(kw)
    return ExperimentConfig(**base)


def row(scheme, value=0.0, aoi=1.0, rate=1.0, access=0.5):
    return MetricsRow(scheme, value, aoi, 0.1, rate, 0.1, access, 0.01, -10.0, 1.0, 5)


# -- access fraction -------------------------------------------------------------------


def test_access_fraction_examples():
    assert access_fraction([np.ones(10, int)]) == 0.0
    assert access_fraction([np.full(10, 2)]) == 1.0
    assert access_fraction([np.array([2, 5, 2, 5])]) == 0.5
    assert access_fraction([np.array([6, 6]), np.array([8, 3])]) == 0.5


def test_access_fraction_rejects_empty():
    with pytest.raises(ValueError):
        access_fraction([])


def test_access_matches_aoi_resets():
    env = SpectrumEnv(EnvConfig(), seed=3)
    for policy in (FixedPolicy(Action.OVERLAY), FixedPolicy(Action.UNDERLAY)):
        rec = run_episode(policy, env, horizon=300)
        # aoi is logged before each step, so a success at t shows as aoi 1 at t+1
        successes = np.isin(rec.case[:-1], (2, 6)).sum()
        assert successes == np.sum(rec.aoi[1:] == 1)
        assert access_fraction([rec.case[:-1]]) == pytest.approx(1 - np.mean(rec.aoi[1:] != 1))


# -- compare table --------------------------------------------------------------------------


def test_compare_examples():
    rows = [row("baseline", aoi=10.0, rate=1.0), row("dqn", aoi=8.0, rate=1.546), row("d3qn", aoi=6.15, rate=1.2)]
    table = {t["scheme"]: t for t in compare_table(rows)}
    assert table["dqn"]["rate_delta_pct"] == pytest.approx(54.6)
    assert table["d3qn"]["aoi_delta_pct"] == pytest.approx(-38.5)
    assert table["baseline"]["rate_delta_pct"] == 0.0 and table["baseline"]["aoi_delta_pct"] == 0.0
    text = format_compare(compare_table(rows))
    assert "+54.6%" in text and "-38.5%" in text


def test_compare_zero_baseline_rate():
    table = compare_table([row("baseline", rate=0.0), row("dqn", rate=0.3)])
    assert table[1]["rate_delta_pct"] == "n/a"
    assert "n/a" in format_compare(table)


def test_compare_needs_baseline_per_value():
    with pytest.raises(ValueError, match="no baseline row"):
        compare_table([row("baseline", 0.0), row("dqn", 0.0), row("dqn", 5.0)])


# -- statistics --------------------------------------------------------------------------------


def test_mean_ci():
    m, h = mean_ci([1.0, 2.0, 3.0])
    # t(0.975, 2) * 1 / sqrt(3)
    assert m == 2.0 and h == pytest.approx(4.302652729749464 / np.sqrt(3))
    assert mean_ci([4.0]) == (4.0, 0.0)


def test_trailing_mean():
    assert np.allclose(trailing_mean([1, 2, 3, 4], 2), [1, 1.5, 2.5, 3.5])
    assert np.allclose(trailing_mean([5.0], 20), [5.0])


# -- plot data ----------------------------------------------------------------------------------


def test_fig6_columns(tmp_path):
    rows = [row(s, v, aoi=float(i + v)) for i, s in enumerate(harness.SCHEMES) for v in (0.0, 5.0)]
    paths = emit_plot_data(rows, 6, tmp_path)
    assert sorted(p.name for p in paths) == ["fig6_baseline.dat", "fig6_d3qn.dat", "fig6_dqn.dat"]
    lines = (tmp_path / "fig6_dqn.dat").read_text().splitlines()
    assert lines[0] == "# P_pu_dbm avg_aoi ci"
    assert lines[1].split() == ["0", "1.0", "0.1"] and lines[2].split() == ["5", "6.0", "0.1"]


def test_fig5_columns(tmp_path):
    rows = [row(s, v) for s in harness.SCHEMES for v in (5.0, 10.0)]
    emit_plot_data(rows, 5, tmp_path)
    assert (tmp_path / "fig5_d3qn.dat").read_text().splitlines()[0] == "# B_max avg_aoi ci"


def test_fig3_curves(tmp_path):
    curves = {f"{s}_{m}": [[-5.0, -3.0, -1.0], [-3.0, -1.0, 1.0]] for s in harness.SCHEMES for m in ("poisson", "normal")}
    paths = emit_plot_data(None, 3, tmp_path, curves=curves, smooth=2)
    assert len(paths) == 6
    lines = (tmp_path / "fig3_dqn_normal.dat").read_text().splitlines()
    assert lines[0] == "# episode reward smoothed"
    assert [float(v) for v in lines[3].split()] == [2.0, 0.0, -1.0]


def test_fig8_access(tmp_path):
    rows = [row(s, None, access=a) for s, a in zip(harness.SCHEMES, (0.3, 0.45, 0.48))]
    (p,) = emit_plot_data(rows, 8, tmp_path)
    assert p.read_text().splitlines()[1:] == ["baseline 0.3 0.01", "dqn 0.45 0.01", "d3qn 0.48 0.01"]


def test_missing_series_listed(tmp_path):
    with pytest.raises(ValueError, match="missing series: dqn, d3qn"):
        emit_plot_data([row("baseline")], 6, tmp_path)


# -- configs ------------------------------------------------------------------------------------------


def test_invalid_sweep_axis():
    with pytest.raises(ValueError, match="invalid sweep axis"):
        ExperimentConfig(sweep="alpha", values=(1.0,))


def test_config_invariants():
    with pytest.raises(ValueError):
        ExperimentConfig(seeds=())
    with pytest.raises(ValueError):
        ExperimentConfig(sweep="P_pu", values=(10.0, 0.0))
    with pytest.raises(ValueError):
        ExperimentConfig(sweep="P_pu", values=(float("nan"),))


def test_load_config_and_overrides(tmp_path):
    path = tmp_path / "exp.json"
    path.write_text(json.dumps({
        "pu": {"p_ia": 0.2},
        "energy": {"b_max": 5, "harvest_mode": "normal"},
        "geometry": {"p_pu_dbm": 15},
        "agent": {"episodes": 3},
        "experiment": {"seeds": [7], "sweep": "B_max", "values": [5, 10]},
    }))
    cfg = load_config(path)
    assert cfg.env.pu.p_ia == 0.2 and cfg.env.b_max == 5.0 and cfg.env.harvest.mode == "normal"
    assert cfg.env.geometry.p_pu_dbm == 15.0 and cfg.agent.episodes == 3 and cfg.seeds == (7,)
    cfg2 = apply_overrides(cfg, ["costs.alpha=2", "agent.lr=0.001", "sensing.noise_limited=true"])
    assert cfg2.env.costs.alpha == 2.0 and cfg2.agent.lr == 0.001 and cfg2.env.sensing.noise_limited
    assert cfg2.env.pu.p_ia == 0.2


def test_unknown_keys_rejected():
    with pytest.raises((KeyError, ValueError)):
        config_from_dict({"energy": {"capacity": 3}})
    with pytest.raises(ValueError):
        apply_overrides(ExperimentConfig(), ["no_dot=3"])


def test_config_round_trip():
    cfg = tiny()
    again = config_from_dict({**{k: v for k, v in cfg.to_dict()["env"].items()},
                              "agent": cfg.to_dict()["agent"]})
    assert again.env == cfg.env and again.agent == cfg.agent


# -- sweeps -----------------------------------------------------------------------------------------


def test_sweep_rows_and_files(tmp_path):
    res = run_sweep(tiny(tmp_path))
    assert len(res.rows) == 6
    for s in harness.SCHEMES:
        assert [r.value for r in res.rows if r.scheme == s] == [0.0, 10.0]
    for r in res.rows:
        assert 0 <= r.access <= 1 and r.aoi_ci >= 0
    header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
    assert header == ",".join(harness.METRICS_COLUMNS)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["config_hash"] == res.config.config_hash() and manifest["seeds"] == [0]


def test_sweep_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run_sweep(tiny(a))
    run_sweep(tiny(b))
    for name in ("metrics.csv", "reward_curve.csv", "access.csv", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_parallel_workers_match_serial(tmp_path):
    serial = run_sweep(tiny(tmp_path / "s"))
    par = run_sweep(tiny(tmp_path / "p", workers=2))
    assert (tmp_path / "s" / "metrics.csv").read_bytes() == (tmp_path / "p" / "metrics.csv").read_bytes()
    assert serial.rows == par.rows


def test_baseline_without_training_evaluates_only():
    cfg = tiny(agent=replace(TINY_AGENT, episodes=0), schemes=("baseline",), sweep=None, values=())
    res = run_sweep(cfg)
    (cell,) = res.cells
    assert cell.curve == () and len(cell.eval_rewards) == 2
    assert cell.final_reward == pytest.approx(np.mean(cell.eval_rewards))


def test_cached_cells_are_reused():
    cfg = tiny(schemes=("baseline",))
    first = run_sweep(cfg)
    second = run_sweep(cfg, results=first.cells)
    assert all(a is b for a, b in zip(first.cells, second.cells))


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="not writable"):
        run_sweep(tiny(blocker / "sub", schemes=("baseline",)))


def test_figure_configs():
    base = tiny()
    assert harness.figure_configs(6, base)[""].values == harness.P_PU_VALUES
    assert harness.figure_configs(5, base)[""].sweep == "B_max"
    assert set(harness.figure_configs(4, base)) == {"poisson_B5", "poisson_B10", "normal_B5", "normal_B10"}
    with pytest.raises(ValueError):
        harness.figure_configs(9, base)


def test_integer_json_values_hash_like_defaults():
    cfg = config_from_dict({"energy": {"b_max": 10, "harvest_mean": 3}, "geometry": {"p_pu_dbm": 10},
                            "costs": {"alpha": 3, "delta": 1}, "reward": {"a_max": 100}})
    assert cfg.config_hash() == ExperimentConfig().config_hash()
    assert isinstance(cfg.env.a_max, int)
