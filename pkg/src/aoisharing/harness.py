"""Seeded experiment sweeps, metric aggregation and plot-ready column files.

Every (scheme, sweep value, seed) cell is independent: the training and
evaluation environments are seeded from ``(seed, role)`` only, so every sweep
value and every scheme sees the same random draws (common random numbers).
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import stats

from .agents import AgentConfig, EpsilonSchedule, make_agent, run_episode
from .env import EnvConfig, SpectrumEnv

SCHEMES = ("baseline", "dqn", "d3qn")
LEARNERS = ("dqn", "d3qn")
SWEEP_AXES = ("P_pu", "B_max")
SUCCESS_CASES = (2, 6)

_TRAIN, _EVAL, _AGENT = 0, 1, 2


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

# JSON section -> {key: (EnvConfig attribute or None for top level, field)}
_SECTIONS = {
    "pu": {"p_ia": ("pu", "p_ia"), "p_ai": ("pu", "p_ai")},
    "sensing": {k: ("sensing", k) for k in ("p_f", "p_d", "n0_dbm", "n_th_dbm", "noise_limited")},
    "energy": {
        "b_max": (None, "b_max"), "b0": (None, "b0"), "rayleigh_scale": (None, "rayleigh_scale"),
        "harvest_mode": ("harvest", "mode"), "harvest_mean": ("harvest", "mean"), "harvest_std": ("harvest", "std"),
    },
    "geometry": {k: ("geometry", k) for k in ("pu_pos", "su_pos", "d0", "omega", "shadow_var_db", "freq_hz",
                                              "p_pu_dbm", "p_full_dbm", "r_min", "r_max")},
    "costs": {"alpha": ("costs", "alpha"), "delta": ("costs", "delta")},
    "reward": {"xi": (None, "xi"), "a_max": (None, "a_max")},
}
_AGENT_KEYS = {f.name for f in dataclasses.fields(AgentConfig)} - {"epsilon"}


@dataclass
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    seeds: tuple = (0, 1, 2, 3, 4)
    sweep: str | None = None  # "P_pu" | "B_max" | None
    values: tuple = ()
    schemes: tuple = SCHEMES
    out_dir: str | None = None
    eval_episodes: int = 50
    smooth: int = 20
    workers: int = 1

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.values = tuple(float(v) for v in self.values)
        self.schemes = tuple(self.schemes)
        if not self.seeds:
            raise ValueError("need at least one seed")
        if self.sweep is not None and self.sweep not in SWEEP_AXES:
            raise ValueError(f"invalid sweep axis {self.sweep!r}; expected one of {', '.join(SWEEP_AXES)}")
        if self.sweep is not None and not self.values:
            raise ValueError("a sweep needs at least one value")
        if not all(math.isfinite(v) for v in self.values) or list(self.values) != sorted(self.values):
            raise ValueError("sweep values must be finite and sorted")
        unknown = set(self.schemes) - set(SCHEMES) - {"random"}
        if unknown:
            raise ValueError(f"unknown schemes: {', '.join(sorted(unknown))}")
        if self.eval_episodes < 1:
            raise ValueError("need at least one evaluation episode")

    def points(self) -> tuple:
        """Sweep values, or a single ``None`` for an unswept run."""
        return self.values if self.sweep else (None,)

    def env_at(self, value) -> EnvConfig:
        return apply_sweep(self.env, self.sweep, value)

    def to_dict(self) -> dict:
        return {
            "env": env_to_dict(self.env),
            "agent": agent_to_dict(self.agent),
            "seeds": list(self.seeds),
            "sweep": self.sweep,
            "values": list(self.values),
            "schemes": list(self.schemes),
            "eval_episodes": self.eval_episodes,
            "smooth": self.smooth,
        }

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def apply_sweep(env: EnvConfig, axis: str | None, value) -> EnvConfig:
    if axis is None or value is None:
        return env
    if axis == "P_pu":
        return replace(env, geometry=replace(env.geometry, p_pu_dbm=float(value)))
    if axis == "B_max":
        return replace(env, b_max=float(value))
    raise ValueError(f"invalid sweep axis {axis!r}")


def env_to_dict(cfg: EnvConfig) -> dict:
    out = {}
    for section, keys in _SECTIONS.items():
        vals = {}
        for key, (attr, name) in keys.items():
            v = getattr(getattr(cfg, attr) if attr else cfg, name)
            vals[key] = list(v) if isinstance(v, tuple) else v
        out[section] = vals
    return out


def agent_to_dict(cfg: AgentConfig) -> dict:
    out = {k: getattr(cfg, k) for k in sorted(_AGENT_KEYS)}
    out["hidden"] = list(cfg.hidden)
    eps = cfg.epsilon
    out["epsilon"] = {"start": eps.start, "decay": eps.decay, "floor": eps.floor}
    return out


def _numeric(v):
    """JSON integers become floats so equal configs hash equally."""
    if isinstance(v, (list, tuple)):
        return tuple(_numeric(x) for x in v)
    if isinstance(v, int) and not isinstance(v, bool):
        return float(v)
    return v


def env_from_dict(data: dict, base: EnvConfig | None = None) -> EnvConfig:
    """Overlay a JSON-style dict of sections onto ``base``."""
    cfg = base or EnvConfig()
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ValueError(f"unknown config sections: {', '.join(sorted(unknown))}")
    top = {}
    parts = {}
    for section, values in data.items():
        keys = _SECTIONS[section]
        bad = set(values) - set(keys)
        if bad:
            raise ValueError(f"unknown keys in [{section}]: {', '.join(sorted(bad))}")
        for k, v in values.items():
            attr, name = keys[k]
            if name != "a_max":
                v = _numeric(v)
            if attr is None:
                top[name] = v
            else:
                parts.setdefault(attr, {})[name] = v
    for attr, vals in parts.items():
        top[attr] = replace(getattr(cfg, attr), **vals)
    return replace(cfg, **top)


def agent_from_dict(data: dict, base: AgentConfig | None = None) -> AgentConfig:
    cfg = base or AgentConfig()
    data = dict(data)
    eps = data.pop("epsilon", None)
    bad = set(data) - _AGENT_KEYS
    if bad:
        raise ValueError(f"unknown agent keys: {', '.join(sorted(bad))}")
    if "hidden" in data:
        data["hidden"] = tuple(data["hidden"])
    if eps is not None:
        data["epsilon"] = replace(cfg.epsilon, **eps) if isinstance(eps, dict) else EpsilonSchedule(*eps)
    return replace(cfg, **data)


def load_config(path) -> ExperimentConfig:
    """Read a JSON experiment file.

    Environment sections (``pu``, ``sensing``, ``energy``, ``geometry``,
    ``costs``, ``reward``) sit at the top level next to optional
    ``agent`` and ``experiment`` blocks.
    """
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return config_from_dict(data)


def config_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)
    agent = agent_from_dict(data.pop("agent", {}))
    exp = data.pop("experiment", {})
    env = env_from_dict(data)
    return ExperimentConfig(env=env, agent=agent, **exp)


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: ExperimentConfig, pairs) -> ExperimentConfig:
    """Apply ``section.key=value`` strings, e.g. ``geometry.p_pu_dbm=15``.

    ``agent.<field>`` and ``experiment.<field>`` reach the agent and the
    experiment itself; values are parsed as JSON when they can be.
    """
    env_data: dict = {}
    agent_data: dict = {}
    exp_data: dict = {}
    for pair in pairs:
        if "=" not in pair or "." not in pair.split("=", 1)[0]:
            raise ValueError(f"override {pair!r} is not section.key=value")
        lhs, rhs = pair.split("=", 1)
        section, key = lhs.split(".", 1)
        value = _coerce(rhs)
        if section == "agent":
            agent_data[key] = value
        elif section == "experiment":
            exp_data[key] = value
        else:
            env_data.setdefault(section, {})[key] = value
    env = env_from_dict(env_data, cfg.env) if env_data else cfg.env
    agent = agent_from_dict(agent_data, cfg.agent) if agent_data else cfg.agent
    return replace(cfg, env=env, agent=agent, **exp_data)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def access_fraction(records) -> float:
    """Share of slots that carried a successful transmission (cases 2 or 6).

    ``records`` is an iterable of episode records or of case-id arrays.
    """
    cases = [np.asarray(getattr(r, "case", r)) for r in records]
    if not cases:
        raise ValueError("need at least one record")
    flat = np.concatenate(cases)
    if flat.size == 0:
        raise ValueError("records contain no slots")
    return float(np.isin(flat, SUCCESS_CASES).mean())


def mean_ci(samples, level: float = 0.95) -> tuple[float, float]:
    """Mean and Student-t half-width; the half-width is 0 for a single sample."""
    x = np.asarray(samples, dtype=float)
    m = float(x.mean())
    if x.size < 2:
        return m, 0.0
    half = float(stats.t.ppf(0.5 + level / 2, x.size - 1) * x.std(ddof=1) / math.sqrt(x.size))
    return m, half


def trailing_mean(values, window: int) -> np.ndarray:
    x = np.asarray(values, dtype=float)
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, x.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


@dataclass(frozen=True)
class SeedResult:
    scheme: str
    value: float | None
    seed: int
    aoi: float
    rate: float
    access: float
    final_reward: float
    curve: tuple  # per-training-episode total reward
    eval_rewards: tuple


@dataclass(frozen=True)
class MetricsRow:
    scheme: str
    value: float | None
    aoi: float
    aoi_ci: float
    rate: float
    rate_ci: float
    access: float
    access_ci: float
    reward: float
    reward_ci: float
    n_seeds: int


def run_cell(env_cfg: EnvConfig, agent_cfg: AgentConfig, scheme: str, seed: int, value=None,
             eval_episodes: int = 50, smooth: int = 20, return_agent: bool = False):
    """Train (learners) then evaluate one scheme under one seed."""
    train_env = SpectrumEnv(env_cfg, seed=[seed, _TRAIN])
    eval_env = SpectrumEnv(env_cfg, seed=[seed, _EVAL])
    agent = make_agent(scheme, agent_cfg, seed=[seed, _AGENT])
    curve = []
    # fixed policies also play the training episodes so reward curves line up
    for _ in range(agent_cfg.episodes):
        rec = run_episode(agent, train_env, train=True, horizon=agent_cfg.horizon)
        curve.append(rec.total_reward)
    evals = [run_episode(agent, eval_env, train=False, horizon=agent_cfg.horizon) for _ in range(eval_episodes)]
    aoi = float(np.mean([r.aoi.mean() for r in evals]))
    rate = float(np.mean([r.rate.mean() for r in evals]))
    eval_rewards = tuple(r.total_reward for r in evals)
    final = float(np.mean(curve[-smooth:])) if curve else float(np.mean(eval_rewards))
    res = SeedResult(scheme, value, seed, aoi, rate, access_fraction(evals), final, tuple(curve), eval_rewards)
    return (res, agent) if return_agent else res


def _run_cell_job(args):
    return run_cell(*args)


def aggregate(results) -> list[MetricsRow]:
    groups: dict = {}
    for r in results:
        groups.setdefault((r.scheme, r.value), []).append(r)
    rows = []
    for (scheme, value), rs in groups.items():
        rs = sorted(rs, key=lambda r: r.seed)
        stats_ = [mean_ci([getattr(r, k) for r in rs]) for k in ("aoi", "rate", "access", "final_reward")]
        rows.append(MetricsRow(scheme, value, *stats_[0], *stats_[1], *stats_[2], *stats_[3], len(rs)))
    order = {s: i for i, s in enumerate(SCHEMES + ("random",))}
    rows.sort(key=lambda r: (order[r.scheme], -math.inf if r.value is None else r.value))
    return rows


# ---------------------------------------------------------------------------
# sweeps and output files
# ---------------------------------------------------------------------------

METRICS_COLUMNS = ("scheme", "sweep", "value", "avg_aoi", "avg_aoi_ci", "avg_rate", "avg_rate_ci",
                   "access", "access_ci", "final_reward", "final_reward_ci", "n_seeds")
CURVE_COLUMNS = ("scheme", "value", "seed", "episode", "reward", "smoothed")
ACCESS_COLUMNS = ("scheme", "value", "seed", "access", "avg_aoi", "avg_rate")


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    path.write_text(buf.getvalue(), encoding="utf-8")


@dataclass
class SweepResult:
    rows: list
    cells: list
    config: ExperimentConfig
    files: dict = field(default_factory=dict)


def run_sweep(cfg: ExperimentConfig, results=None) -> SweepResult:
    """Train and evaluate every (scheme, sweep value, seed) cell.

    When ``cfg.out_dir`` is set, writes ``metrics.csv``, ``reward_curve.csv``,
    ``access.csv`` and ``manifest.json`` there. ``results`` may carry
    already-computed cells, which are reused instead of rerun.
    """
    out = Path(cfg.out_dir) if cfg.out_dir else None
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"output directory {out} is not writable: {exc}") from exc
        if not os.access(out, os.W_OK):
            raise OSError(f"output directory {out} is not writable")
    cached = {(r.scheme, r.value, r.seed): r for r in (results or [])}
    jobs = []
    for scheme in cfg.schemes:
        for value in cfg.points():
            for seed in cfg.seeds:
                if (scheme, value, seed) not in cached:
                    jobs.append((cfg.env_at(value), cfg.agent, scheme, seed, value, cfg.eval_episodes, cfg.smooth))
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            fresh = list(pool.map(_run_cell_job, jobs))
    else:
        fresh = [run_cell(*job) for job in jobs]
    for r in fresh:
        cached[(r.scheme, r.value, r.seed)] = r
    cells = [cached[(s, v, seed)] for s in cfg.schemes for v in cfg.points() for seed in cfg.seeds]
    result = SweepResult(aggregate(cells), cells, cfg)
    if out is not None:
        result.files = write_outputs(result, out)
    return result


def write_outputs(result: SweepResult, out: Path) -> dict:
    cfg = result.config
    axis = cfg.sweep or ""
    files = {
        "metrics": out / "metrics.csv",
        "reward_curve": out / "reward_curve.csv",
        "access": out / "access.csv",
        "manifest": out / "manifest.json",
    }
    _write_csv(files["metrics"], METRICS_COLUMNS, (
        (r.scheme, axis, r.value, r.aoi, r.aoi_ci, r.rate, r.rate_ci, r.access, r.access_ci,
         r.reward, r.reward_ci, r.n_seeds) for r in result.rows))

    def curve_rows():
        for c in result.cells:
            smoothed = trailing_mean(c.curve, cfg.smooth) if c.curve else []
            for ep, (raw, sm) in enumerate(zip(c.curve, smoothed)):
                yield c.scheme, c.value, c.seed, ep, raw, sm

    _write_csv(files["reward_curve"], CURVE_COLUMNS, curve_rows())
    _write_csv(files["access"], ACCESS_COLUMNS, (
        (c.scheme, c.value, c.seed, c.access, c.aoi, c.rate) for c in result.cells))
    manifest = {"config_hash": cfg.config_hash(), "seeds": list(cfg.seeds), "config": cfg.to_dict(),
                "files": sorted(p.name for p in files.values() if p.suffix == ".csv")}
    files["manifest"].write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return files


def compare_table(rows) -> list[dict]:
    """Percentage change of each scheme against the baseline at the same sweep value.

    A zero baseline yields ``"n/a"`` instead of a division by zero.
    """
    base = {r.value: r for r in rows if r.scheme == "baseline"}
    values = sorted({r.value for r in rows}, key=lambda v: -math.inf if v is None else v)
    missing = [v for v in values if v not in base]
    if missing:
        raise ValueError(f"no baseline row for sweep values: {', '.join(map(str, missing))}")

    def pct(x, ref):
        return "n/a" if ref == 0 else (x - ref) / ref * 100.0

    table = []
    for r in rows:
        b = base[r.value]
        table.append({"scheme": r.scheme, "value": r.value,
                      "rate_delta_pct": pct(r.rate, b.rate), "aoi_delta_pct": pct(r.aoi, b.aoi)})
    return table


def format_compare(table) -> str:
    def cell(x):
        return x if isinstance(x, str) else f"{x:+.1f}%"

    lines = [f"{'value':>8}  {'scheme':<9}{'rate':>9}{'AoI':>9}"]
    for t in table:
        if t["scheme"] == "baseline":
            continue
        v = "" if t["value"] is None else f"{t['value']:g}"
        lines.append(f"{v:>8}  {t['scheme']:<9}{cell(t['rate_delta_pct']):>9}{cell(t['aoi_delta_pct']):>9}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# figure column files
# ---------------------------------------------------------------------------

# figure -> (sweep axis, metric attribute, x column name, y column name)
_SWEEP_FIGS = {
    5: ("B_max", "aoi", "B_max", "avg_aoi"),
    6: ("P_pu", "aoi", "P_pu_dbm", "avg_aoi"),
    7: ("P_pu", "rate", "P_pu_dbm", "avg_rate"),
}


def emit_plot_data(rows, figure: int, out_dir, schemes=SCHEMES, curves=None, smooth: int = 20) -> list[Path]:
    """Write whitespace-separated column files, one per series.

    Figures 5-7 take metric rows; figure 8 takes rows at a single point; figures
    3 and 4 take ``curves``: a mapping from a series label to a list of
    per-seed reward curves, averaged across seeds and then smoothed.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    if figure in (3, 4):
        if not curves:
            raise ValueError("figure needs reward curves")
        wanted = [s for s in schemes]
        absent = [s for s in wanted if not any(label.split("_")[0] == s for label in curves)]
        if absent:
            raise ValueError(f"missing series: {', '.join(absent)}")
        for label, per_seed in sorted(curves.items()):
            mean = np.mean(np.asarray(per_seed, dtype=float), axis=0)
            sm = trailing_mean(mean, smooth)
            p = out / f"fig{figure}_{label}.dat"
            lines = ["# episode reward smoothed"]
            lines += [f"{i} {repr(float(a))} {repr(float(b))}" for i, (a, b) in enumerate(zip(mean, sm))]
            p.write_text("\n".join(lines) + "\n", encoding="utf-8")
            paths.append(p)
        return paths
    present = {r.scheme for r in rows}
    absent = [s for s in schemes if s not in present]
    if absent:
        raise ValueError(f"missing series: {', '.join(absent)}")
    if figure in _SWEEP_FIGS:
        _, attr, xname, yname = _SWEEP_FIGS[figure]
        for s in schemes:
            rs = sorted((r for r in rows if r.scheme == s), key=lambda r: r.value)
            p = out / f"fig{figure}_{s}.dat"
            lines = [f"# {xname} {yname} ci"]
            lines += [f"{r.value:g} {repr(getattr(r, attr))} {repr(getattr(r, attr + '_ci'))}" for r in rs]
            p.write_text("\n".join(lines) + "\n", encoding="utf-8")
            paths.append(p)
        return paths
    if figure == 8:
        p = out / "fig8_access.dat"
        lines = ["# scheme access ci"]
        for s in schemes:
            r = next(r for r in rows if r.scheme == s)
            lines.append(f"{s} {repr(r.access)} {repr(r.access_ci)}")
        p.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return [p]
    raise ValueError(f"no figure {figure}; expected 3..8")


# ---------------------------------------------------------------------------
# figure reproduction
# ---------------------------------------------------------------------------

P_PU_VALUES = (0.0, 5.0, 10.0, 15.0, 20.0)
B_MAX_VALUES = (5.0, 10.0)


def figure_configs(figure: int, base: ExperimentConfig) -> dict:
    """The experiments behind one figure, keyed by series label."""
    if figure == 3:
        return {mode: replace(base, sweep=None, values=(), env=replace(base.env, harvest=replace(base.env.harvest, mode=mode)))
                for mode in ("poisson", "normal")}
    if figure == 4:
        out = {}
        for mode in ("poisson", "normal"):
            for b in B_MAX_VALUES:
                env = replace(base.env, b_max=b, harvest=replace(base.env.harvest, mode=mode))
                out[f"{mode}_B{b:g}"] = replace(base, sweep=None, values=(), env=env)
        return out
    if figure == 5:
        return {"": replace(base, sweep="B_max", values=B_MAX_VALUES)}
    if figure in (6, 7):
        return {"": replace(base, sweep="P_pu", values=P_PU_VALUES)}
    if figure == 8:
        return {"": replace(base, sweep=None, values=())}
    raise ValueError(f"no figure {figure}; expected 3..8")


def reproduce(figure: int, base: ExperimentConfig, out_dir) -> dict:
    """Run the experiments for ``figure`` and write CSVs plus column files under ``out_dir``."""
    out = Path(out_dir)
    configs = figure_configs(figure, base)
    written = {}
    curves: dict = {}
    rows = None
    for label, cfg in configs.items():
        sub = out / label if label else out
        res = run_sweep(replace(cfg, out_dir=str(sub)))
        written.update({f"{label}/{k}" if label else k: v for k, v in res.files.items()})
        rows = res.rows
        for c in res.cells:
            curves.setdefault(f"{c.scheme}_{label}", []).append(c.curve)
    if figure in (3, 4):
        paths = emit_plot_data(None, figure, out, schemes=base.schemes, curves=curves, smooth=base.smooth)
    else:
        paths = emit_plot_data(rows, figure, out, schemes=base.schemes)
    for p in paths:
        written[p.name] = p
    if figure in (6, 7) and "baseline" in base.schemes:
        (out / "compare.txt").write_text(format_compare(compare_table(rows)) + "\n", encoding="utf-8")
        written["compare"] = out / "compare.txt"
    return written

