"""Command-line entry point: ``aoisharing <command> [options]``.

Failures print a single line ``aoisharing: error: <kind>: <message>`` to
stderr and exit with status 2 (usage) or 1 (everything else).
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import harness
from .agents import GreedyPolicy, make_agent, run_episode, train_agent
from .env import SpectrumEnv
from .nn import DenseNet, gradient_check, kink_safe_input

PROG = "aoisharing"


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = 1):
        super().__init__(message)
        self.kind = kind
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message.replace("\n", " "), code=2)


def _common(p: argparse.ArgumentParser, out_default: str | None = None) -> None:
    p.add_argument("--config", help="JSON experiment file")
    p.add_argument("--seed", type=int, default=None, help="run with this single seed")
    p.add_argument("--out", default=out_default, help="output directory")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config key (repeatable), e.g. geometry.p_pu_dbm=15")
    p.add_argument("--episodes", type=int, help="training episodes per run")
    p.add_argument("--horizon", type=int, help="slots per episode")
    p.add_argument("--warmup", type=int, help="replay size that must be reached before learning")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog=PROG, description="AoI-driven spectrum sharing: simulator, learners, oracle and sweeps.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one learner and save its network")
    _common(p, "runs/train")
    p.add_argument("--scheme", choices=harness.LEARNERS, default="d3qn")

    p = sub.add_parser("eval", help="evaluate a checkpoint or a fixed policy greedily")
    _common(p, None)
    p.add_argument("--scheme", choices=("baseline", "random", "checkpoint"), default="baseline")
    p.add_argument("--checkpoint", help="network file written by `train`")
    p.add_argument("--eval-episodes", type=int, default=50)

    p = sub.add_parser("sweep", help="train/evaluate all schemes over a parameter sweep")
    _common(p, "runs/sweep")
    p.add_argument("--axis", choices=harness.SWEEP_AXES, default="P_pu")
    p.add_argument("--values", type=float, nargs="+", help="sweep values (default: the figure axis)")
    p.add_argument("--seeds", type=int, nargs="+", help="seed list (default 0..4)")
    p.add_argument("--schemes", nargs="+", choices=harness.SCHEMES + ("random",))
    p.add_argument("--eval-episodes", type=int)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("oracle", help="solve a discretised MDP by value iteration")
    _common(p, None)
    p.add_argument("--bins", type=int, nargs=2, default=(5, 4), metavar=("AOI", "BATTERY"))
    p.add_argument("--gamma", type=float, default=0.95)
    p.add_argument("--toy", action="store_true", help="use the small integer-energy toy configuration")
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--q-sweeps", type=int, default=0, help="also run this many synchronous Q-learning sweeps")

    p = sub.add_parser("gradcheck", help="backprop vs central differences on random networks")
    p.add_argument("--nets", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dueling", action="store_true")
    p.add_argument("--threshold", type=float, default=1e-6)

    p = sub.add_parser("reproduce", help="regenerate the data behind one figure")
    _common(p, "runs/reproduce")
    p.add_argument("--figure", type=int, choices=range(3, 9), required=True)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--eval-episodes", type=int)
    p.add_argument("--workers", type=int, default=1)
    return ap


def _experiment(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config) if args.config else harness.ExperimentConfig()
    if args.overrides:
        cfg = harness.apply_overrides(cfg, args.overrides)
    agent = cfg.agent
    if args.episodes is not None:
        agent = replace(agent, episodes=args.episodes)
    if args.horizon is not None:
        agent = replace(agent, horizon=args.horizon)
    if args.warmup is not None:
        agent = replace(agent, warmup=args.warmup)
    cfg = replace(cfg, agent=agent)
    seeds = getattr(args, "seeds", None)
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    elif seeds:
        cfg = replace(cfg, seeds=tuple(seeds))
    for name in ("eval_episodes", "workers"):
        v = getattr(args, name, None)
        if v is not None:
            cfg = replace(cfg, **{name: v})
    return cfg


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def cmd_train(args) -> int:
    cfg = _experiment(args)
    seed = cfg.seeds[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    agent = make_agent(args.scheme, cfg.agent, seed=[seed, 2])
    env = SpectrumEnv(cfg.env, seed=[seed, 0])
    recs = train_agent(agent, env)
    ckpt = out / f"{args.scheme}_seed{seed}.aoiq"
    agent.online.save(ckpt)
    curve = [r.total_reward for r in recs]
    smoothed = harness.trailing_mean(curve, cfg.smooth) if curve else []
    lines = ["episode,reward,smoothed"] + [f"{i},{a!r},{float(b)!r}" for i, (a, b) in enumerate(zip(curve, smoothed))]
    (out / "reward_curve.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _emit({"checkpoint": str(ckpt), "episodes": len(recs), "updates": agent.updates,
           "final_reward": float(np.mean(curve[-cfg.smooth:])) if curve else None})
    return 0


def cmd_eval(args) -> int:
    cfg = _experiment(args)
    seed = cfg.seeds[0]
    if args.scheme == "checkpoint":
        if not args.checkpoint:
            raise CliError("usage", "--scheme checkpoint needs --checkpoint", code=2)
        policy = GreedyPolicy(DenseNet.load(args.checkpoint), name=Path(args.checkpoint).stem)
    else:
        policy = make_agent(args.scheme, cfg.agent, seed=[seed, 2])
    env = SpectrumEnv(cfg.env, seed=[seed, 1])
    recs = [run_episode(policy, env, train=False, horizon=cfg.agent.horizon) for _ in range(args.eval_episodes)]
    result = {
        "scheme": getattr(policy, "name", args.scheme),
        "seed": seed,
        "episodes": len(recs),
        "avg_aoi": float(np.mean([r.aoi.mean() for r in recs])),
        "avg_rate": float(np.mean([r.rate.mean() for r in recs])),
        "access": harness.access_fraction(recs),
        "avg_reward": float(np.mean([r.total_reward for r in recs])),
    }
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        keys = sorted(result)
        (out / "eval.csv").write_text(",".join(keys) + "\n" + ",".join(str(result[k]) for k in keys) + "\n",
                                      encoding="utf-8")
    _emit(result)
    return 0


def cmd_sweep(args) -> int:
    cfg = _experiment(args)
    values = tuple(args.values) if args.values else (
        harness.P_PU_VALUES if args.axis == "P_pu" else harness.B_MAX_VALUES)
    cfg = replace(cfg, sweep=args.axis, values=tuple(sorted(values)), out_dir=args.out)
    if args.schemes:
        cfg = replace(cfg, schemes=tuple(args.schemes))
    res = harness.run_sweep(cfg)
    if "baseline" in cfg.schemes:
        print(harness.format_compare(harness.compare_table(res.rows)))
    _emit({k: str(v) for k, v in res.files.items()})
    return 0


def cmd_oracle(args) -> int:
    from . import oracle

    cfg = _experiment(args)
    env_cfg = oracle.toy_config() if args.toy else cfg.env
    if args.toy and args.overrides:
        env_cfg = harness.apply_overrides(replace(cfg, env=env_cfg), args.overrides).env
    mdp = oracle.build_mdp(env_cfg, tuple(args.bins), discount=args.gamma)
    vt = oracle.value_iteration(mdp, args.tol)
    summary = {"states": mdp.n_states, "sweeps": len(vt.residuals),
               "residual": oracle.bellman_residual(mdp, vt.v), "row_error": mdp.row_error()}
    if args.q_sweeps:
        seed = cfg.seeds[0]
        qt = oracle.tabular_q(mdp, args.q_sweeps, beta=1.0, mode="sync", schedule="rescaled_linear",
                              rng=np.random.default_rng(seed))
        summary["q_sup_error"] = float(np.max(np.abs(qt.q[mdp.valid] - vt.q[mdp.valid])))
        summary["q_policy_agreement"] = float(oracle.policy_agreement(vt.q, qt.policy).mean())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        lines = ["aoi,battery_bin,pu_active,v,policy"]
        lines += [f"{a},{b},{p},{v!r},{int(x)}" for (a, b, p), v, x in zip(mdp.labels, vt.v, vt.policy)]
        (out / "oracle.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        summary["file"] = str(out / "oracle.csv")
    _emit(summary)
    return 0


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for i in range(args.nets):
        net = DenseNet(4, 5, (64, 64), dueling=args.dueling, seed=int(rng.integers(2**31)))
        x = kink_safe_input(net, rng)
        g = rng.normal(size=5)
        worst = max(worst, gradient_check(net, x, g, h=1e-5))
    _emit({"nets": args.nets, "max_rel_error": worst, "threshold": args.threshold, "pass": worst < args.threshold})
    if worst >= args.threshold:
        raise CliError("gradcheck", f"max relative error {worst:.3e} >= {args.threshold:g}")
    return 0


def cmd_reproduce(args) -> int:
    cfg = _experiment(args)
    files = harness.reproduce(args.figure, cfg, args.out)
    _emit({k: str(v) for k, v in sorted(files.items())})
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "oracle": cmd_oracle,
    "gradcheck": cmd_gradcheck,
    "reproduce": cmd_reproduce,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"{PROG}: error: {exc.kind}: {exc}", file=sys.stderr)
        return exc.code
    except (OSError, ValueError, KeyError, TypeError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"{PROG}: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
