"""Command-line front end: ``deictic {train,eval,homcheck,gradcheck,sweep}``.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure,
3 a run finished but missed its acceptance threshold.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .env import EnvError, MoveEffectEnv
from .homlab import run_homcheck
from .learner import (BaselineAgent, DeicticAgent, episodes_to_threshold, evaluate_policy,
                      run_baseline, run_curriculum)
from .nn import ParameterFileError, gradient_check, random_spec

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_THRESHOLD = 0, 1, 2, 3

log = logging.getLogger("deictic")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def parse_index_list(text: str) -> list[int]:
    """``"1,3-5"`` -> ``[1, 3, 4, 5]``."""
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if "-" in part:
                lo, hi = (int(v) for v in part.split("-", 1))
                if hi < lo:
                    raise ValueError
                out.extend(range(lo, hi + 1))
            else:
                out.append(int(part))
        except ValueError:
            raise UsageError(f"bad index list {text!r}") from None
    if not out:
        raise UsageError(f"empty index list {text!r}")
    return out


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    stages = parse_index_list(args.stages) if getattr(args, "stages", None) else None
    return cfg.with_overrides(seed=getattr(args, "seed", None), output_dir=getattr(args, "out", None),
                              episodes=getattr(args, "budget", None), stages=stages)


# -- train -----------------------------------------------------------------------------------


def train(cfg: ExperimentConfig) -> dict:
    """Run every configured agent; write curves, parameters, figure and summary."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    env_cfg = cfg.env_config()
    stages = cfg.stages()
    summary: dict = {"seed": cfg.seed, "agents": {}}
    curves = {}
    for agent_name in cfg.agents:
        tcfg = cfg.train_config(agent_name)
        rng = np.random.default_rng(cfg.seed)
        if agent_name == "deictic":
            result = run_curriculum(stages, env_cfg, cfg.deictic_config(), tcfg, rng,
                                    thresholds=cfg.thresholds(), max_steps=cfg.curriculum.max_steps,
                                    hierarchy=cfg.hierarchy_flags())
        else:
            result = run_baseline(env_cfg, stages[0], tcfg, rng, max_steps=cfg.curriculum.max_steps)
        agent_dir = out / agent_name
        agent_dir.mkdir(exist_ok=True)
        result.curve.write(agent_dir / "curve.csv")
        result.agent.save(agent_dir)
        curves[agent_name] = result.curve
        summary["agents"][agent_name] = {
            "total_steps": result.total_steps,
            "stages": [
                {
                    "stage": s.stage, "name": s.name, "solved": s.solved, "episodes": s.episodes, "steps": s.steps,
                    "episodes_to_threshold": episodes_to_threshold(
                        result.curve.rewards(s.stage), tcfg.window,
                        cfg.thresholds()[s.stage - 1] or tcfg.threshold),
                }
                for s in result.stages
            ],
        }
        log.info("%s: %s", agent_name, [(s.name, s.solved, s.episodes) for s in result.stages])
    from .plotting import plot_curves, write_gnuplot

    plot_curves(curves, out / "curves.png", cfg.curriculum.window, title=f"{cfg.task} seed {cfg.seed}")
    write_gnuplot(curves, out / "curves.dat", cfg.curriculum.window)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def _all_solved(summary: dict) -> bool:
    return all(s["solved"] for a in summary["agents"].values() for s in a["stages"])


def cmd_train(args) -> int:
    cfg = _load(args)
    summary = train(cfg)
    print(json.dumps(summary, indent=2, sort_keys=True))
    if cfg.curriculum.require_solved and not _all_solved(summary):
        return EXIT_THRESHOLD
    return EXIT_OK


# -- eval ------------------------------------------------------------------------------------


def cmd_eval(args) -> int:
    if args.episodes < 1:
        raise UsageError("--episodes must be >= 1")
    cfg = _load(args)
    params = Path(args.params)
    directory = params if params.is_dir() else params.parent
    stage = cfg.stages()[-1]
    env_cfg = cfg.env_config()
    rng = np.random.default_rng(cfg.seed)
    if args.agent == "baseline":
        agent = BaselineAgent(cfg.train_config("baseline"), MoveEffectEnv(env_cfg, stage), rng)
    else:
        agent = DeicticAgent(cfg.train_config("deictic"), cfg.deictic_config(), rng, stage.num_orientations)
    agent.load(directory)
    rate = evaluate_policy(agent, env_cfg, stage, args.episodes, seed=cfg.seed)
    print(json.dumps({"agent": args.agent, "episodes": args.episodes, "success_rate": rate}))
    if args.min_success is not None and rate < args.min_success:
        return EXIT_THRESHOLD
    return EXIT_OK


# -- homcheck --------------------------------------------------------------------------------


def cmd_homcheck(args) -> int:
    cfg = _load(args)
    env = MoveEffectEnv(cfg.env_config(), cfg.stages()[0])
    h = cfg.homcheck
    report = run_homcheck(env, cfg.deictic_config(), h.gamma, h.tol, h.max_states)
    text = report.to_json()
    print(text)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "homcheck.json").write_text(text + "\n")
    if h.expect is not None:
        certified = (report.well_defined and report.theta_independence_holds
                     and report.value_equivalence_gap <= 2 * h.tol / (1 - h.gamma))
        if certified != (h.expect == "certified"):
            return EXIT_THRESHOLD
    return EXIT_OK


# -- gradcheck -------------------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    worst, ok = 0.0, True
    for i in range(args.specs):
        spec = random_spec(rng)
        try:
            spec.conv_shapes()
        except ValueError:
            continue
        res = gradient_check(spec, seed=args.seed * 1000 + i, step=args.step, rtol=args.rtol)
        worst = max(worst, res.max_rel_error)
        ok &= res.passed
    print(json.dumps({"specs": args.specs, "max_rel_error": worst, "rtol": args.rtol, "passed": ok}))
    return EXIT_OK if ok else EXIT_THRESHOLD


# -- sweep -----------------------------------------------------------------------------------


def cmd_sweep(args) -> int:
    """Run ``train`` once per seed as separate processes, then tabulate the outcomes."""
    cfg = _load(args)
    seeds = parse_index_list(args.seeds)
    root = Path(cfg.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    pending = []
    for seed in seeds:
        cmd = [sys.executable, "-m", "deictic", "train", "--config", str(args.config), "--seed", str(seed),
               "--out", str(root / f"seed{seed}")]
        if args.stages:
            cmd += ["--stages", args.stages]
        if args.budget is not None:
            cmd += ["--budget", str(args.budget)]
        pending.append((seed, cmd))
    running: list = []
    failed = []
    while pending or running:
        while pending and len(running) < args.jobs:
            seed, cmd = pending.pop(0)
            running.append((seed, subprocess.Popen(cmd, stdout=subprocess.DEVNULL, env=os.environ.copy())))
        for item in list(running):
            seed, proc = item
            code = proc.poll()
            if code is not None:
                running.remove(item)
                if code not in (EXIT_OK, EXIT_THRESHOLD):
                    failed.append(seed)
        time.sleep(0.05)
    rows = ["seed,agent,stage,solved,episodes,episodes_to_threshold"]
    per_agent: dict[str, list[float]] = {}
    for seed in seeds:
        path = root / f"seed{seed}" / "summary.json"
        if not path.exists():
            continue
        summary = json.loads(path.read_text())
        for agent, info in sorted(summary["agents"].items()):
            for s in info["stages"]:
                ett = s["episodes_to_threshold"]
                rows.append(f"{seed},{agent},{s['stage']},{int(s['solved'])},{s['episodes']},"
                            f"{'' if ett is None else ett}")
            last = info["stages"][-1]
            censored = last["episodes_to_threshold"] or cfg.curriculum.episodes
            per_agent.setdefault(agent, []).append(float(censored))
    (root / "sweep.csv").write_text("\n".join(rows) + "\n")
    medians = {a: float(np.median(v)) for a, v in per_agent.items()}
    print(json.dumps({"seeds": seeds, "failed": failed, "median_episodes_to_threshold": medians}))
    return EXIT_RUNTIME if failed else EXIT_OK


# -- entry point -----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="deictic", description="deictic image mapping experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out=True):
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--stages", help="stage subset, e.g. 1,3-5 (1-based)")
        p.add_argument("--budget", type=int, help="episode budget per stage")
        if out:
            p.add_argument("--out", help="output directory (overrides output_dir)")

    p = sub.add_parser("train", help="train the configured agents")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="greedy success rate of saved parameters")
    common(p, out=False)
    p.add_argument("--params", required=True, help="run directory or a .params file inside it")
    p.add_argument("--episodes", type=int, default=200)
    p.add_argument("--agent", choices=("deictic", "baseline"), default="deictic")
    p.add_argument("--min-success", type=float, help="exit 3 below this success rate")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("homcheck", help="exhaustive homomorphism check")
    common(p)
    p.set_defaults(func=cmd_homcheck)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check on random networks")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--specs", type=int, default=1, help="number of random specs")
    p.add_argument("--step", type=float, default=1e-3)
    p.add_argument("--rtol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="train over several seeds in separate processes")
    common(p)
    p.add_argument("--seeds", default="0-4", help="seed list, e.g. 0-4")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"deictic: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"deictic: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EnvError, ParameterFileError, ValueError, OSError) as exc:
        print(f"deictic: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
