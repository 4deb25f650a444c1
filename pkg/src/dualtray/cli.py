"""Command line: ``run``, ``grid``, ``train-lmpc`` and ``metrics``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import bench, metrics
from .config import load_config

log = logging.getLogger("dualtray")


def _write_metrics(records: list[tuple[str, metrics.MetricsRecord]], path: str | None) -> None:
    fields = list(metrics.MetricsRecord.__dataclass_fields__)
    out = open(path, "w", newline="") if path else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(["source"] + fields)
        for name, rec in records:
            w.writerow([name] + [repr(v) if isinstance(v, float) else v for v in rec.as_dict().values()])
    finally:
        if path:
            out.close()


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.policy:
        cfg.lmpc = replace(cfg.lmpc, policy=args.policy)
    spec = bench.EpisodeSpec(
        shape=args.shape,
        mass=args.mass,
        friction=args.friction,
        controller=args.controller,
        tier=args.tier or cfg.plant.tier,
        goal=(args.goal_x, args.goal_y),
        duration=args.duration or cfg.plant.duration,
        sample_rate=cfg.plant.sample_rate,
        seed=args.seed,
    )
    traj, rec = bench.run_episode(spec, cfg)
    if args.out:
        traj.write_csv(args.out)
        log.info("trajectory written to %s", args.out)
    _write_metrics([(args.out or "run", rec)], args.metrics_out)
    return 0


def cmd_grid(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out_dir)

    def progress(done, total):
        log.info("episode %d / %d", done, total)

    report = bench.run_grid(cfg, jobs=args.jobs, out_dir=out, progress=progress)
    sys.stdout.write(report.text())
    return 2 if report.failures else 0


def cmd_train(args) -> int:
    from .lmpc import save_policy, train, write_curve

    cfg = load_config(args.config)
    lcfg = cfg.lmpc_config()
    kw = {}
    if args.episodes is not None:
        kw["episodes"] = args.episodes
    if args.steps is not None:
        kw["steps"] = args.steps
    if args.seed is not None:
        kw["seed"] = args.seed
    if args.fixed:
        shape, mass, mu = args.fixed.split(",")
        kw["fixed_config"] = (shape, float(mass), float(mu))
    lcfg = replace(lcfg, **kw)
    res = train(lcfg, cfg.mpc_spec(), log=log.info)
    save_policy(res.policy, args.policy_out)
    curve_path = args.curve_out or str(Path(args.policy_out).with_suffix(".curve.csv"))
    write_curve(res.curve, curve_path)
    log.info("policy written to %s, curve to %s", args.policy_out, curve_path)
    return 0


def cmd_metrics(args) -> int:
    recs = [(p, bench.metrics_from_log(bench.read_log(p), args.w_e, args.w_r)) for p in args.csv]
    _write_metrics(recs, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualtray", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="single closed-loop episode")
    r.add_argument("--controller", default="PMPC", choices=["PMPC", "RMPC", "LMPC"])
    r.add_argument("--shape", default="cube", choices=["cube", "cylinder", "sphere"])
    r.add_argument("--mass", type=float, default=1.0)
    r.add_argument("--friction", type=float, default=0.10)
    r.add_argument("--goal-x", type=float, default=0.10)
    r.add_argument("--goal-y", type=float, default=0.0)
    r.add_argument("--tier", choices=["ideal_servo", "dual_arm"], default=None)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--duration", type=float, default=None, help="seconds (default from config)")
    r.add_argument("--config", default=None)
    r.add_argument("--policy", default=None, help="LMPC policy file")
    r.add_argument("--out", default=None, help="trajectory CSV")
    r.add_argument("--metrics-out", default=None)
    r.set_defaults(func=cmd_run)

    g = sub.add_parser("grid", help="configuration sweep and report")
    g.add_argument("--config", default=None)
    g.add_argument("--jobs", type=int, default=1)
    g.add_argument("--out-dir", default="grid_out")
    g.set_defaults(func=cmd_grid)

    t = sub.add_parser("train-lmpc", help="train the parameter-adaptation policy")
    t.add_argument("--episodes", type=int, default=None)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--policy-out", default="policy.lmpc")
    t.add_argument("--curve-out", default=None)
    t.add_argument("--fixed", default=None, help="train on one object: shape,mass,mu")
    t.add_argument("--config", default=None)
    t.set_defaults(func=cmd_train)

    m = sub.add_parser("metrics", help="recompute metrics from trajectory CSVs")
    m.add_argument("csv", nargs="+")
    m.add_argument("--w-e", type=float, default=metrics.W_E)
    m.add_argument("--w-r", type=float, default=metrics.W_R)
    m.add_argument("--out", default=None)
    m.set_defaults(func=cmd_metrics)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
