"""Command-line interface for scenario runs, evaluation, and reports."""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import exploration, filtering, runner
from .scenarios import (Scenario, build_model, load_scenario, make_scenario,
                        save_scenario)
from .simulator import Simulator


def _load_or_default(args) -> Scenario:
    if args.scenario:
        scenario = load_scenario(args.scenario)
    else:
        scenario = make_scenario(seed=args.seed or 0)
    if args.seed is not None:
        scenario.seed = args.seed
    if args.particles is not None:
        from dataclasses import replace
        scenario.filt = replace(scenario.filt, particles=args.particles)
    return scenario


def _out_dir(args):
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def cmd_simulate(args):
    scenario = _load_or_default(args)
    sim = Simulator(build_model(scenario.shape), scenario.sim)
    rng = np.random.default_rng(np.random.SeedSequence(scenario.seed))
    theta = scenario.resolved_theta(rng)
    pose = runner._settle(sim, theta, scenario.initial_pose).pose
    rows = ["step,cmd_x,cmd_z,cmd_phi,x,z,phi,fx,fz,tau"]
    base = np.asarray(scenario.base_trajectory)
    for step in range(scenario.explore_steps):
        command = base[min(step, len(base) - 1)]
        obs = runner._observe(sim, theta, pose, command)
        pose = obs.pose
        rows.append(",".join(
            [str(step)] + [format(float(v), ".17g") for v in
                           (*command, *obs.pose, *obs.wrench)]))
    out = _out_dir(args)
    path = os.path.join(out, "rollout.csv")
    with open(path, "w") as f:
        f.write("\n".join(rows) + "\n")
    print(f"wrote {path}")


def cmd_explore(args):
    scenario = _load_or_default(args)
    t0 = time.perf_counter()
    ps, log = runner.run_exploration(scenario, args.strategy)
    dt = time.perf_counter() - t0
    out = _out_dir(args)
    run_name = f"{scenario.name}_{args.strategy}_seed{scenario.seed}"
    log_path = os.path.join(out, f"{run_name}.runlog.csv")
    with open(log_path, "w") as f:
        f.write(log.to_csv())
    belief_path = os.path.join(out, f"{run_name}.belief.npz")
    filtering.save_belief(belief_path, ps)
    if log.eig_reports:
        with open(os.path.join(out, f"{run_name}.eig.json"), "w") as f:
            json.dump(log.eig_reports, f, indent=2)
    mean, std = filtering.posterior_summary(ps, scenario.filt.top_k)
    summary = {
        "scenario": scenario.name, "strategy": args.strategy,
        "seed": int(scenario.seed), "steps": len(log.rows),
        "failed": log.failed, "wall_clock_s": dt,
        "posterior_mean": mean.tolist(), "posterior_std": std.tolist(),
    }
    with open(os.path.join(out, f"{run_name}.summary.json"), "w") as f:
        json.dump(summary, f, indent=2)
    print(f"wrote {log_path}")
    print(f"wrote {belief_path}")


def cmd_eval(args):
    scenario = _load_or_default(args)
    frozen = filtering.load_belief(args.belief)
    sim = Simulator(build_model(scenario.shape), scenario.sim)
    rng = np.random.default_rng(
        np.random.SeedSequence(scenario.seed).spawn(1)[0])
    theta = scenario.resolved_theta(rng)
    rows = []
    for i, trajectory in enumerate(scenario.eval_trajectories):
        rows.append(runner.run_eval(frozen, scenario, trajectory, sim=sim,
                                    theta_true=theta, label=f"traj{i}"))
    aggregate = runner.aggregate_metrics(rows)
    out = _out_dir(args)
    stem = os.path.join(out, f"{scenario.name}_seed{scenario.seed}.metrics")
    with open(stem + ".json", "w") as f:
        f.write(runner.metrics_to_json(rows, aggregate))
    with open(stem + ".csv", "w") as f:
        f.write(runner.metrics_to_csv(rows))
    print(runner.metrics_table(aggregate))
    print(f"wrote {stem}.json and {stem}.csv")


def cmd_eig_bench(args):
    scenario = _load_or_default(args)
    sim = Simulator(build_model(scenario.shape), scenario.sim)
    cfg = scenario.filt
    ss = np.random.SeedSequence(scenario.seed)
    rng_theta, rng_init, rng_filter, rng_eig = [
        np.random.default_rng(s) for s in ss.spawn(4)]
    theta = scenario.resolved_theta(rng_theta)
    ps = filtering.init_particles(cfg, rng_init)
    pose = runner._settle(sim, theta, scenario.initial_pose).pose
    obs = [runner._settle(sim, theta, scenario.initial_pose)]
    cmds = []
    base = np.asarray(scenario.base_trajectory)
    for step in range(cfg.memory_length - 1):
        command = base[min(step, len(base) - 1)]
        o = runner._observe(sim, theta, pose, command)
        obs.append(o)
        cmds.append(np.asarray(command, dtype=float))
        pose = o.pose

    t0 = time.perf_counter()
    ps, info = filtering.pf_update(ps, obs, cmds, cfg, sim, rng_filter)
    t_filter = time.perf_counter() - t0
    deltas = exploration.default_action_deltas(*scenario.action_grid)
    t0 = time.perf_counter()
    _, report = exploration.select_action(
        base[min(cfg.memory_length - 1, len(base) - 1)], deltas, ps, pose,
        cfg, sim, rng_eig)
    t_eig = time.perf_counter() - t0
    doc = {"particles": cfg.particles, "memory_length": cfg.memory_length,
           "t_filter_update_s": t_filter, "t_eig_27_candidates_s": t_eig,
           "n_retained": report.n_retained}
    print(json.dumps(doc, indent=2))
    if args.out:
        out = _out_dir(args)
        with open(os.path.join(out, "eig_bench.json"), "w") as f:
            json.dump(doc, f, indent=2)


def cmd_report(args):
    out = args.out or "."
    rows = []
    for name in sorted(os.listdir(out)):
        if not name.endswith(".metrics.json"):
            continue
        with open(os.path.join(out, name)) as f:
            doc = json.load(f)
        for r in doc["rows"]:
            rows.append(runner.MetricsRow(
                mae_fx=r["mae_fx"], mae_fz=r["mae_fz"], mae_tau=r["mae_tau"],
                mae_x_mm=r["mae_x_mm"], mae_z_mm=r["mae_z_mm"],
                peak_force=r.get("peak_force", 0.0),
                steps=r.get("steps", 0), label=r.get("label", name)))
    if not rows:
        print("no .metrics.json files found", file=sys.stderr)
        return 1
    aggregate = runner.aggregate_metrics(rows)
    print(runner.metrics_table(aggregate))
    with open(os.path.join(out, "report.json"), "w") as f:
        f.write(runner.metrics_to_json(rows, aggregate))
    return 0


def cmd_write_scenario(args):
    scenario = make_scenario(seed=args.seed or 0,
                             particles=args.particles or 5000)
    save_scenario(args.path, scenario)
    print(f"wrote {args.path}")


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="contactest",
        description="Planar contact dynamics estimation experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--scenario", help="scenario YAML file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--particles", type=int, default=None)
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("simulate", help="ground-truth rollout to CSV")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("explore", help="run one exploration episode")
    common(p)
    p.add_argument("--strategy", choices=runner.STRATEGIES, required=True)
    p.set_defaults(func=cmd_explore)

    p = sub.add_parser("eval", help="evaluate a frozen belief snapshot")
    common(p)
    p.add_argument("--belief", required=True, help="belief .npz snapshot")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("eig-bench", help="time one filter update and one "
                                         "27-candidate EIG step")
    common(p)
    p.set_defaults(func=cmd_eig_bench)

    p = sub.add_parser("report", help="aggregate metrics JSONs in --out")
    p.add_argument("--out", help="directory of .metrics.json files")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("write-scenario", help="emit a default scenario file")
    p.add_argument("path")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--particles", type=int, default=None)
    p.set_defaults(func=cmd_write_scenario)

    args = parser.parse_args(argv)
    return args.func(args) or 0


if __name__ == "__main__":
    sys.exit(main())
