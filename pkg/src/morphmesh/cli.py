"""Command-line entry point: ``morphmesh {analyze,place,simulate,verify}``.

Exit codes: 0 success, 1 domain failure (or failed verification),
2 configuration error.
"""
import argparse
import json
import logging
import os
import sys
import time

EXIT_OK, EXIT_DOMAIN, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("morphmesh")


def _threads():
    raw = os.environ.get("MORPHMESH_THREADS")
    if raw is None:
        return None
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise ValueError(f"MORPHMESH_THREADS must be a positive integer, got {raw!r}")
    # must happen before numpy loads its BLAS
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)
    return n


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="scenario JSON file")
    common.add_argument("--preset", help="bundled scenario preset (see 'morphmesh presets')")
    common.add_argument("--seed", type=int, help="scenario seed (overrides the config)")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides the config)")
    common.add_argument("--pattern", metavar="PATH", help="precomputed actuation pattern JSON")
    common.add_argument("--duration-s", type=float, help="simulated duration in seconds")
    common.add_argument("--quiet", action="store_true", help="only print warnings and results")

    p = argparse.ArgumentParser(prog="morphmesh", description="Morphing-cover mesh toolkit.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("analyze", parents=[common], help="report nodes, joints, rank and DoF")
    sub.add_parser("place", parents=[common], help="choose motor placement with the GA")
    sub.add_parser("simulate", parents=[common], help="run the closed-loop simulation")
    v = sub.add_parser("verify", parents=[common], help="check kinematic and controller invariants")
    v.add_argument("--state", metavar="PATH", help="state snapshot JSON to check instead of the initial fit")
    v.add_argument("--samples", type=int, default=0, help="extra random feasible configurations to check")
    sub.add_parser("presets", help="list bundled presets")
    return p


def _resolve(args):
    from . import config
    user = config.load(args.config) if args.config else {}
    if args.seed is not None:
        user = dict(user, seed=args.seed)
    cfg = config.resolve(user, preset=args.preset)
    if args.out is not None:
        cfg["outputs"]["directory"] = args.out
    if args.duration_s is not None:
        if args.duration_s <= 0:
            from .errors import ConfigError
            raise ConfigError("--duration-s must be positive", "sim.duration_s")
        cfg["sim"]["duration_s"] = args.duration_s
    if args.pattern is not None:
        cfg["ga"]["pattern_path"] = args.pattern
    return cfg


def _outdir(cfg):
    from . import config
    out = cfg["outputs"]["directory"]
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.resolved.json"), "w") as fh:
        fh.write(config.dumps(cfg))
    return out


def cmd_analyze(cfg, args):
    from . import kinematics as kin
    from . import scenario
    topology, state = scenario.mesh(cfg)
    cs = kin.analyze_constraints(topology, state)
    doc = {
        "mesh": {"n": topology.n, "m": topology.m},
        "nodes": topology.n_nodes,
        "joints": topology.n_joints,
        "fixed_nodes": [list(topology.node_label(k)) for k in topology.fixed_nodes],
        "state_dimension": topology.state_dimension,
        "constraints": topology.n_constraints,
        "rank": cs.rank,
        "dof": cs.dof,
        "max_residual_m": float(abs(cs.residual).max(initial=0.0)),
    }
    print(f"mesh             {topology.n} x {topology.m}")
    print(f"nodes            {doc['nodes']}")
    print(f"joints           {doc['joints']}")
    print(f"state dimension  {doc['state_dimension']}")
    print(f"constraint rows  {doc['constraints']}")
    print(f"rank             {doc['rank']}")
    print(f"dof              {doc['dof']}")
    if args.out is not None:
        from .scenario import dump_json
        dump_json(os.path.join(_outdir(cfg), "analysis.json"), doc)
    return EXIT_OK


def _print_pattern(pattern, topology):
    from .placement import motors_histogram
    labels = topology.axis_labels()
    hist = motors_histogram(pattern.rows)
    print(f"dof              {len(pattern.rows)}")
    print(f"fitness          {pattern.fitness:.6e}")
    sens = "n/a" if pattern.sensitivity is None else f"{pattern.sensitivity:.6e}"
    print(f"sensitivity      {sens}")
    print("motors per joint " + ", ".join(f"{k}: {v}" for k, v in hist.items()))
    for r in pattern.rows:
        print(f"  row {r:5d}  {labels[r]}")


def cmd_place(cfg, args):
    from . import scenario
    topology, state = scenario.mesh(cfg)
    res = scenario.place(cfg, topology, state)
    out = _outdir(cfg)
    if res.dof == 0:
        print("mesh has no degrees of freedom: no motors needed")
    else:
        _print_pattern(res.pattern, topology)
        log.info("placement took %.1f s over %d generations", res.wall_time, res.generations)
    with open(os.path.join(out, "pattern.json"), "w") as fh:
        fh.write(res.pattern.to_json(topology, seed=cfg["seed"]))
    return EXIT_OK


def cmd_simulate(cfg, args):
    import numpy as np
    from . import config, scenario, sim
    from .errors import ConfigError
    topology, state = scenario.mesh(cfg)
    target = scenario.surface(cfg["shape"])
    if target is None:
        raise ConfigError("simulation needs a 'shape' block", "shape")
    out = _outdir(cfg)
    if cfg["ga"]["pattern_path"]:
        pattern = scenario.load_pattern(cfg["ga"]["pattern_path"])
    else:
        pattern = scenario.place(cfg, topology, state).pattern
        with open(os.path.join(out, "pattern.json"), "w") as fh:
            fh.write(pattern.to_json(topology, seed=cfg["seed"]))
    ctrl = scenario.controller_config(cfg)
    scfg = scenario.sim_config(cfg)
    t0 = time.perf_counter()

    def progress(k, n, frame):
        if k % 100 == 0:
            log.info("t=%6.2f s  eO=%6.2f deg  eP=%7.2f mm", frame.t, np.rad2deg(frame.e_O_mean),
                     1e3 * frame.e_P_mean)

    result = sim.run(topology, state, pattern.rows, target, ctrl, scfg, progress=progress)
    wall = time.perf_counter() - t0
    if cfg["outputs"]["trajectory"]:
        sim.write_trajectory_csv(os.path.join(out, "trajectory.csv"), topology, result)
    sim.write_metrics_csv(os.path.join(out, "metrics.csv"), result, len(pattern.rows))
    if cfg["outputs"]["plot_data"]:
        sim.write_plot_data(os.path.join(out, "plot_data.csv"), result, every=cfg["outputs"]["plot_every"])
    rep = scenario.report(cfg, topology, pattern, result, wall, config.config_hash(cfg))
    scenario.dump_json(os.path.join(out, "report.json"), rep)
    print(f"final mean eO    {rep['final_mean_eO_deg']:.3f} deg")
    print(f"final mean eP    {rep['final_mean_eP_mm']:.3f} mm")
    print(f"max motor rate   {rep['max_motor_rate_deg_s']:.4f} deg/s")
    print(f"wall time        {wall:.1f} s")
    return EXIT_OK


def cmd_verify(cfg, args):
    from . import scenario, verify
    topology, state = scenario.mesh(cfg)
    if args.state:
        state = verify.load_state(args.state, topology)
    summary = verify.run_checks(topology, state, scenario.controller_config(cfg),
                                samples=args.samples, seed=cfg["seed"])
    text = json.dumps(summary, indent=2, sort_keys=True)
    print(text)
    if args.out is not None:
        with open(os.path.join(_outdir(cfg), "verify.json"), "w") as fh:
            fh.write(text + "\n")
    return EXIT_OK if summary["passed"] else EXIT_DOMAIN


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        _threads()
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING if getattr(args, "quiet", False) else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    from .errors import ConfigError, MorphMeshError
    if args.command == "presets":
        from .config import PRESETS
        for name in PRESETS:
            print(name)
        return EXIT_OK
    try:
        cfg = _resolve(args)
        handler = {"analyze": cmd_analyze, "place": cmd_place, "simulate": cmd_simulate,
                   "verify": cmd_verify}[args.command]
        return handler(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MorphMeshError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
