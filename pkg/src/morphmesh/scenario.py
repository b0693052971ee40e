"""Turn a resolved config into runtime objects and run the pipeline stages."""
import json
import time
from dataclasses import dataclass

import numpy as np

from . import kinematics as kin
from . import placement
from . import shape as shp
from . import sim
from .controller import ControllerConfig
from .errors import ConfigError, ParseError, UnknownShape
from .qp import QPSettings


def surface(block, path="shape"):
    if block is None:
        return None
    try:
        return _surface(block)
    except (UnknownShape, ParseError) as exc:
        raise ConfigError(str(exc), path) from exc


def _surface(block):
    params = dict(amplitude=block["amplitude_m"], sx=block["sx_m"], sy=block["sy_m"], x0=block["x0_m"],
                  y0=block["y0_m"], offset=block["offset_m"], st=block["st_s"],
                  anchor=None if block["anchor_m"] is None else tuple(block["anchor_m"]))
    if block["name"] is not None:
        return shp.builtin(block["name"], **params)
    return shp.ShapeField(shp.scale_shift(block["expression"], **params), name=block["expression"])


def mesh(cfg):
    m = cfg["mesh"]
    fixed = [tuple(node) for node in m["fixed_nodes"]]
    return kin.build_mesh(m["n"], m["m"], l=m["l_m"], L=m["L_m"],
                          initial_surface=surface(m["init_surface"], "mesh.init_surface"),
                          fixed_nodes=fixed)


def ga_config(cfg):
    g = cfg["ga"]
    return placement.GAConfig(population_size=g["population_size"], crossover_prob=g["crossover_prob"],
                              mutation_prob=g["mutation_prob"], stall_generations=g["stall_generations"],
                              fitness_threshold=g["fitness_threshold"], max_generations=g["max_generations"],
                              rng_seed=sim.ga_seed(cfg["seed"]))


def controller_config(cfg):
    c = cfg["controller"]
    return ControllerConfig(k=c["k_per_s"], lam=c["lambda_per_s"], sigma=c["sigma"],
                            sigma_rate=c["sigma_rate_per_s"], node_weights=c["weights"],
                            omega_max=np.deg2rad(c["omega_max_deg_s"]), alpha=np.deg2rad(c["alpha_deg"]),
                            control_dt=c["control_dt_s"], damping=c["damping"], w_norm=c["w_norm"],
                            w_slew=c["w_slew"],
                            qp=QPSettings(max_iter=c["qp"]["max_iter"], eps_abs=c["qp"]["eps_abs"],
                                          eps_rel=c["qp"]["eps_rel"]))


def sim_config(cfg):
    s = cfg["sim"]
    nz = s["noise"]
    noise = sim.NoiseSpec(kind=nz["kind"], actuation_max=nz["actuation_max"], actuation_std=nz["actuation_std"],
                          state_max=np.deg2rad(nz["state_max_deg"]))
    return sim.SimConfig(duration=s["duration_s"], control_dt=cfg["controller"]["control_dt_s"],
                         integrator=s["integrator"], abs_tol=s["abs_tol"], rel_tol=s["rel_tol"],
                         rk4_substeps=s["rk4_substeps"], baumgarte_gain=s["baumgarte_gain_per_s"],
                         projection_tol=s["projection_tol_m"], damping=s["damping"], noise=noise,
                         rng_seed=cfg["seed"], record_every=s["record_every"])


@dataclass
class Placement:
    pattern: placement.ActuationPattern
    dof: int
    generations: int
    wall_time: float


def place(cfg, topology, state):
    """GA placement plus the sensitivity filter, as configured."""
    t0 = time.perf_counter()
    pattern, cs, gens = placement.place_actuators(
        topology, state, ga_config(cfg), probe_angle=np.deg2rad(cfg["ga"]["probe_angle_deg"]),
        sensitivity_top_k=cfg["ga"]["sensitivity_top_k"])
    return Placement(pattern, cs.dof, gens, time.perf_counter() - t0)


def load_pattern(path):
    with open(path) as fh:
        return placement.ActuationPattern.from_json(fh.read())


def report(cfg, topology, pattern, result, wall_time, cfg_hash):
    last = result.frames[-1]
    return {
        "scenario": cfg["name"],
        "dof": len(pattern.rows),
        "joints": topology.n_joints,
        "pattern": {"rows": list(pattern.rows), "fitness": pattern.fitness, "sensitivity": pattern.sensitivity,
                    "motors_per_joint": {str(k): v for k, v in placement.motors_histogram(pattern.rows).items()}},
        "final_mean_eO_deg": float(np.rad2deg(last.e_O_mean)),
        "final_mean_eP_mm": float(1e3 * last.e_P_mean),
        "initial_mean_eO_deg": float(np.rad2deg(result.frames[0].e_O_mean)),
        "initial_mean_eP_mm": float(1e3 * result.frames[0].e_P_mean),
        "max_motor_rate_deg_s": float(np.rad2deg(result.max_rate)),
        "max_constraint_residual_m": result.max_residual,
        "min_alignment_margin": result.min_alignment_margin,
        "wall_time_s": wall_time,
        "seed": cfg["seed"],
        "config_hash": cfg_hash,
    }


def dump_json(path, doc):
    with open(path, "w") as fh:
        fh.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")
