"""Scenario configuration: defaults, bundled presets, validation and hashing.

Configs are JSON objects. Every physical quantity carries its unit in the
key name (``_m``, ``_s``, ``_deg``, ``_deg_s``, ``_per_s``); angles are
given in degrees and converted to radians once, when the runtime objects
are built.
"""
import copy
import hashlib
import json

from .errors import ConfigError

DEFAULTS = {
    "name": "custom",
    "seed": 0,
    "mesh": {
        "n": 3,
        "m": 3,
        "l_m": 0.025,
        "L_m": 0.025,
        "fixed_nodes": [],
        "init_surface": None,
    },
    "ga": {
        "population_size": 100,
        "crossover_prob": 0.6,
        "mutation_prob": 0.01,
        "stall_generations": 1000,
        "fitness_threshold": 1e-6,
        "max_generations": 10000,
        "probe_angle_deg": 5.0,
        "sensitivity_top_k": None,
        "pattern_path": None,
    },
    "controller": {
        "k_per_s": 2.0,
        "lambda_per_s": 0.0,
        "sigma": 1.0,
        "sigma_rate_per_s": 0.0,
        "weights": 1.0,
        "omega_max_deg_s": 5.0,
        "alpha_deg": 50.0,
        "control_dt_s": 0.01,
        "damping": 1e-6,
        "w_norm": 1e-4,
        "w_slew": 1e-2,
        "qp": {"max_iter": 4000, "eps_abs": 1e-7, "eps_rel": 1e-7},
    },
    "shape": None,
    "sim": {
        "duration_s": 8.0,
        "integrator": "rk45",
        "abs_tol": 1e-8,
        "rel_tol": 1e-8,
        "rk4_substeps": 1,
        "baumgarte_gain_per_s": 10.0,
        "projection_tol_m": 1e-6,
        "damping": 1e-6,
        "record_every": 1,
        "noise": {
            "kind": "none",
            "actuation_max": 0.2,
            "actuation_std": 0.1,
            "state_max_deg": 0.05,
        },
    },
    "outputs": {
        "directory": "out",
        "trajectory": True,
        "plot_data": True,
        "plot_every": 10,
    },
}

# surface blocks: a builtin name or an expression, plus scale-shift terms
SURFACE_DEFAULTS = {
    "name": None,
    "expression": None,
    "amplitude_m": 1.0,
    "sx_m": 1.0,
    "sy_m": 1.0,
    "x0_m": 0.0,
    "y0_m": 0.0,
    "offset_m": 0.0,
    "anchor_m": None,
    "st_s": 1.0,
}

# open-ended values whose type is not fixed by the default
_FREE = {("mesh", "fixed_nodes"), ("controller", "weights"), ("ga", "sensitivity_top_k"),
         ("ga", "pattern_path"), ("outputs", "directory")}


def _paraboloid(n, m, height):
    # vertex at the father node; height reached at the far corner of each axis
    sx = 2 * 0.025 * max(m - 1, 1)
    sy = 2 * 0.025 * max(n - 1, 1)
    return {"name": "paraboloid", "amplitude_m": height, "sx_m": sx, "sy_m": sy}


PRESETS = {
    "3x3_ideal": {
        "name": "3x3_ideal",
        "mesh": {"n": 3, "m": 3, "init_surface": _paraboloid(3, 3, 0.06)},
        "shape": {"name": "mesh3x3_target", "amplitude_m": 0.1, "sx_m": 0.1, "sy_m": 0.1, "anchor_m": [0.0, 0.0]},
        "sim": {"duration_s": 8.0},
    },
    "3x3_actuation_noise": {
        "name": "3x3_actuation_noise",
        "mesh": {"n": 3, "m": 3, "init_surface": _paraboloid(3, 3, 0.06)},
        "shape": {"name": "mesh3x3_target", "amplitude_m": 0.1, "sx_m": 0.1, "sy_m": 0.1, "anchor_m": [0.0, 0.0]},
        "sim": {"duration_s": 16.0, "noise": {"kind": "actuation"}},
    },
    "8x8_ideal": {
        "name": "8x8_ideal",
        "mesh": {"n": 8, "m": 8, "init_surface": _paraboloid(8, 8, 0.1)},
        "shape": {"name": "mesh8x8_target", "amplitude_m": 0.04, "sx_m": 0.35, "sy_m": 0.35,
                  "anchor_m": [0.0, 0.0], "st_s": 8.0},
        # slower gain: the travelling target is tracked without a lag plateau
        "controller": {"k_per_s": 0.3},
        "sim": {"duration_s": 15.0, "integrator": "rk4"},
    },
    "8x8_state_noise": {
        "name": "8x8_state_noise",
        "mesh": {"n": 8, "m": 8, "init_surface": _paraboloid(8, 8, 0.1)},
        "shape": {"name": "mesh8x8_target", "amplitude_m": 0.04, "sx_m": 0.35, "sy_m": 0.35,
                  "anchor_m": [0.0, 0.0], "st_s": 8.0},
        "controller": {"k_per_s": 0.3},
        "sim": {"duration_s": 15.0, "integrator": "rk4", "noise": {"kind": "state"}},
    },
    "20x20_short": {
        "name": "20x20_short",
        "mesh": {"n": 20, "m": 20, "init_surface": _paraboloid(20, 20, 0.2)},
        "ga": {"max_generations": 300, "stall_generations": 100, "fitness_threshold": 0.0,
               "sensitivity_top_k": 1},
        "shape": {"name": "mesh20x20_target", "amplitude_m": 0.55, "sx_m": 0.95, "sy_m": 0.95,
                  "anchor_m": [0.0, 0.0]},
        "sim": {"duration_s": 5.0, "integrator": "rk4", "record_every": 5},
        "outputs": {"trajectory": False},
    },
    "4x8_ironcub_piecewise": {
        "name": "4x8_ironcub_piecewise",
        "mesh": {"n": 4, "m": 8, "fixed_nodes": [[1, 1], [1, 2], [1, 3], [1, 4]],
                 "init_surface": {"name": "cylinder", "amplitude_m": 0.1, "sx_m": 1.0, "sy_m": 0.1,
                                  "y0_m": 0.075, "anchor_m": [0.0, 0.0]}},
        "ga": {"fitness_threshold": 0.0},
        "shape": {"name": "piecewise_4x8", "amplitude_m": 0.02, "sx_m": 0.35, "sy_m": 0.075,
                  "y0_m": 0.075, "anchor_m": [0.0, 0.0]},
        "sim": {"duration_s": 35.0, "integrator": "rk4"},
    },
}


def _merge(base, override, path, free=_FREE):
    out = copy.deepcopy(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown key '{here}'", here)
        default = base[key]
        top = tuple(here.split(".")[:2])
        if isinstance(default, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"'{here}' must be an object", here)
            out[key] = _merge(default, value, here, free)
        elif key in ("init_surface", "shape") and path in ("mesh", ""):
            out[key] = None if value is None else _surface(value, here)
        elif top in free or default is None:
            out[key] = copy.deepcopy(value)
        else:
            out[key] = _coerce(value, default, here)
    return out


def _coerce(value, default, path):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"'{path}' must be true or false", path)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"'{path}' must be an integer", path)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"'{path}' must be a number", path)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"'{path}' must be a string", path)
        return value
    return value


def _surface(block, path):
    if not isinstance(block, dict):
        raise ConfigError(f"'{path}' must be an object", path)
    out = _merge(SURFACE_DEFAULTS, block, path, free={(path.split(".")[0], "anchor_m")})
    if (out["name"] is None) == (out["expression"] is None):
        raise ConfigError(f"'{path}' needs exactly one of 'name' or 'expression'", path)
    if out["anchor_m"] is not None:
        a = out["anchor_m"]
        if not (isinstance(a, list) and len(a) == 2 and all(isinstance(v, (int, float)) for v in a)):
            raise ConfigError(f"'{path}.anchor_m' must be [x, y]", f"{path}.anchor_m")
    return out


def resolve(user=None, preset=None):
    """Materialize a full config: defaults, then a preset, then user overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset '{preset}'", "preset")
        cfg = _merge(cfg, PRESETS[preset], "")
    if user:
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object", "")
        cfg = _merge(cfg, user, "")
    validate(cfg)
    return cfg


def validate(cfg):
    mesh = cfg["mesh"]
    if mesh["n"] < 1 or mesh["m"] < 1:
        raise ConfigError("mesh needs n, m >= 1", "mesh.n")
    if mesh["l_m"] <= 0:
        raise ConfigError("'mesh.l_m' must be positive", "mesh.l_m")
    for k, node in enumerate(mesh["fixed_nodes"]):
        if not (isinstance(node, list) and len(node) == 2 and all(isinstance(v, int) for v in node)):
            raise ConfigError("fixed nodes are [i, j] pairs", f"mesh.fixed_nodes.{k}")
        if not (1 <= node[0] <= mesh["n"] and 1 <= node[1] <= mesh["m"]):
            raise ConfigError(f"fixed node {node} is outside the mesh", f"mesh.fixed_nodes.{k}")
    ga = cfg["ga"]
    for key in ("crossover_prob", "mutation_prob"):
        if not 0.0 <= ga[key] <= 1.0:
            raise ConfigError(f"'ga.{key}' must lie in [0, 1]", f"ga.{key}")
    if ga["population_size"] < 2:
        raise ConfigError("'ga.population_size' must be at least 2", "ga.population_size")
    top_k = ga["sensitivity_top_k"]
    if top_k is not None and (not isinstance(top_k, int) or top_k < 1):
        raise ConfigError("'ga.sensitivity_top_k' must be a positive integer or null", "ga.sensitivity_top_k")
    c = cfg["controller"]
    if c["k_per_s"] <= 0:
        raise ConfigError("'controller.k_per_s' must be positive", "controller.k_per_s")
    if c["sigma"] <= 0:
        raise ConfigError("'controller.sigma' must be positive", "controller.sigma")
    if c["omega_max_deg_s"] <= 0:
        raise ConfigError("'controller.omega_max_deg_s' must be positive", "controller.omega_max_deg_s")
    if not 0 < c["alpha_deg"] < 180:
        raise ConfigError("'controller.alpha_deg' must lie in (0, 180)", "controller.alpha_deg")
    s = cfg["sim"]
    if s["duration_s"] <= 0:
        raise ConfigError("'sim.duration_s' must be positive", "sim.duration_s")
    if s["integrator"] not in ("rk45", "rk4"):
        raise ConfigError("'sim.integrator' must be 'rk45' or 'rk4'", "sim.integrator")
    if s["noise"]["kind"] not in ("none", "actuation", "state"):
        raise ConfigError("'sim.noise.kind' must be none, actuation or state", "sim.noise.kind")
    if not 0.0 <= s["noise"]["actuation_max"] <= 1.0:
        raise ConfigError("'sim.noise.actuation_max' must lie in [0, 1]", "sim.noise.actuation_max")
    return cfg


def load(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}", "") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}", "") from None


def config_hash(cfg):
    """SHA-256 of the canonical JSON form; independent of key order."""
    text = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def dumps(cfg):
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"
