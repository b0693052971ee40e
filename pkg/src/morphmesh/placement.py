"""Genetic-algorithm motor placement over the rows of the relative null basis.

A candidate is a sorted vector of ``dof`` distinct row indices of ``Z_nu``;
the six base rows are never eligible because the father node is fixed.
"""
import json
import math
import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import kinematics as kin
from .errors import InitFitFailure, NoFullRankPattern, SingularActuation

log = logging.getLogger(__name__)

SINGULAR_RCOND = 1e-12
# sharpens the single-motor reward so a doubled joint costs more than det can gain
REWARD_EXPONENT = 16
# share of the best fitness a candidate needs to enter the sensitivity filter
SELECT_FRACTION = 0.5


@dataclass
class GAConfig:
    population_size: int = 100
    crossover_prob: float = 0.6
    mutation_prob: float = 0.01
    stall_generations: int = 1000
    fitness_threshold: float = 1e-6
    max_generations: int = 10_000
    rng_seed: int = 0

    def __post_init__(self):
        if self.population_size < 2:
            raise ValueError("population_size must be at least 2")
        for name in ("crossover_prob", "mutation_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.max_generations < 1 or self.stall_generations < 1:
            raise ValueError("generation counts must be positive")


@dataclass
class ActuationPattern:
    rows: tuple
    fitness: float = 0.0
    sensitivity: float = None
    motors_per_joint: dict = field(default_factory=dict)
    det: float = 0.0

    def __post_init__(self):
        self.rows = tuple(int(r) for r in self.rows)
        if len(set(self.rows)) != len(self.rows):
            raise ValueError("actuation pattern repeats a row")
        if any(r < 6 for r in self.rows):
            raise ValueError("base-velocity rows cannot be actuated")
        if not self.motors_per_joint:
            self.motors_per_joint = motors_histogram(self.rows)

    @property
    def max_motors_per_joint(self):
        return max(Counter(joint_of(r) for r in self.rows).values(), default=0)

    def to_json(self, topology, seed=None):
        labels = topology.axis_labels()
        doc = {
            "mesh": {"n": topology.n, "m": topology.m},
            "dof": len(self.rows),
            "rows": list(self.rows),
            "joint_axis_labels": [labels[r] for r in self.rows],
            "fitness": self.fitness,
            "sensitivity": self.sensitivity if self.sensitivity is None or math.isfinite(self.sensitivity) else None,
            "seed": seed,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        return cls(tuple(doc["rows"]), fitness=doc.get("fitness") or 0.0, sensitivity=doc.get("sensitivity"))


def joint_of(row):
    return (row - 6) // 3


def motors_histogram(rows):
    """How many joints carry 1, 2 or 3 motors."""
    per_joint = Counter(joint_of(r) for r in rows)
    hist = Counter(per_joint.values())
    return {k: hist.get(k, 0) for k in (1, 2, 3)}


def reward(h, exponent=REWARD_EXPONENT):
    """Favours patterns with few motors per spherical joint; 1 when every touched joint has one."""
    per_joint = Counter(joint_of(r) for r in h)
    single = sum(1 for c in per_joint.values() if c == 1)
    return ((1.0 + single) / (1.0 + len(per_joint))) ** exponent


def abs_det(Z_act):
    """``|det|`` of a square block, 0 when it is numerically singular."""
    Z_act = np.asarray(Z_act, dtype=float)
    if Z_act.shape[-1] == 0:
        return 1.0
    sign, logdet = np.linalg.slogdet(Z_act)
    if sign == 0 or not np.isfinite(logdet):
        return 0.0
    s = np.linalg.svd(Z_act, compute_uv=False)
    if s[-1] <= SINGULAR_RCOND * s[0]:
        return 0.0
    return float(np.exp(logdet))


def fitness(h, Z_nu, duplicates=0):
    """``|det(Z_nu[h])| * f_R(h) * f_P(h)`` with ``f_P = 1 / (1 + duplicates)``."""
    h = np.asarray(h, dtype=int)
    if len(set(h.tolist())) != len(h):
        return 0.0
    d = abs_det(Z_nu[h])
    return d * reward(h) / (1.0 + duplicates)


class _Evaluator:
    def __init__(self, Z_nu):
        self.Z_nu = Z_nu
        self.cache = {}

    def __call__(self, key):
        v = self.cache.get(key)
        if v is None:
            v = abs_det(self.Z_nu[list(key)]) * reward(key)
            self.cache[key] = v
        return v


def _repair(child, valid, rng):
    seen = set()
    out = []
    for g in child:
        if g in seen:
            continue
        seen.add(g)
        out.append(g)
    while len(out) < len(child):
        g = int(rng.choice(valid))
        if g not in seen:
            seen.add(g)
            out.append(g)
    return tuple(sorted(out))


def _score(pop, evaluate):
    counts = Counter(pop)
    # every copy beyond the first is penalised
    return np.array([evaluate(h) / counts[h] for h in pop])


def pivoted_candidate(Z_nu, valid):
    """Rows picked by column-pivoted QR of ``Z_nu[valid]ᵀ`` (a max-volume heuristic)."""
    from scipy.linalg import qr
    dof = Z_nu.shape[1]
    _, _, piv = qr(Z_nu[valid].T, mode="economic", pivoting=True)
    return tuple(sorted(int(r) for r in valid[piv[:dof]]))


def evolve(Z_nu, config=None, exclude_rows=()):
    """Run the GA and return the final population, best undiluted score first.

    ``fitness`` on the returned patterns includes the duplicate penalty of
    the final generation.
    """
    config = config or GAConfig()
    Z_nu = np.asarray(Z_nu, dtype=float)
    dof = Z_nu.shape[1]
    if dof < 1:
        raise ValueError("mesh has no degrees of freedom to actuate")
    valid = np.array([r for r in range(6, Z_nu.shape[0]) if r not in set(exclude_rows)])
    if len(valid) < dof:
        raise NoFullRankPattern("fewer actuatable rows than degrees of freedom")
    rng = np.random.default_rng(config.rng_seed)
    evaluate = _Evaluator(Z_nu)
    pop = [tuple(sorted(rng.choice(valid, size=dof, replace=False).tolist()))
           for _ in range(config.population_size)]
    if not any(evaluate(h) > 0 for h in pop):
        # random draws rarely hit a full-rank subset on large meshes
        pop[-1] = pivoted_candidate(Z_nu, valid)
        log.info("no full-rank random candidate; seeded one from pivoted QR")
    # the duplicate penalty steers selection; the elite is the best undiluted string
    best, best_gen, elite = -1.0, 0, pop[0]
    for gen in range(config.max_generations):
        fit = _score(pop, evaluate)
        for h in dict.fromkeys(pop):
            if evaluate(h) > best:
                best, best_gen, elite = evaluate(h), gen, h
        if best > 0 and best >= config.fitness_threshold and gen - best_gen >= config.stall_generations:
            break
        total = fit.sum()
        probs = fit / total if total > 0 else None
        parents = rng.choice(len(pop), size=len(pop) - 1, p=probs)
        children = [elite]
        for k in range(0, len(parents), 2):
            a = pop[parents[k]]
            b = pop[parents[k + 1]] if k + 1 < len(parents) else pop[parents[0]]
            if dof > 1 and rng.random() < config.crossover_prob:
                cut = int(rng.integers(1, dof))
                c1, c2 = a[:cut] + b[cut:], b[:cut] + a[cut:]
            else:
                c1, c2 = a, b
            for c in (c1, c2):
                c = list(c)
                for i in range(dof):
                    if rng.random() < config.mutation_prob:
                        c[i] = int(rng.choice(valid))
                children.append(_repair(c, valid, rng))
        pop = children[:config.population_size]
    else:
        gen = config.max_generations
    fit = _score(pop, evaluate)
    if fit.max() <= 0:
        raise NoFullRankPattern(f"no full-rank pattern after {gen} generations")
    order = sorted(range(len(pop)), key=lambda i: (-evaluate(pop[i]), -fit[i], pop[i]))
    log.info("GA stopped after %d generations, best fitness %.3e", gen, fit[order[0]])
    out = []
    for i in order:
        h = pop[i]
        out.append(ActuationPattern(h, fitness=float(fit[i]), det=abs_det(Z_nu[list(h)])))
    return out, gen


# ---------------------------------------------------------------------------
# sensitivity

def _probe_configuration(topology, state, rows, axis, angle, substeps=2):
    """Drive actuator ``axis`` by ``angle`` radians with all other motors locked."""
    e = np.zeros(len(rows))
    e[axis] = 1.0
    h = angle / substeps
    cur = state

    def rate(s):
        return kin.actuated_velocity_map(topology, s, rows, rhs=e, cond_bound=None)

    for _ in range(substeps):
        # explicit midpoint
        k1 = rate(cur)
        mid = kin.displace(cur, k1, 0.5 * h)
        k2 = rate(mid)
        cur = kin.displace(cur, k2, h)
    return kin.project_to_manifold(topology, cur, tol=1e-10, max_iter=30, accept=kin.DEFAULT_DRIFT_TOL)


def det_at(topology, state, rows, method="actuated"):
    """``|det Z_act|`` at ``state`` for an orthonormal null basis.

    ``method="svd"`` builds the dense SVD basis; ``"actuated"`` uses the
    sparse actuated solve ``X = Z_v Z_act^{-1} = Q R`` so that
    ``|det Z_act| = 1 / |det R|``.
    """
    rows = list(rows)
    if method == "svd":
        cs = kin.analyze_constraints(topology, state)
        if cs.dof != len(rows):
            return 0.0
        return abs_det(cs.Z_nu[rows])
    try:
        X = kin.actuated_velocity_map(topology, state, rows, cond_bound=None)
    except SingularActuation:
        return 0.0
    R = np.linalg.qr(X, mode="r")
    return float(1.0 / np.prod(np.abs(np.diag(R))))


def sensitivity(rows, topology, base_state, probe_angle=np.deg2rad(5.0), method="actuated"):
    """Sum over actuators of the squared central difference of ``|det Z_act|``."""
    total = 0.0
    for i in range(len(rows)):
        d = []
        for sgn in (1.0, -1.0):
            probed = _probe_configuration(topology, base_state, rows, i, sgn * probe_angle)
            d.append(det_at(topology, probed, rows, method))
        total += ((d[0] - d[1]) / (2.0 * probe_angle)) ** 2
    return total


def select_pattern(population, topology, base_state, probe_angle=np.deg2rad(5.0), method="actuated",
                   fraction=SELECT_FRACTION):
    """Minimum-sensitivity pattern among the converged full-rank candidates.

    Only candidates within ``fraction`` of the best fitness are scored, so
    stray mutants of the final generation cannot win by being nearly
    singular. Ties go to the higher fitness, then to the smaller rows.
    """
    best = {}
    for p in population:
        if p.fitness > 0 and (p.rows not in best or p.fitness > best[p.rows].fitness):
            best[p.rows] = p
    if not best:
        raise NoFullRankPattern("population holds no full-rank candidate")
    # duplicate penalties are a per-generation device, so compare undiluted scores
    raw = {r: (p.det * reward(r) if p.det > 0 else p.fitness) for r, p in best.items()}
    top = max(raw.values())
    best = {r: p for r, p in best.items() if raw[r] >= fraction * top}
    scored = []
    for rows, p in best.items():
        if p.sensitivity is None:
            try:
                p.sensitivity = sensitivity(rows, topology, base_state, probe_angle, method)
            except (InitFitFailure, SingularActuation) as exc:
                # full actuation is lost inside the probe range: least robust
                log.info("probe failed for %s: %s", rows, exc)
                p.sensitivity = math.inf
        scored.append(p)
    scored.sort(key=lambda p: (p.sensitivity, -p.fitness, p.rows))
    return scored[0]


def place_actuators(topology, state, config=None, probe_angle=np.deg2rad(5.0), sensitivity_top_k=None):
    """GA + sensitivity filter on the configuration ``state``."""
    cs = kin.analyze_constraints(topology, state)
    if cs.dof == 0:
        return ActuationPattern(()), cs, 0
    population, gens = evolve(cs.Z_nu, config)
    if sensitivity_top_k is not None:
        seen, trimmed = set(), []
        for p in population:
            if p.fitness > 0 and p.rows not in seen:
                seen.add(p.rows)
                trimmed.append(p)
            if len(trimmed) >= sensitivity_top_k:
                break
        population = trimmed
    return select_pattern(population, topology, state, probe_angle), cs, gens


def brute_force_best(Z_nu, exclude_rows=()):
    """Exhaustive maximum of ``|det| * f_R`` over every row subset (tiny problems only)."""
    from itertools import combinations
    dof = Z_nu.shape[1]
    valid = [r for r in range(6, Z_nu.shape[0]) if r not in set(exclude_rows)]
    best, arg = 0.0, None
    for h in combinations(valid, dof):
        f = fitness(h, Z_nu)
        if f > best:
            best, arg = f, h
    return best, arg
