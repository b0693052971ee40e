import numpy as np
import pytest

from morphmesh import kinematics as kin
from morphmesh import shape as shp


def paraboloid_mesh(n, m, height=0.06, fixed_nodes=None):
    sx = 2 * 0.025 * max(m - 1, 1)
    sy = 2 * 0.025 * max(n - 1, 1)
    surf = shp.builtin("paraboloid", amplitude=height, sx=sx, sy=sy)
    return kin.build_mesh(n, m, initial_surface=surf, fixed_nodes=fixed_nodes)


@pytest.fixture(scope="session")
def mesh3():
    return paraboloid_mesh(3, 3)


@pytest.fixture(scope="session")
def mesh4x8():
    surf = shp.builtin("cylinder", amplitude=0.1, sx=1.0, sy=0.1, y0=0.075, anchor=(0.0, 0.0))
    return kin.build_mesh(4, 8, initial_surface=surf, fixed_nodes=[(1, 1), (1, 2), (1, 3), (1, 4)])


@pytest.fixture(scope="session")
def pattern3(mesh3):
    """A full-rank one-motor-per-joint pattern on the 3x3 paraboloid."""
    from morphmesh import placement
    topo, state = mesh3
    cs = kin.analyze_constraints(topo, state)
    pop, _ = placement.evolve(cs.Z_nu, placement.GAConfig(rng_seed=0, max_generations=2000,
                                                           stall_generations=300))
    return pop[0].rows


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
