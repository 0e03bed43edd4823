import numpy as np
import pytest

from gridsplit.grid_model import PRESETS, build_node_breaker, generate_grid, perturb_instance
from gridsplit.topo import BusBranchGraph


@pytest.fixture(scope="session")
def tiny():
    return build_node_breaker(generate_grid(PRESETS["tiny"], 3))


@pytest.fixture(scope="session")
def desk():
    """The 50-breaker grid of the generator's documented example (seed 7)."""
    return build_node_breaker(generate_grid(PRESETS["desk50"], 7))


@pytest.fixture(scope="session")
def desk_inst(desk):
    return perturb_instance(desk, 11)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def bus_branch(branches, reactance, limit=None):
    """Hand-made bus-branch graph: one busbar per bus, one substation per bus."""
    branches = np.asarray(branches, dtype=int)
    n = int(branches.max()) + 1
    L = len(branches)
    return BusBranchGraph(
        busbar_bus=np.arange(n), bus_sub=np.arange(n), bus_gen=np.zeros(n), bus_load=np.zeros(n),
        branches=branches, reactance=np.asarray(reactance, float),
        limit=np.full(L, 1e9) if limit is None else np.asarray(limit, float),
        components=np.ones(n, dtype=int), bus_zone=np.ones(n, dtype=int),
    )


def hand_grid(neighbors, zone, gen, load, reactance=0.05, limit=1e4):
    """Grid spec with a double line per adjacency; scalar or per-adjacency X and limits."""
    from gridsplit.grid_model import GridSpec, Line

    lines = []
    edges = sorted({tuple(sorted((s, t))) for s, nb in enumerate(neighbors) for t in nb})
    for e, (a, b) in enumerate(edges):
        x = reactance[e] if np.ndim(reactance) else reactance
        f = limit[e] if np.ndim(limit) else limit
        lines += [Line(a, b, float(x), float(f), 0), Line(a, b, float(x), float(f), 1)]
    spec = GridSpec(len(neighbors), list(zone), [list(nb) for nb in neighbors],
                    [float(g) for g in gen], [float(d) for d in load], lines, seed=0)
    return build_node_breaker(spec)


@pytest.fixture
def triangle():
    """Three two-busbar substations; 100 MW export from substation 0 to loads 80/40."""
    return hand_grid([[1, 2], [0, 2], [0, 1]], [1, 2, 2], [100, 0, 0], [0, 80, 40])


@pytest.fixture(scope="session")
def k4():
    """Four ring substations (degree 3, six busbars and six breakers each)."""
    return hand_grid([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]], [1, 1, 2, 2],
                     [60, 40, 0, 10], [5, 5, 50, 40])


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
