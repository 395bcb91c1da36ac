import numpy as np
import pytest

from lkge_bench.builder import BuilderConfig, build_growth_dataset
from lkge_bench.synthetic import generate_kg, snowball_subsample


@pytest.fixture(scope="session")
def small_kg():
    """A connected ~600-fact translational KG with handles 0..n-1."""
    facts = generate_kg(num_entities=300, num_types=6, num_relations=20, num_facts=1200, seed=3)
    facts = snowball_subsample(facts, 600, seed=3)
    return relabel(facts)


def relabel(facts):
    _, ent = np.unique(facts[:, [0, 2]], return_inverse=True)
    _, rel = np.unique(facts[:, 1], return_inverse=True)
    ent = ent.reshape(-1, 2)
    return np.stack([ent[:, 0], rel.ravel(), ent[:, 1]], axis=1).astype(np.int64)


@pytest.fixture(scope="session")
def small_dataset(small_kg):
    ne = int(small_kg[:, [0, 2]].max()) + 1
    nr = int(small_kg[:, 1].max()) + 1
    return build_growth_dataset(small_kg, ne, nr, BuilderConfig("fact", seed=1))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
