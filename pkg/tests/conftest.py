import itertools

import numpy as np
import pytest

from causal_abstraction.scm import ExogenousBlock, Mechanism, Scm


def random_scm(seed: int, n_vars: int = 3, n_exo: int = 3, domain: int = 2, confounded: bool = True) -> Scm:
    """Random recursive SCM over ``V0..`` with random tables and shared blocks."""
    rng = np.random.default_rng(seed)
    names = [f"V{i}" for i in range(n_vars)]
    blocks = []
    for j in range(n_exo):
        size = int(rng.integers(2, 4))
        p = rng.dirichlet(np.ones(size))
        p[-1] = 1.0 - p[:-1].sum()
        blocks.append(ExogenousBlock(f"U{j}", tuple(range(size)), tuple(p)))
    mechs = []
    for i, v in enumerate(names):
        parents = [names[k] for k in range(i) if rng.random() < 0.6]
        if confounded:
            exo = [b.name for b in blocks if rng.random() < 0.5] or [blocks[i % n_exo].name]
        else:
            exo = [blocks[i].name]
        shape = (domain,) * len(parents) + tuple(len(blocks[int(u[1:])].domain) for u in exo)
        table = rng.integers(0, domain, size=shape)
        mechs.append(Mechanism(v, parents, exo, table))
    return Scm({v: tuple(range(domain)) for v in names}, blocks, mechs)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def all_assignments(domains: dict, variables):
    for combo in itertools.product(*(domains[v] for v in variables)):
        yield dict(zip(variables, combo))
