"""Seeded random instances shared by unit and acceptance tests."""

import itertools

import numpy as np

from causal_abstraction.abstraction import build_tau, check_aic
from causal_abstraction.clusters import InterClustering
from causal_abstraction.scm import ExogenousBlock, Mechanism, Scm


def random_binary_scm(rng, n_vars=4):
    names = [f"V{i}" for i in range(n_vars)]
    blocks = [ExogenousBlock.bernoulli(f"U{i}", float(rng.uniform(0.1, 0.9))) for i in range(n_vars)]
    shared = ExogenousBlock.bernoulli("W", float(rng.uniform(0.1, 0.9)))
    mechs = []
    for i, v in enumerate(names):
        parents = [names[k] for k in range(i) if rng.random() < 0.6]
        exo = [f"U{i}"] + (["W"] if rng.random() < 0.4 else [])
        table = rng.integers(0, 2, size=(2,) * (len(parents) + len(exo)))
        mechs.append(Mechanism(v, parents, exo, table))
    return Scm({v: (0, 1) for v in names}, blocks + [shared], mechs)


def random_partition(rng, cells, k=None):
    cells = list(cells)
    k = k or int(rng.integers(1, len(cells) + 1))
    labels = rng.integers(0, k, size=len(cells))
    groups = {}
    for c, lbl in zip(cells, labels):
        groups.setdefault(int(lbl), []).append(c)
    return {i: g for i, g in enumerate(groups.values())}


def random_clustering(rng, names):
    """Contiguous topological segments (admissible); the last variable may be excluded."""
    names = list(names)
    if rng.random() < 0.3:
        names = names[:-1]
    cuts = sorted(set(int(c) for c in rng.integers(1, len(names), size=2)))
    bounds = [0] + cuts + [len(names)]
    clusters = [tuple(names[a:b]) for a, b in zip(bounds, bounds[1:]) if b > a]
    return InterClustering({f"C{i}": c for i, c in enumerate(clusters)})


def random_aic_instance(seed):
    """Random (scm, inter, intra) on which the invariance condition holds and some block can split."""
    rng = np.random.default_rng(seed)
    while True:
        scm = random_binary_scm(rng)
        inter = random_clustering(rng, scm.variables)
        intra = {c: random_partition(rng, itertools.product((0, 1), repeat=len(inter.members[c])))
                 for c in inter}
        if not any(len(b) > 1 for blocks in intra.values() for b in blocks.values()):
            continue
        tau = build_tau(inter, intra, scm.domains)
        if check_aic(scm, tau).holds:
            return scm, inter, intra


def refine(rng, intra):
    """Split one non-singleton block in two."""
    out = {c: {k: list(v) for k, v in blocks.items()} for c, blocks in intra.items()}
    candidates = [(c, k) for c, blocks in out.items() for k, v in blocks.items() if len(v) > 1]
    c, k = candidates[int(rng.integers(len(candidates)))]
    block = out[c].pop(k)
    cut = int(rng.integers(1, len(block)))
    order = rng.permutation(len(block))
    labels = max(out[c], default=-1) + 1
    out[c][k] = [block[i] for i in order[:cut]]
    out[c][labels if labels != k else labels + 1] = [block[i] for i in order[cut:]]
    return out


def refinement_trials(n=50, seed=0):
    """Literal refinement check: list of (instance seed, holds after refinement)."""
    from causal_abstraction.abstraction import build_tau, check_aic
    results = []
    for i in range(n):
        scm, inter, intra = random_aic_instance(seed * 1000 + i)
        finer = refine(np.random.default_rng(seed * 1000 + i), intra)
        results.append((i, check_aic(scm, build_tau(inter, finer, scm.domains)).holds))
    return results
