"""Constructive abstractions: clusterings, tau, invariance checks and model construction."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

import networkx as nx
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .clusters import InterClustering
from .graphs import CausalDiagram, check_admissible, induce_cdag, latent_project
from .pmf import Pmf, UndefinedConditionalError, value_index
from .query import CtfQuery, Term
from .scm import (DEFAULT_BUDGET, BudgetExceededError, ExogenousBlock, Mechanism, Scm,
                  ctf_prob, induced_diagram)

__all__ = [
    "InterClustering",
    "IntraClustering",
    "ConstructiveTau",
    "AicWitness",
    "AicReport",
    "AicViolationError",
    "MisalignedQueryError",
    "LoweredQuery",
    "build_tau",
    "apply_tau",
    "lift_query",
    "lower_query",
    "check_aic",
    "recheck_witness",
    "check_data_aic",
    "interventional_family",
    "construct_abstraction",
    "check_q_tau_consistency",
    "q_tau_values",
    "layer_tau_discrepancy",
    "check_layer_tau_consistency",
    "orbit_intra_clustering",
    "pushforward",
]


class MisalignedQueryError(ValueError):
    """A query term is not a union of clusters."""


class AicViolationError(ValueError):
    """Raised by :func:`construct_abstraction` when the invariance condition fails."""

    def __init__(self, report: "AicReport"):
        super().__init__(f"abstract invariance condition violated: {report.witness}")
        self.report = report


class IntraClustering:
    """Per-cluster partition of the joint cluster domain into labelled blocks.

    ``blocks`` maps cluster name to ``{label: [value tuple, ...]}``; tuples
    follow the cluster's member order.
    """

    def __init__(self, blocks: Mapping[str, Mapping[Any, Iterable[Sequence[Any]]]]):
        self.blocks = {}
        for cluster, table in blocks.items():
            seen = set()
            entries = []
            for label, values in table.items():
                vals = tuple(tuple(v) for v in values)
                if not vals:
                    raise ValueError(f"empty block {label!r} in cluster {cluster!r}")
                if seen & set(vals) or len(set(vals)) != len(vals):
                    raise ValueError(f"blocks of {cluster!r} overlap")
                seen |= set(vals)
                entries.append((label, vals))
            labels = [lbl for lbl, _ in entries]
            if len(set(map(str, labels))) != len(labels):
                raise ValueError(f"duplicate block labels in {cluster!r}")
            self.blocks[str(cluster)] = tuple(entries)

    @classmethod
    def singletons(cls, inter: InterClustering, domains: Mapping[str, Sequence[Any]]) -> "IntraClustering":
        """Every joint value in its own block.

        Labels are the value itself for one-variable clusters and the values
        joined by ``_`` otherwise.
        """
        out = {}
        for c in inter:
            members = inter.members[c]
            cells = itertools.product(*(domains[v] for v in members))
            out[c] = {(cell[0] if len(members) == 1 else "_".join(map(str, cell))): [cell]
                      for cell in cells}
        return cls(out)

    def labels(self, cluster: str) -> tuple:
        return tuple(lbl for lbl, _ in self.blocks[cluster])

    def to_dict(self) -> list:
        return [{"cluster": c, "blocks": [{"label": lbl, "values": [list(v) for v in vals]}
                                          for lbl, vals in entries]}
                for c, entries in self.blocks.items()]

    def __eq__(self, other):
        if not isinstance(other, IntraClustering) or set(self.blocks) != set(other.blocks):
            return False
        def norm(entries):
            return {frozenset(vals) for _, vals in entries}
        return all(norm(self.blocks[c]) == norm(other.blocks[c]) for c in self.blocks)

    def __repr__(self):
        return f"IntraClustering({ {c: len(b) for c, b in self.blocks.items()} })"


def _as_intra(intra) -> IntraClustering:
    return intra if isinstance(intra, IntraClustering) else IntraClustering(intra)


def _as_inter(inter) -> InterClustering:
    return inter if isinstance(inter, InterClustering) else InterClustering(inter)


class ConstructiveTau(TransformerMixin, BaseEstimator):
    """Map low-level assignments to high-level ones, cluster by cluster.

    Parameters
    ----------
    inter : InterClustering or mapping name -> members
    intra : IntraClustering or mapping name -> {label: [value tuples]}
    domains : optional mapping variable -> domain, used to verify that the
        blocks cover each cluster's full product domain. Without it the
        per-variable domains are read off the blocks.

    ``transform`` takes rows whose columns follow ``low_variables_`` (or a
    DataFrame with those columns) and returns one column per cluster.
    """

    def __init__(self, inter=None, intra=None, domains=None):
        self.inter = inter
        self.intra = intra
        self.domains = domains

    def fit(self, X=None, y=None):
        inter = _as_inter(self.inter)
        intra = _as_intra(self.intra)
        if set(intra.blocks) != set(inter.names):
            raise ValueError("intra clustering must cover exactly the inter clusters")
        low_domains = {}
        lookup = {}
        for c in inter:
            members = inter.members[c]
            cells = [v for _, vals in intra.blocks[c] for v in vals]
            for cell in cells:
                if len(cell) != len(members):
                    raise ValueError(f"value {cell} has wrong arity for cluster {c}")
            for k, v in enumerate(members):
                if self.domains is not None:
                    low_domains[v] = tuple(self.domains[v])
                else:
                    low_domains[v] = tuple(sorted({cell[k] for cell in cells}, key=_sort_key))
            product = set(itertools.product(*(low_domains[v] for v in members)))
            covered = set(cells)
            if covered != product:
                missing = sorted(product - covered, key=_sort_key)[:3]
                extra = sorted(covered - product, key=_sort_key)[:3]
                raise ValueError(f"blocks of {c} do not partition its domain "
                                 f"(missing {missing}, unknown {extra})")
            lookup[c] = {cell: lbl for lbl, vals in intra.blocks[c] for cell in vals}
        self.inter_ = inter
        self.intra_ = intra
        self.low_domains_ = low_domains
        self.low_variables_ = inter.variables
        self.high_variables_ = inter.names
        self.high_domains_ = {c: intra.labels(c) for c in inter}
        self.lookup_ = lookup
        self._pos_lookup = {
            c: {tuple(value_index(low_domains[v], x) for v, x in zip(inter.members[c], cell)):
                intra.labels(c).index(lbl)
                for cell, lbl in lookup[c].items()}
            for c in inter
        }
        return self

    # element-wise ---------------------------------------------------------
    def map_cluster(self, cluster: str, values: Sequence[Any]) -> Any:
        check_is_fitted(self, "lookup_")
        key = tuple(values)
        try:
            return self.lookup_[cluster][key]
        except KeyError:
            norm = tuple(self.low_domains_[v][value_index(self.low_domains_[v], x)]
                         for v, x in zip(self.inter_.members[cluster], key))
            return self.lookup_[cluster][norm]

    def map_positions(self, cluster: str, positions: Sequence[int]) -> int:
        """Block position of a tuple of low value positions."""
        return self._pos_lookup[cluster][tuple(positions)]

    def preimage(self, cluster: str, label: Any) -> tuple:
        """Low tuples mapped to ``label``, in lexicographic domain order."""
        check_is_fitted(self, "lookup_")
        labels = self.high_domains_[cluster]
        idx = value_index(labels, label)
        vals = dict(self.intra_.blocks[cluster])[labels[idx]]
        members = self.inter_.members[cluster]
        return tuple(sorted(vals, key=lambda cell: tuple(
            value_index(self.low_domains_[v], x) for v, x in zip(members, cell))))

    def apply(self, assignment: Mapping[str, Any]) -> dict:
        check_is_fitted(self, "lookup_")
        names = self.inter_.covering(assignment.keys())
        if names is None:
            raise MisalignedQueryError(f"{sorted(assignment)} is not a union of clusters")
        return {c: self.map_cluster(c, [assignment[v] for v in self.inter_.members[c]])
                for c in names}

    # array API ------------------------------------------------------------
    def transform(self, X):
        check_is_fitted(self, "lookup_")
        cols = list(self.low_variables_)
        if hasattr(X, "columns"):
            rows = X[cols].to_numpy(dtype=object)
        else:
            rows = np.asarray(X, dtype=object)
            if rows.ndim != 2 or rows.shape[1] != len(cols):
                raise ValueError(f"expected rows with {len(cols)} columns in order {cols}")
        out = np.empty((rows.shape[0], len(self.high_variables_)), dtype=object)
        for j, c in enumerate(self.high_variables_):
            ix = [cols.index(v) for v in self.inter_.members[c]]
            for i, row in enumerate(rows):
                out[i, j] = self.map_cluster(c, [row[k] for k in ix])
        return out

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "lookup_")
        return np.asarray(self.high_variables_, dtype=object)

    def pushforward(self, pmf: Pmf) -> Pmf:
        return pushforward(self, pmf)


def _sort_key(x):
    return (0, x) if isinstance(x, (int, float)) else (1, str(x))


def build_tau(inter, intra, domains=None) -> ConstructiveTau:
    return ConstructiveTau(inter, intra, domains).fit()


def apply_tau(tau: ConstructiveTau, v_low: Mapping[str, Any]) -> dict:
    return tau.apply(v_low)


def pushforward(tau: ConstructiveTau, pmf: Pmf, clusters: Sequence[str] | None = None) -> Pmf:
    """Image of ``pmf`` under tau over ``clusters`` (default: all clusters present)."""
    check_is_fitted(tau, "lookup_")
    if clusters is None:
        clusters = [c for c in tau.high_variables_
                    if set(tau.inter_.members[c]) <= set(pmf.variables)]
    members = [v for c in clusters for v in tau.inter_.members[c]]
    low = pmf.marginal(members)
    shape = tuple(len(tau.high_domains_[c]) for c in clusters)
    out = np.zeros(shape)
    for idx in np.argwhere(low.probs > 0):
        pos = iter(idx)
        hi = []
        for c in clusters:
            n = len(tau.inter_.members[c])
            cell_pos = [next(pos) for _ in range(n)]
            cell = tuple(low.domain_of(v)[p] for v, p in zip(tau.inter_.members[c], cell_pos))
            hi.append(value_index(tau.high_domains_[c], tau.map_cluster(c, cell)))
        out[tuple(hi)] += low.probs[tuple(idx)]
    return Pmf(clusters, [tau.high_domains_[c] for c in clusters], out)


# --------------------------------------------------------------------------
# queries across tau
# --------------------------------------------------------------------------

def _group_worlds(terms: Sequence[Term]) -> dict:
    worlds: dict = {}
    for t in terms:
        entry = worlds.setdefault(t.world, {"x": dict(t.intervention), "y": {}})
        for k, v in t.outcome:
            if k in entry["y"] and entry["y"][k] != v:
                entry["y"][k] = _Conflict()
            else:
                entry["y"][k] = v
    return worlds


class _Conflict:
    """Marker for a variable asked to take two values in one world."""


def _lift_terms(tau: ConstructiveTau, terms: Sequence[Term]) -> tuple:
    out = []
    for key, world in _group_worlds(terms).items():
        x = world["x"]
        xs = tau.inter_.covering(x) if x else ()
        ys = tau.inter_.covering(world["y"])
        if xs is None or ys is None:
            raise MisalignedQueryError(
                f"term set {sorted(world['y'])} under do({sorted(x)}) is not a union of clusters")
        if any(isinstance(v, _Conflict) for v in world["y"].values()):
            raise ValueError("a variable takes two values in one world")
        x_h = tuple(tau.apply(x).items()) if x else ()
        for c, v in tau.apply(world["y"]).items():
            out.append(Term(((c, v),), x_h))
    return tuple(out)


def lift_query(tau: ConstructiveTau, q_low: CtfQuery) -> CtfQuery:
    """Apply tau to every term; conditioning terms are lifted on their own."""
    check_is_fitted(tau, "lookup_")
    return CtfQuery(_lift_terms(tau, q_low.terms), _lift_terms(tau, q_low.given))


@dataclass
class LoweredQuery:
    """Preimage description of a high-level query.

    ``worlds`` lists, per high world, the candidate low interventions and the
    low outcome assignments whose tau-image is the requested high event.
    """

    high: CtfQuery
    worlds: list
    given_worlds: list

    def low_value(self, scm: Scm, choice: Callable[[list], Mapping] | None = None) -> float:
        """Sum of low probabilities over outcome preimages.

        ``choice`` picks one low intervention per world from its candidates;
        the default takes the lexicographically first one.
        """
        pick = choice or (lambda cands: cands[0])

        def total(worlds):
            if not worlds:
                return 1.0
            xs = [pick(w["interventions"]) for w in worlds]
            acc = 0.0
            for combo in itertools.product(*(w["outcomes"] for w in worlds)):
                terms = []
                for x, y in zip(xs, combo):
                    terms.append(Term(tuple(y.items()), tuple(x.items())))
                acc += ctf_prob(scm, CtfQuery(tuple(terms)))
            return acc

        if not self.given_worlds:
            return total(self.worlds)
        den = total(self.given_worlds)
        if den <= 0:
            raise UndefinedConditionalError("lowered conditioning event has probability zero")
        return total(self.worlds + self.given_worlds) / den

    def representatives(self) -> Iterable[CtfQuery]:
        """Every concrete low query in the preimage (one intervention choice per world)."""
        def expand(worlds):
            per_world = []
            for w in worlds:
                per_world.append([Term(tuple(y.items()), tuple(x.items()))
                                  for x in w["interventions"] for y in w["outcomes"]])
            return itertools.product(*per_world)

        for terms in expand(self.worlds):
            if not self.given_worlds:
                yield CtfQuery(tuple(terms))
                continue
            for given in expand(self.given_worlds):
                yield CtfQuery(tuple(terms), tuple(given))


def _lower_terms(tau: ConstructiveTau, terms: Sequence[Term]) -> list:
    worlds = []
    for key, world in _group_worlds(terms).items():
        def cells(assign):
            per = []
            for c, label in assign.items():
                if c not in tau.inter_.names:
                    raise MisalignedQueryError(f"{c!r} is not a high-level variable")
                members = tau.inter_.members[c]
                per.append([dict(zip(members, cell)) for cell in tau.preimage(c, label)])
            return [dict(kv for d in combo for kv in d.items()) for combo in itertools.product(*per)]

        worlds.append({"interventions": cells(world["x"]) if world["x"] else [{}],
                       "outcomes": cells(world["y"])})
    return worlds


def lower_query(tau: ConstructiveTau, q_high: CtfQuery) -> LoweredQuery:
    check_is_fitted(tau, "lookup_")
    return LoweredQuery(q_high, _lower_terms(tau, q_high.terms), _lower_terms(tau, q_high.given))


# --------------------------------------------------------------------------
# invariance
# --------------------------------------------------------------------------

@dataclass
class AicWitness:
    cluster: str
    v1: dict
    v2: dict
    u: dict
    image1: Any
    image2: Any

    def to_dict(self) -> dict:
        return {"cluster": self.cluster, "v1": self.v1, "v2": self.v2, "u": self.u,
                "image1": self.image1, "image2": self.image2}


@dataclass
class AicReport:
    holds: bool
    witness: AicWitness | None = None
    mode: str = "full"

    def to_dict(self) -> dict:
        return {"holds": self.holds, "mode": self.mode,
                "witness": None if self.witness is None else self.witness.to_dict()}


def _high_structure(scm: Scm, tau: ConstructiveTau):
    diagram = induced_diagram(scm)
    inter = tau.inter_
    if not check_admissible(inter, diagram):
        raise ValueError(f"{inter} is not admissible for this model")
    cdag = induce_cdag(diagram, inter)
    hidden = set(scm.variables) - set(inter.variables)
    exo = {}
    for c in inter:
        reach = set(inter.members[c])
        stack = list(reach)
        while stack:
            w = stack.pop()
            for p in scm.parents(w):
                if p in hidden and p not in reach:
                    reach.add(p)
                    stack.append(p)
        used = []
        for v in scm.variables:
            if v in reach:
                for u in scm.mechanisms[v].exo_parents:
                    if u not in used:
                        used.append(u)
        exo[c] = tuple(u for u in scm.exogenous if u in used)
    return cdag, exo


def _cluster_cells(tau: ConstructiveTau, clusters: Sequence[str]):
    """All joint position tuples over ``clusters`` in lexicographic order."""
    spaces = [itertools.product(*(range(len(tau.low_domains_[v])) for v in tau.inter_.members[c]))
              for c in clusters]
    return [tuple(combo) for combo in itertools.product(*(list(s) for s in spaces))]


def _cluster_image(scm: Scm, tau: ConstructiveTau, cluster: str, sol: Mapping[str, np.ndarray]) -> np.ndarray:
    members = tau.inter_.members[cluster]
    table = tau._pos_lookup[cluster]
    shape = tuple(len(tau.low_domains_[v]) for v in members)
    dense = np.empty(shape, dtype=np.int64)
    for key, lbl in table.items():
        dense[key] = lbl
    return dense[tuple(sol[v] for v in members)]


def _check_tau_domains(scm: Scm, tau: ConstructiveTau):
    for v in tau.low_variables_:
        if v not in scm.domains:
            raise KeyError(f"clustered variable {v!r} not in the model")
        if tuple(scm.domains[v]) != tuple(tau.low_domains_[v]):
            if set(map(str, scm.domains[v])) != set(map(str, tau.low_domains_[v])):
                raise ValueError(f"tau and model disagree on the domain of {v!r}")
            raise ValueError(f"tau orders the domain of {v!r} differently from the model; "
                             f"pass domains= when building tau")


def check_aic(scm: Scm, tau: ConstructiveTau, budget: int = DEFAULT_BUDGET) -> AicReport:
    """Exhaustive check of the abstract invariance condition.

    For every cluster ``C`` the model is solved at every exogenous assignment
    with all other clusters intervened; the image ``tau_C`` must not change
    across assignments to the other clusters that share a tau-image. Only
    C-DAG parents of ``C`` can influence it, so only their values are varied;
    the rest sit at their first domain value in a witness.
    """
    check_is_fitted(tau, "lookup_")
    _check_tau_domains(scm, tau)
    cdag, _ = _high_structure(scm, tau)
    grid, _ = scm.unit_grid(budget)
    n_u = scm.exogenous_size
    for c in tau.inter_:
        parents = list(cdag.parents(c))
        others = [d for d in tau.inter_ if d != c]
        rest = [d for d in others if d not in parents]
        cells = _cluster_cells(tau, parents)
        if len(cells) * n_u > budget:
            raise BudgetExceededError(f"AIC check for {c} exceeds budget {budget}")
        base = {v: 0 for d in rest for v in tau.inter_.members[d]}
        groups: dict = {}
        images = []
        for cell in cells:
            pos = dict(base)
            key = []
            for d, sub in zip(parents, cell):
                pos.update(zip(tau.inter_.members[d], sub))
                key.append(tau.map_positions(d, sub))
            sol = scm.solve(grid, pos, n_u)
            images.append(_cluster_image(scm, tau, c, sol))
            groups.setdefault(tuple(key), []).append(len(images) - 1)
        for i, cell in enumerate(cells):
            key = tuple(tau.map_positions(d, sub) for d, sub in zip(parents, cell))
            for j in groups[key]:
                if j <= i:
                    continue
                diff = np.nonzero(images[i] != images[j])[0]
                if diff.size:
                    k = int(diff[0])
                    labels = tau.high_domains_[c]
                    fill = _cell_values(tau, rest, [(0,) * len(tau.inter_.members[d]) for d in rest])
                    w1 = {**fill, **_cell_values(tau, parents, cell)}
                    w2 = {**fill, **_cell_values(tau, parents, cells[j])}
                    order = [v for d in others for v in tau.inter_.members[d]]
                    return AicReport(False, AicWitness(
                        c, {v: w1[v] for v in order}, {v: w2[v] for v in order},
                        {u: scm.exogenous[u].domain[int(grid[u][k])] for u in scm.exogenous},
                        labels[int(images[i][k])], labels[int(images[j][k])]))
    return AicReport(True)


def _cell_values(tau, clusters, cell) -> dict:
    out = {}
    for d, sub in zip(clusters, cell):
        for v, p in zip(tau.inter_.members[d], sub):
            out[v] = tau.low_domains_[v][p]
    return out


def recheck_witness(scm: Scm, tau: ConstructiveTau, witness: AicWitness) -> bool:
    """True iff the witness is a genuine violation."""
    from .scm import evaluate_unit

    v1_h, v2_h = tau.apply(witness.v1), tau.apply(witness.v2)
    if v1_h != v2_h or witness.v1 == witness.v2:
        return False
    others = [d for d in tau.inter_ if d != witness.cluster]
    fill = {v: tau.low_domains_[v][0] for d in others for v in tau.inter_.members[d]}
    members = tau.inter_.members[witness.cluster]
    r1 = evaluate_unit(scm, witness.u, {**fill, **witness.v1})
    r2 = evaluate_unit(scm, witness.u, {**fill, **witness.v2})
    i1 = tau.map_cluster(witness.cluster, [r1[v] for v in members])
    i2 = tau.map_cluster(witness.cluster, [r2[v] for v in members])
    return i1 != i2


def _subsets(names: Sequence[str]):
    for k in range(1, len(names)):
        yield from itertools.combinations(names, k)


def interventional_family(scm: Scm, tau: ConstructiveTau) -> dict:
    """``{intervention: P(V_L[x])}`` for every proper union-of-clusters intervention."""
    check_is_fitted(tau, "lookup_")
    from .scm import layer_pmf

    family = {frozenset(): layer_pmf(scm, {}, tau.low_variables_)}
    for xs in _subsets(tau.inter_.names):
        members = [v for c in xs for v in tau.inter_.members[c]]
        for cell in itertools.product(*(scm.domains[v] for v in members)):
            x = dict(zip(members, cell))
            family[frozenset(x.items())] = layer_pmf(scm, x, tau.low_variables_)
    return family


def check_data_aic(dists, tau: ConstructiveTau, mode: str = "conditional", tol: float = 1e-9) -> AicReport:
    """Distribution-level invariance.

    ``conditional`` takes the observational pmf (or a family holding it under
    the empty intervention) and compares ``P(tau(V) | x1)`` with
    ``P(tau(V) | x2)``. ``interventional`` takes ``{frozenset(x.items()): pmf}``
    and compares ``P(tau(V[x1]))`` with ``P(tau(V[x2]))``. In both cases
    ``x1 != x2`` range over union-of-clusters assignments with equal images.
    Conditioning values of probability zero are skipped.
    """
    check_is_fitted(tau, "lookup_")
    if mode not in ("conditional", "interventional"):
        raise ValueError("mode must be 'conditional' or 'interventional'")
    if mode == "conditional":
        obs = dists.get(frozenset()) if isinstance(dists, Mapping) else dists
        if obs is None:
            raise KeyError("conditional mode needs the observational pmf")
    names = tau.inter_.names
    for xs in _subsets(names):
        rest = [c for c in names if c not in xs]
        members = [v for c in xs for v in tau.inter_.members[c]]
        cells = list(itertools.product(*(tau.low_domains_[v] for v in members)))
        by_image: dict = {}
        for cell in cells:
            x = dict(zip(members, cell))
            by_image.setdefault(tuple(tau.apply(x).items()), []).append(x)
        for image, xlist in by_image.items():
            if len(xlist) < 2:
                continue
            dist_cache = []
            for x in xlist:
                if mode == "conditional":
                    if obs.prob(x) <= 0:
                        dist_cache.append(None)
                        continue
                    cond = _condition(obs, x)
                    dist_cache.append(pushforward(tau, cond, rest).probs)
                else:
                    key = frozenset(x.items())
                    if key not in dists:
                        raise KeyError(f"missing interventional distribution for do({x})")
                    dist_cache.append(pushforward(tau, dists[key], rest).probs)
            for i, j in itertools.combinations(range(len(xlist)), 2):
                a, b = dist_cache[i], dist_cache[j]
                if a is None or b is None:
                    continue
                if not np.allclose(a, b, atol=tol, rtol=0):
                    k = np.unravel_index(int(np.argmax(np.abs(a - b))), a.shape)
                    v_h = {c: tau.high_domains_[c][p] for c, p in zip(rest, k)}
                    return AicReport(False, AicWitness(",".join(rest), xlist[i], xlist[j], {},
                                                       (v_h, float(a[k])), (v_h, float(b[k]))),
                                     mode)
    return AicReport(True, None, mode)


def _condition(pmf: Pmf, x: Mapping[str, Any]) -> Pmf:
    idx = tuple(value_index(d, x[v]) if v in x else slice(None)
                for v, d in zip(pmf.variables, pmf.domains))
    mask = np.zeros_like(pmf.probs)
    mask[idx] = pmf.probs[idx]
    return Pmf(pmf.variables, pmf.domains, mask / mask.sum())


# --------------------------------------------------------------------------
# construction
# --------------------------------------------------------------------------

def construct_abstraction(scm: Scm, inter, intra, *, check: bool = True,
                          budget: int = DEFAULT_BUDGET) -> tuple[ConstructiveTau, Scm]:
    """Build the high-level model whose mechanisms are tau composed with the low ones.

    The high exogenous space equals the low one. The mechanism of cluster
    ``C`` evaluates the low model with the other clusters set to the
    lexicographically first preimage of the high parent values, then
    applies ``tau_C``.
    """
    tau = inter if isinstance(inter, ConstructiveTau) else \
        ConstructiveTau(inter, intra, domains=scm.domains).fit()
    _check_tau_domains(scm, tau)
    if check:
        report = check_aic(scm, tau, budget)
        if not report.holds:
            raise AicViolationError(report)
    cdag, exo = _high_structure(scm, tau)
    grid, _ = scm.unit_grid(budget)
    blocks = list(scm.exogenous)
    sizes = [len(scm.exogenous[b].domain) for b in blocks]
    n_u = scm.exogenous_size
    mechanisms = []
    for c in tau.inter_:
        parents = cdag.parents(c)
        rest = [d for d in tau.inter_ if d != c and d not in parents]
        base = {v: 0 for d in rest for v in tau.inter_.members[d]}
        shape = tuple(len(tau.high_domains_[p]) for p in parents) + \
            tuple(len(scm.exogenous[u].domain) for u in exo[c])
        table = np.full(shape, -1, dtype=np.int64)
        sub_idx = tuple(grid[u] for u in exo[c])
        for hi in itertools.product(*(range(len(tau.high_domains_[p])) for p in parents)):
            pos = dict(base)
            for p, h in zip(parents, hi):
                cell = tau.preimage(p, tau.high_domains_[p][h])[0]
                pos.update({v: value_index(tau.low_domains_[v], x)
                            for v, x in zip(tau.inter_.members[p], cell)})
            img = _cluster_image(scm, tau, c, scm.solve(grid, pos, n_u))
            target = table[hi]
            # every unit writes into its exogenous-parent cell; disagreement means
            # the image depends on blocks outside exo[c] (cannot happen)
            flat = np.ravel_multi_index(sub_idx, target.shape) if sub_idx else np.zeros(n_u, int)
            view = target.reshape(-1)
            view[flat] = img
            if not np.array_equal(view[flat], img):  # pragma: no cover
                raise RuntimeError(f"high mechanism for {c} is not a function of its parents")
            table[hi] = view.reshape(target.shape)
        mechanisms.append(Mechanism(c, tuple(parents), exo[c], table))
    high = Scm({c: tau.high_domains_[c] for c in tau.inter_},
               [scm.exogenous[b] for b in blocks], mechanisms)
    return tau, high


# --------------------------------------------------------------------------
# consistency
# --------------------------------------------------------------------------

def check_q_tau_consistency(m_low: Scm, m_high: Scm, tau: ConstructiveTau, q_low: CtfQuery,
                            tol: float = 1e-9) -> bool:
    """Compare the preimage-summed low value of ``q_low`` with its lift on ``m_high``."""
    low, high = q_tau_values(m_low, m_high, tau, q_low)
    return abs(low - high) <= tol


def q_tau_values(m_low: Scm, m_high: Scm, tau: ConstructiveTau, q_low: CtfQuery) -> tuple:
    """``(low preimage sum, high lifted value)`` for a cluster-aligned query."""
    q_high = lift_query(tau, q_low)
    lowered = lower_query(tau, q_high)
    # keep the low interventions of q_low itself
    chosen = {frozenset(t.intervention) for t in q_low.terms + q_low.given}

    def pick(cands):
        for c in cands:
            if frozenset(c.items()) in chosen:
                return c
        return cands[0]

    return lowered.low_value(m_low, pick), ctf_prob(m_high, q_high)


def _world_joint(scm: Scm, worlds: Sequence[Mapping[str, int]], over: Sequence[Sequence[str]],
                 budget: int) -> np.ndarray:
    grid, weights = scm.unit_grid(budget)
    n = len(weights)
    cols, shape = [], []
    for pos, vs in zip(worlds, over):
        sol = scm.solve(grid, pos, n)
        for v in vs:
            cols.append(sol[v])
            shape.append(len(scm.domains[v]))
    if not cols:
        return np.array(weights.sum())
    flat = np.ravel_multi_index(tuple(cols), tuple(shape))
    return np.bincount(flat, weights=weights, minlength=int(np.prod(shape))).reshape(shape)


def _high_image(tau: ConstructiveTau, joint: np.ndarray, world_clusters) -> np.ndarray:
    """Push a multi-world low joint (position axes) through tau per cluster."""
    shape = [len(tau.high_domains_[c]) for cs in world_clusters for c in cs]
    out = np.zeros(shape)
    for idx in np.argwhere(joint > 0):
        it = iter(idx)
        hi = []
        for cs in world_clusters:
            for c in cs:
                sub = tuple(next(it) for _ in tau.inter_.members[c])
                hi.append(tau.map_positions(c, sub))
        out[tuple(hi)] += joint[tuple(idx)]
    return out


def _interventions(tau: ConstructiveTau, scm: Scm, layer: int):
    yield (), {}
    if layer == 1:
        return
    names = tau.inter_.names
    for xs in _subsets(names):
        members = [v for c in xs for v in tau.inter_.members[c]]
        for cell in itertools.product(*(range(len(scm.domains[v])) for v in members)):
            yield xs, dict(zip(members, cell))


def check_layer_tau_consistency(m_low: Scm, m_high: Scm, tau: ConstructiveTau, layer: int,
                                tol: float = 1e-9, max_worlds: int = 2,
                                budget: int = DEFAULT_BUDGET) -> bool:
    """Exhaustive layer check over cluster-aligned events.

    Layers 1 and 2 compare the full pushforward joint of the non-intervened
    clusters for every union-of-clusters intervention (every event is a sum of
    its cells). Layer 3 compares the joint across every combination of up to
    ``max_worlds`` interventions.
    """
    return layer_tau_discrepancy(m_low, m_high, tau, layer, max_worlds, budget) <= tol


def layer_tau_discrepancy(m_low: Scm, m_high: Scm, tau: ConstructiveTau, layer: int,
                          max_worlds: int = 2, budget: int = DEFAULT_BUDGET) -> float:
    """Largest absolute gap found by :func:`check_layer_tau_consistency`."""
    if layer not in (1, 2, 3):
        raise ValueError("layer must be 1, 2 or 3")
    check_is_fitted(tau, "lookup_")
    _check_tau_domains(m_low, tau)
    names = tau.inter_.names
    items = list(_interventions(tau, m_low, 2 if layer == 3 else layer))
    n_worlds = 1 if layer < 3 else max_worlds
    worst = 0.0
    for k in range(1, n_worlds + 1):
        for combo in itertools.combinations(items, k) if k > 1 else ((it,) for it in items):
            low_worlds, high_worlds, world_clusters = [], [], []
            for xs, pos in combo:
                rest = [c for c in names if c not in xs]
                low_worlds.append(pos)
                world_clusters.append(rest)
                hi = {}
                for c in xs:
                    sub = tuple(pos[v] for v in tau.inter_.members[c])
                    hi[c] = tau.map_positions(c, sub)
                high_worlds.append(hi)
            low = _world_joint(m_low, low_worlds,
                               [[v for c in cs for v in tau.inter_.members[c]] for cs in world_clusters],
                               budget)
            high = _world_joint(m_high, high_worlds, world_clusters, budget)
            img = _high_image(tau, low, world_clusters)
            worst = max(worst, float(np.max(np.abs(img - high))) if img.size else 0.0)
    return worst


# --------------------------------------------------------------------------
# orbit clustering
# --------------------------------------------------------------------------

def orbit_intra_clustering(domains: Sequence[Sequence[Any]],
                           generators: Iterable[Mapping | Callable[[tuple], tuple]]) -> list[tuple]:
    """Orbits of the group generated by ``generators`` on the product domain.

    Each generator is a bijection given as a mapping or a callable on value
    tuples. Orbits are returned in order of their lexicographically first
    element, each sorted lexicographically.
    """
    cells = list(itertools.product(*domains))
    index = {c: i for i, c in enumerate(cells)}
    g = nx.Graph()
    g.add_nodes_from(range(len(cells)))
    for gen in generators:
        f = gen.__getitem__ if isinstance(gen, Mapping) else gen
        image = [tuple(f(c)) for c in cells]
        if set(image) != set(cells) or len(set(image)) != len(cells):
            raise ValueError("generator is not a bijection on the domain")
        g.add_edges_from((index[c], index[i]) for c, i in zip(cells, image))
    orbits = [sorted(comp) for comp in nx.connected_components(g)]
    orbits.sort(key=lambda o: o[0])
    return [tuple(cells[i] for i in o) for o in orbits]
