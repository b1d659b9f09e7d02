"""Causal diagrams, cluster DAGs, interventional identification and cluster selection."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping, Sequence

import networkx as nx

from .clusters import InterClustering
from .pmf import Pmf, UndefinedConditionalError, value_index
from .query import CtfQuery, Term

__all__ = [
    "CausalDiagram",
    "Cdag",
    "NonCausalGraph",
    "InadmissibleClusteringError",
    "UnsupportedQueryError",
    "ClusterSelectionFailure",
    "latent_project",
    "check_admissible",
    "induce_cdag",
    "merge_cycles",
    "min_clustering",
    "max_answerable_clustering",
    "IdVerdict",
    "identify_interventional",
    "default_id_oracle",
    "check_conditions",
    "choose_clusters",
    "Estimand",
    "PTerm",
    "SumOut",
    "Product",
    "Ratio",
]


class InadmissibleClusteringError(ValueError):
    """Cluster quotient of the diagram has a directed cycle."""


class UnsupportedQueryError(ValueError):
    """Query shape outside what an identification oracle handles."""


class ClusterSelectionFailure(RuntimeError):
    """No clustering satisfies the required conditions."""


def _edge(a: str, b: str) -> frozenset:
    return frozenset((a, b))


class CausalDiagram:
    """Directed edges plus unordered bidirected (confounding) edges."""

    def __init__(self, nodes: Iterable[str], directed: Iterable[Sequence[str]] = (),
                 bidirected: Iterable[Sequence[str]] = ()):
        self.nodes = tuple(dict.fromkeys(nodes))
        known = set(self.nodes)
        self.directed = frozenset((str(a), str(b)) for a, b in directed)
        self.bidirected = frozenset(_edge(a, b) for a, b in bidirected)
        for a, b in self.directed:
            if a == b:
                raise ValueError(f"self-loop on {a}")
            if a not in known or b not in known:
                raise ValueError(f"edge {a}->{b} uses an unknown node")
        for e in self.bidirected:
            if len(e) != 2:
                raise ValueError("bidirected self-loop")
            if not e <= known:
                raise ValueError(f"edge {set(e)} uses an unknown node")
        self._dag = nx.DiGraph()
        self._dag.add_nodes_from(self.nodes)
        self._dag.add_edges_from(self.directed)
        if not nx.is_directed_acyclic_graph(self._dag):
            raise ValueError("directed part has a cycle")

    # structure ------------------------------------------------------------
    def parents(self, v: str) -> tuple:
        return tuple(p for p in self.nodes if (p, v) in self.directed)

    def children(self, v: str) -> tuple:
        return tuple(c for c in self.nodes if (v, c) in self.directed)

    def spouses(self, v: str) -> tuple:
        return tuple(w for w in self.nodes if _edge(v, w) in self.bidirected)

    def ancestors(self, vs: Iterable[str]) -> set:
        """Ancestors including the nodes themselves."""
        out = set(vs)
        for v in list(out):
            out |= nx.ancestors(self._dag, v)
        return out

    def descendants(self, vs: Iterable[str]) -> set:
        out = set(vs)
        for v in list(out):
            out |= nx.descendants(self._dag, v)
        return out

    def topological_order(self) -> tuple:
        rank = {v: i for i, v in enumerate(self.nodes)}
        return tuple(nx.lexicographical_topological_sort(self._dag, key=rank.__getitem__))

    def subgraph(self, keep: Iterable[str]) -> "CausalDiagram":
        keep = set(keep)
        return CausalDiagram(
            [v for v in self.nodes if v in keep],
            [(a, b) for a, b in self.directed if a in keep and b in keep],
            [tuple(e) for e in self.bidirected if e <= keep],
        )

    def without_incoming(self, xs: Iterable[str]) -> "CausalDiagram":
        xs = set(xs)
        return CausalDiagram(
            self.nodes,
            [(a, b) for a, b in self.directed if b not in xs],
            [tuple(e) for e in self.bidirected if not (e & xs)],
        )

    def c_components(self) -> list[frozenset]:
        g = nx.Graph()
        g.add_nodes_from(self.nodes)
        g.add_edges_from(tuple(e) for e in self.bidirected)
        rank = {v: i for i, v in enumerate(self.nodes)}
        comps = [frozenset(c) for c in nx.connected_components(g)]
        return sorted(comps, key=lambda c: min(rank[v] for v in c))

    def bidirected_graph(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(self.nodes)
        g.add_edges_from(tuple(e) for e in self.bidirected)
        return g

    # comparison / io ------------------------------------------------------
    def __eq__(self, other) -> bool:
        return (isinstance(other, CausalDiagram) and set(self.nodes) == set(other.nodes)
                and self.directed == other.directed and self.bidirected == other.bidirected)

    def __hash__(self) -> int:
        return hash((frozenset(self.nodes), self.directed, self.bidirected))

    def to_dict(self) -> dict:
        rank = {v: i for i, v in enumerate(self.nodes)}
        return {
            "nodes": list(self.nodes),
            "directed": sorted([list(e) for e in self.directed],
                               key=lambda e: (rank[e[0]], rank[e[1]])),
            "bidirected": sorted([sorted(e, key=rank.__getitem__) for e in self.bidirected],
                                 key=lambda e: (rank[e[0]], rank[e[1]])),
        }

    def __repr__(self) -> str:
        d = self.to_dict()
        di = ", ".join(f"{a}->{b}" for a, b in d["directed"])
        bi = ", ".join(f"{a}<->{b}" for a, b in d["bidirected"])
        return f"{type(self).__name__}({', '.join(self.nodes)}; {di}; {bi})"


class Cdag(CausalDiagram):
    """Diagram over clusters; ``members`` maps each node to its low-level variables."""

    def __init__(self, nodes, directed=(), bidirected=(), members: Mapping[str, Iterable[str]] | None = None):
        super().__init__(nodes, directed, bidirected)
        members = members or {v: (v,) for v in self.nodes}
        self.members = {v: tuple(members[v]) for v in self.nodes}

    def subgraph(self, keep):
        g = super().subgraph(keep)
        return Cdag(g.nodes, g.directed, [tuple(e) for e in g.bidirected],
                    {v: self.members[v] for v in g.nodes})

    def without_incoming(self, xs):
        g = super().without_incoming(xs)
        return Cdag(g.nodes, g.directed, [tuple(e) for e in g.bidirected], self.members)


class NonCausalGraph:
    """Undirected graph of non-causal relations between low-level variables."""

    def __init__(self, nodes: Iterable[str], edges: Iterable[Sequence[str]] = ()):
        self.nodes = tuple(dict.fromkeys(nodes))
        self.edges = frozenset(_edge(a, b) for a, b in edges)
        for e in self.edges:
            if len(e) != 2:
                raise ValueError("non-causal self-loop")
            if not e <= set(self.nodes):
                raise ValueError(f"edge {set(e)} uses an unknown node")

    def components(self) -> list[tuple]:
        g = nx.Graph()
        g.add_nodes_from(self.nodes)
        g.add_edges_from(tuple(e) for e in self.edges)
        rank = {v: i for i, v in enumerate(self.nodes)}
        comps = [tuple(sorted(c, key=rank.__getitem__)) for c in nx.connected_components(g)]
        return sorted(comps, key=lambda c: rank[c[0]])


# --------------------------------------------------------------------------
# projection and C-DAGs
# --------------------------------------------------------------------------

def latent_project(diagram: CausalDiagram, keep: Iterable[str]) -> CausalDiagram:
    """Project out every node not in ``keep``.

    ``a -> b`` survives when a directed path runs from ``a`` to ``b`` through
    dropped nodes only. ``a <-> b`` appears when both reach back, through
    dropped nodes only, to a shared dropped ancestor or to the two ends of a
    bidirected edge.
    """
    keep_set = set(keep)
    kept = [v for v in diagram.nodes if v in keep_set]
    hidden = set(diagram.nodes) - keep_set

    # reach[v]: v plus dropped nodes with a dropped-only directed path into v
    reach = {}
    for v in kept:
        seen = {v}
        stack = [v]
        while stack:
            w = stack.pop()
            for p in diagram.parents(w):
                if p in hidden and p not in seen:
                    seen.add(p)
                    stack.append(p)
        reach[v] = seen

    directed = set()
    for b in kept:
        for x in reach[b]:
            for a in diagram.parents(x):
                if a in keep_set and a != b:
                    directed.add((a, b))

    bidirected = set()
    for a, b in itertools.combinations(kept, 2):
        ra, rb = reach[a], reach[b]
        if (ra & rb & hidden) or any(_edge(x, y) in diagram.bidirected for x in ra for y in rb):
            bidirected.add((a, b))
    return CausalDiagram(kept, directed, bidirected)


def _quotient(diagram: CausalDiagram, inter: InterClustering) -> nx.DiGraph:
    """Cluster quotient keeping excluded variables as singleton nodes."""
    def node(v):
        c = inter.cluster_of(v)
        return ("c", c) if c is not None else ("v", v)

    q = nx.DiGraph()
    q.add_nodes_from(node(v) for v in diagram.nodes)
    for a, b in diagram.directed:
        na, nb = node(a), node(b)
        if na != nb:
            q.add_edge(na, nb)
    return q


def check_admissible(inter: InterClustering, diagram: CausalDiagram) -> bool:
    """True iff no path leaves a cluster and comes back into it."""
    unknown = set(inter.variables) - set(diagram.nodes)
    if unknown:
        raise KeyError(f"clustered variables missing from diagram: {sorted(unknown)}")
    return nx.is_directed_acyclic_graph(_quotient(diagram, inter))


def induce_cdag(diagram: CausalDiagram, inter: InterClustering) -> Cdag:
    """Quotient of the diagram by ``inter`` after projecting out excluded variables."""
    if not check_admissible(inter, diagram):
        raise InadmissibleClusteringError(f"{inter} is not admissible")
    proj = latent_project(diagram, inter.variables)
    directed = set()
    bidirected = set()
    for a, b in proj.directed:
        ca, cb = inter.cluster_of(a), inter.cluster_of(b)
        if ca != cb:
            directed.add((ca, cb))
    for e in proj.bidirected:
        a, b = tuple(e)
        ca, cb = inter.cluster_of(a), inter.cluster_of(b)
        if ca != cb:
            bidirected.add((ca, cb))
    return Cdag(inter.names, directed, bidirected, inter.members)


def merge_cycles(inter: InterClustering, diagram: CausalDiagram) -> InterClustering:
    """Merge clusters that share a strongly connected component of the quotient."""
    q = _quotient(diagram, inter)
    out = {}
    order = {v: i for i, v in enumerate(diagram.nodes)}
    comps = sorted(nx.strongly_connected_components(q),
                   key=lambda comp: min(order[m] for kind, n in comp
                                        for m in (inter.members[n] if kind == "c" else (n,))))
    for comp in comps:
        clusters = [n for kind, n in comp if kind == "c"]
        if not clusters:
            continue
        if len(comp) == 1:
            out[clusters[0]] = inter.members[clusters[0]]
            continue
        members = sorted({m for kind, n in comp
                          for m in (inter.members[n] if kind == "c" else (n,))},
                         key=order.__getitem__)
        out["+".join(members)] = tuple(members)
    return InterClustering(out)


def min_clustering(gbar: NonCausalGraph, diagram: CausalDiagram) -> InterClustering:
    """Connected components of the non-causal graph, cycle-merged."""
    comps = InterClustering({"+".join(c): c for c in gbar.components()})
    return merge_cycles(comps, diagram)


def _term_sets(queries: Iterable[CtfQuery]) -> list[frozenset]:
    """Outcome sets (one per world of each query) and intervention sets."""
    sets = []
    for q in queries:
        worlds: dict = {}
        for t in q.terms + q.given:
            worlds[t.intervention_vars] = worlds.get(t.intervention_vars, frozenset()) | t.outcome_vars
        for x, y in worlds.items():
            for s in (y, x):
                if s and s not in sets:
                    sets.append(s)
    return sets


def max_answerable_clustering(queries: Iterable[CtfQuery], all_vars: Sequence[str]) -> InterClustering:
    """Cells of the Venn diagram of all term variable sets.

    Variables sharing the same membership pattern form one cluster;
    variables in no set are excluded.
    """
    sets = _term_sets(queries)
    groups: dict[tuple, list] = {}
    for v in all_vars:
        sig = tuple(i for i, s in enumerate(sets) if v in s)
        if sig:
            groups.setdefault(sig, []).append(v)
    unknown = set().union(*sets) - set(all_vars) if sets else set()
    if unknown:
        raise KeyError(f"query variables not in the variable list: {sorted(unknown)}")
    return InterClustering({"+".join(g): g for g in groups.values()})


# --------------------------------------------------------------------------
# estimands
# --------------------------------------------------------------------------

class Estimand:
    """Expression over observational marginals; free variables bind at evaluation."""

    def evaluate(self, pmf: Pmf, assignment: Mapping[str, Any]) -> float:
        """Value under ``pmf``; raises when positivity fails on a stratum that matters."""
        cache: dict = {}
        value = self._eval(pmf, dict(assignment), cache)
        if math.isnan(value):
            raise UndefinedConditionalError(f"{self} divides by a zero-probability event")
        return value

    def _eval(self, pmf, env, cache) -> float:  # pragma: no cover - abstract
        raise NotImplementedError

    def sexpr(self) -> str:  # pragma: no cover - abstract
        raise NotImplementedError

    def __str__(self) -> str:
        return self.sexpr()


@dataclass(frozen=True)
class PTerm(Estimand):
    variables: tuple

    def _eval(self, pmf, env, cache):
        if not self.variables:
            return 1.0
        key = (self.variables, tuple(env[v] for v in self.variables))
        if key not in cache:
            cache[key] = pmf.prob({v: env[v] for v in self.variables})
        return cache[key]

    def sexpr(self):
        return "(P " + " ".join(self.variables) + ")" if self.variables else "1"


@dataclass(frozen=True)
class SumOut(Estimand):
    variables: tuple
    body: Estimand

    def _eval(self, pmf, env, cache):
        doms = [pmf.domain_of(v) for v in self.variables]
        total = 0.0
        for values in itertools.product(*doms):
            inner = dict(env)
            inner.update(zip(self.variables, values))
            total += self.body._eval(pmf, inner, cache)
        return total

    def sexpr(self):
        return f"(sum ({' '.join(self.variables)}) {self.body.sexpr()})"


@dataclass(frozen=True)
class Product(Estimand):
    factors: tuple

    def _eval(self, pmf, env, cache):
        # a zero factor drops the stratum even when another factor is undefined
        values = [f._eval(pmf, env, cache) for f in self.factors]
        if any(v == 0.0 for v in values):
            return 0.0
        return math.prod(values)

    def sexpr(self):
        return "(prod " + " ".join(f.sexpr() for f in self.factors) + ")"


@dataclass(frozen=True)
class Ratio(Estimand):
    num: Estimand
    den: Estimand

    def _eval(self, pmf, env, cache):
        d = self.den._eval(pmf, env, cache)
        if d == 0.0:
            return math.nan
        return self.num._eval(pmf, env, cache) / d

    def sexpr(self):
        return f"(frac {self.num.sexpr()} {self.den.sexpr()})"


def _marginalize(expr: Estimand, scope: frozenset, keep: Iterable[str], order: Sequence[str]) -> Estimand:
    """Sum ``expr`` (a distribution over ``scope``) down to ``keep``."""
    keep = set(keep)
    drop = tuple(v for v in order if v in scope and v not in keep)
    if not drop:
        return expr
    if isinstance(expr, PTerm):
        return PTerm(tuple(v for v in expr.variables if v not in drop))
    return SumOut(drop, expr)


def _sum(variables: Iterable[str], body: Estimand, order: Sequence[str]) -> Estimand:
    vs = set(variables)
    drop = tuple(v for v in order if v in vs)
    return SumOut(drop, body) if drop else body


@dataclass
class IdVerdict:
    """Outcome of interventional identification."""

    identifiable: bool
    estimand: Estimand | None = None
    hedge: tuple | None = None

    def evaluate(self, pmf: Pmf, assignment: Mapping[str, Any]) -> float:
        if self.estimand is None:
            raise ValueError("query is not identifiable")
        return self.estimand.evaluate(pmf, assignment)


class _Hedge(Exception):
    def __init__(self, f, s):
        super().__init__("hedge")
        self.f, self.s = f, s


def _id(y: frozenset, x: frozenset, p: Estimand, scope: frozenset, g: CausalDiagram,
        order: Sequence[str]) -> Estimand:
    v = frozenset(g.nodes)
    topo = [n for n in order if n in v]
    # line 1
    if not x:
        return _marginalize(p, scope, y, order)
    # line 2
    an = g.ancestors(y)
    if v != an:
        return _id(y, x & an, _marginalize(p, scope, an, order), frozenset(an),
                   g.subgraph(an), order)
    # line 3
    w = (v - x) - g.without_incoming(x).ancestors(y)
    if w:
        return _id(y, x | w, p, scope, g, order)
    # line 4
    comps = g.subgraph(v - x).c_components()
    if len(comps) > 1:
        factors = tuple(_id(frozenset(s), v - s, p, scope, g, order) for s in comps)
        return _sum(v - (y | x), Product(factors), order)
    s = comps[0]
    gc = g.c_components()
    # line 5
    if len(gc) == 1 and gc[0] == v:
        raise _Hedge(tuple(n for n in topo), tuple(n for n in topo if n in s))

    def cond(vi, given):
        num = _marginalize(p, scope, set(given) | {vi}, order)
        if isinstance(p, PTerm) and not given:
            return num
        den = _marginalize(p, scope, given, order)
        return Ratio(num, den)

    # line 6
    if s in gc:
        factors = []
        for vi in topo:
            if vi in s:
                factors.append(cond(vi, topo[:topo.index(vi)]))
        return _sum(s - y, Product(tuple(factors)), order)
    # line 7
    sp = next(c for c in gc if s <= c)
    factors = []
    for vi in topo:
        if vi in sp:
            factors.append(cond(vi, topo[:topo.index(vi)]))
    return _id(y, x & sp, Product(tuple(factors)), frozenset(sp), g.subgraph(sp), order)


def identify_interventional(diagram: CausalDiagram, query: CtfQuery | None = None, *,
                            outcome: Iterable[str] | None = None,
                            treatment: Iterable[str] = ()) -> IdVerdict:
    """Complete identification of ``P(y | do(x))`` from the observational distribution.

    Pass either a single-world ``query`` or explicit ``outcome``/``treatment`` sets.
    """
    if query is not None:
        if query.given:
            raise UnsupportedQueryError("conditional queries are not supported")
        worlds = {t.world for t in query.terms}
        if len(worlds) != 1:
            raise UnsupportedQueryError("multi-world counterfactuals are not supported")
        outcome = set().union(*(t.outcome_vars for t in query.terms))
        treatment = set(query.terms[0].intervention_vars)
    if outcome is None:
        raise ValueError("no outcome given")
    y, x = frozenset(outcome), frozenset(treatment)
    unknown = (y | x) - set(diagram.nodes)
    if unknown:
        raise KeyError(f"query variables not in the diagram: {sorted(unknown)}")
    if not y or y & x:
        raise ValueError("outcome must be non-empty and disjoint from treatment")
    order = diagram.topological_order()
    try:
        est = _id(y, x, PTerm(tuple(order)), frozenset(diagram.nodes), diagram, order)
    except _Hedge as h:
        return IdVerdict(False, None, (h.f, h.s))
    return IdVerdict(True, est)


# --------------------------------------------------------------------------
# cluster selection
# --------------------------------------------------------------------------

def lift_to_clusters(query: CtfQuery, inter: InterClustering) -> CtfQuery | None:
    """Rewrite a low-level query over cluster names (values dropped), or None if misaligned.

    Outcomes are pooled per world, so each world's outcome set and its
    intervention set must each be a union of clusters.
    """
    def lift(terms):
        worlds: dict = {}
        for t in terms:
            worlds[t.intervention_vars] = worlds.get(t.intervention_vars, frozenset()) | t.outcome_vars
        out = []
        for x, y in worlds.items():
            ys = inter.covering(y)
            xs = inter.covering(x) if x else ()
            if ys is None or xs is None:
                return None
            out.append(Term(tuple((c, None) for c in ys), tuple((c, None) for c in xs)))
        return out

    terms, given = lift(query.terms), lift(query.given)
    if terms is None or given is None:
        return None
    return CtfQuery(tuple(terms), tuple(given))


def default_id_oracle(query: CtfQuery, cdag: Cdag) -> bool:
    """Interventional ID of a single-world lifted query on the C-DAG."""
    return identify_interventional(cdag, query).identifiable


def _answerable(inter: InterClustering, queries) -> bool:
    return all(lift_to_clusters(q, inter) is not None for q in queries)


def _valid(inter: InterClustering, diagram: CausalDiagram, queries, oracle) -> bool:
    if not check_admissible(inter, diagram):
        return False
    cdag = induce_cdag(diagram, inter)
    for q in queries:
        lifted = lift_to_clusters(q, inter)
        if lifted is None or not oracle(lifted, cdag):
            return False
    return True


def check_conditions(inter: InterClustering, diagram: CausalDiagram, gbar: NonCausalGraph,
                     queries: Sequence[CtfQuery],
                     id_oracle: Callable[[CtfQuery, Cdag], bool] = default_id_oracle) -> dict:
    """Re-check C1 (non-causal edges absorbed), C2 (admissible), C3 (answerable), C4 (ID)."""
    comps = InterClustering({"+".join(c): c for c in gbar.components()})
    c2 = check_admissible(inter, diagram)
    c4 = False
    if c2:
        cdag = induce_cdag(diagram, inter)
        c4 = True
        for q in queries:
            lifted = lift_to_clusters(q, inter)
            if lifted is None or not id_oracle(lifted, cdag):
                c4 = False
                break
    return {"C1": inter.coarser_than(comps), "C2": c2,
            "C3": _answerable(inter, queries), "C4": c4}


def _sorted_names(inter: InterClustering) -> list:
    return sorted(inter.names, key=lambda n: tuple(sorted(inter.members[n])))


def choose_clusters(diagram: CausalDiagram, gbar: NonCausalGraph, queries: Sequence[CtfQuery],
                    id_oracle: Callable[[CtfQuery, Cdag], bool] = default_id_oracle, *,
                    remove_unqueried: bool = False) -> InterClustering:
    """Greedy search for a maximally coarse clustering satisfying C1-C4.

    Starts from the minimal clustering and merges clusters that lie in one
    maximally answerable cell while validity holds. With
    ``remove_unqueried=True`` variables outside every query are also dropped
    whenever that keeps the clustering valid.

    Raises :class:`ClusterSelectionFailure` when no valid clustering exists.
    """
    queries = list(queries)
    c_min = min_clustering(gbar, diagram)
    c_max = max_answerable_clustering(queries, diagram.nodes)
    if not c_max.coarser_than(c_min):
        raise ClusterSelectionFailure("non-causal components or cycles straddle query sets")
    if not _valid(c_min, diagram, queries, id_oracle):
        raise ClusterSelectionFailure("a query is not identifiable even at the finest clustering")

    current = c_min
    queried = set(c_max.variables)
    changed = True
    while changed:
        changed = False
        if remove_unqueried:
            for v in sorted(current.variables):
                if v in queried:
                    continue
                candidate = current.without(v)
                if _valid(candidate, diagram, queries, id_oracle):
                    current, changed = candidate, True
        merged = True
        while merged:
            merged = False
            names = _sorted_names(current)
            for a, b in itertools.combinations(names, 2):
                both = set(current.members[a]) | set(current.members[b])
                if not any(both <= set(cell) for cell in c_max.members.values()):
                    continue
                candidate = current.merged(a, b)
                if _valid(candidate, diagram, queries, id_oracle):
                    current, changed, merged = candidate, True, True
                    break
    return current
