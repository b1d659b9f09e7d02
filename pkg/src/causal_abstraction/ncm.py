"""Graph-constrained parametric SCMs with an exact, differentiable canonical backend.

Every maximal bidirected clique ``C`` owns a categorical exogenous source of
size ``N_C``. Each node ``V`` has a softmax response table indexed by
(parent configuration, joint index of the cliques containing ``V``). Given
the exogenous draw, ``V`` is realised by inverse CDF from its own uniform
``r_V``; the same ``r_V`` is shared by all worlds of a counterfactual, which
fixes the cross-world coupling (comonotone under the domain order).

All probabilities are computed by enumeration, so L1, L2 and L3 quantities
are exact and their gradients are analytic.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import networkx as nx
import numpy as np
from scipy import optimize
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .graphs import CausalDiagram
from .pmf import Pmf, UndefinedConditionalError, value_index
from .query import CtfQuery, Term
from .scm import DEFAULT_BUDGET, BudgetExceededError, Scm

__all__ = [
    "Ncm",
    "TrainConfig",
    "FitResult",
    "DivergenceError",
    "SamplingError",
    "NeuralCausalModel",
    "RepresentationMap",
    "RepMap",
    "build_ncm",
    "ncm_from_scm",
    "induced_pmf",
    "ctf_pmf",
    "fit",
    "sample",
    "fit_representation",
    "maximal_cliques",
]


class DivergenceError(RuntimeError):
    """Loss became non-finite during fitting."""


class SamplingError(RuntimeError):
    """Rejection sampling accepted too few draws."""


def maximal_cliques(diagram: CausalDiagram) -> list[tuple]:
    """Maximal cliques of the bidirected part; isolated nodes form singletons."""
    rank = {v: i for i, v in enumerate(diagram.nodes)}
    g = diagram.bidirected_graph()
    cliques = [tuple(sorted(c, key=rank.__getitem__)) for c in nx.find_cliques(g)]
    return sorted(cliques, key=lambda c: [rank[v] for v in c])


def _softmax(z: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(z - m)
    return e / e.sum(axis=-1, keepdims=True)


def _log(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(p)


class Ncm:
    """Canonical neural causal model over the nodes of ``cdag``.

    ``clique_logits[i]`` has shape ``(N_i,)``. ``response_logits[V]`` has
    shape ``(n_pa, n_ctx, |D_V|)``: parent configurations are row-major over
    ``cdag.parents(V)``; context is row-major over the cliques containing
    ``V`` in clique order. Logits may be ``-inf`` (hard zeros).
    """

    def __init__(self, cdag: CausalDiagram, domains: Mapping[str, Sequence[Any]],
                 clique_sizes: Sequence[int] | None = None, *, n_max: int = 64,
                 seed: int = 0, init_scale: float = 0.1):
        self.cdag = cdag
        self.nodes = tuple(cdag.nodes)
        missing = [v for v in self.nodes if v not in domains]
        if missing:
            raise KeyError(f"no domain for {missing}")
        self.domains = {v: tuple(domains[v]) for v in self.nodes}
        self.order = cdag.topological_order()
        self.parents = {v: cdag.parents(v) for v in self.nodes}
        self.cliques = maximal_cliques(cdag)
        if clique_sizes is None:
            clique_sizes = [min(self.canonical_bound(c), n_max) for c in self.cliques]
        if len(clique_sizes) != len(self.cliques) or min(clique_sizes, default=1) < 1:
            raise ValueError("need one positive size per clique")
        self.clique_sizes = tuple(int(n) for n in clique_sizes)
        self.ctx = {v: tuple(i for i, c in enumerate(self.cliques) if v in c) for v in self.nodes}
        self.n_pa = {v: int(np.prod([len(self.domains[p]) for p in self.parents[v]], dtype=np.int64))
                     for v in self.nodes}
        self.n_ctx = {v: int(np.prod([self.clique_sizes[i] for i in self.ctx[v]], dtype=np.int64))
                      for v in self.nodes}
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.clique_logits = [rng.uniform(-init_scale, init_scale, n) for n in self.clique_sizes]
        self.response_logits = {
            v: rng.uniform(-init_scale, init_scale, (self.n_pa[v], self.n_ctx[v], len(self.domains[v])))
            for v in self.nodes}

    def canonical_bound(self, clique: Sequence[str]) -> int:
        """Number of joint response functions of ``clique`` (enough for full expressiveness)."""
        total = 1
        for v in clique:
            n_pa = int(np.prod([len(self.domains[p]) for p in self.cdag.parents(v)], dtype=np.int64))
            total *= len(self.domains[v]) ** n_pa
            if total > 10**12:
                return total
        return total

    # parameter vector -----------------------------------------------------
    @property
    def n_params(self) -> int:
        return sum(self.clique_sizes) + sum(t.size for t in self.response_logits.values())

    def get_flat(self) -> np.ndarray:
        parts = [z.ravel() for z in self.clique_logits] + \
            [self.response_logits[v].ravel() for v in self.nodes]
        return np.concatenate(parts) if parts else np.zeros(0)

    def set_flat(self, theta: np.ndarray) -> None:
        theta = np.asarray(theta, dtype=float)
        k = 0
        for i, n in enumerate(self.clique_sizes):
            self.clique_logits[i] = theta[k:k + n].copy()
            k += n
        for v in self.nodes:
            shape = self.response_logits[v].shape
            n = int(np.prod(shape))
            self.response_logits[v] = theta[k:k + n].reshape(shape).copy()
            k += n

    def _flatten_grads(self, g_cliques, g_resp) -> np.ndarray:
        parts = [g.ravel() for g in g_cliques] + [g_resp[v].ravel() for v in self.nodes]
        return np.concatenate(parts) if parts else np.zeros(0)

    def copy(self) -> "Ncm":
        other = object.__new__(Ncm)
        other.__dict__.update(self.__dict__)
        other.clique_logits = [z.copy() for z in self.clique_logits]
        other.response_logits = {v: t.copy() for v, t in self.response_logits.items()}
        return other

    # derived probabilities ----------------------------------------------
    def clique_probs(self) -> list[np.ndarray]:
        return [_softmax(z) for z in self.clique_logits]

    def response_probs(self, v: str) -> np.ndarray:
        return _softmax(self.response_logits[v])

    @property
    def n_units(self) -> int:
        return int(np.prod(self.clique_sizes, dtype=np.int64))

    def position(self, v: str, value: Any) -> int:
        if v not in self.domains:
            raise KeyError(f"unknown variable {v!r}")
        return value_index(self.domains[v], value)

    # serialization ------------------------------------------------------
    def to_dict(self, config: "TrainConfig | None" = None) -> dict:
        def enc(a):
            return [None if not np.isfinite(x) else float(x) for x in np.asarray(a).ravel()]

        return {
            "format": "ncm/1",
            "ordering": "row-major; response axes = (parent config, clique context, value)",
            "nodes": list(self.nodes),
            "domains": {v: list(self.domains[v]) for v in self.nodes},
            "directed": sorted([list(e) for e in self.cdag.directed]),
            "bidirected": sorted(sorted(e) for e in self.cdag.bidirected),
            "cliques": [list(c) for c in self.cliques],
            "clique_sizes": list(self.clique_sizes),
            "clique_logits": [enc(z) for z in self.clique_logits],
            "response_logits": {v: enc(self.response_logits[v]) for v in self.nodes},
            "config": None if config is None else asdict(config),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Ncm":
        def dec(a):
            return np.array([-np.inf if x is None else x for x in a], dtype=float)

        cdag = CausalDiagram(data["nodes"], data["directed"], data["bidirected"])
        ncm = cls(cdag, data["domains"], data["clique_sizes"], seed=data.get("seed", 0))
        if [list(c) for c in ncm.cliques] != [list(c) for c in data["cliques"]]:
            raise ValueError("checkpoint cliques do not match the diagram")
        ncm.clique_logits = [dec(z) for z in data["clique_logits"]]
        for v in ncm.nodes:
            ncm.response_logits[v] = dec(data["response_logits"][v]).reshape(ncm.response_logits[v].shape)
        return ncm

    def __repr__(self) -> str:
        return f"Ncm(nodes={list(self.nodes)}, cliques={self.cliques}, sizes={self.clique_sizes})"


def build_ncm(cdag: CausalDiagram, domains: Mapping[str, Sequence[Any]],
              config: "TrainConfig | None" = None) -> Ncm:
    config = config or TrainConfig()
    return Ncm(cdag, domains, n_max=config.n_max, seed=config.seed, init_scale=config.init_scale)


def ncm_from_scm(scm: Scm, cdag: CausalDiagram | None = None) -> Ncm:
    """Encode an explicit SCM as an Ncm with hard (one-hot) response tables.

    Each exogenous block is assigned to the first clique that contains all
    of its children; that clique's categorical is the product of its blocks.
    """
    from .scm import induced_diagram

    cdag = cdag or induced_diagram(scm)
    if set(cdag.nodes) != set(scm.variables):
        raise ValueError("diagram and model have different variables")
    cliques = maximal_cliques(cdag)
    owner: dict = {i: [] for i in range(len(cliques))}
    for name in scm.exogenous:
        children = {v for v in scm.variables if name in scm.mechanisms[v].exo_parents}
        if not children:
            continue
        for i, c in enumerate(cliques):
            if children <= set(c):
                owner[i].append(name)
                break
        else:
            raise ValueError(f"exogenous {name!r} is shared by {sorted(children)}, which no clique covers")
    sizes = [int(np.prod([len(scm.exogenous[b].domain) for b in owner[i]], dtype=np.int64))
             for i in range(len(cliques))]
    ncm = Ncm(cdag, scm.domains, sizes)
    for i in range(len(cliques)):
        probs = np.ones(1)
        for b in owner[i]:
            probs = np.multiply.outer(probs, np.asarray(scm.exogenous[b].pmf)).ravel()
        ncm.clique_logits[i] = _log(probs)
    for v in ncm.nodes:
        mech = scm.mechanisms[v]
        if set(mech.endo_parents) != set(ncm.parents[v]):
            raise ValueError(f"parents of {v} differ between model and diagram")
        table = np.zeros(ncm.response_logits[v].shape)
        pa_dims = [len(ncm.domains[p]) for p in ncm.parents[v]]
        ctx_blocks = [(i, owner[i]) for i in ncm.ctx[v]]
        for pa in itertools.product(*(range(n) for n in pa_dims)):
            pa_flat = int(np.ravel_multi_index(pa, pa_dims)) if pa_dims else 0
            pa_map = dict(zip(ncm.parents[v], pa))
            for ctx in itertools.product(*(range(ncm.clique_sizes[i]) for i, _ in ctx_blocks)):
                ctx_flat = int(np.ravel_multi_index(ctx, [ncm.clique_sizes[i] for i, _ in ctx_blocks])) \
                    if ctx_blocks else 0
                u_pos = {}
                for (i, blocks), k in zip(ctx_blocks, ctx):
                    dims = [len(scm.exogenous[b].domain) for b in blocks]
                    u_pos.update(zip(blocks, np.unravel_index(k, dims) if dims else ()))
                idx = tuple(pa_map[p] for p in mech.endo_parents) + tuple(int(u_pos[u]) for u in mech.exo_parents)
                table[pa_flat, ctx_flat, int(mech.table[idx]) if idx else int(mech.table)] = 1.0
        ncm.response_logits[v] = _log(table)
    return ncm


# --------------------------------------------------------------------------
# exact evaluation engine
# --------------------------------------------------------------------------

@dataclass
class _Plan:
    """Cells of a multi-world enumeration and the output slot of each cell."""

    worlds: list          # per world: {var: fixed position}
    slots: list           # (world, var) pairs enumerated per cell
    cells: np.ndarray     # (M, len(slots)) value positions
    out_index: np.ndarray  # (M,)
    n_out: int
    variables: tuple      # variables taking part


def _plan(ncm: Ncm, worlds: Sequence[Mapping[str, int]], constraints: Sequence[Mapping[str, int]],
          variables: Iterable[str], out_slots: Sequence[tuple] = (), budget: int = DEFAULT_BUDGET) -> _Plan:
    variables = tuple(v for v in ncm.order if v in set(variables))
    slots, choices = [], []
    for w, (x, c) in enumerate(zip(worlds, constraints)):
        for v in variables:
            if v in x:
                if v in c and c[v] != x[v]:
                    choices.append(None)
                continue
            slots.append((w, v))
            choices.append([c[v]] if v in c else list(range(len(ncm.domains[v]))))
    if any(ch is None for ch in choices):
        return _Plan(list(worlds), [], np.zeros((0, 0), dtype=np.int64), np.zeros(0, dtype=np.int64),
                     max(1, int(np.prod([len(ncm.domains[v]) for _, v in out_slots], dtype=np.int64))),
                     variables)
    m = int(np.prod([len(ch) for ch in choices], dtype=np.int64))
    if m * ncm.n_units > budget:
        raise BudgetExceededError(f"{m} cells x {ncm.n_units} units exceed budget {budget}")
    cells = np.array(list(itertools.product(*choices)), dtype=np.int64).reshape(m, len(slots))
    if out_slots:
        cols = [slots.index(s) for s in out_slots]
        dims = [len(ncm.domains[v]) for _, v in out_slots]
        out = np.ravel_multi_index(tuple(cells[:, c] for c in cols), dims) if m else np.zeros(0, np.int64)
        n_out = int(np.prod(dims))
    else:
        out, n_out = np.zeros(m, dtype=np.int64), 1
    return _Plan(list(worlds), slots, cells, np.asarray(out, dtype=np.int64), n_out, variables)


def _unit_grid(ncm: Ncm):
    shape = ncm.clique_sizes
    k = ncm.n_units
    idx = np.unravel_index(np.arange(k), shape) if shape else ()
    probs = ncm.clique_probs()
    w = np.ones(k)
    for i, col in enumerate(idx):
        w = w * probs[i][col]
    return idx, w, probs


def _ctx_index(ncm: Ncm, v: str, idx) -> np.ndarray:
    ctx = ncm.ctx[v]
    if not ctx:
        return np.zeros(ncm.n_units, dtype=np.int64)
    return np.ravel_multi_index(tuple(idx[i] for i in ctx), [ncm.clique_sizes[i] for i in ctx])


class _Evaluation:
    """Forward pass over a plan, keeping what the backward pass needs."""

    def __init__(self, ncm: Ncm, plan: _Plan):
        self.ncm, self.plan = ncm, plan
        self.idx, self.w, self.cprobs = _unit_grid(ncm)
        m = len(plan.cells)
        k = ncm.n_units
        slot_col = {s: j for j, s in enumerate(plan.slots)}
        self.factors = []  # per variable: (v, f, rows/vals of argmin U, argmax L, active)
        self.probs, self.cdfs = {}, {}
        prod = np.ones((k, m))
        for v in plan.variables:
            worlds = [w for w, x in enumerate(plan.worlds) if v not in x]
            if not worlds:
                continue
            p = ncm.response_probs(v).reshape(ncm.n_pa[v] * ncm.n_ctx[v], -1)
            cdf = np.concatenate([np.zeros((p.shape[0], 1)), np.cumsum(p, axis=1)], axis=1)
            cdf[:, -1] = 1.0
            self.probs[v], self.cdfs[v] = p, cdf
            ctx = _ctx_index(ncm, v, self.idx)
            uppers, lowers, rows, vals = [], [], [], []
            for w in worlds:
                pa_cols = []
                for pa in ncm.parents[v]:
                    if pa in plan.worlds[w]:
                        pa_cols.append(np.full(m, plan.worlds[w][pa], dtype=np.int64))
                    else:
                        pa_cols.append(plan.cells[:, slot_col[(w, pa)]])
                dims = [len(ncm.domains[pa]) for pa in ncm.parents[v]]
                pa_idx = np.ravel_multi_index(tuple(pa_cols), dims) if dims else np.zeros(m, dtype=np.int64)
                row = pa_idx[None, :] * ncm.n_ctx[v] + ctx[:, None]
                val = np.broadcast_to(plan.cells[:, slot_col[(w, v)]], (k, m))
                rows.append(row)
                vals.append(val)
                lowers.append(cdf[row, val])
                uppers.append(cdf[row, val + 1])
            U, L = np.stack(uppers), np.stack(lowers)
            iu, il = np.argmin(U, axis=0), np.argmax(L, axis=0)
            raw = np.take_along_axis(U, iu[None], 0)[0] - np.take_along_axis(L, il[None], 0)[0]
            f = np.maximum(raw, 0.0)
            rows_a, vals_a = np.stack(rows), np.stack(vals)
            self.factors.append((v, f, np.take_along_axis(rows_a, iu[None], 0)[0],
                                 np.take_along_axis(vals_a, iu[None], 0)[0] + 1,
                                 np.take_along_axis(rows_a, il[None], 0)[0],
                                 np.take_along_axis(vals_a, il[None], 0)[0], raw > 0))
            prod = prod * f
        self.prod = prod
        contrib = (self.w[:, None] * prod).sum(axis=0) if m else np.zeros(0)
        self.value = np.bincount(plan.out_index, weights=contrib, minlength=plan.n_out) if m \
            else np.zeros(plan.n_out)

    def backward(self, upstream: np.ndarray):
        """Vector-Jacobian product: gradients w.r.t. clique and response logits."""
        ncm, plan = self.ncm, self.plan
        m = len(plan.cells)
        g_cl = [np.zeros(n) for n in ncm.clique_sizes]
        g_resp = {v: np.zeros_like(ncm.response_logits[v]) for v in ncm.nodes}
        if m == 0:
            return g_cl, g_resp
        G = np.asarray(upstream, dtype=float)[plan.out_index][None, :]
        a = (G * self.prod).sum(axis=1) * self.w
        total = a.sum()
        for i, col in enumerate(self.idx):
            g_cl[i] = np.bincount(col, weights=a, minlength=ncm.clique_sizes[i]) - self.cprobs[i] * total
        fs = [f for _, f, *_ in self.factors]
        prefix = [np.ones_like(self.prod)]
        for f in fs[:-1]:
            prefix.append(prefix[-1] * f)
        suffix = np.ones_like(self.prod)
        wg = G * self.w[:, None]
        for j in range(len(fs) - 1, -1, -1):
            v, f, ru, tu, rl, tl, active = self.factors[j]
            d = wg * prefix[j] * suffix * active
            suffix = suffix * f
            if not d.any():
                continue
            p, cdf = self.probs[v], self.cdfs[v]
            g_cdf = np.zeros_like(cdf)
            np.add.at(g_cdf, (ru.ravel(), tu.ravel()), d.ravel())
            np.add.at(g_cdf, (rl.ravel(), tl.ravel()), -d.ravel())
            # d cdf[r, t] / d logit[r, j] = p[r, j] * (1[j < t] - cdf[r, t])
            tail = np.cumsum(g_cdf[:, ::-1], axis=1)[:, ::-1][:, 1:]
            s2 = (g_cdf * cdf).sum(axis=1, keepdims=True)
            g = p * (tail - s2)
            g_resp[v] = np.nan_to_num(g).reshape(g_resp[v].shape)
        return g_cl, g_resp


def _query_worlds(ncm: Ncm, terms: Sequence[Term]):
    worlds, constraints, keys = [], [], {}
    for t in terms:
        for var, _ in t.outcome + t.intervention:
            if var not in ncm.domains:
                raise KeyError(f"unknown variable {var!r} in query")
        if t.world not in keys:
            keys[t.world] = len(worlds)
            worlds.append({v: ncm.position(v, x) for v, x in t.intervention})
            constraints.append({})
        c = constraints[keys[t.world]]
        for var, val in t.outcome:
            pos = ncm.position(var, val)
            if c.get(var, pos) != pos:
                c[var] = -1  # contradiction
            else:
                c[var] = pos
    return worlds, constraints


def _event(ncm: Ncm, terms: Sequence[Term], budget: int) -> _Evaluation:
    worlds, constraints = _query_worlds(ncm, terms)
    if any(-1 in c.values() for c in constraints):
        plan = _Plan(worlds, [], np.zeros((0, 0), dtype=np.int64), np.zeros(0, dtype=np.int64), 1, ())
        return _Evaluation(ncm, plan)
    outcome_vars = {v for c in constraints for v in c}
    variables = ncm.cdag.ancestors(outcome_vars)
    return _Evaluation(ncm, _plan(ncm, worlds or [{}], constraints or [{}], variables, budget=budget))


def _pmf_eval(ncm: Ncm, intervention: Mapping[str, Any] | None, budget: int) -> tuple[_Evaluation, list]:
    x = {v: ncm.position(v, val) for v, val in (intervention or {}).items()}
    free = [v for v in ncm.nodes if v not in x]
    plan = _plan(ncm, [x], [{}], ncm.nodes, [(0, v) for v in free], budget)
    return _Evaluation(ncm, plan), free


def induced_pmf(ncm: Ncm, intervention: Mapping[str, Any] | None = None,
                budget: int = DEFAULT_BUDGET) -> Pmf:
    """Exact ``P(V | do(x))`` over all nodes (intervened nodes are point masses)."""
    ev, free = _pmf_eval(ncm, intervention, budget)
    x = dict(intervention or {})
    probs = ev.value.reshape([len(ncm.domains[v]) for v in free]) if free else ev.value.reshape(())
    full = np.zeros([len(ncm.domains[v]) for v in ncm.nodes])
    idx = tuple(ncm.position(v, x[v]) if v in x else slice(None) for v in ncm.nodes)
    full[idx] = probs
    return Pmf(ncm.nodes, [ncm.domains[v] for v in ncm.nodes], full, atol=1e-8)


def ctf_pmf(ncm: Ncm, query: CtfQuery, budget: int = DEFAULT_BUDGET) -> float:
    """Exact probability of a (conditional) counterfactual query."""
    num = float(_event(ncm, query.terms + query.given, budget).value[0])
    if not query.given:
        return num
    den = float(_event(ncm, query.given, budget).value[0])
    if den <= 0:
        raise UndefinedConditionalError(f"conditioning event of {query} has probability zero")
    return num / den


def ctf_pmf_and_grad(ncm: Ncm, query: CtfQuery, budget: int = DEFAULT_BUDGET) -> tuple[float, np.ndarray]:
    """Query value and its gradient with respect to ``ncm.get_flat()``."""
    num_ev = _event(ncm, query.terms + query.given, budget)
    num = float(num_ev.value[0])
    g_num = ncm._flatten_grads(*num_ev.backward(np.ones(1)))
    if not query.given:
        return num, g_num
    den_ev = _event(ncm, query.given, budget)
    den = float(den_ev.value[0])
    if den <= 0:
        raise UndefinedConditionalError(f"conditioning event of {query} has probability zero")
    g_den = ncm._flatten_grads(*den_ev.backward(np.ones(1)))
    q = num / den
    return q, (g_num - q * g_den) / den


# --------------------------------------------------------------------------
# fitting
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Optimizer settings.

    ``optimizer`` is ``"lbfgs"`` (staged quasi-Newton, one stage per lambda
    value) or ``"gd"`` (plain gradient descent with ``learning_rate``).
    Lambda decays log-linearly from ``lambda_start`` to ``lambda_end``.
    """

    learning_rate: float = 1e-2
    iterations: int = 300
    optimizer: str = "lbfgs"
    lambda_start: float = 1.0
    lambda_end: float = 1e-3
    stages: int = 6
    seed: int = 0
    n_max: int = 64
    init_scale: float = 0.1
    budget: int = DEFAULT_BUDGET

    def __post_init__(self):
        if self.lambda_start < 0 or self.lambda_end < 0:
            raise ValueError("lambda must be non-negative")
        if self.n_max < 1:
            raise ValueError("n_max must be at least 1")
        if self.optimizer not in ("lbfgs", "gd"):
            raise ValueError("optimizer must be 'lbfgs' or 'gd'")
        if self.stages < 1 or self.iterations < 1:
            raise ValueError("stages and iterations must be positive")

    def lambdas(self) -> np.ndarray:
        if self.stages == 1:
            return np.array([self.lambda_end])
        if self.lambda_start == 0 or self.lambda_end == 0:
            return np.linspace(self.lambda_start, self.lambda_end, self.stages)
        return np.geomspace(self.lambda_start, self.lambda_end, self.stages)


@dataclass
class FitResult:
    data_loss: float          # sum of KL(data || model) over datasets
    initial_data_loss: float
    query_value: float | None
    history: list = field(default_factory=list)  # (step, data_loss, query_value)
    n_iter: int = 0


def _datasets(ncm: Ncm, datasets) -> list:
    out = []
    for intervention, pmf in datasets:
        x = {v: ncm.position(v, val) for v, val in dict(intervention).items()}
        free = [v for v in ncm.nodes if v not in x]
        missing = set(free) - set(pmf.variables)
        if missing:
            raise ValueError(f"dataset under do({dict(intervention)}) lacks {sorted(missing)}")
        target = pmf.marginal(free)
        order = [[value_index(target.domain_of(v), d) for d in ncm.domains[v]] for v in free]
        probs = target.probs[np.ix_(*order)] if free else target.probs
        out.append((dict(intervention), probs.ravel()))
    return out


def _data_loss(ncm: Ncm, data, budget: int, need_grad: bool = True):
    total, grad = 0.0, np.zeros(ncm.n_params)
    for intervention, target in data:
        ev, _ = _pmf_eval(ncm, intervention, budget)
        model = ev.value
        pos = target > 0
        if np.any(model[pos] <= 0):
            return np.inf, grad
        total += float(np.sum(target[pos] * (np.log(target[pos]) - np.log(model[pos]))))
        if need_grad:
            up = np.zeros_like(model)
            up[pos] = -target[pos] / model[pos]
            grad += ncm._flatten_grads(*ev.backward(up))
    return total, grad


def fit(ncm: Ncm, datasets: Sequence[tuple[Mapping[str, Any], Pmf]],
        query_reg: tuple[CtfQuery, float] | None = None,
        config: TrainConfig | None = None) -> FitResult:
    """Match ``datasets`` while pushing ``sign * query`` down (sign +1 maximises).

    Minimises ``sum KL(data || model) - sign * lambda * Q``. With
    ``query_reg=None`` only the data term is used. Updates ``ncm`` in place.
    """
    config = config or TrainConfig()
    data = _datasets(ncm, datasets)
    query, sign = (query_reg if query_reg is not None else (None, 0.0))
    history: list = []
    budget = config.budget

    def objective(theta, lam):
        ncm.set_flat(theta)
        loss, grad = _data_loss(ncm, data, budget)
        if not np.isfinite(loss):
            return 1e12, np.zeros_like(theta)
        if query is not None and lam > 0:
            q, gq = ctf_pmf_and_grad(ncm, query, budget)
            loss -= sign * lam * q
            grad = grad - sign * lam * gq
        return loss, grad

    def record(step):
        dl, _ = _data_loss(ncm, data, budget, need_grad=False)
        qv = ctf_pmf(ncm, query, budget) if query is not None else None
        history.append((step, dl, qv))
        return dl

    initial = record(0)
    if not np.isfinite(initial):
        raise DivergenceError("initial data loss is not finite")
    theta = ncm.get_flat()
    lambdas = config.lambdas() if query is not None else np.array([0.0])
    per_stage = max(1, config.iterations // len(lambdas)) if config.optimizer == "gd" else config.iterations
    step = 0
    for lam in lambdas:
        if config.optimizer == "lbfgs":
            res = optimize.minimize(objective, theta, args=(lam,), jac=True, method="L-BFGS-B",
                                    options={"maxiter": per_stage, "gtol": 1e-10, "ftol": 1e-14})
            theta = res.x
            step += int(res.nit)
        else:
            for _ in range(per_stage):
                loss, grad = objective(theta, lam)
                if not np.isfinite(loss) or loss >= 1e12:
                    raise DivergenceError("loss became non-finite")
                theta = theta - config.learning_rate * grad
                step += 1
        ncm.set_flat(theta)
        if not np.all(np.isfinite(theta)):
            raise DivergenceError("parameters became non-finite")
        record(step)
    final = history[-1]
    return FitResult(final[1], initial, final[2], history, step)


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------

def _draw_worlds(ncm: Ncm, worlds: Sequence[Mapping[str, int]], n: int, rng: np.random.Generator):
    cprobs = ncm.clique_probs()
    units = [rng.choice(len(p), size=n, p=p) for p in cprobs]
    r = {v: rng.random(n) for v in ncm.order}
    out = []
    for x in worlds:
        sol = {}
        for v in ncm.order:
            if v in x:
                sol[v] = np.full(n, x[v], dtype=np.int64)
                continue
            dims = [len(ncm.domains[p]) for p in ncm.parents[v]]
            pa = np.ravel_multi_index(tuple(sol[p] for p in ncm.parents[v]), dims) if dims \
                else np.zeros(n, dtype=np.int64)
            cdims = [ncm.clique_sizes[i] for i in ncm.ctx[v]]
            ctx = np.ravel_multi_index(tuple(units[i] for i in ncm.ctx[v]), cdims) if cdims \
                else np.zeros(n, dtype=np.int64)
            cdf = np.cumsum(ncm.response_probs(v)[pa, ctx], axis=1)
            sol[v] = np.minimum((cdf <= r[v][:, None]).sum(axis=1), len(ncm.domains[v]) - 1)
        out.append(sol)
    return out


def sample(ncm: Ncm, n: int, intervention: Mapping[str, Any] | None = None,
           given: CtfQuery | Sequence[Term] | None = None, seed: int = 0,
           min_acceptance: float = 1e-4, batch: int = 4096, max_draws: int = 10**7) -> list[dict]:
    """Draw ``n`` assignments of all nodes under ``do(intervention)``.

    ``given`` (terms, or a query whose terms are the evidence) may involve
    any worlds; draws violating it are rejected.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    rng = np.random.default_rng(seed)
    target = {v: ncm.position(v, val) for v, val in (intervention or {}).items()}
    terms: Sequence[Term] = ()
    if isinstance(given, CtfQuery):
        terms = given.terms + given.given
    elif given is not None:
        terms = tuple(given)
    worlds, constraints = _query_worlds(ncm, terms)
    worlds = [target] + worlds
    constraints = [{}] + constraints
    rows: list[dict] = []
    drawn = accepted = 0
    while len(rows) < n:
        if drawn >= max_draws:
            raise SamplingError(f"only {accepted} of {drawn} draws accepted")
        size = min(batch, max_draws - drawn)
        sols = _draw_worlds(ncm, worlds, size, rng)
        ok = np.ones(size, dtype=bool)
        for sol, c in zip(sols, constraints):
            for v, pos in c.items():
                ok &= sol[v] == pos
        drawn += size
        accepted += int(ok.sum())
        if drawn >= 10 * batch and accepted < min_acceptance * drawn:
            raise SamplingError(f"acceptance rate {accepted / drawn:.2e} below {min_acceptance:g}")
        for i in np.nonzero(ok)[0]:
            rows.append({v: ncm.domains[v][int(sols[0][v][i])] for v in ncm.nodes})
            if len(rows) == n:
                break
    return rows


# --------------------------------------------------------------------------
# estimator interface
# --------------------------------------------------------------------------

class NeuralCausalModel(BaseEstimator):
    """Estimator wrapper: ``fit(datasets, query=..., sign=...)`` then ``predict(query)``.

    ``datasets`` is a list of ``(intervention dict, Pmf)`` pairs over the
    diagram's nodes.
    """

    def __init__(self, cdag=None, domains=None, n_max=64, optimizer="lbfgs", learning_rate=1e-2,
                 iterations=300, lambda_start=1.0, lambda_end=1e-3, stages=6, init_scale=0.1,
                 random_state=0, budget=DEFAULT_BUDGET):
        self.cdag = cdag
        self.domains = domains
        self.n_max = n_max
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.iterations = iterations
        self.lambda_start = lambda_start
        self.lambda_end = lambda_end
        self.stages = stages
        self.init_scale = init_scale
        self.random_state = random_state
        self.budget = budget

    def config(self) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, iterations=self.iterations,
                           optimizer=self.optimizer, lambda_start=self.lambda_start,
                           lambda_end=self.lambda_end, stages=self.stages, seed=self.random_state,
                           n_max=self.n_max, init_scale=self.init_scale, budget=self.budget)

    def fit(self, X, y=None, query: CtfQuery | None = None, sign: float = 0.0):
        if self.cdag is None or self.domains is None:
            raise ValueError("cdag and domains are required")
        config = self.config()
        self.ncm_ = build_ncm(self.cdag, self.domains, config)
        reg = (query, float(sign)) if query is not None and sign != 0 else None
        res = fit(self.ncm_, list(X), reg, config)
        self.data_loss_ = res.data_loss
        self.initial_data_loss_ = res.initial_data_loss
        self.history_ = res.history
        self.n_iter_ = res.n_iter
        self.query_value_ = ctf_pmf(self.ncm_, query, self.budget) if query is not None else None
        return self

    def predict(self, queries):
        check_is_fitted(self, "ncm_")
        if isinstance(queries, CtfQuery):
            return ctf_pmf(self.ncm_, queries, self.budget)
        return np.array([ctf_pmf(self.ncm_, q, self.budget) for q in queries])

    def score(self, X, y=None) -> float:
        """Negative total KL divergence from the datasets."""
        check_is_fitted(self, "ncm_")
        loss, _ = _data_loss(self.ncm_, _datasets(self.ncm_, list(X)), self.budget, need_grad=False)
        return -loss

    def sample(self, n, intervention=None, given=None, seed=0):
        check_is_fitted(self, "ncm_")
        return sample(self.ncm_, n, intervention, given, seed)


# --------------------------------------------------------------------------
# representation learning
# --------------------------------------------------------------------------

class RepresentationMap(TransformerMixin, BaseEstimator):
    """Autoencoder ``z = act(W_e x + b_e)``, ``x_hat = W_d z + b_d``.

    With labels and ``lambda_r > 0`` a softmax head on ``z`` adds
    ``lambda_r`` times its cross-entropy to the mean squared reconstruction
    error.
    """

    def __init__(self, rep_dim=2, activation="identity", lambda_r=0.0, max_iter=5000,
                 tol=1e-14, random_state=0):
        self.rep_dim = rep_dim
        self.activation = activation
        self.lambda_r = lambda_r
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def _act(self, a):
        if self.activation == "identity":
            return a, np.ones_like(a)
        if self.activation == "tanh":
            t = np.tanh(a)
            return t, 1.0 - t * t
        raise ValueError("activation must be 'identity' or 'tanh'")

    def _unpack(self, theta, d, k, c):
        r = self.rep_dim
        shapes = [(d, r), (r,), (r, d), (d,), (r, c), (c,)]
        out, i = [], 0
        for s in shapes:
            n = int(np.prod(s))
            out.append(theta[i:i + n].reshape(s))
            i += n
        return out

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or len(X) == 0:
            raise ValueError("X must be a non-empty 2-d array")
        n, d = X.shape
        r = self.rep_dim
        use_aux = y is not None and self.lambda_r > 0
        if use_aux:
            self.classes_, yi = np.unique(np.asarray(y), return_inverse=True)
            onehot = np.eye(len(self.classes_))[yi]
        c = len(self.classes_) if use_aux else 0
        rng = np.random.default_rng(self.random_state)
        theta0 = np.concatenate([rng.normal(0, 1 / np.sqrt(d), d * r), np.zeros(r),
                                 rng.normal(0, 1 / np.sqrt(r), r * d), np.zeros(d),
                                 rng.normal(0, 0.1, r * c), np.zeros(c)])

        def objective(theta):
            We, be, Wd, bd, Wa, ba = self._unpack(theta, d, r, c)
            a = X @ We + be
            z, dz = self._act(a)
            xh = z @ Wd + bd
            err = xh - X
            loss = float((err ** 2).sum() / n)
            g_xh = 2 * err / n
            gWd, gbd = z.T @ g_xh, g_xh.sum(0)
            g_z = g_xh @ Wd.T
            gWa, gba = np.zeros_like(Wa), np.zeros_like(ba)
            if use_aux:
                probs = _softmax(z @ Wa + ba)
                loss += self.lambda_r * float(-(onehot * np.log(probs + 1e-300)).sum() / n)
                g_logit = self.lambda_r * (probs - onehot) / n
                gWa, gba = z.T @ g_logit, g_logit.sum(0)
                g_z = g_z + g_logit @ Wa.T
            g_a = g_z * dz
            grad = np.concatenate([(X.T @ g_a).ravel(), g_a.sum(0), gWd.ravel(), gbd,
                                   gWa.ravel(), gba])
            return loss, grad

        res = optimize.minimize(objective, theta0, jac=True, method="L-BFGS-B",
                                options={"maxiter": self.max_iter, "gtol": 1e-12, "ftol": self.tol})
        if not np.all(np.isfinite(res.x)):
            raise DivergenceError("representation fit diverged")
        (self.encoder_weights_, self.encoder_bias_, self.decoder_weights_, self.decoder_bias_,
         self.aux_weights_, self.aux_bias_) = [p.copy() for p in self._unpack(res.x, d, r, c)]
        self.n_features_in_ = d
        self.loss_ = float(res.fun)
        self.reconstruction_error_ = self.reconstruction_error(X)
        return self

    def transform(self, X):
        check_is_fitted(self, "encoder_weights_")
        return self._act(np.asarray(X, dtype=float) @ self.encoder_weights_ + self.encoder_bias_)[0]

    def inverse_transform(self, Z):
        check_is_fitted(self, "decoder_weights_")
        return np.asarray(Z, dtype=float) @ self.decoder_weights_ + self.decoder_bias_

    def reconstruction_error(self, X) -> float:
        """Mean squared round-trip error per sample."""
        X = np.asarray(X, dtype=float)
        return float(((self.inverse_transform(self.transform(X)) - X) ** 2).sum(axis=1).mean())


class RepMap:
    """One fitted :class:`RepresentationMap` per cluster."""

    def __init__(self, maps: Mapping[str, RepresentationMap]):
        self.maps = dict(maps)
        dims = {m.rep_dim for m in self.maps.values()}
        self.rep_dim = dims.pop() if len(dims) == 1 else None

    def encode(self, cluster: str, X) -> np.ndarray:
        return self.maps[cluster].transform(X)

    def decode(self, cluster: str, Z) -> np.ndarray:
        return self.maps[cluster].inverse_transform(Z)

    @property
    def reconstruction_error(self) -> dict:
        return {c: m.reconstruction_error_ for c, m in self.maps.items()}


def fit_representation(data, rep_dim: int, labels=None, lambda_r: float = 0.0,
                       activation: str = "identity", seed: int = 0, max_iter: int = 5000) -> RepMap:
    """Fit one representation map per cluster.

    ``data`` is an array (single cluster named ``"V"``) or a mapping from
    cluster name to array; ``labels`` follows the same shape.
    """
    if not isinstance(data, Mapping):
        data = {"V": data}
        labels = None if labels is None else {"V": labels}
    maps = {}
    for c, X in data.items():
        y = None if labels is None else labels.get(c)
        maps[c] = RepresentationMap(rep_dim, activation, lambda_r, max_iter, random_state=seed).fit(X, y)
    return RepMap(maps)


def to_json(ncm: Ncm, config: TrainConfig | None = None) -> str:
    return json.dumps(ncm.to_dict(config), sort_keys=True, indent=1)
