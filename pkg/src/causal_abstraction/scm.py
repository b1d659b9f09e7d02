"""Finite discrete structural causal models evaluated by exhaustive enumeration.

Every mechanism is stored as an integer table that maps parent value
positions (endogenous first, then exogenous) to the position of the output
value. Python callables and expression strings are compiled to that form
when the model is built, so evaluation is always a table lookup.

All evaluation is vectorized over the full exogenous grid: one pass in
topological order yields, per endogenous variable, an array of value
positions with one entry per exogenous assignment.
"""

from __future__ import annotations

import ast
import itertools
import operator
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .graphs import CausalDiagram
from .pmf import Pmf, UndefinedConditionalError, value_index
from .query import CtfQuery, Term

__all__ = [
    "ExogenousBlock",
    "Mechanism",
    "Scm",
    "BudgetExceededError",
    "UndefinedConditionalError",
    "compile_expression",
    "evaluate_unit",
    "ctf_prob",
    "layer_pmf",
    "induced_diagram",
    "functional_ctf_pmf",
    "functional_ctf_prob",
    "DEFAULT_BUDGET",
]

DEFAULT_BUDGET = 10**7


class BudgetExceededError(RuntimeError):
    """Enumeration would exceed the configured budget."""


@dataclass(frozen=True)
class ExogenousBlock:
    name: str
    domain: tuple
    pmf: tuple

    def __post_init__(self):
        object.__setattr__(self, "domain", tuple(self.domain))
        object.__setattr__(self, "pmf", tuple(float(p) for p in self.pmf))
        if not self.domain:
            raise ValueError(f"exogenous {self.name!r} has an empty domain")
        if len(set(self.domain)) != len(self.domain):
            raise ValueError(f"exogenous {self.name!r} repeats a value")
        if len(self.pmf) != len(self.domain):
            raise ValueError(f"exogenous {self.name!r}: pmf length differs from domain")
        if min(self.pmf) < 0 or abs(sum(self.pmf) - 1.0) > 1e-12:
            raise ValueError(f"exogenous {self.name!r}: pmf must be non-negative and sum to 1")

    @classmethod
    def bernoulli(cls, name: str, p1: float) -> "ExogenousBlock":
        return cls(name, (0, 1), (1.0 - p1, p1))


@dataclass(frozen=True, eq=False)
class Mechanism:
    """``output := table[endo positions..., exo positions...]`` (value positions)."""

    output: str
    endo_parents: tuple
    exo_parents: tuple
    table: np.ndarray
    expr: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "endo_parents", tuple(self.endo_parents))
        object.__setattr__(self, "exo_parents", tuple(self.exo_parents))
        t = np.asarray(self.table, dtype=np.int64)
        t.setflags(write=False)
        object.__setattr__(self, "table", t)


# --------------------------------------------------------------------------
# expression compiler
# --------------------------------------------------------------------------

_BINOPS = {
    ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
    ast.Mod: operator.mod, ast.FloorDiv: operator.floordiv, ast.BitXor: operator.xor,
    ast.BitAnd: operator.and_, ast.BitOr: operator.or_,
}
_CMPOPS = {
    ast.Eq: operator.eq, ast.NotEq: operator.ne, ast.Lt: operator.lt,
    ast.LtE: operator.le, ast.Gt: operator.gt, ast.GtE: operator.ge,
}
_FUNCS = {"ind": lambda x: int(bool(x)), "min": min, "max": max, "abs": abs}


def _check_ast(node: ast.AST, names: set):
    allowed = (ast.Expression, ast.BoolOp, ast.And, ast.Or, ast.UnaryOp, ast.Not, ast.USub,
               ast.UAdd, ast.BinOp, ast.Compare, ast.IfExp, ast.Constant, ast.Name, ast.Load,
               ast.Call, *_BINOPS, *_CMPOPS)
    for n in ast.walk(node):
        if not isinstance(n, allowed):
            raise ValueError(f"unsupported syntax {type(n).__name__} in mechanism expression")
        if isinstance(n, ast.Name) and n.id not in names and n.id not in _FUNCS:
            raise ValueError(f"unknown name {n.id!r} in mechanism expression")
        if isinstance(n, ast.Call) and not (isinstance(n.func, ast.Name) and n.func.id in _FUNCS):
            raise ValueError("only ind/min/max/abs may be called in expressions")


def _eval_ast(n: ast.AST, env: Mapping[str, Any]):
    if isinstance(n, ast.Expression):
        return _eval_ast(n.body, env)
    if isinstance(n, ast.Constant):
        return n.value
    if isinstance(n, ast.Name):
        return env[n.id] if n.id in env else _FUNCS[n.id]
    if isinstance(n, ast.BoolOp):
        vals = [bool(_eval_ast(v, env)) for v in n.values]
        return int(all(vals) if isinstance(n.op, ast.And) else any(vals))
    if isinstance(n, ast.UnaryOp):
        v = _eval_ast(n.operand, env)
        if isinstance(n.op, ast.Not):
            return int(not v)
        return -v if isinstance(n.op, ast.USub) else +v
    if isinstance(n, ast.BinOp):
        return _BINOPS[type(n.op)](_eval_ast(n.left, env), _eval_ast(n.right, env))
    if isinstance(n, ast.Compare):
        left = _eval_ast(n.left, env)
        for op, right_node in zip(n.ops, n.comparators):
            right = _eval_ast(right_node, env)
            if not _CMPOPS[type(op)](left, right):
                return 0
            left = right
        return 1
    if isinstance(n, ast.IfExp):
        return _eval_ast(n.body if _eval_ast(n.test, env) else n.orelse, env)
    if isinstance(n, ast.Call):
        return _FUNCS[n.func.id](*(_eval_ast(a, env) for a in n.args))
    raise ValueError(f"cannot evaluate {type(n).__name__}")  # pragma: no cover


def compile_expression(expr: str, names: Sequence[str]) -> Callable[..., Any]:
    """Compile a restricted Python expression over ``names`` into a function.

    Supported: ``and or not``, ``^ & |`` on ints, ``+ - * % //``,
    comparisons, ``a if c else b`` and ``ind(x)``.
    """
    tree = ast.parse(expr, mode="eval")
    _check_ast(tree, set(names))
    names = tuple(names)

    def fn(*args):
        out = _eval_ast(tree, dict(zip(names, args)))
        return int(out) if isinstance(out, bool) else out

    return fn


def _tabulate(output: str, out_domain: tuple, endo: Sequence[str], exo: Sequence[str],
              endo_domains: Sequence[tuple], exo_domains: Sequence[tuple], rule) -> np.ndarray:
    shape = tuple(len(d) for d in endo_domains) + tuple(len(d) for d in exo_domains)
    table = np.empty(shape, dtype=np.int64)
    doms = list(endo_domains) + list(exo_domains)
    for idx in itertools.product(*(range(n) for n in shape)):
        args = [d[i] for d, i in zip(doms, idx)]
        value = rule(*args)
        try:
            table[idx] = value_index(out_domain, value)
        except ValueError:
            raise ValueError(f"mechanism for {output} returns {value!r} outside its domain "
                             f"at parents {args}") from None
    return table


def _table_from_mapping(output, out_domain, endo_domains, exo_domains, mapping) -> np.ndarray:
    shape = tuple(len(d) for d in endo_domains) + tuple(len(d) for d in exo_domains)
    doms = list(endo_domains) + list(exo_domains)
    table = np.full(shape, -1, dtype=np.int64)
    for key, value in mapping.items():
        parts = key if isinstance(key, tuple) else tuple(p.strip() for p in str(key).split(",") if p.strip())
        if len(parts) != len(doms):
            raise ValueError(f"table key {key!r} for {output} has wrong arity")
        idx = tuple(value_index(d, p) for d, p in zip(doms, parts))
        table[idx] = value_index(out_domain, value)
    if (table < 0).any():
        raise ValueError(f"table for {output} is not total")
    return table


# --------------------------------------------------------------------------
# the model
# --------------------------------------------------------------------------

class Scm:
    """Finite recursive SCM.

    Parameters
    ----------
    variables : mapping name -> domain (ordered values)
    exogenous : iterable of :class:`ExogenousBlock`
    mechanisms : iterable of :class:`Mechanism` or tuples
        ``(output, endo_parents, exo_parents, rule)`` where ``rule`` is a
        callable, an expression string or a ``{"p1,...,u1,...": value}`` table.
    """

    def __init__(self, variables: Mapping[str, Sequence[Any]], exogenous: Iterable[ExogenousBlock],
                 mechanisms: Iterable[Mechanism | tuple]):
        self.domains = {str(k): tuple(v) for k, v in variables.items()}
        for name, dom in self.domains.items():
            if not name:
                raise ValueError("empty variable name")
            if not dom or len(set(dom)) != len(dom):
                raise ValueError(f"domain of {name!r} must be non-empty with distinct values")
        self.exogenous = {b.name: b for b in exogenous}
        if set(self.exogenous) & set(self.domains):
            raise ValueError("exogenous and endogenous names overlap")
        mechs = {}
        for m in mechanisms:
            if not isinstance(m, Mechanism):
                m = self._compile(*m)
            if m.output in mechs:
                raise ValueError(f"two mechanisms for {m.output}")
            mechs[m.output] = m
        missing = set(self.domains) - set(mechs)
        if missing:
            raise ValueError(f"no mechanism for {sorted(missing)}")
        for m in mechs.values():
            if m.output not in self.domains:
                raise ValueError(f"mechanism for unknown variable {m.output}")
            for p in m.endo_parents:
                if p not in self.domains:
                    raise ValueError(f"{m.output}: unknown parent {p}")
            for u in m.exo_parents:
                if u not in self.exogenous:
                    raise ValueError(f"{m.output}: undeclared exogenous {u}")
            expect = tuple(len(self.domains[p]) for p in m.endo_parents) + \
                tuple(len(self.exogenous[u].domain) for u in m.exo_parents)
            if m.table.shape != expect:
                raise ValueError(f"{m.output}: table shape {m.table.shape} != {expect}")
            if m.table.min(initial=0) < 0 or m.table.max(initial=0) >= len(self.domains[m.output]):
                raise ValueError(f"{m.output}: table value outside the domain")
        self.mechanisms = {v: mechs[v] for v in self.domains}
        self.order = induced_diagram(self).topological_order()

    def _compile(self, output, endo, exo, rule) -> Mechanism:
        endo, exo = tuple(endo), tuple(exo)
        for p in endo:
            if p not in self.domains:
                raise ValueError(f"{output}: unknown parent {p}")
        for u in exo:
            if u not in self.exogenous:
                raise ValueError(f"{output}: undeclared exogenous {u}")
        endo_d = [self.domains[p] for p in endo]
        exo_d = [self.exogenous[u].domain for u in exo]
        expr = None
        if isinstance(rule, str):
            expr = rule
            rule = compile_expression(rule, endo + exo)
        elif isinstance(rule, Mapping):
            table = _table_from_mapping(output, self.domains[output], endo_d, exo_d, rule)
            return Mechanism(output, endo, exo, table)
        table = _tabulate(output, self.domains[output], endo, exo, endo_d, exo_d, rule)
        return Mechanism(output, endo, exo, table, expr)

    # convenience ----------------------------------------------------------
    @property
    def variables(self) -> tuple:
        return tuple(self.domains)

    @property
    def exogenous_size(self) -> int:
        return int(np.prod([len(b.domain) for b in self.exogenous.values()], dtype=np.int64))

    def parents(self, v: str) -> tuple:
        return self.mechanisms[v].endo_parents

    def unit_grid(self, budget: int = DEFAULT_BUDGET) -> tuple[dict, np.ndarray]:
        """Every exogenous assignment: per-block position arrays plus probabilities."""
        blocks = list(self.exogenous.values())
        n = self.exogenous_size
        if n > budget:
            raise BudgetExceededError(f"{n} exogenous assignments exceed budget {budget}")
        shape = tuple(len(b.domain) for b in blocks)
        idx = np.unravel_index(np.arange(n), shape) if blocks else ()
        weights = np.ones(n)
        grid = {}
        for b, col in zip(blocks, idx):
            grid[b.name] = col
            weights = weights * np.asarray(b.pmf)[col]
        return grid, weights

    def solve(self, grid: Mapping[str, np.ndarray], intervention: Mapping[str, int] | None = None,
              n: int | None = None) -> dict:
        """Value positions of every variable over ``grid`` under ``intervention`` (positions)."""
        intervention = intervention or {}
        if n is None:
            n = len(next(iter(grid.values()))) if grid else 1
        out: dict = {}
        for v in self.order:
            if v in intervention:
                out[v] = np.full(n, intervention[v], dtype=np.int64)
                continue
            m = self.mechanisms[v]
            idx = tuple(out[p] for p in m.endo_parents) + tuple(grid[u] for u in m.exo_parents)
            out[v] = m.table[idx] if idx else np.full(n, int(m.table), dtype=np.int64)
        return out

    def index_of(self, var: str, value: Any) -> int:
        if var not in self.domains:
            raise KeyError(f"unknown variable {var!r}")
        return value_index(self.domains[var], value)

    def positions(self, assignment: Mapping[str, Any] | Iterable[tuple]) -> dict:
        items = assignment.items() if isinstance(assignment, Mapping) else assignment
        return {k: self.index_of(k, v) for k, v in items}

    def __repr__(self) -> str:
        return f"Scm(variables={list(self.domains)}, exogenous={list(self.exogenous)})"


# --------------------------------------------------------------------------
# operations
# --------------------------------------------------------------------------

def evaluate_unit(scm: Scm, u: Mapping[str, Any], intervention: Mapping[str, Any] | None = None) -> dict:
    """Solve the (mutilated) model at a single exogenous assignment."""
    grid = {}
    for name, block in scm.exogenous.items():
        if name not in u:
            raise KeyError(f"missing exogenous value for {name!r}")
        grid[name] = np.array([value_index(block.domain, u[name])])
    pos = scm.positions(intervention or {})
    sol = scm.solve(grid, pos, n=1)
    return {v: scm.domains[v][int(sol[v][0])] for v in scm.variables}


def _worlds(scm: Scm, terms: Sequence[Term]) -> dict:
    worlds: dict = {}
    for t in terms:
        for var, _ in t.outcome + t.intervention:
            if var not in scm.domains:
                raise KeyError(f"unknown variable {var!r} in query")
        worlds.setdefault(t.world, scm.positions(t.intervention))
    return worlds


def _event_mask(scm: Scm, terms: Sequence[Term], grid, n, budget: int) -> np.ndarray:
    worlds = _worlds(scm, terms)
    if n * max(len(worlds), 1) > budget:
        raise BudgetExceededError(f"{n} units x {len(worlds)} worlds exceed budget {budget}")
    solved = {w: scm.solve(grid, pos, n) for w, pos in worlds.items()}
    mask = np.ones(n, dtype=bool)
    for t in terms:
        sol = solved[t.world]
        for var, val in t.outcome:
            mask &= sol[var] == scm.index_of(var, val)
    return mask


def ctf_prob(scm: Scm, query: CtfQuery, budget: int = DEFAULT_BUDGET) -> float:
    """Exact probability of a (conditional) counterfactual conjunction."""
    grid, weights = scm.unit_grid(budget)
    n = len(weights)
    joint = float(weights[_event_mask(scm, query.terms + query.given, grid, n, budget)].sum())
    if not query.given:
        return joint
    den = float(weights[_event_mask(scm, query.given, grid, n, budget)].sum())
    if den <= 0.0:
        raise UndefinedConditionalError(f"conditioning event of {query} has probability zero")
    return joint / den


def layer_pmf(scm: Scm, intervention: Mapping[str, Any] | None = None,
              over: Sequence[str] | None = None, budget: int = DEFAULT_BUDGET) -> Pmf:
    """Joint pmf of ``over`` under ``intervention`` (observational when empty)."""
    over = tuple(over) if over is not None else scm.variables
    for v in over:
        if v not in scm.domains:
            raise KeyError(f"unknown variable {v!r}")
    grid, weights = scm.unit_grid(budget)
    sol = scm.solve(grid, scm.positions(intervention or {}), len(weights))
    shape = tuple(len(scm.domains[v]) for v in over)
    if not over:
        return Pmf((), (), np.array(weights.sum()))
    flat = np.ravel_multi_index(tuple(sol[v] for v in over), shape)
    probs = np.bincount(flat, weights=weights, minlength=int(np.prod(shape)))
    return Pmf(over, [scm.domains[v] for v in over], probs)


def induced_diagram(scm: Scm) -> CausalDiagram:
    """Directed edges from endogenous parents; bidirected edges from shared blocks."""
    directed = [(p, v) for v, m in scm.mechanisms.items() for p in m.endo_parents]
    users: dict = {}
    for v, m in scm.mechanisms.items():
        for u in m.exo_parents:
            users.setdefault(u, []).append(v)
    bidirected = {frozenset((a, b)) for vs in users.values()
                  for a, b in itertools.combinations(dict.fromkeys(vs), 2)}
    return CausalDiagram(scm.domains, directed, [tuple(e) for e in bidirected])


def functional_variables(scm: Scm) -> list[tuple[str, tuple]]:
    """``(V, parent values)`` for every response slot of the functional set."""
    slots = []
    for v in scm.variables:
        m = scm.mechanisms[v]
        for pa in itertools.product(*(scm.domains[p] for p in m.endo_parents)):
            slots.append((v, pa))
    return slots


def _slot_name(scm: Scm, v: str, pa: tuple) -> str:
    parents = scm.mechanisms[v].endo_parents
    if not parents:
        return v
    return f"{v}[" + ",".join(f"{p}={x}" for p, x in zip(parents, pa)) + "]"


def functional_ctf_pmf(scm: Scm, budget: int = 10**6) -> Pmf:
    """Joint pmf of every variable's response to every parent configuration."""
    slots = functional_variables(scm)
    size = 1
    for v, _ in slots:
        size *= len(scm.domains[v])
        if size > budget:
            raise BudgetExceededError(f"functional counterfactual table exceeds budget {budget}")
    grid, weights = scm.unit_grid()
    cols = []
    for v, pa in slots:
        m = scm.mechanisms[v]
        pos = tuple(value_index(scm.domains[p], x) for p, x in zip(m.endo_parents, pa))
        sub = m.table[pos] if pos else m.table
        cols.append(sub[tuple(grid[u] for u in m.exo_parents)] if m.exo_parents
                    else np.full(len(weights), int(sub)))
    shape = tuple(len(scm.domains[v]) for v, _ in slots)
    flat = np.ravel_multi_index(tuple(cols), shape) if cols else np.zeros(len(weights), int)
    probs = np.bincount(flat, weights=weights, minlength=size)
    return Pmf([_slot_name(scm, v, pa) for v, pa in slots],
               [scm.domains[v] for v, _ in slots], probs)


def functional_ctf_prob(scm: Scm, fpmf: Pmf, query: CtfQuery) -> float:
    """Evaluate ``query`` from a functional counterfactual pmf alone.

    Each response pattern ``f`` with positive mass fixes every world
    deterministically; the query is the total mass of patterns satisfying it.
    ``scm`` is used only for its graph structure and domains.
    """
    slots = functional_variables(scm)
    slot_pos = {}
    for k, (v, pa) in enumerate(slots):
        m = scm.mechanisms[v]
        key = tuple(value_index(scm.domains[p], x) for p, x in zip(m.endo_parents, pa))
        slot_pos[(v, key)] = k
    support = np.argwhere(fpmf.probs > 0)
    weights = fpmf.probs[tuple(support.T)]

    def holds(terms):
        worlds = _worlds(scm, terms)
        ok = np.ones(len(support), dtype=bool)
        solved = {}
        for w, pos in worlds.items():
            vals: dict = {}
            for v in scm.order:
                if v in pos:
                    vals[v] = np.full(len(support), pos[v])
                    continue
                m = scm.mechanisms[v]
                out = np.empty(len(support), dtype=np.int64)
                keys = np.stack([vals[p] for p in m.endo_parents], axis=1) if m.endo_parents \
                    else np.zeros((len(support), 0), dtype=np.int64)
                for r, key in enumerate(map(tuple, keys)):
                    out[r] = support[r, slot_pos[(v, key)]]
                vals[v] = out
            solved[w] = vals
        for t in terms:
            for var, val in t.outcome:
                ok &= solved[t.world][var] == scm.index_of(var, val)
        return ok

    joint = float(weights[holds(query.terms + query.given)].sum())
    if not query.given:
        return joint
    den = float(weights[holds(query.given)].sum())
    if den <= 0:
        raise UndefinedConditionalError(f"conditioning event of {query} has probability zero")
    return joint / den
