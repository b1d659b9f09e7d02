"""Dense joint probability tables over finite domains."""

from __future__ import annotations

import itertools
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

__all__ = ["Pmf", "value_index", "UndefinedConditionalError"]


class UndefinedConditionalError(ZeroDivisionError):
    """Conditioning event has probability zero."""


def value_index(domain: Sequence[Any], value: Any) -> int:
    """Position of ``value`` in ``domain``; string forms also match."""
    for i, d in enumerate(domain):
        if d == value:
            return i
    text = str(value)
    for i, d in enumerate(domain):
        if str(d) == text:
            return i
    raise ValueError(f"value {value!r} not in domain {list(domain)}")


class Pmf:
    """Joint pmf stored as an ndarray with one axis per variable.

    Axis ``k`` is indexed by positions in ``domains[k]``.
    """

    def __init__(self, variables: Sequence[str], domains: Sequence[Sequence[Any]],
                 probs: Any, *, atol: float = 1e-9, normalize: bool = False):
        self.variables = tuple(variables)
        self.domains = tuple(tuple(d) for d in domains)
        shape = tuple(len(d) for d in self.domains)
        p = np.asarray(probs, dtype=float).reshape(shape)
        if normalize:
            total = p.sum()
            if total <= 0:
                raise ValueError("cannot normalize an all-zero table")
            p = p / total
        if len(set(self.variables)) != len(self.variables):
            raise ValueError("duplicate variable in pmf")
        if np.any(p < -atol):
            raise ValueError("negative probability")
        if abs(p.sum() - 1.0) > atol:
            raise ValueError(f"pmf sums to {p.sum():.12g}, not 1")
        self.probs = np.clip(p, 0.0, None)
        self.probs.setflags(write=False)

    # construction ---------------------------------------------------------
    @classmethod
    def from_dict(cls, variables, domains, table: Mapping[tuple, float], **kw) -> "Pmf":
        domains = [tuple(d) for d in domains]
        p = np.zeros(tuple(len(d) for d in domains))
        for key, prob in table.items():
            idx = tuple(value_index(d, v) for d, v in zip(domains, key))
            p[idx] += prob
        return cls(variables, domains, p, **kw)

    @classmethod
    def from_samples(cls, variables, domains, rows: Iterable[Sequence[Any]]) -> "Pmf":
        """Empirical pmf of ``rows`` (one value per variable, in order)."""
        domains = [tuple(d) for d in domains]
        lookup = [{v: i for i, v in enumerate(d)} for d in domains]
        counts = np.zeros(tuple(len(d) for d in domains))
        n = 0
        for row in rows:
            idx = []
            for lk, d, v in zip(lookup, domains, row):
                i = lk.get(v)
                idx.append(value_index(d, v) if i is None else i)
            counts[tuple(idx)] += 1
            n += 1
        if n == 0:
            raise ValueError("no samples")
        return cls(variables, domains, counts / n)

    @classmethod
    def from_index_samples(cls, variables, domains, index_rows: np.ndarray) -> "Pmf":
        """Empirical pmf from an (n, k) array of value positions."""
        domains = [tuple(d) for d in domains]
        shape = tuple(len(d) for d in domains)
        flat = np.ravel_multi_index(tuple(np.asarray(index_rows).T), shape)
        counts = np.bincount(flat, minlength=int(np.prod(shape)))
        return cls(variables, domains, counts / counts.sum())

    @classmethod
    def point_mass(cls, variables, domains, assignment: Mapping[str, Any]) -> "Pmf":
        domains = [tuple(d) for d in domains]
        p = np.zeros(tuple(len(d) for d in domains))
        p[tuple(value_index(d, assignment[v]) for v, d in zip(variables, domains))] = 1.0
        return cls(variables, domains, p)

    # queries --------------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.probs.shape

    def domain_of(self, var: str) -> tuple:
        return self.domains[self.variables.index(var)]

    def marginal(self, variables: Sequence[str]) -> "Pmf":
        variables = tuple(variables)
        missing = set(variables) - set(self.variables)
        if missing:
            raise KeyError(f"variables not in pmf: {sorted(missing)}")
        axes = tuple(i for i, v in enumerate(self.variables) if v not in variables)
        p = self.probs.sum(axis=axes) if axes else self.probs
        kept = [v for v in self.variables if v in variables]
        order = [kept.index(v) for v in variables]
        return Pmf(variables, [self.domain_of(v) for v in variables],
                   np.transpose(p, order) if p.ndim else p)

    def prob(self, assignment: Mapping[str, Any]) -> float:
        """Marginal probability of a partial assignment."""
        idx = []
        for v, d in zip(self.variables, self.domains):
            idx.append(value_index(d, assignment[v]) if v in assignment else slice(None))
        unknown = set(assignment) - set(self.variables)
        if unknown:
            raise KeyError(f"variables not in pmf: {sorted(unknown)}")
        return float(self.probs[tuple(idx)].sum())

    def conditional(self, event: Mapping[str, Any], given: Mapping[str, Any]) -> float:
        den = self.prob(given)
        if den <= 0:
            raise UndefinedConditionalError(f"P({dict(given)}) = 0")
        return self.prob({**given, **event}) / den

    def items(self):
        """Yield ``(values, prob)`` for every cell in row-major order."""
        for idx in itertools.product(*(range(len(d)) for d in self.domains)):
            yield tuple(d[i] for d, i in zip(self.domains, idx)), float(self.probs[idx])

    def entropy(self) -> float:
        p = self.probs[self.probs > 0]
        return float(-(p * np.log(p)).sum())

    def reorder(self, variables: Sequence[str]) -> "Pmf":
        if set(variables) != set(self.variables):
            raise ValueError("reorder needs the same variable set")
        return self.marginal(variables)

    def allclose(self, other: "Pmf", atol: float = 1e-9) -> bool:
        if set(self.variables) != set(other.variables):
            return False
        o = other.reorder(self.variables)
        return o.domains == self.domains and bool(np.allclose(self.probs, o.probs, atol=atol, rtol=0))

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        flat = rng.choice(self.probs.size, size=n, p=self.probs.ravel())
        return np.stack(np.unravel_index(flat, self.shape), axis=1)

    def to_dict(self) -> dict:
        return {
            "variables": list(self.variables),
            "domains": [list(d) for d in self.domains],
            "probs": self.probs.ravel().tolist(),
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "Pmf":
        return cls(data["variables"], data["domains"], data["probs"], normalize=False)

    def __repr__(self) -> str:
        return f"Pmf({list(self.variables)}, shape={self.shape})"
