"""Intervariable clusterings."""

from __future__ import annotations

from typing import Iterable, Mapping, Sequence

__all__ = ["InterClustering"]


class InterClustering:
    """Disjoint named clusters over a subset of the low-level variables.

    Variables outside every cluster are excluded (projected away).
    """

    def __init__(self, clusters: Mapping[str, Iterable[str]] | Sequence[Iterable[str]]):
        if isinstance(clusters, Mapping):
            items = [(str(k), tuple(v)) for k, v in clusters.items()]
        else:
            items = []
            for c in clusters:
                members = tuple(c)
                items.append(("+".join(sorted(members)), members))
        seen: set = set()
        names: set = set()
        for name, members in items:
            if not members:
                raise ValueError(f"cluster {name!r} is empty")
            if name in names:
                raise ValueError(f"duplicate cluster name {name!r}")
            if len(set(members)) != len(members) or seen & set(members):
                raise ValueError(f"cluster {name!r} overlaps another cluster")
            names.add(name)
            seen |= set(members)
        self.names = tuple(n for n, _ in items)
        self.members = {n: tuple(m) for n, m in items}
        self._owner = {v: n for n, m in items for v in m}

    @classmethod
    def singletons(cls, variables: Iterable[str]) -> "InterClustering":
        return cls({v: (v,) for v in variables})

    @property
    def variables(self) -> tuple:
        return tuple(v for n in self.names for v in self.members[n])

    def __iter__(self):
        return iter(self.names)

    def __len__(self) -> int:
        return len(self.names)

    def cluster_of(self, var: str) -> str | None:
        return self._owner.get(var)

    def as_sets(self) -> set:
        return {frozenset(m) for m in self.members.values()}

    def __eq__(self, other) -> bool:
        return isinstance(other, InterClustering) and self.as_sets() == other.as_sets()

    def __hash__(self) -> int:
        return hash(frozenset(self.as_sets()))

    def covering(self, variables: Iterable[str]) -> tuple | None:
        """Names of clusters whose union is exactly ``variables``, else None."""
        variables = set(variables)
        names = []
        for v in variables:
            n = self._owner.get(v)
            if n is None:
                return None
            if n not in names:
                names.append(n)
        if set().union(*(set(self.members[n]) for n in names)) != variables:
            return None
        return tuple(n for n in self.names if n in names)

    def coarser_than(self, other: "InterClustering") -> bool:
        """Every cluster of ``other`` misses all of ``self`` or sits inside one cluster."""
        mine = set(self.variables)
        for members in other.members.values():
            m = set(members)
            if not (m & mine):
                continue
            if not any(m <= set(c) for c in self.members.values()):
                return False
        return True

    def without(self, var: str) -> "InterClustering":
        out = {}
        for n in self.names:
            rest = tuple(v for v in self.members[n] if v != var)
            if rest:
                out[n] = rest
        return InterClustering(out)

    def merged(self, a: str, b: str, name: str | None = None) -> "InterClustering":
        members = self.members[a] + self.members[b]
        name = name or "+".join(sorted(members))
        out = {}
        for n in self.names:
            if n == a:
                out[name] = members
            elif n != b:
                out[n] = self.members[n]
        return InterClustering(out)

    def renamed(self, mapping: Mapping[str, str]) -> "InterClustering":
        return InterClustering({mapping.get(n, n): self.members[n] for n in self.names})

    def to_dict(self) -> list:
        return [{"name": n, "members": list(self.members[n])} for n in self.names]

    def __repr__(self) -> str:
        body = ", ".join(f"{n}={{{','.join(self.members[n])}}}" for n in self.names)
        return f"InterClustering({body})"
