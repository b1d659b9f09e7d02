"""JSON file formats and project loading."""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .abstraction import IntraClustering
from .clusters import InterClustering
from .graphs import CausalDiagram, NonCausalGraph
from .pmf import Pmf
from .query import CtfQuery, coerce_value, format_query, parse_query
from .scm import ExogenousBlock, Scm

__all__ = [
    "ProjectError",
    "Project",
    "dumps",
    "write_json",
    "scm_to_dict",
    "scm_from_dict",
    "diagram_to_dict",
    "diagram_from_dict",
    "noncausal_from_dict",
    "clusters_to_dict",
    "clusters_from_dict",
    "read_samples",
    "load_project",
]


class ProjectError(ValueError):
    """A project file is malformed or inconsistent."""


def dumps(obj: Any) -> str:
    """Canonical JSON: sorted keys, two-space indent, trailing newline."""
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False, default=_default) + "\n"


def _default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, (tuple, set, frozenset)):
        return list(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def write_json(obj: Any, path: str | Path) -> None:
    Path(path).write_text(dumps(obj), encoding="utf-8")


# scm ------------------------------------------------------------------------

def scm_to_dict(scm: Scm) -> dict:
    mechanisms = []
    for v in scm.variables:
        m = scm.mechanisms[v]
        entry = {"output": v, "endo_parents": list(m.endo_parents), "exo_parents": list(m.exo_parents)}
        if m.expr is not None:
            entry["expr"] = m.expr
        else:
            doms = [scm.domains[p] for p in m.endo_parents] + [scm.exogenous[u].domain for u in m.exo_parents]
            table = {}
            for idx in itertools.product(*(range(len(d)) for d in doms)):
                key = ",".join(str(d[i]) for d, i in zip(doms, idx))
                table[key] = scm.domains[v][int(m.table[idx] if idx else m.table)]
            entry["table"] = table
        mechanisms.append(entry)
    return {
        "variables": [{"name": v, "domain": list(scm.domains[v])} for v in scm.variables],
        "exogenous": [{"name": b.name, "domain": list(b.domain), "pmf": list(b.pmf)}
                      for b in scm.exogenous.values()],
        "mechanisms": mechanisms,
    }


def scm_from_dict(data: Mapping) -> Scm:
    try:
        variables = {v["name"]: v["domain"] for v in data["variables"]}
        exo = [ExogenousBlock(b["name"], b["domain"], b["pmf"]) for b in data["exogenous"]]
        mechs = []
        for m in data["mechanisms"]:
            if ("expr" in m) == ("table" in m):
                raise ProjectError(f"mechanism for {m.get('output')!r} needs exactly one of expr/table")
            mechs.append((m["output"], m.get("endo_parents", []), m.get("exo_parents", []),
                          m["expr"] if "expr" in m else m["table"]))
    except KeyError as exc:
        raise ProjectError(f"scm section lacks field {exc}") from None
    return Scm(variables, exo, mechs)


# graphs ---------------------------------------------------------------------

def diagram_to_dict(diagram: CausalDiagram, noncausal: NonCausalGraph | None = None) -> dict:
    out = {
        "nodes": list(diagram.nodes),
        "directed": sorted([list(e) for e in diagram.directed]),
        "bidirected": sorted(sorted(e) for e in diagram.bidirected),
    }
    if noncausal is not None:
        out["noncausal"] = sorted(sorted(e) for e in noncausal.edges)
    return out


def diagram_from_dict(data: Mapping) -> CausalDiagram:
    return CausalDiagram(data["nodes"], data.get("directed", []), data.get("bidirected", []))


def noncausal_from_dict(data: Mapping) -> NonCausalGraph:
    return NonCausalGraph(data["nodes"], data.get("noncausal", []))


# clusters ---------------------------------------------------------------------

def clusters_to_dict(inter: InterClustering, intra: IntraClustering | Mapping | None = None) -> dict:
    out = {"inter": [{"name": c, "members": list(inter.members[c])} for c in inter]}
    if intra is not None:
        intra = intra if isinstance(intra, IntraClustering) else IntraClustering(intra)
        out["intra"] = intra.to_dict()
    return out


def clusters_from_dict(data: Mapping) -> tuple[InterClustering, IntraClustering | None]:
    inter = InterClustering({c["name"]: c["members"] for c in data["inter"]})
    intra = None
    if "intra" in data:
        intra = IntraClustering({
            e["cluster"]: {coerce_value(b["label"]): [tuple(v) for v in b["values"]] for b in e["blocks"]}
            for e in data["intra"]})
    return inter, intra


# data -----------------------------------------------------------------------

def read_samples(path: str | Path, domains: Mapping[str, Any]) -> Pmf:
    """Empirical pmf of a CSV file with a header of variable names."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        unknown = set(header) - set(domains)
        if unknown:
            raise ProjectError(f"{path}: unknown columns {sorted(unknown)}")
        rows = [[coerce_value(x.strip()) for x in row] for row in reader if row]
    return Pmf.from_samples(header, [domains[v] for v in header], rows)


def _parse_assignment(obj) -> dict:
    if isinstance(obj, Mapping):
        return {k: coerce_value(v) for k, v in obj.items()}
    out = {}
    for part in str(obj).split(","):
        if part.strip():
            k, _, v = part.partition("=")
            out[k.strip()] = coerce_value(v.strip())
    return out


# project ----------------------------------------------------------------------

@dataclass
class Project:
    path: Path | None = None
    scm: Scm | None = None
    diagram: CausalDiagram | None = None
    noncausal: NonCausalGraph | None = None
    cdag: CausalDiagram | None = None
    inter: InterClustering | None = None
    intra: IntraClustering | None = None
    queries: list = field(default_factory=list)
    datasets: list = field(default_factory=list)
    domains: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    def require(self, *sections: str) -> None:
        missing = [s for s in sections if getattr(self, s) in (None, [], {})]
        if missing:
            raise ProjectError(f"project lacks section(s): {', '.join(missing)}")


def load_project(path: str | Path) -> Project:
    """Load a project file; a bare SCM document is accepted as ``{"scm": ...}``."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ProjectError(f"{path}: invalid JSON ({exc})") from None
    if "variables" in data and "mechanisms" in data:
        data = {"scm": data}
    proj = Project(path=path, raw=data)
    if "scm" in data:
        proj.scm = scm_from_dict(data["scm"])
        proj.domains.update(proj.scm.domains)
    if "domains" in data:
        proj.domains.update({k: tuple(v) for k, v in data["domains"].items()})
    if "diagram" in data:
        proj.diagram = diagram_from_dict(data["diagram"])
        if "noncausal" in data["diagram"]:
            proj.noncausal = noncausal_from_dict(data["diagram"])
    if "noncausal_graph" in data:
        proj.noncausal = NonCausalGraph(data["noncausal_graph"]["nodes"], data["noncausal_graph"]["edges"])
    if "cdag" in data:
        proj.cdag = diagram_from_dict(data["cdag"])
    if "clusters" in data:
        proj.inter, proj.intra = clusters_from_dict(data["clusters"])
        for v in proj.inter.variables:
            if proj.domains and v not in proj.domains:
                raise ProjectError(f"clustered variable {v!r} has no domain")
    proj.queries = [parse_query(q) for q in data.get("queries", [])]
    for entry in data.get("datasets", []):
        x = _parse_assignment(entry.get("intervention", {}))
        if "pmf" in entry:
            pmf = Pmf.from_json(entry["pmf"])
        elif "samples" in entry:
            pmf = read_samples(path.parent / entry["samples"], proj.domains)
        elif "from_scm" in entry and proj.scm is not None:
            from .scm import layer_pmf
            over = entry.get("over")
            pmf = layer_pmf(proj.scm, x, over)
        else:
            raise ProjectError("dataset needs 'pmf', 'samples' or 'from_scm'")
        proj.datasets.append((x, pmf))
    proj.train = dict(data.get("train", {}))
    if proj.cdag is not None and proj.inter is not None and set(proj.cdag.nodes) != set(proj.inter.names):
        raise ProjectError("cdag nodes must equal the cluster names")
    return proj


def query_strings(queries: list[CtfQuery]) -> list[str]:
    return [format_query(q) for q in queries]
