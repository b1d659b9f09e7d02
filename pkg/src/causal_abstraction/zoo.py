"""Ready-made models, diagrams and clusterings used by tests, docs and the CLI."""

from __future__ import annotations

from .clusters import InterClustering
from .graphs import CausalDiagram, NonCausalGraph
from .pmf import Pmf
from .query import parse_query
from .scm import ExogenousBlock, Scm

B = (0, 1)
bern = ExogenousBlock.bernoulli


def drug_scm() -> Scm:
    """Drug study: R confounds Y, treatments A then B, recovery Y."""
    return Scm(
        {"R": B, "A": B, "B": B, "Y": B},
        [bern("U_RY", 0.5), bern("U_A", 0.2), bern("U_B", 0.2), bern("U_Y", 0.1)],
        [
            ("R", [], ["U_RY"], "U_RY"),
            ("A", ["R"], ["U_A"], "R ^ U_A"),
            ("B", ["R", "A"], ["U_B"], "(R and A) ^ U_B"),
            ("Y", ["A", "B"], ["U_RY", "U_Y"], "(A and B and U_RY) ^ U_Y"),
        ],
    )


def drug_clusters(with_r: bool = False) -> tuple[InterClustering, dict]:
    """``X = {A, B}`` with X=1 iff both treatments, ``Y = {Y}``; optionally ``R``."""
    inter = {"X": ("A", "B"), "Y": ("Y",)}
    intra = {
        "X": {0: [(0, 0), (0, 1), (1, 0)], 1: [(1, 1)]},
        "Y": {0: [(0,)], 1: [(1,)]},
    }
    if with_r:
        inter = {"R": ("R",), **inter}
        intra = {"R": {0: [(0,)], 1: [(1,)]}, **intra}
    return InterClustering(inter), intra


def drug_high_model_observational() -> Scm:
    """Hand-built high-level model that matches only the observational layer."""
    return Scm(
        {"X": B, "Y": B},
        [bern("U_X", 0.34), bern("U_Y0", 0.1), bern("U_Y1", 29 / 34)],
        [
            ("X", [], ["U_X"], "U_X"),
            ("Y", ["X"], ["U_Y0", "U_Y1"], "U_Y1 if X == 1 else U_Y0"),
        ],
    )


def cholesterol_scm() -> Scm:
    return Scm(
        {"X": B, "HDL": B, "LDL": B, "Y": B},
        [bern("U_X", 0.5), bern("U_C1", 0.1), bern("U_C2", 0.1), bern("U_Y", 0.1)],
        [
            ("X", [], ["U_X"], "U_X"),
            ("HDL", ["X"], ["U_C1"], "X ^ U_C1"),
            ("LDL", ["X"], ["U_C2"], "X ^ U_C2"),
            ("Y", ["HDL", "LDL"], ["U_Y"], "(LDL and not HDL) ^ U_Y"),
        ],
    )


def cholesterol_clusters(kind: str = "Z") -> tuple[InterClustering, dict]:
    """``kind="TC"`` groups by HDL+LDL; ``kind="Z"`` groups by LDL-HDL."""
    inter = InterClustering({"X": ("X",), kind: ("HDL", "LDL"), "Y": ("Y",)})
    if kind == "TC":
        blocks = {0: [(0, 0)], 1: [(0, 1), (1, 0)], 2: [(1, 1)]}
    elif kind == "Z":
        blocks = {-1: [(1, 0)], 0: [(0, 0), (1, 1)], 1: [(0, 1)]}
    else:
        raise ValueError("kind must be 'TC' or 'Z'")
    intra = {"X": {0: [(0,)], 1: [(1,)]}, kind: blocks, "Y": {0: [(0,)], 1: [(1,)]}}
    return inter, intra


def voting_scm() -> Scm:
    """Outcome symmetric in two votes."""
    return Scm(
        {"X1": B, "X2": B, "Y": B},
        [bern("U1", 0.5), bern("U2", 0.5), bern("U_Y", 0.1)],
        [
            ("X1", [], ["U1"], "U1"),
            ("X2", [], ["U2"], "U2"),
            ("Y", ["X1", "X2"], ["U_Y"], "(X1 and X2) ^ U_Y"),
        ],
    )


def bow_witnesses() -> tuple[Scm, Scm]:
    """Two models over X -> Y, X <-> Y with equal P(X, Y) but different P(Y_{X=1})."""
    exo = [bern("U_XY", 0.34), bern("U_Y0", 0.1), bern("U_Y1", 29 / 34)]
    m1 = Scm({"X": B, "Y": B}, exo, [
        ("X", [], ["U_XY"], "U_XY"),
        ("Y", ["X"], ["U_XY", "U_Y0", "U_Y1"], "U_Y1 if U_XY == 1 else (X or U_Y0)"),
    ])
    m2 = Scm({"X": B, "Y": B}, exo, [
        ("X", [], ["U_XY"], "U_XY"),
        ("Y", ["X"], ["U_XY", "U_Y0", "U_Y1"], "U_Y1 if U_XY == 1 else ((not X) and U_Y0)"),
    ])
    return m1, m2


def backdoor_high_model() -> Scm:
    """High-level model over R -> X -> Y, R <-> Y consistent with the drug data."""
    return Scm(
        {"R": B, "X": B, "Y": B},
        [bern("U_RY", 0.5), bern("U_X0", 0.04), bern("U_X1", 0.64),
         bern("U_Y0", 0.1), bern("U_Y1", 0.1), bern("U_Y2", 0.1), bern("U_Y3", 0.9)],
        [
            ("R", [], ["U_RY"], "U_RY"),
            ("X", ["R"], ["U_X0", "U_X1"], "U_X1 if R == 1 else U_X0"),
            ("Y", ["X"], ["U_RY", "U_Y0", "U_Y1", "U_Y2", "U_Y3"],
             "(U_Y3 if U_RY else U_Y2) if X == 1 else (U_Y1 if U_RY else U_Y0)"),
        ],
    )


# front-door instance --------------------------------------------------------

NUTRIENT_WEIGHTS = {"C": 4, "F": 9, "P": 4}
CALORIE_THRESHOLD = 9


def frontdoor_scm() -> Scm:
    """Binary nutrition stand-in: R -> D -> {C, F, P} -> B with R <-> B.

    ``C, F, P`` share a nutrient block ``U_N``; ``B`` reads them only
    through the calorie indicator ``Z = [4C + 9F + 4P >= 9]``.
    """
    return Scm(
        {"R": B, "D": B, "C": B, "F": B, "P": B, "B": B},
        [bern("U_RB", 0.4), bern("U_D", 0.25), ExogenousBlock("U_N", (0, 1, 2, 3), (0.4, 0.3, 0.2, 0.1)),
         bern("U_B", 0.15)],
        [
            ("R", [], ["U_RB"], "U_RB"),
            ("D", ["R"], ["U_D"], "R ^ U_D"),
            ("C", ["D"], ["U_N"], "D if U_N == 0 else ind(U_N % 2)"),
            ("F", ["D"], ["U_N"], "D if U_N < 2 else 1 - D"),
            ("P", ["D"], ["U_N"], "D if U_N != 1 else ind(U_N == 1)"),
            ("B", ["C", "F", "P"], ["U_RB", "U_B"],
             "(ind(4*C + 9*F + 4*P >= 9) ^ U_B) if U_RB == 0 else (ind(4*C + 9*F + 4*P >= 9) or U_B)"),
        ],
    )


def frontdoor_diagram() -> CausalDiagram:
    return CausalDiagram(
        ["R", "D", "C", "F", "P", "B"],
        [("R", "D"), ("D", "C"), ("D", "F"), ("D", "P"), ("C", "B"), ("F", "B"), ("P", "B")],
        [("R", "B"), ("C", "F"), ("C", "P"), ("F", "P")],
    )


def frontdoor_clusters() -> tuple[InterClustering, dict]:
    import itertools
    cells = list(itertools.product(B, B, B))
    z = {0: [], 1: []}
    for c, f, p in cells:
        z[int(4 * c + 9 * f + 4 * p >= CALORIE_THRESHOLD)].append((c, f, p))
    inter = InterClustering({"D_H": ("D",), "Z": ("C", "F", "P"), "B_H": ("B",)})
    intra = {"D_H": {0: [(0,)], 1: [(1,)]}, "Z": z, "B_H": {0: [(0,)], 1: [(1,)]}}
    return inter, intra


# diagrams -------------------------------------------------------------------

def drug_diagram() -> CausalDiagram:
    return CausalDiagram(["R", "A", "B", "Y"],
                         [("R", "A"), ("R", "B"), ("A", "B"), ("A", "Y"), ("B", "Y")],
                         [("R", "Y")])


def bow_cdag() -> CausalDiagram:
    return CausalDiagram(["X", "Y"], [("X", "Y")], [("X", "Y")])


def backdoor_cdag() -> CausalDiagram:
    return CausalDiagram(["R", "X", "Y"], [("R", "X"), ("X", "Y")], [("R", "Y")])


def frontdoor_cdag() -> CausalDiagram:
    return CausalDiagram(["D_H", "Z", "B_H"], [("D_H", "Z"), ("Z", "B_H")], [("D_H", "B_H")])


# mustache instance ----------------------------------------------------------

MUSTACHE_NODES = ["A", "T", "G", "H1", "H2", "O1", "O2", "O3", "O4", "P1", "P2", "P3", "P4"]


def mustache_diagram() -> CausalDiagram:
    directed = [("A", "T"), ("G", "T"), ("T", "H1"), ("T", "H2"), ("T", "O1"),
                ("G", "P1"), ("A", "P1"), ("H1", "P1"), ("H2", "P1"), ("H2", "P2"),
                ("O3", "P4"), ("O4", "P4")]
    return CausalDiagram(MUSTACHE_NODES, directed, [("G", "A")])


def mustache_noncausal() -> NonCausalGraph:
    import itertools
    os_ = ["O1", "O2", "O3", "O4"]
    edges = list(itertools.combinations(os_, 2))
    edges += [("P1", "P2"), ("P1", "P3"), ("P2", "P4"), ("P3", "P4")]
    return NonCausalGraph(MUSTACHE_NODES, edges)


def mustache_queries():
    m = "H1=0,H2=0,O1=0,O2=0,O3=0,O4=0"
    p = "P1_{%s}=0, P2_{%s}=0, P3_{%s}=0, P4_{%s}=0"
    return [
        parse_query("P(" + p % (m, m, m, m) + ")"),
        parse_query("P(" + p % ((m + ",G=0",) * 4) + ")"),
        parse_query("P(" + p % (("A=0",) * 4) + ")"),
    ]


def observational_table(scm: Scm) -> Pmf:
    from .scm import layer_pmf
    return layer_pmf(scm)
