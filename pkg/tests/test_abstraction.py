import itertools

import numpy as np
import pytest
from sklearn.base import clone

from causal_abstraction import zoo
from causal_abstraction.abstraction import (
    AicViolationError, ConstructiveTau, IntraClustering, MisalignedQueryError, apply_tau, build_tau,
    check_aic, check_data_aic, check_layer_tau_consistency, check_q_tau_consistency, construct_abstraction,
    interventional_family, lift_query, lower_query, orbit_intra_clustering, pushforward, q_tau_values,
    recheck_witness)
from causal_abstraction.clusters import InterClustering
from causal_abstraction.query import format_query, parse_query
from causal_abstraction.scm import ctf_prob, layer_pmf

from _instances import random_aic_instance, random_binary_scm, random_clustering, refine


@pytest.fixture
def drug():
    scm = zoo.drug_scm()
    inter, intra = zoo.drug_clusters()
    return scm, build_tau(inter, intra, scm.domains)


# tau -------------------------------------------------------------------------

@pytest.mark.parametrize("low, high", [
    ({"A": 1, "B": 1, "Y": 0}, {"X": 1, "Y": 0}),
    ({"A": 0, "B": 1, "Y": 1}, {"X": 0, "Y": 1}),
    ({"A": 1, "B": 0, "Y": 0}, {"X": 0, "Y": 0}),
])
def test_apply_tau(drug, low, high):
    _, tau = drug
    assert apply_tau(tau, low) == high


def test_apply_tau_partial_and_misaligned(drug):
    _, tau = drug
    assert apply_tau(tau, {"A": 1, "B": 1}) == {"X": 1}
    with pytest.raises(MisalignedQueryError):
        apply_tau(tau, {"R": 1, "A": 1, "B": 1})
    with pytest.raises(MisalignedQueryError):
        apply_tau(tau, {"A": 1})


def test_transform_matrix(drug):
    _, tau = drug
    out = tau.transform(np.array([[1, 1, 0], [0, 1, 1]]))
    assert out.tolist() == [[1, 0], [0, 1]]
    assert list(tau.get_feature_names_out()) == ["X", "Y"]


def test_preimage_lexicographic(drug):
    _, tau = drug
    assert tau.preimage("X", 0) == ((0, 0), (0, 1), (1, 0))
    assert tau.preimage("X", 1) == ((1, 1),)


def test_estimator_protocol(drug):
    scm, tau = drug
    params = tau.get_params()
    assert set(params) == {"inter", "intra", "domains"}
    twin = clone(tau).fit()
    assert twin.apply({"A": 1, "B": 1, "Y": 1}) == {"X": 1, "Y": 1}


def test_unfitted_tau_raises():
    from sklearn.exceptions import NotFittedError
    inter, intra = zoo.drug_clusters()
    with pytest.raises(NotFittedError):
        ConstructiveTau(inter, intra, zoo.drug_scm().domains).apply({"A": 0})


def test_intra_must_partition_domain():
    inter, intra = zoo.drug_clusters()
    bad = dict(intra, X={0: [(0, 0)], 1: [(1, 1)]})
    with pytest.raises(ValueError):
        build_tau(inter, bad, zoo.drug_scm().domains)


def test_overlapping_blocks_rejected():
    with pytest.raises(ValueError):
        IntraClustering({"X": {0: [(0,)], 1: [(0,)]}})


def test_singletons_labels():
    inter = InterClustering({"X": ("A", "B"), "Y": ("Y",)})
    intra = IntraClustering.singletons(inter, zoo.drug_scm().domains)
    assert intra.labels("Y") == (0, 1)
    assert intra.labels("X") == ("0_0", "0_1", "1_0", "1_1")


def test_pushforward_matches_observed_table(drug):
    scm, tau = drug
    high = pushforward(tau, layer_pmf(scm))
    np.testing.assert_allclose(high.probs, [[0.594, 0.066], [0.05, 0.29]], atol=1e-12)


def test_pushforward_preserves_mass(drug):
    scm, tau = drug
    assert pushforward(tau, layer_pmf(scm, {"A": 1})).probs.sum() == pytest.approx(1.0, abs=1e-12)


# queries ---------------------------------------------------------------------

def test_lift_observational(drug):
    _, tau = drug
    assert format_query(lift_query(tau, parse_query("P(Y=1,A=1,B=1)"))) == "P(X=1, Y=1)"


def test_lift_interventional(drug):
    _, tau = drug
    assert format_query(lift_query(tau, parse_query("P(Y_{A=1,B=1}=1)"))) == "P(Y_{X=1}=1)"


def test_lift_misaligned(drug):
    _, tau = drug
    with pytest.raises(MisalignedQueryError):
        lift_query(tau, parse_query("P(Y=1,A=1)"))


def test_lower_enumerates_preimages(drug):
    _, tau = drug
    lowered = lower_query(tau, parse_query("P(Y_{X=0}=1)"))
    assert len(lowered.worlds) == 1
    assert len(lowered.worlds[0]["interventions"]) == 3


def test_identity_lift_is_noop():
    scm = zoo.cholesterol_scm()
    inter = InterClustering({v: (v,) for v in scm.variables})
    tau = build_tau(inter, IntraClustering.singletons(inter, scm.domains), scm.domains)
    q = parse_query("P(Y_{HDL=1}=1 | X=0)")
    assert format_query(lift_query(tau, q)) == format_query(q)


# invariance ------------------------------------------------------------------

def test_aic_fails_total_cholesterol():
    scm = zoo.cholesterol_scm()
    tau = build_tau(*zoo.cholesterol_clusters("TC"), scm.domains)
    report = check_aic(scm, tau)
    assert not report.holds
    w = report.witness
    assert w.cluster == "Y"
    assert {(w.v1["HDL"], w.v1["LDL"]), (w.v2["HDL"], w.v2["LDL"])} == {(0, 1), (1, 0)}
    assert recheck_witness(scm, tau, w)


def test_aic_holds_difference_clustering():
    scm = zoo.cholesterol_scm()
    tau = build_tau(*zoo.cholesterol_clusters("Z"), scm.domains)
    assert check_aic(scm, tau).holds


@pytest.mark.parametrize("seed", range(10))
def test_aic_holds_for_singletons(seed):
    rng = np.random.default_rng(seed)
    scm = random_binary_scm(rng)
    inter = random_clustering(rng, scm.variables)
    tau = build_tau(inter, IntraClustering.singletons(inter, scm.domains), scm.domains)
    assert check_aic(scm, tau).holds


def test_refinement_can_break_aic():
    # A copies P; one block per cluster is trivially invariant, splitting A is not
    from causal_abstraction.scm import ExogenousBlock, Scm
    scm = Scm({"P": (0, 1), "A": (0, 1)}, [ExogenousBlock.bernoulli("U", 0.5)],
              [("P", [], ["U"], "U"), ("A", ["P"], [], "P")])
    inter = InterClustering({"CP": ("P",), "CA": ("A",)})
    coarse = {"CP": {0: [(0,), (1,)]}, "CA": {0: [(0,), (1,)]}}
    fine = {"CP": {0: [(0,), (1,)]}, "CA": {0: [(0,)], 1: [(1,)]}}
    assert check_aic(scm, build_tau(inter, coarse, scm.domains)).holds
    assert not check_aic(scm, build_tau(inter, fine, scm.domains)).holds


@pytest.mark.parametrize("seed", range(10))
def test_singletons_above_coarse_sinks_keep_aic(seed):
    # premise side fully refined, output side of sinks fully coarse
    from causal_abstraction.graphs import induce_cdag
    from causal_abstraction.scm import induced_diagram
    scm, inter, _ = random_aic_instance(seed)
    cdag = induce_cdag(induced_diagram(scm), inter)
    singles = IntraClustering.singletons(inter, scm.domains).blocks
    intra = {c: ({0: [cell for _, cells in singles[c] for cell in cells]} if not cdag.children(c)
                 else {lbl: cells for lbl, cells in singles[c]})
             for c in inter}
    assert check_aic(scm, build_tau(inter, intra, scm.domains)).holds


def test_refine_helper_splits_one_block():
    scm, inter, intra = random_aic_instance(3)
    finer = refine(np.random.default_rng(3), intra)
    assert sum(len(b) for b in finer.values()) == sum(len(b) for b in intra.values()) + 1


def test_data_aic_total_cholesterol_fails_interventionally():
    scm = zoo.cholesterol_scm()
    tau = build_tau(*zoo.cholesterol_clusters("TC"), scm.domains)
    assert not check_data_aic(interventional_family(scm, tau), tau, "interventional").holds
    assert not check_data_aic(layer_pmf(scm), tau, "conditional").holds


def test_data_aic_difference_clustering():
    scm = zoo.cholesterol_scm()
    tau = build_tau(*zoo.cholesterol_clusters("Z"), scm.domains)
    assert check_data_aic(interventional_family(scm, tau), tau, "interventional").holds
    # conditioning on Z mixes in different X, so the conditional form is stricter
    assert not check_data_aic(layer_pmf(scm), tau, "conditional").holds


def test_data_aic_voting_symmetry():
    scm = zoo.voting_scm()
    inter = InterClustering({"X": ("X1", "X2"), "Y": ("Y",)})
    orbits = orbit_intra_clustering([(0, 1), (0, 1)], [lambda c: (c[1], c[0])])
    tau = build_tau(inter, {"X": dict(enumerate(orbits)), "Y": {0: [(0,)], 1: [(1,)]}}, scm.domains)
    assert check_aic(scm, tau).holds
    assert check_data_aic(interventional_family(scm, tau), tau, "interventional").holds
    assert check_data_aic(layer_pmf(scm), tau, "conditional").holds


def test_data_aic_bad_mode(drug):
    scm, tau = drug
    with pytest.raises(ValueError):
        check_data_aic(layer_pmf(scm), tau, "bogus")


# construction ----------------------------------------------------------------

def test_construct_drug(drug):
    scm, _ = drug
    tau, high = construct_abstraction(scm, *zoo.drug_clusters())
    assert ctf_prob(high, parse_query("P(Y_{X=1}=1)")) == pytest.approx(0.5, abs=1e-12)
    assert check_layer_tau_consistency(scm, high, tau, 1)
    assert check_layer_tau_consistency(scm, high, tau, 2)


def test_construct_difference_clustering():
    scm = zoo.cholesterol_scm()
    tau, high = construct_abstraction(scm, *zoo.cholesterol_clusters("Z"))
    assert ctf_prob(high, parse_query("P(Y_{Z=1}=1)")) == pytest.approx(0.9, abs=1e-12)
    assert ctf_prob(high, parse_query("P(Y_{Z=0}=1)")) == pytest.approx(0.1, abs=1e-12)


def test_construct_refuses_violation():
    scm = zoo.cholesterol_scm()
    with pytest.raises(AicViolationError) as exc:
        construct_abstraction(scm, *zoo.cholesterol_clusters("TC"))
    assert exc.value.report.witness.cluster == "Y"


def test_construct_identity_is_isomorphic():
    scm = zoo.drug_scm()
    inter = InterClustering({v: (v,) for v in scm.variables})
    tau, high = construct_abstraction(scm, inter, IntraClustering.singletons(inter, scm.domains))
    for q in ("P(Y=1|A=1,B=1)", "P(Y_{A=1,B=1}=1)", "P(Y_{A=0}=1, Y_{A=1}=0)"):
        assert ctf_prob(high, parse_query(q)) == pytest.approx(ctf_prob(scm, parse_query(q)), abs=1e-12)
    assert check_layer_tau_consistency(scm, high, tau, 3)


# consistency -----------------------------------------------------------------

def test_q_tau_hand_model_observational(drug):
    scm, tau = drug
    assert check_q_tau_consistency(scm, zoo.drug_high_model_observational(), tau, parse_query("P(Y=1,A=1,B=1)"))


def test_q_tau_hand_model_interventional(drug):
    scm, tau = drug
    low, high = q_tau_values(scm, zoo.drug_high_model_observational(), tau, parse_query("P(Y_{A=1,B=1}=1)"))
    assert low == pytest.approx(0.5, abs=1e-12)
    assert high == pytest.approx(29 / 34, abs=1e-12)
    assert not check_q_tau_consistency(scm, zoo.drug_high_model_observational(), tau,
                                       parse_query("P(Y_{A=1,B=1}=1)"))


def test_layer_consistency_hand_model(drug):
    scm, tau = drug
    hand = zoo.drug_high_model_observational()
    assert check_layer_tau_consistency(scm, hand, tau, 1)
    assert not check_layer_tau_consistency(scm, hand, tau, 2)


def test_layer_argument_validated(drug):
    scm, tau = drug
    with pytest.raises(ValueError):
        check_layer_tau_consistency(scm, scm, tau, 4)


# orbits ----------------------------------------------------------------------

def test_orbit_swap():
    assert orbit_intra_clustering([(0, 1), (0, 1)], [lambda c: (c[1], c[0])]) == \
        [((0, 0),), ((0, 1), (1, 0)), ((1, 1),)]


def test_orbit_identity():
    cells = list(itertools.product((0, 1, 2)))
    assert orbit_intra_clustering([(0, 1, 2)], []) == [(c,) for c in cells]


def test_orbit_three_cycle():
    orbits = orbit_intra_clustering([(0, 1)] * 3, [lambda c: (c[2], c[0], c[1])])
    assert sorted(len(o) for o in orbits) == [1, 1, 3, 3]


def test_orbit_mapping_generator():
    orbits = orbit_intra_clustering([(0, 1, 2)], [{(0,): (1,), (1,): (0,), (2,): (2,)}])
    assert orbits == [((0,), (1,)), ((2,),)]


def test_orbit_rejects_non_bijection():
    with pytest.raises(ValueError):
        orbit_intra_clustering([(0, 1)], [lambda c: (0,)])
