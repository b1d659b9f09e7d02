import itertools
import json

import numpy as np
import pytest
from sklearn.base import clone

from causal_abstraction import zoo
from causal_abstraction.graphs import CausalDiagram
from causal_abstraction.ncm import (
    Ncm, NeuralCausalModel, RepresentationMap, SamplingError, TrainConfig, build_ncm, ctf_pmf, ctf_pmf_and_grad,
    fit, fit_representation, induced_pmf, maximal_cliques, ncm_from_scm, sample, to_json)
from causal_abstraction.pmf import UndefinedConditionalError
from causal_abstraction.query import parse_query
from causal_abstraction.scm import ctf_prob, induced_diagram, layer_pmf

from conftest import random_scm


def finite_difference(ncm, query, h=1e-6):
    theta = ncm.get_flat()
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        for sign in (1, -1):
            t = theta.copy()
            t[i] += sign * h
            ncm.set_flat(t)
            grad[i] += sign * ctf_pmf(ncm, query) / (2 * h)
    ncm.set_flat(theta)
    return grad


def rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def never_x1():
    ncm = ncm_from_scm(zoo.bow_witnesses()[0], zoo.bow_cdag())
    ncm.response_logits["X"][..., 0] = 0.0
    ncm.response_logits["X"][..., 1] = -np.inf
    return ncm


# structure -------------------------------------------------------------------

def test_maximal_cliques_cover_singletons():
    cliques = maximal_cliques(zoo.frontdoor_diagram())
    sets = {frozenset(c) for c in cliques}
    assert frozenset({"C", "F", "P"}) in sets
    assert frozenset({"R", "B"}) in sets
    assert frozenset({"D"}) in sets


def test_canonical_bound():
    ncm = Ncm(zoo.bow_cdag(), {"X": (0, 1), "Y": (0, 1)})
    # X has 2 response functions, Y has 2**2
    assert ncm.canonical_bound(("X", "Y")) == 8
    assert ncm.clique_sizes == (8,)


def test_n_max_caps_clique_size():
    ncm = build_ncm(zoo.frontdoor_cdag(), {"D_H": (0, 1), "Z": (0, 1), "B_H": (0, 1)}, TrainConfig(n_max=3))
    assert max(ncm.clique_sizes) <= 3


def test_flat_roundtrip():
    ncm = build_ncm(zoo.backdoor_cdag(), {v: (0, 1) for v in "RXY"})
    theta = ncm.get_flat()
    other = ncm.copy()
    other.set_flat(theta + 1.0)
    assert not np.allclose(other.get_flat(), theta)
    other.set_flat(theta)
    np.testing.assert_array_equal(other.get_flat(), theta)


# exact evaluation ------------------------------------------------------------

@pytest.mark.parametrize("seed", range(15))
def test_hard_encoding_reproduces_layers(seed):
    scm = random_scm(seed, n_vars=3, n_exo=3)
    ncm = ncm_from_scm(scm)
    np.testing.assert_allclose(induced_pmf(ncm).probs, layer_pmf(scm).probs, atol=1e-12)
    for v in scm.variables:
        for val in scm.domains[v]:
            np.testing.assert_allclose(induced_pmf(ncm, {v: val}).probs,
                                       layer_pmf(scm, {v: val}).probs, atol=1e-12)


@pytest.mark.parametrize("seed", range(15))
def test_hard_encoding_reproduces_counterfactuals(seed):
    scm = random_scm(seed, n_vars=3, n_exo=3)
    ncm = ncm_from_scm(scm)
    last, first = scm.variables[-1], scm.variables[0]
    for a, b, y in itertools.product((0, 1), repeat=3):
        q = parse_query(f"P({last}_{{{first}={a}}}={y}, {last}_{{{first}={b}}}={1 - y})")
        assert ctf_pmf(ncm, q) == pytest.approx(ctf_prob(scm, q), abs=1e-12)


def test_witness_pair_matches_data_but_not_query():
    m1, m2 = zoo.bow_witnesses()
    q = parse_query("P(Y_{X=1}=1)")
    values = []
    for m in (m1, m2):
        ncm = ncm_from_scm(m, zoo.bow_cdag())
        np.testing.assert_allclose(induced_pmf(ncm).probs, [[0.594, 0.066], [0.05, 0.29]], atol=1e-9)
        values.append(ctf_pmf(ncm, q))
    assert values == pytest.approx([0.95, 0.29], abs=1e-9)


def test_conditional_query_and_zero_evidence():
    ncm = ncm_from_scm(zoo.drug_scm())
    assert ctf_pmf(ncm, parse_query("P(Y=1|A=1,B=1)")) == pytest.approx(29 / 34, abs=1e-12)
    with pytest.raises(UndefinedConditionalError):
        ctf_pmf(never_x1(), parse_query("P(Y=1|X=1)"))


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("text", [
    "P(Y=1)", "P(Y_{X=1}=1)", "P(Y_{X=0}=0, Y_{X=1}=1)", "P(Y_{X=1}=1 | X=0)",
])
def test_gradient_matches_finite_difference(seed, text):
    ncm = build_ncm(zoo.backdoor_cdag(), {v: (0, 1) for v in "RXY"}, TrainConfig(seed=seed, init_scale=1.0))
    value, grad = ctf_pmf_and_grad(ncm, parse_query(text))
    assert value == pytest.approx(ctf_pmf(ncm, parse_query(text)), abs=1e-14)
    assert rel_err(grad, finite_difference(ncm, parse_query(text))) <= 1e-6


# fitting ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def bow_data():
    from causal_abstraction.abstraction import build_tau, pushforward
    scm = zoo.drug_scm()
    tau = build_tau(*zoo.drug_clusters(), scm.domains)
    return [({}, pushforward(tau, layer_pmf(scm)))]


def test_fit_matches_data(bow_data):
    ncm = build_ncm(zoo.bow_cdag(), {"X": (0, 1), "Y": (0, 1)})
    res = fit(ncm, bow_data, config=TrainConfig(stages=1))
    assert res.data_loss < 1e-6 < res.initial_data_loss
    np.testing.assert_allclose(induced_pmf(ncm).probs, bow_data[0][1].probs, atol=1e-3)


def test_min_max_regularisation_spreads_nonidentified_query(bow_data):
    q = parse_query("P(Y_{X=1}=1)")
    values = []
    for sign in (-1.0, 1.0):
        ncm = build_ncm(zoo.bow_cdag(), {"X": (0, 1), "Y": (0, 1)})
        res = fit(ncm, bow_data, (q, sign))
        assert res.data_loss < 1e-2
        values.append(ctf_pmf(ncm, q))
    assert values[1] - values[0] > 0.3


def test_gd_optimizer_decreases_loss(bow_data):
    ncm = build_ncm(zoo.bow_cdag(), {"X": (0, 1), "Y": (0, 1)})
    res = fit(ncm, bow_data, config=TrainConfig(optimizer="gd", learning_rate=0.5, iterations=200, stages=1))
    assert res.data_loss < res.initial_data_loss
    assert len(res.history) > 0


@pytest.mark.parametrize("kwargs", [dict(optimizer="adam"), dict(n_max=0), dict(stages=0),
                                    dict(lambda_start=-1.0)])
def test_train_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_lambda_schedule():
    lam = TrainConfig().lambdas()
    assert lam[0] == pytest.approx(1.0) and lam[-1] == pytest.approx(1e-3)
    assert np.all(np.diff(lam) < 0)


# sampling --------------------------------------------------------------------

def test_sample_frequencies():
    ncm = ncm_from_scm(zoo.drug_scm())
    rows = sample(ncm, 20000, seed=1)
    freq = np.mean([r["Y"] for r in rows])
    assert freq == pytest.approx(induced_pmf(ncm).marginal(["Y"]).prob({"Y": 1}), abs=0.02)


def test_sample_intervention_and_evidence():
    ncm = ncm_from_scm(zoo.drug_scm())
    rows = sample(ncm, 500, {"A": 1, "B": 1}, parse_query("P(Y=1)"), seed=2)
    assert all(r["A"] == 1 and r["B"] == 1 for r in rows)
    # evidence lives in the observational world; the intervened world may differ
    freq = np.mean([r["Y"] for r in rows])
    truth = ctf_prob(zoo.drug_scm(), parse_query("P(Y_{A=1,B=1}=1 | Y=1)"))
    assert freq == pytest.approx(truth, abs=0.07)


def test_sample_deterministic_seed():
    ncm = ncm_from_scm(zoo.drug_scm())
    assert sample(ncm, 50, seed=5) == sample(ncm, 50, seed=5)


def test_sample_impossible_evidence():
    with pytest.raises(SamplingError):
        sample(never_x1(), 10, given=parse_query("P(X=1)"), seed=0, max_draws=50000)


# serialisation ---------------------------------------------------------------

def test_checkpoint_roundtrip_with_hard_zeros():
    ncm = ncm_from_scm(zoo.drug_scm())
    data = json.loads(to_json(ncm))
    back = Ncm.from_dict(data)
    np.testing.assert_allclose(induced_pmf(back).probs, induced_pmf(ncm).probs, atol=1e-12)


# estimator interface -----------------------------------------------------------

def test_neural_causal_model_estimator(bow_data):
    est = NeuralCausalModel(cdag=zoo.bow_cdag(), domains={"X": (0, 1), "Y": (0, 1)}, stages=1)
    assert clone(est).get_params()["stages"] == 1
    est.fit(bow_data)
    assert est.score(bow_data) > -1e-6
    assert est.predict(parse_query("P(Y=1|X=1)")) == pytest.approx(29 / 34, abs=1e-3)
    assert est.predict([parse_query("P(X=1)")]).shape == (1,)
    assert len(est.sample(5)) == 5


def test_neural_causal_model_requires_graph(bow_data):
    with pytest.raises(ValueError):
        NeuralCausalModel().fit(bow_data)


# representation ----------------------------------------------------------------

def test_representation_full_rank_reconstructs():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(200, 8))
    rep = RepresentationMap(rep_dim=8).fit(X)
    assert rep.reconstruction_error_ < 1e-6
    assert rep.transform(X).shape == (200, 8)


def test_representation_bottleneck_loses_information():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(200, 8))
    assert RepresentationMap(rep_dim=2).fit(X).reconstruction_error_ > 1.0


def test_representation_aux_head_and_activation():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(100, 4))
    y = (X[:, 0] > 0).astype(int)
    rep = RepresentationMap(rep_dim=4, activation="tanh", lambda_r=0.1, max_iter=500).fit(X, y)
    assert list(rep.classes_) == [0, 1]
    with pytest.raises(ValueError):
        RepresentationMap(activation="relu").fit(X)


def test_fit_representation_per_cluster():
    rng = np.random.default_rng(2)
    maps = fit_representation({"A": rng.normal(size=(50, 3)), "B": rng.normal(size=(50, 3))}, rep_dim=3)
    assert set(maps.reconstruction_error) == {"A", "B"}
    assert maps.rep_dim == 3
