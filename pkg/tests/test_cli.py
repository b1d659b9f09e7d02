import csv
import io
import json
from importlib import resources

import pytest

from causal_abstraction.cli import EXIT_INCONCLUSIVE, EXIT_NOT_ID, EXIT_OK, EXIT_USAGE, main


def data(name):
    with resources.as_file(resources.files("causal_abstraction") / "data" / name) as p:
        return str(p)


def run(capsys, *argv):
    code = main(["--threads", "1", *argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.mark.parametrize("query, expected", [
    ("P(Y_{A=1,B=1}=1)", "0.500000"),
    ("P(Y=1|A=1,B=1)", "0.852941"),
])
def test_eval(capsys, query, expected):
    code, out, _ = run(capsys, "eval", data("drug.json"), query)
    assert code == EXIT_OK and out.strip() == expected


def test_eval_bad_query(capsys):
    code, _, err = run(capsys, "eval", data("drug.json"), "P(Y=")
    assert code == EXIT_USAGE and "error" in err


def test_unknown_command_is_usage_error(capsys):
    assert run(capsys, "frobnicate")[0] == EXIT_USAGE


def test_missing_file_is_usage_error(capsys):
    assert run(capsys, "eval", "/nonexistent.json", "P(Y=1)")[0] == EXIT_USAGE


def test_abstract_then_eval(capsys, tmp_path):
    out_path = tmp_path / "high.json"
    code, _, _ = run(capsys, "abstract", data("drug.json"), "-o", str(out_path))
    assert code == EXIT_OK
    doc = json.loads(out_path.read_text())
    assert set(doc) == {"scm", "tau"}
    code, out, _ = run(capsys, "eval", str(out_path), "P(Y_{X=1}=1)")
    assert code == EXIT_OK and out.strip() == "0.500000"


def test_abstract_reports_witness(capsys, tmp_path):
    code, out, _ = run(capsys, "abstract", data("cholesterol_tc.json"), "-o", str(tmp_path / "x.json"))
    assert code == EXIT_USAGE
    report = json.loads(out)
    assert not report["holds"] and report["witness"]["cluster"] == "Y"
    assert not (tmp_path / "x.json").exists()


@pytest.mark.parametrize("kind, expected", [
    ("aic", EXIT_OK), ("aic-interventional", EXIT_OK), ("L1", EXIT_OK), ("L2", EXIT_OK), ("L3", EXIT_OK),
])
def test_check_drug(capsys, kind, expected):
    code, out, _ = run(capsys, "check", data("drug_r.json"), kind)
    assert code == expected and json.loads(out)["holds"]


def test_check_total_cholesterol_fails(capsys):
    code, out, _ = run(capsys, "check", data("cholesterol_tc.json"), "aic")
    assert code == EXIT_USAGE and not json.loads(out)["holds"]


def test_identify_not_identifiable(capsys):
    code, out, _ = run(capsys, "identify", data("drug.json"))
    assert code == EXIT_NOT_ID
    assert json.loads(out)["status"] == "FAIL"


def test_identify_backdoor_with_series(capsys, tmp_path):
    series = tmp_path / "series.csv"
    code, out, _ = run(capsys, "identify", data("drug_r.json"), "--series", str(series))
    assert code == EXIT_OK
    res = json.loads(out)
    assert res["status"] == "ID" and res["value"] == pytest.approx(0.5, abs=0.05)
    rows = list(csv.DictReader(series.open()))
    assert {r["side"] for r in rows} == {"min", "max"}


def test_estimate(capsys):
    code, out, _ = run(capsys, "estimate", data("drug_r.json"))
    assert code == EXIT_OK and json.loads(out)["value"] == pytest.approx(0.5, abs=0.02)


def test_estimate_inconclusive(capsys, tmp_path):
    doc = json.loads(open(data("drug_r.json")).read())
    doc["train"] = {"max_data_loss": -1.0, "iterations": 5, "stages": 1}
    p = tmp_path / "p.json"
    p.write_text(json.dumps(doc))
    assert run(capsys, "estimate", str(p))[0] == EXIT_INCONCLUSIVE


def test_estimate_sweep_csv(capsys, tmp_path):
    out_csv = tmp_path / "sweep.csv"
    code, _, _ = run(capsys, "estimate", data("drug_r.json"), "--sweep", "n=1000", "--seeds", "2",
                     "--csv", str(out_csv))
    assert code == EXIT_OK
    rows = list(csv.DictReader(out_csv.open()))
    assert len(rows) == 2 and all(float(r["abs_error"]) < 0.2 for r in rows)


def test_estimate_bad_sweep(capsys):
    assert run(capsys, "estimate", data("drug_r.json"), "--sweep", "k=3")[0] == EXIT_USAGE


def test_choose_clusters(capsys):
    code, out, _ = run(capsys, "choose-clusters", data("mustache.json"))
    assert code == EXIT_OK
    sets = {frozenset(c["members"]) for c in json.loads(out)["inter"]}
    assert frozenset({"P1", "P2", "P3", "P4"}) in sets and frozenset({"T"}) in sets


def test_sample(capsys):
    code, out, _ = run(capsys, "sample", data("drug.json"), "-n", "20", "--do", "A=1,B=1", "--seed", "3")
    assert code == EXIT_OK
    rows = list(csv.DictReader(io.StringIO(out)))
    assert len(rows) == 20 and all(r["A"] == "1" and r["B"] == "1" for r in rows)


def test_sample_is_reproducible(capsys):
    first = run(capsys, "sample", data("drug.json"), "-n", "30", "--seed", "9")[1]
    assert run(capsys, "sample", data("drug.json"), "-n", "30", "--seed", "9")[1] == first
