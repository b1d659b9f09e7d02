"""Command-line interface.

Exit codes: 0 success or identified, 1 usage or validation error,
2 inconclusive optimisation, 3 not identifiable.
"""

from __future__ import annotations

import csv
import os
import sys
from dataclasses import fields
from pathlib import Path

import click
import numpy as np

from . import abstract_id as aid
from .abstraction import (AicViolationError, build_tau, check_aic, check_data_aic,
                          construct_abstraction, interventional_family, layer_tau_discrepancy)
from .graphs import ClusterSelectionFailure, choose_clusters
from .io import (ProjectError, clusters_to_dict, dumps, load_project, scm_to_dict, write_json)
from .ncm import Ncm, TrainConfig, ncm_from_scm, sample
from .pmf import Pmf, UndefinedConditionalError
from .query import QueryParseError, format_query, parse_query
from .scm import ctf_prob, layer_pmf

EXIT_OK, EXIT_USAGE, EXIT_INCONCLUSIVE, EXIT_NOT_ID = 0, 1, 2, 3


class Failure(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


def _emit(obj, out: str | None) -> None:
    if out:
        write_json(obj, out)
    else:
        click.echo(dumps(obj), nl=False)


def _train_config(project, seed: int | None = None) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    kwargs = {k: v for k, v in project.train.items() if k in known}
    if seed is not None:
        kwargs["seed"] = seed
    return TrainConfig(**kwargs)


def _tau(project):
    project.require("inter", "intra")
    return build_tau(project.inter, project.intra, project.domains or None)


def _query(project, text: str | None):
    if text:
        return parse_query(text)
    if not project.queries:
        raise Failure("no query given and the project lists none")
    return project.queries[0]


def _task(project, query, seed=None):
    project.require("cdag", "datasets")
    tau = _tau(project)
    extra = {k: project.train[k] for k in ("reruns", "alpha", "epsilon", "max_data_loss") if k in project.train}
    return aid.AbstractIdTask(query, project.datasets, tau, project.cdag, _train_config(project, seed), **extra)


@click.group()
@click.option("--threads", type=int, default=None,
              help="Worker threads for numerical kernels (default: all cores; 1 is bitwise reproducible).")
@click.pass_context
def cli(ctx, threads):
    """Causal abstraction toolkit."""
    from threadpoolctl import threadpool_limits

    n = threads or os.cpu_count() or 1
    ctx.with_resource(threadpool_limits(limits=n))


@cli.command("eval")
@click.argument("project", type=click.Path(exists=True, dir_okay=False))
@click.argument("query")
def cmd_eval(project, query):
    """Exact probability of QUERY in the project's SCM."""
    proj = load_project(project)
    proj.require("scm")
    click.echo(f"{ctf_prob(proj.scm, parse_query(query)):.6f}")


@cli.command("abstract")
@click.argument("project", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--out", type=click.Path(dir_okay=False), required=True)
@click.option("--no-check", is_flag=True, help="Skip the invariance check.")
def cmd_abstract(project, out, no_check):
    """Build the high-level SCM and write it with its clustering."""
    proj = load_project(project)
    proj.require("scm", "inter", "intra")
    try:
        tau, high = construct_abstraction(proj.scm, proj.inter, proj.intra, check=not no_check)
    except AicViolationError as exc:
        click.echo(dumps(exc.report.to_dict()), nl=False)
        raise Failure("abstract invariance condition violated") from None
    write_json({"scm": scm_to_dict(high), "tau": clusters_to_dict(tau.inter_, tau.intra_)}, out)
    click.echo(out)


@cli.command("check")
@click.argument("project", type=click.Path(exists=True, dir_okay=False))
@click.argument("kind", type=click.Choice(["aic", "aic-conditional", "aic-interventional", "L1", "L2", "L3"]))
@click.option("--tol", type=float, default=1e-9, show_default=True)
@click.option("-o", "--out", type=click.Path(dir_okay=False))
def cmd_check(project, kind, tol, out):
    """Invariance or layer-consistency check; exits 1 when it fails."""
    proj = load_project(project)
    proj.require("scm")
    tau = _tau(proj)
    if kind == "aic":
        report = check_aic(proj.scm, tau).to_dict()
        ok = report["holds"]
    elif kind.startswith("aic-"):
        mode = kind.split("-", 1)[1]
        dists = interventional_family(proj.scm, tau) if mode == "interventional" else \
            layer_pmf(proj.scm, over=tau.low_variables_)
        report = check_data_aic(dists, tau, mode, tol).to_dict()
        ok = report["holds"]
    else:
        _, high = construct_abstraction(proj.scm, proj.inter, proj.intra, check=False)
        gap = layer_tau_discrepancy(proj.scm, high, tau, int(kind[1]))
        ok = gap <= tol
        report = {"layer": kind, "holds": ok, "max_discrepancy": gap, "tol": tol}
    _emit(report, out)
    if not ok:
        raise Failure(f"{kind} check failed")


def _write_series(path, result: aid.AbstractIdResult) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["side", "run", "step", "data_loss", "query_value"])
        for side, runs in (("min", result.min_series), ("max", result.max_series)):
            for r, series in enumerate(runs):
                for step, loss, q in series:
                    w.writerow([side, r, step, f"{loss:.10g}", "" if q is None else f"{q:.10g}"])


@cli.command("identify")
@click.argument("project", type=click.Path(exists=True, dir_okay=False))
@click.option("-q", "--query", "query_text", help="Low-level query (default: first project query).")
@click.option("--seed", type=int, default=None)
@click.option("--series", type=click.Path(dir_okay=False), help="CSV of per-step (data loss, query) curves.")
@click.option("-o", "--out", type=click.Path(dir_okay=False))
def cmd_identify(project, query_text, seed, series, out):
    """Decide identifiability across the abstraction and estimate the query."""
    proj = load_project(project)
    query = _query(proj, query_text)
    result = aid.neural_abstract_id(_task(proj, query, seed))
    payload = {"query": format_query(query), **result.to_dict()}
    if not series:
        payload.pop("series")
    else:
        _write_series(series, result)
    _emit(payload, out)
    if result.status == aid.INCONCLUSIVE:
        raise Failure("data not matched; result inconclusive", EXIT_INCONCLUSIVE)
    if result.status == aid.FAIL:
        raise Failure("query is not identifiable from this data and C-DAG", EXIT_NOT_ID)


def _parse_sweep(text: str) -> list[int]:
    key, _, values = text.partition("=")
    if key.strip() != "n" or not values:
        raise click.BadParameter("expected n=1000,10000,...")
    return [int(float(v)) for v in values.split(",")]


@cli.command("estimate")
@click.argument("project", type=click.Path(exists=True, dir_okay=False))
@click.option("-q", "--query", "query_text")
@click.option("--seed", type=int, default=None)
@click.option("--sweep", help="n=1000,10000,... : refit on empirical pmfs of n samples from the SCM.")
@click.option("--seeds", type=int, default=10, show_default=True, help="Repetitions per n in a sweep.")
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), help="Sweep rows (default stdout).")
@click.option("-o", "--out", type=click.Path(dir_okay=False))
def cmd_estimate(project, query_text, seed, sweep, seeds, csv_path, out):
    """Estimate a query assumed identifiable (no min/max pressure)."""
    proj = load_project(project)
    query = _query(proj, query_text)
    if not sweep:
        try:
            value = aid.estimate_query(_task(proj, query, seed))
        except aid.InconclusiveError as exc:
            raise Failure(str(exc), EXIT_INCONCLUSIVE) from None
        _emit({"query": format_query(query), "value": value}, out)
        return
    proj.require("scm", "cdag", "inter", "intra")
    truth = ctf_prob(proj.scm, query)
    rows = sweep_mae(proj, query, _parse_sweep(sweep), seeds, truth)
    fh = open(csv_path, "w", newline="", encoding="utf-8") if csv_path else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(["n", "seed", "estimate", "truth", "abs_error"])
        for r in rows:
            w.writerow([r["n"], r["seed"], f"{r['estimate']:.10g}", f"{truth:.10g}", f"{r['abs_error']:.10g}"])
    finally:
        if csv_path:
            fh.close()


def sweep_mae(proj, query, ns, seeds, truth) -> list[dict]:
    """Refit on empirical pmfs drawn from the project's SCM; one row per (n, seed)."""
    rows = []
    base = proj.datasets or [({}, layer_pmf(proj.scm))]
    for n in ns:
        for s in range(seeds):
            rng = np.random.default_rng([n, s])
            data = []
            for x, pmf in base:
                idx = pmf.sample_indices(n, rng)
                data.append((x, Pmf.from_index_samples(pmf.variables, pmf.domains, idx)))
            task = aid.AbstractIdTask(query, data, _tau(proj), proj.cdag, _train_config(proj, s),
                                      max_data_loss=np.inf)
            est = aid.estimate_query(task)
            rows.append({"n": n, "seed": s, "estimate": est, "abs_error": abs(est - truth)})
    return rows


@cli.command("choose-clusters")
@click.argument("project", type=click.Path(exists=True, dir_okay=False))
@click.option("--remove-unqueried", is_flag=True, help="Also drop variables outside every query.")
@click.option("-o", "--out", type=click.Path(dir_okay=False))
def cmd_choose_clusters(project, remove_unqueried, out):
    """Pick a coarse admissible clustering under which every query stays identifiable."""
    proj = load_project(project)
    proj.require("diagram", "noncausal", "queries")
    try:
        inter = choose_clusters(proj.diagram, proj.noncausal, proj.queries,
                                remove_unqueried=remove_unqueried)
    except ClusterSelectionFailure as exc:
        raise Failure(str(exc)) from None
    _emit(clusters_to_dict(inter), out)


@cli.command("sample")
@click.argument("project", type=click.Path(exists=True, dir_okay=False))
@click.option("-n", "n", type=int, required=True)
@click.option("--do", "do_text", default="", help="Intervention, e.g. 'A=1,B=1'.")
@click.option("--given", "given_text", help="Evidence as a query, e.g. 'P(Y=1)'.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("-o", "--out", type=click.Path(dir_okay=False), help="CSV path (default stdout).")
def cmd_sample(project, n, do_text, given_text, seed, out):
    """Draw samples from the project's model (an NCM checkpoint or the SCM)."""
    proj = load_project(project)
    if "ncm" in proj.raw:
        model = Ncm.from_dict(proj.raw["ncm"])
    else:
        proj.require("scm")
        model = ncm_from_scm(proj.scm)
    from .io import _parse_assignment
    given = parse_query(given_text) if given_text else None
    rows = sample(model, n, _parse_assignment(do_text), given, seed)
    fh = open(out, "w", newline="", encoding="utf-8") if out else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(model.nodes)
        for r in rows:
            w.writerow([r[v] for v in model.nodes])
    finally:
        if out:
            fh.close()


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="causal-abstraction", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return EXIT_USAGE
    except Failure as exc:
        click.echo(f"error: {exc}", err=True)
        return exc.code
    except (ProjectError, QueryParseError, UndefinedConditionalError, ValueError, KeyError) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
