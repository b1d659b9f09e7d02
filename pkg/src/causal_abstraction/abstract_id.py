"""Identification and estimation of queries across an abstraction with neural causal models."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Sequence

import numpy as np
from scipy import stats
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .abstraction import ConstructiveTau, lift_query, pushforward
from .clusters import InterClustering
from .graphs import CausalDiagram
from .ncm import TrainConfig, build_ncm, ctf_pmf, fit
from .pmf import Pmf
from .query import CtfQuery

__all__ = [
    "ID",
    "FAIL",
    "INCONCLUSIVE",
    "AbstractIdTask",
    "AbstractIdResult",
    "GapTestResult",
    "InconclusiveError",
    "InsufficientRerunsError",
    "NeuralAbstractID",
    "gap_test",
    "neural_abstract_id",
    "estimate_query",
    "lift_datasets",
]

ID, FAIL, INCONCLUSIVE = "ID", "FAIL", "INCONCLUSIVE"


class InconclusiveError(RuntimeError):
    """A fit did not match the data closely enough to decide anything."""

    def __init__(self, message: str, data_losses: Sequence[float] = ()):
        super().__init__(message)
        self.data_losses = list(data_losses)


class InsufficientRerunsError(ValueError):
    pass


@dataclass
class GapTestResult:
    accept: bool
    mean_gap: float
    upper_bound: float
    gaps: list


def gap_test(min_runs: Sequence[float], max_runs: Sequence[float], alpha: float = 0.05,
             epsilon: float = 0.05) -> GapTestResult:
    """Accept identifiability iff the one-sided upper confidence bound of the mean gap is below ``epsilon``."""
    lo, hi = np.asarray(min_runs, dtype=float), np.asarray(max_runs, dtype=float)
    if lo.shape != hi.shape:
        raise ValueError("min and max runs must pair up")
    if lo.size < 2:
        raise InsufficientRerunsError("gap test needs at least 2 reruns per side")
    gaps = hi - lo
    n = gaps.size
    mean = float(gaps.mean())
    sd = float(gaps.std(ddof=1))
    upper = mean + float(stats.t.ppf(1 - alpha, n - 1)) * sd / np.sqrt(n)
    return GapTestResult(bool(upper < epsilon), mean, float(upper), gaps.tolist())


@dataclass
class AbstractIdTask:
    query: CtfQuery
    datasets: list                 # (low intervention, low Pmf)
    tau: ConstructiveTau
    cdag: CausalDiagram
    config: TrainConfig = field(default_factory=TrainConfig)
    reruns: int = 4
    alpha: float = 0.05
    epsilon: float = 0.05
    max_data_loss: float = 1e-2

    def __post_init__(self):
        if set(self.cdag.nodes) != set(self.tau.high_variables_):
            raise ValueError("C-DAG nodes must be the cluster names")


@dataclass
class AbstractIdResult:
    status: str
    value: float | None
    gap: GapTestResult | None
    min_runs: list
    max_runs: list
    min_series: list = field(default_factory=list)  # per rerun: [(step, data_loss, query_value)]
    max_series: list = field(default_factory=list)
    data_losses: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "value": self.value,
            "gap": None if self.gap is None else {
                "mean": self.gap.mean_gap, "upper": self.gap.upper_bound, "gaps": self.gap.gaps},
            "min_runs": self.min_runs,
            "max_runs": self.max_runs,
            "series": {"min": [[list(r) for r in s] for s in self.min_series],
                       "max": [[list(r) for r in s] for s in self.max_series]},
            "data_losses": self.data_losses,
        }


def lift_datasets(tau: ConstructiveTau, datasets: Sequence[tuple[Mapping[str, Any], Pmf]]) -> list:
    """Map low-level ``(intervention, pmf)`` pairs to the cluster level."""
    out = []
    for x, pmf in datasets:
        x_h = tau.apply(dict(x)) if x else {}
        out.append((x_h, pushforward(tau, pmf, list(tau.high_variables_))))
    return out


def _high_problem(task: AbstractIdTask):
    q_high = lift_query(task.tau, task.query)
    data = lift_datasets(task.tau, task.datasets)
    return q_high, data


def _run(task, data, q_high, sign, seed):
    config = replace(task.config, seed=seed)
    ncm = build_ncm(task.cdag, task.tau.high_domains_, config)
    res = fit(ncm, data, (q_high, sign) if sign else None, config)
    return ctf_pmf(ncm, q_high, config.budget), res


def neural_abstract_id(task: AbstractIdTask) -> AbstractIdResult:
    """Fit min- and max-regularised models per rerun, then apply the gap test.

    Runs whose final data loss exceeds ``max_data_loss`` make the result
    inconclusive rather than a failure. An identified value is the mean
    midpoint of the min/max pairs.
    """
    q_high, data = _high_problem(task)
    lo, hi, lo_s, hi_s, losses = [], [], [], [], []
    for r in range(task.reruns):
        seed = task.config.seed + r
        v_min, res_min = _run(task, data, q_high, -1.0, seed)
        v_max, res_max = _run(task, data, q_high, +1.0, seed)
        lo.append(v_min)
        hi.append(v_max)
        lo_s.append(res_min.history)
        hi_s.append(res_max.history)
        losses += [res_min.data_loss, res_max.data_loss]
    if max(losses) > task.max_data_loss:
        return AbstractIdResult(INCONCLUSIVE, None, None, lo, hi, lo_s, hi_s, losses)
    test = gap_test(lo, hi, task.alpha, task.epsilon)
    if not test.accept:
        return AbstractIdResult(FAIL, None, test, lo, hi, lo_s, hi_s, losses)
    value = float(np.mean((np.asarray(lo) + np.asarray(hi)) / 2))
    return AbstractIdResult(ID, value, test, lo, hi, lo_s, hi_s, losses)


def estimate_query(task: AbstractIdTask) -> float:
    """Single unregularised fit; returns the lifted query on the fitted model."""
    q_high, data = _high_problem(task)
    value, res = _run(task, data, q_high, 0.0, task.config.seed)
    if res.data_loss > task.max_data_loss:
        raise InconclusiveError(f"data loss {res.data_loss:.3g} above {task.max_data_loss:g}",
                                [res.data_loss])
    return value


class NeuralAbstractID(BaseEstimator):
    """Estimator form of :func:`neural_abstract_id`.

    ``fit(datasets, query=q)`` sets ``status_``, ``value_``, ``gap_`` and
    ``result_``; ``predict()`` returns ``value_`` and raises unless the
    query was identified.
    """

    def __init__(self, cdag=None, inter=None, intra=None, domains=None, reruns=4, alpha=0.05,
                 epsilon=0.05, max_data_loss=1e-2, n_max=64, iterations=300, lambda_start=1.0,
                 lambda_end=1e-3, stages=6, random_state=0):
        self.cdag = cdag
        self.inter = inter
        self.intra = intra
        self.domains = domains
        self.reruns = reruns
        self.alpha = alpha
        self.epsilon = epsilon
        self.max_data_loss = max_data_loss
        self.n_max = n_max
        self.iterations = iterations
        self.lambda_start = lambda_start
        self.lambda_end = lambda_end
        self.stages = stages
        self.random_state = random_state

    def _task(self, datasets, query) -> AbstractIdTask:
        if isinstance(self.inter, ConstructiveTau):
            tau = self.inter
        else:
            domains = self.domains
            if domains is None and datasets:
                pmf = datasets[0][1]
                domains = dict(zip(pmf.variables, pmf.domains))
            tau = ConstructiveTau(self.inter, self.intra, domains).fit()
        config = TrainConfig(iterations=self.iterations, lambda_start=self.lambda_start,
                             lambda_end=self.lambda_end, stages=self.stages,
                             seed=self.random_state, n_max=self.n_max)
        return AbstractIdTask(query, list(datasets), tau, self.cdag, config, self.reruns,
                              self.alpha, self.epsilon, self.max_data_loss)

    def fit(self, X, y=None, query: CtfQuery | None = None):
        if query is None:
            raise ValueError("query is required")
        self.task_ = self._task(X, query)
        self.result_ = neural_abstract_id(self.task_)
        self.status_ = self.result_.status
        self.value_ = self.result_.value
        self.gap_ = self.result_.gap
        return self

    def predict(self, X=None):
        check_is_fitted(self, "result_")
        if self.status_ != ID:
            raise ValueError(f"query not identified (status {self.status_})")
        return self.value_
