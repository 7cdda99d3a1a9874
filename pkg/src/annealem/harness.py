"""Experiment harness: monotonicity audits and the EM-vs-annealed comparison.

The comparison experiment fits three overlapping Gaussian clusters centered
at (-1, 0), (0, 0) and (1, 0) many times from shared random starting points,
classifies every fit with an assignment-matched mean-error criterion, and
aggregates a 2x2 success/fail contingency table plus iterations-to-success
statistics.  The monotonicity experiment freezes (beta, gamma) and audits
that the free energy never increases across iterations.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed

from .classic import FitTrace, initialize_params, run_em
from .engine import AnnealSchedule, AnnealState, iterate_at_fixed_anneal, run_dqaem
from .errors import MonotonicityError, ParameterError
from .model import Dataset, MfaParams, sample_dataset


@dataclass(frozen=True)
class SuccessCriterion:
    """Fit counts as successful when every matched squared mean error is below
    ``threshold_factor`` times the trace of the true component covariance."""

    threshold_factor: float = 0.2

    def __post_init__(self):
        if self.threshold_factor <= 0.0:
            raise ParameterError("threshold_factor must be positive")


@dataclass(frozen=True)
class SuccessResult:
    success: bool
    per_component_error: np.ndarray
    assignment: tuple


@dataclass
class ContingencyTable:
    """2x2 success/fail counts for the two solvers over all trials."""

    em_success_dq_success: int = 0
    em_success_dq_fail: int = 0
    em_fail_dq_success: int = 0
    em_fail_dq_fail: int = 0

    @property
    def trials(self) -> int:
        return (
            self.em_success_dq_success
            + self.em_success_dq_fail
            + self.em_fail_dq_success
            + self.em_fail_dq_fail
        )

    @property
    def em_success(self) -> int:
        return self.em_success_dq_success + self.em_success_dq_fail

    @property
    def dq_success(self) -> int:
        return self.em_success_dq_success + self.em_fail_dq_success

    def ratio(self, count: int) -> float:
        return 100.0 * count / self.trials if self.trials else math.nan

    def add(self, em_ok: bool, dq_ok: bool) -> None:
        if em_ok and dq_ok:
            self.em_success_dq_success += 1
        elif em_ok:
            self.em_success_dq_fail += 1
        elif dq_ok:
            self.em_fail_dq_success += 1
        else:
            self.em_fail_dq_fail += 1

    def to_dict(self) -> dict:
        return {
            "trials": self.trials,
            "counts": {
                "em_success_dq_success": self.em_success_dq_success,
                "em_success_dq_fail": self.em_success_dq_fail,
                "em_fail_dq_success": self.em_fail_dq_success,
                "em_fail_dq_fail": self.em_fail_dq_fail,
            },
            "ratios_percent": {
                "em_success": self.ratio(self.em_success),
                "dqaem_success": self.ratio(self.dq_success),
                "em_success_dq_success": self.ratio(self.em_success_dq_success),
                "em_success_dq_fail": self.ratio(self.em_success_dq_fail),
                "em_fail_dq_success": self.ratio(self.em_fail_dq_success),
                "em_fail_dq_fail": self.ratio(self.em_fail_dq_fail),
            },
        }

    def to_text(self) -> str:
        """Aligned table in the success/fail/total layout."""
        r = self.ratio
        rows = [
            ("", "DQAEM success", "DQAEM fail", "Total"),
            (
                "EM success",
                f"{r(self.em_success_dq_success):5.1f} %",
                f"{r(self.em_success_dq_fail):5.1f} %",
                f"{r(self.em_success):5.1f} %",
            ),
            (
                "EM fail",
                f"{r(self.em_fail_dq_success):5.1f} %",
                f"{r(self.em_fail_dq_fail):5.1f} %",
                f"{r(self.trials - self.em_success):5.1f} %",
            ),
            (
                "Total",
                f"{r(self.dq_success):5.1f} %",
                f"{r(self.trials - self.dq_success):5.1f} %",
                f"{r(self.trials):5.1f} %",
            ),
        ]
        widths = [max(len(row[j]) for row in rows) for j in range(4)]
        return "\n".join(
            "  ".join(cell.rjust(widths[j]) for j, cell in enumerate(row)) for row in rows
        )


def three_cluster_truth(covariance_trace: float = 1.0, loading_share: float = 0.6) -> MfaParams:
    """Equal-weight 2-D mixture with means (-1, 0), (0, 0), (1, 0).

    Each component has isotropic covariance with the requested trace, split
    between the loading part and the shared noise floor.
    """
    if covariance_trace <= 0.0 or not 0.0 < loading_share < 1.0:
        raise ParameterError("covariance_trace must be positive and loading_share in (0, 1)")
    per_axis = covariance_trace / 2.0
    lam = math.sqrt(loading_share * per_axis)
    noise = (1.0 - loading_share) * per_axis
    eye2 = np.eye(2)
    return MfaParams(
        weights=np.full(3, 1.0 / 3.0),
        means=np.array([[-1.0, 0.0], [0.0, 0.0], [1.0, 0.0]]),
        loadings=np.stack([lam * eye2] * 3),
        noise_cov=noise * eye2,
        diagonal_noise=True,
    )


def evaluate_success(fit: MfaParams, truth: MfaParams, crit: SuccessCriterion) -> SuccessResult:
    """Classify a fit by assignment-matched squared mean errors.

    Estimated means are matched to the true means by the permutation that
    minimizes the total squared Euclidean error (full search, m <= 6); the
    fit succeeds when every matched squared error is below the threshold.
    """
    if fit.m != truth.m:
        raise ParameterError(f"fit has {fit.m} components, truth has {truth.m}")
    if truth.m > 6:
        raise ParameterError("assignment search supports at most 6 components")
    sq = ((fit.means[None, :, :] - truth.means[:, None, :]) ** 2).sum(axis=2)  # (true, est)
    best_perm, best_total = None, np.inf
    for perm in itertools.permutations(range(truth.m)):
        total = sq[np.arange(truth.m), perm].sum()
        if total < best_total:
            best_total, best_perm = total, perm
    errors = sq[np.arange(truth.m), best_perm]
    limits = np.array(
        [crit.threshold_factor * np.trace(truth.component_covariance(w)) for w in range(truth.m)]
    )
    return SuccessResult(bool(np.all(errors < limits)), errors, tuple(best_perm))


def _success_limits(truth: MfaParams, crit: SuccessCriterion) -> np.ndarray:
    return np.array(
        [crit.threshold_factor * np.trace(truth.component_covariance(w)) for w in range(truth.m)]
    )


def _first_success_iteration(trace: FitTrace, truth: MfaParams, crit: SuccessCriterion):
    """Earliest trace iteration whose means satisfy the criterion, or None."""
    means = np.stack([r.params.means for r in trace.records])  # (T, m, d)
    sq = ((means[:, None, :, :] - truth.means[None, :, None, :]) ** 2).sum(axis=3)  # (T, true, est)
    limits = _success_limits(truth, crit)
    perms = np.array(list(itertools.permutations(range(truth.m))))
    idx = np.arange(truth.m)
    ok = np.zeros(means.shape[0], dtype=bool)
    for perm in perms:
        errors = sq[:, idx, perm]  # (T, m)
        ok |= np.all(errors < limits[None, :], axis=1)
    hits = np.nonzero(ok)[0]
    return int(trace.records[hits[0]].iteration) if hits.size else None


@dataclass(frozen=True)
class TrialConfig:
    """Everything one comparison run needs; both solvers share each trial's
    dataset and randomized starting point."""

    truth: MfaParams
    n_points: int = 300
    trials: int = 100
    data_seed: int = 0
    init_seed: int = 1000
    fresh_data: bool = False
    latent_dim: int = 2
    em_max_iter: int = 1000
    em_tol: float = 1e-7
    dq_schedule: AnnealSchedule = AnnealSchedule(gamma_init=1.0, total_steps=200)
    dq_beads: int = 128
    dq_max_iter: int = 1400
    dq_tol: float = 1e-7
    criterion: SuccessCriterion = SuccessCriterion()
    n_jobs: int = 1

    def __post_init__(self):
        if self.trials < 1:
            raise ParameterError("trial count must be at least 1")
        if self.n_points < 1:
            raise ParameterError("n_points must be at least 1")


@dataclass
class ComparisonReport:
    table: ContingencyTable
    trial_records: list
    em_mean_iterations: float
    dq_mean_iterations: float
    em_mean_iterations_joint: float
    dq_mean_iterations_joint: float
    em_traces: list = field(default_factory=list)
    dq_traces: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "table": self.table.to_dict(),
            "iterations_to_success": {
                "em_mean": self.em_mean_iterations,
                "dqaem_mean": self.dq_mean_iterations,
                "em_mean_jointly_successful": self.em_mean_iterations_joint,
                "dqaem_mean_jointly_successful": self.dq_mean_iterations_joint,
            },
            "trials": self.trial_records,
        }

    def to_markdown(self) -> str:
        t = self.table
        lines = [
            "# EM vs DQAEM comparison",
            "",
            f"Trials: {t.trials}",
            "",
            "|  | DQAEM success | DQAEM fail | Total |",
            "|---|---|---|---|",
            f"| EM success | {t.ratio(t.em_success_dq_success):.1f} % | "
            f"{t.ratio(t.em_success_dq_fail):.1f} % | {t.ratio(t.em_success):.1f} % |",
            f"| EM fail | {t.ratio(t.em_fail_dq_success):.1f} % | "
            f"{t.ratio(t.em_fail_dq_fail):.1f} % | {t.ratio(t.trials - t.em_success):.1f} % |",
            f"| Total | {t.ratio(t.dq_success):.1f} % | "
            f"{t.ratio(t.trials - t.dq_success):.1f} % | 100.0 % |",
            "",
            "Mean iterations until the success criterion is met",
            "",
            f"- EM (its successful trials): {self.em_mean_iterations:.2f}",
            f"- DQAEM (its successful trials): {self.dq_mean_iterations:.2f}",
            f"- EM (jointly successful trials): {self.em_mean_iterations_joint:.2f}",
            f"- DQAEM (jointly successful trials): {self.dq_mean_iterations_joint:.2f}",
        ]
        return "\n".join(lines) + "\n"


def _run_one_trial(cfg: TrialConfig, trial: int):
    data_seed = cfg.data_seed + trial if cfg.fresh_data else cfg.data_seed
    data = sample_dataset(cfg.truth, cfg.n_points, seed=data_seed)
    init = initialize_params(data, cfg.truth.m, cfg.latent_dim, seed=cfg.init_seed + trial)
    em_trace = run_em(data, init, cfg.em_max_iter, cfg.em_tol)
    dq_trace = run_dqaem(data, init, cfg.dq_schedule, cfg.dq_beads, cfg.dq_max_iter, cfg.dq_tol)

    record = {"trial": trial, "data_seed": data_seed, "init_seed": cfg.init_seed + trial}
    for name, trace in (("em", em_trace), ("dqaem", dq_trace)):
        if trace.outcome == "numerical_failure":
            record[f"{name}_success"] = False
            record[f"{name}_failure"] = trace.failure
            record[f"{name}_iterations_to_success"] = None
        else:
            result = evaluate_success(trace.final_params, cfg.truth, cfg.criterion)
            record[f"{name}_success"] = result.success
            record[f"{name}_iterations_to_success"] = (
                _first_success_iteration(trace, cfg.truth, cfg.criterion)
                if result.success
                else None
            )
        record[f"{name}_outcome"] = trace.outcome
        record[f"{name}_final_objective"] = float(trace.records[-1].objective)
        record[f"{name}_total_iterations"] = trace.n_iterations
    return record, em_trace, dq_trace


def run_comparison(cfg: TrialConfig, keep_traces: bool = False) -> ComparisonReport:
    """Fit every trial with both solvers and aggregate the 2x2 table.

    Trials are independent (seed-offset datasets and starting points) and may
    run in parallel; aggregation is in trial order, so reports are
    reproducible regardless of the worker count.
    """
    runner = Parallel(n_jobs=cfg.n_jobs) if cfg.n_jobs != 1 else None
    if runner is None:
        outputs = [_run_one_trial(cfg, t) for t in range(cfg.trials)]
    else:
        outputs = runner(delayed(_run_one_trial)(cfg, t) for t in range(cfg.trials))

    table = ContingencyTable()
    records = []
    em_iters, dq_iters, em_joint, dq_joint = [], [], [], []
    for record, _, _ in outputs:
        records.append(record)
        em_ok, dq_ok = record["em_success"], record["dqaem_success"]
        table.add(em_ok, dq_ok)
        if em_ok and record["em_iterations_to_success"] is not None:
            em_iters.append(record["em_iterations_to_success"])
        if dq_ok and record["dqaem_iterations_to_success"] is not None:
            dq_iters.append(record["dqaem_iterations_to_success"])
        if em_ok and dq_ok:
            em_joint.append(record["em_iterations_to_success"])
            dq_joint.append(record["dqaem_iterations_to_success"])

    def _mean(values):
        return float(np.mean(values)) if values else math.nan

    return ComparisonReport(
        table=table,
        trial_records=records,
        em_mean_iterations=_mean(em_iters),
        dq_mean_iterations=_mean(dq_iters),
        em_mean_iterations_joint=_mean(em_joint),
        dq_mean_iterations_joint=_mean(dq_joint),
        em_traces=[o[1] for o in outputs] if keep_traces else [],
        dq_traces=[o[2] for o in outputs] if keep_traces else [],
    )


@dataclass
class MonotonicityReport:
    """Frozen-anneal audit: free-energy traces, worst per-step increases, and
    the spread of final values for the single-component (convex) case."""

    anneal: AnnealState
    traces: dict  # {m: [list of -F sequences per restart]}
    max_step_increase: float
    final_spread_m1: float | None
    violations: list

    def to_dict(self) -> dict:
        return {
            "beta": self.anneal.beta,
            "gamma": self.anneal.gamma,
            "beads": self.anneal.beads,
            "max_step_increase": self.max_step_increase,
            "final_spread_m1": self.final_spread_m1,
            "violations": self.violations,
            "traces": {str(m): [list(map(float, t)) for t in ts] for m, ts in self.traces.items()},
        }


def run_monotonicity(
    models,
    anneal: AnnealState,
    iters: int,
    data: Dataset,
    *,
    latent_dim: int | None = None,
    restarts: int = 20,
    init_seed: int = 0,
    step_slack: float = 1e-9,
    convex_spread: float = 1e-6,
    tol: float = 1e-12,
    raise_on_violation: bool = True,
) -> MonotonicityReport:
    """Fit each component count at a frozen (beta, gamma) and audit descent.

    The free energy must never increase by more than ``step_slack`` per
    iteration; for ``m = 1`` all restarts must reach final free energies
    within ``convex_spread`` of each other (single-analyzer fits have a
    unique optimal value).
    """
    if iters < 0:
        raise ParameterError("iters must be non-negative")
    k = latent_dim if latent_dim is not None else data.d
    traces = {}
    violations = []
    max_increase = -math.inf
    final_spread_m1 = None
    for m in models:
        runs = []
        for restart in range(restarts):
            init = initialize_params(data, m, k, seed=init_seed + 1000 * m + restart)
            trace = iterate_at_fixed_anneal(data, init, anneal, iters, tol=tol)
            if trace.outcome == "numerical_failure":
                violations.append(
                    {"m": m, "restart": restart, "iteration": trace.n_iterations, "kind": "numerical", "detail": trace.failure}
                )
                continue
            objectives = trace.objectives  # negative free energy, should rise
            runs.append(objectives)
            if objectives.size > 1:
                deltas = -np.diff(objectives)  # F_{t+1} - F_t, should be <= 0
                max_increase = max(max_increase, float(deltas.max()))
                bad = np.nonzero(deltas > step_slack)[0]
                for t in bad:
                    violations.append(
                        {
                            "m": m,
                            "restart": restart,
                            "iteration": int(t + 1),
                            "kind": "monotonicity",
                            "increase": float(deltas[t]),
                        }
                    )
        traces[m] = runs
        if m == 1 and runs:
            finals = np.array([r[-1] for r in runs])
            final_spread_m1 = float(finals.max() - finals.min())
            if final_spread_m1 > convex_spread:
                violations.append(
                    {"m": 1, "kind": "convex-spread", "spread": final_spread_m1}
                )
    if max_increase == -math.inf:
        max_increase = 0.0
    report = MonotonicityReport(
        anneal=anneal,
        traces=traces,
        max_step_increase=max_increase,
        final_spread_m1=final_spread_m1,
        violations=violations,
    )
    if raise_on_violation and violations:
        raise MonotonicityError(f"monotonicity audit failed: {violations[:3]}")
    return report


def save_comparison_report(report: ComparisonReport, out_dir, cfg: TrialConfig | None = None) -> None:
    """Write the JSON, aligned-text and markdown artifacts (and any traces)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = report.to_dict()
    if cfg is not None:
        payload["config"] = {
            "n_points": cfg.n_points,
            "trials": cfg.trials,
            "data_seed": cfg.data_seed,
            "init_seed": cfg.init_seed,
            "fresh_data": cfg.fresh_data,
            "latent_dim": cfg.latent_dim,
            "beads": cfg.dq_beads,
            "gamma_init": cfg.dq_schedule.gamma_init,
            "anneal_steps": cfg.dq_schedule.total_steps,
            "truth": cfg.truth.to_dict(),
        }
    (out / "comparison.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    (out / "contingency.txt").write_text(report.table.to_text() + "\n")
    (out / "comparison.md").write_text(report.to_markdown())
    for i, trace in enumerate(report.em_traces):
        trace.save_csv(out / f"trial_{i:04d}_em.csv")
    for i, trace in enumerate(report.dq_traces):
        trace.save_csv(out / f"trial_{i:04d}_dqaem.csv")
