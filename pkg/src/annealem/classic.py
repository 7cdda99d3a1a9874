"""Classic EM for mixtures of factor analyzers, with closed-form E and M steps.

This module is both the baseline solver and the exact zero-coupling branch of
the annealed engine: tempering the complete-data density by ``beta`` leaves
the latent posterior mean unchanged and scales its covariance by ``1/beta``,
so the tempered E-step is available here in closed form as well.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import NumericalError, ParameterError
from .model import Dataset, MfaParams, component_quadratics, expected_complete_log_pdf

_LOG_2PI = math.log(2.0 * math.pi)

# Smallest admissible noise variance; keeps the likelihood bounded when a
# component tries to collapse onto a single point.
VAR_FLOOR = 1e-6


class RegularizedSolveWarning(UserWarning):
    """Emitted when rank-deficient M-step normal equations needed a ridge."""


@dataclass(frozen=True)
class ClassicPosterior:
    """Exact posterior quantities of one E-step.

    ``responsibilities`` is (n, m); ``latent_mean`` is (n, m, k) and
    ``latent_second_moment`` (n, m, k, k) holds ``E[x x^T | y, w]``.
    """

    responsibilities: np.ndarray
    latent_mean: np.ndarray
    latent_second_moment: np.ndarray


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    objective: float
    beta: float
    gamma: float
    beads: int
    wall_ms: float
    params: MfaParams
    notes: tuple = ()


@dataclass
class FitTrace:
    """Per-iteration history of a fit and how the run ended.

    ``outcome`` is one of ``converged``, ``max_iterations`` or
    ``numerical_failure``; in the failure case ``failure`` carries the reason
    and the trace is truncated at the last evaluable iterate.
    """

    records: list = field(default_factory=list)
    outcome: str = "max_iterations"
    failure: str | None = None

    @property
    def objectives(self) -> np.ndarray:
        return np.array([r.objective for r in self.records])

    @property
    def final_params(self) -> MfaParams:
        return self.records[-1].params

    @property
    def n_iterations(self) -> int:
        return self.records[-1].iteration

    def save_csv(self, path) -> None:
        lines = ["iteration,objective,beta,gamma,beads,wall_ms"]
        for r in self.records:
            lines.append(
                f"{r.iteration},{float(r.objective)!r},{float(r.beta)!r},"
                f"{float(r.gamma)!r},{r.beads},{float(r.wall_ms)!r}"
            )
        Path(path).write_text("\n".join(lines) + "\n")

    def save_params_json(self, path) -> None:
        import json

        payload = {
            "outcome": self.outcome,
            "failure": self.failure,
            "iterations": self.n_iterations,
            "objective": float(self.records[-1].objective),
            "params": self.final_params.to_dict(),
        }
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


class PosteriorParts(NamedTuple):
    """Shared E-step payload for the classic, tempered and bead-chain paths.

    ``latent_cov`` is per component only, shape (m, k, k): in every branch the
    latent covariance does not depend on the data point.  ``log_partition``
    excludes the mixture-weight factor; ``log_norms`` is the per-point
    log-sum-exp of ``beta * log pi_w + log_partition``.
    """

    responsibilities: np.ndarray
    latent_mean: np.ndarray
    latent_cov: np.ndarray
    log_partition: np.ndarray
    log_norms: np.ndarray

    def second_moment(self) -> np.ndarray:
        return self.latent_cov[None, :, :, :] + np.einsum(
            "nwk,nwl->nwkl", self.latent_mean, self.latent_mean
        )


def _normalize_logits(log_partition, weights, beta):
    logits = beta * np.log(weights)[None, :] + log_partition
    shift = logits.max(axis=1, keepdims=True)
    log_norms = shift[:, 0] + np.log(np.sum(np.exp(logits - shift), axis=1))
    return np.exp(logits - log_norms[:, None]), log_norms


def tempered_posterior_parts(points, params: MfaParams, beta: float) -> PosteriorParts:
    """Closed-form tempered posterior pieces for all components.

    Tempering raises ``p(y, x, w)`` to the power ``beta`` before normalizing
    over (x, w).  The Gaussian in x keeps its mean and scales its covariance
    by ``1/beta``; the per-component log partition is ``(k/2) log(2 pi / beta)
    - log det(P)/2 + beta (b' P^-1 b / 2 + c)``.  At ``beta = 1`` the
    ``log_norms`` field is exactly the per-point log marginal likelihood.
    """
    if beta <= 0.0:
        raise ParameterError("beta must be positive")
    y = np.atleast_2d(np.asarray(points, dtype=float))
    n, m, k = y.shape[0], params.m, params.k
    log_part = np.empty((n, m))
    mean = np.empty((n, m, k))
    cov = np.empty((m, k, k))
    for w in range(m):
        precision, b, c = component_quadratics(y, params, w)
        try:
            chol = cho_factor(precision, lower=True)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"singular latent precision for component {w}") from exc
        mean[:, w, :] = cho_solve(chol, b.T).T
        cov[w] = cho_solve(chol, np.eye(k)) / beta
        logdet = 2.0 * float(np.sum(np.log(np.diag(chol[0]))))
        log_part[:, w] = (
            0.5 * k * (_LOG_2PI - math.log(beta))
            - 0.5 * logdet
            + beta * (0.5 * np.sum(b * mean[:, w, :], axis=1) + c)
        )
    resp, log_norms = _normalize_logits(log_part, params.weights, beta)
    return PosteriorParts(resp, mean, cov, log_part, log_norms)


def e_step(data: Dataset, params: MfaParams) -> ClassicPosterior:
    """Exact posterior over (x, w) for every point, via Bayes' rule."""
    parts = tempered_posterior_parts(data.points, params, beta=1.0)
    return ClassicPosterior(parts.responsibilities, parts.latent_mean, parts.second_moment())


def mstep_from_moments(
    points,
    responsibilities,
    latent_mean,
    latent_second_moment,
    *,
    diagonal_noise: bool = True,
    var_floor: float = VAR_FLOOR,
):
    """Maximize the expected complete-data log likelihood in closed form.

    The loadings and mean of each component come from one joint linear solve
    over the augmented latent vector (x, 1); the shared noise covariance is
    the responsibility-weighted residual second moment, projected to diagonal
    when requested and floored at ``var_floor`` per eigenvalue.  Returns
    ``(params, notes)`` where ``notes`` lists any regularized solves.
    """
    y = np.atleast_2d(np.asarray(points, dtype=float))
    resp = np.asarray(responsibilities, dtype=float)
    n, d = y.shape
    m = resp.shape[1]
    k = latent_mean.shape[-1]
    notes = []

    counts = resp.sum(axis=0)
    weights = np.maximum(counts / n, 1e-300)
    weights = weights / weights.sum()

    means = np.empty((m, d))
    loadings = np.empty((m, d, k))
    resid = y.T @ y
    for w in range(m):
        r = resp[:, w]
        mz = latent_mean[:, w, :]
        gram = np.empty((k + 1, k + 1))
        gram[:k, :k] = np.einsum("n,nkl->kl", r, latent_second_moment[:, w])
        gram[:k, k] = gram[k, :k] = r @ mz
        gram[k, k] = counts[w]
        cross = (r[:, None] * y).T @ np.concatenate([mz, np.ones((n, 1))], axis=1)
        evals = np.linalg.eigvalsh(gram)
        if evals[0] <= 1e-12 * max(evals[-1], 1e-300):
            ridge = 1e-10 * max(evals[-1], 1.0)
            gram_solve = gram + ridge * np.eye(k + 1)
            notes.append(f"regularized rank-deficient normal equations for component {w}")
        else:
            gram_solve = gram
        joint = np.linalg.solve(gram_solve, cross.T).T  # (d, k+1) = [Lambda_w, mu_w]
        loadings[w] = joint[:, :k]
        means[w] = joint[:, k]
        # Full expectation form stays exact even when the solve was ridged.
        resid = resid - cross @ joint.T - joint @ cross.T + joint @ gram @ joint.T

    phi = (resid + resid.T) / (2.0 * n)
    if diagonal_noise:
        phi = np.diag(np.maximum(np.diag(phi), var_floor))
    else:
        evals, evecs = np.linalg.eigh(phi)
        phi = (evecs * np.maximum(evals, var_floor)) @ evecs.T
        phi = (phi + phi.T) / 2.0
    params = MfaParams(
        weights=weights,
        means=means,
        loadings=loadings,
        noise_cov=phi,
        diagonal_noise=diagonal_noise,
    )
    return params, tuple(notes)


def m_step(
    data: Dataset,
    post: ClassicPosterior,
    *,
    diagonal_noise: bool = True,
    var_floor: float = VAR_FLOOR,
) -> MfaParams:
    """Closed-form M-step; warns (and ridges) on rank-deficient systems."""
    params, notes = mstep_from_moments(
        data.points,
        post.responsibilities,
        post.latent_mean,
        post.latent_second_moment,
        diagonal_noise=diagonal_noise,
        var_floor=var_floor,
    )
    for note in notes:
        warnings.warn(note, RegularizedSolveWarning, stacklevel=2)
    return params


def expected_complete_log_likelihood(data: Dataset, post: ClassicPosterior, params: MfaParams) -> float:
    """The EM lower-bound objective Q(theta; theta') for a fixed posterior."""
    total = 0.0
    for w in range(params.m):
        terms = expected_complete_log_pdf(
            data.points, post.latent_mean[:, w], post.latent_second_moment[:, w], params, w
        )
        total += float(post.responsibilities[:, w] @ terms)
    return total


def initialize_params(
    data: Dataset,
    m: int,
    k: int,
    seed: int,
    *,
    diagonal_noise: bool = True,
    loading_scale: float = math.sqrt(0.1),
) -> MfaParams:
    """Randomized starting point shared by all solvers.

    Means are uniform over the data bounding box, loading entries are
    N(0, 0.1), the noise covariance starts at the diagonal of the sample
    covariance, and weights are uniform.
    """
    if m < 1 or k < 1:
        raise ParameterError("m and k must be at least 1")
    rng = np.random.default_rng(seed)
    y = data.points
    lo, hi = y.min(axis=0), y.max(axis=0)
    means = rng.uniform(lo, hi, size=(m, y.shape[1]))
    loadings = loading_scale * rng.standard_normal((m, y.shape[1], k))
    var = np.maximum(y.var(axis=0), VAR_FLOOR)
    return MfaParams(
        weights=np.full(m, 1.0 / m),
        means=means,
        loadings=loadings,
        noise_cov=np.diag(var),
        diagonal_noise=diagonal_noise,
    )


def _em_iterations(data: Dataset, params: MfaParams, budget: int, tol: float, records: list, t0: int):
    """Run classic EM updates in place, appending to ``records``.

    Records the objective of the incoming iterate first, so a zero budget
    still yields one record.  Returns ``(params, outcome, failure)``.
    """
    prev = None
    pending_notes = ()
    t = t0
    while True:
        started = time.perf_counter()
        try:
            parts = tempered_posterior_parts(data.points, params, beta=1.0)
            objective = float(parts.log_norms.sum())
            if not math.isfinite(objective):
                raise NumericalError("log likelihood is not finite")
        except NumericalError as exc:
            return params, "numerical_failure", str(exc)
        wall = (time.perf_counter() - started) * 1e3
        records.append(
            TraceRecord(t, objective, 1.0, 0.0, 1, wall, params, pending_notes)
        )
        if prev is not None and abs(objective - prev) < tol:
            return params, "converged", None
        if t - t0 >= budget:
            return params, "max_iterations", None
        prev = objective
        try:
            params, pending_notes = mstep_from_moments(
                data.points,
                parts.responsibilities,
                parts.latent_mean,
                parts.second_moment(),
                diagonal_noise=params.diagonal_noise,
            )
        except (NumericalError, ParameterError) as exc:
            return params, "numerical_failure", str(exc)
        t += 1


def run_em(data: Dataset, init: MfaParams, max_iter: int, tol: float) -> FitTrace:
    """Alternate E and M steps until the log likelihood change drops below tol.

    The trace records the log likelihood of every iterate, starting with the
    initial parameters; EM guarantees the sequence is non-decreasing.
    """
    if max_iter < 1:
        raise ParameterError("max_iter must be at least 1")
    if tol <= 0.0:
        raise ParameterError("tol must be positive")
    trace = FitTrace()
    _, outcome, failure = _em_iterations(data, init, max_iter, tol, trace.records, 0)
    trace.outcome = outcome
    trace.failure = failure
    return trace
