"""Deterministic quantum-annealed EM: exact bead-chain E-step and fit loops.

The annealed objective replaces the log likelihood with a free energy
``F = -(1/beta) log Z`` whose per-point partition function couples ``M``
copies ("beads") of the latent factor on a periodic chain:

    weight({x_j}) = (M / (2 pi beta Gamma))^(M k / 2)
                    * exp( sum_j (beta/M) log p(y, x_j, w)
                           - sum_j (M / (2 beta Gamma)) |x_j - x_{j-1}|^2 )

For the linear-Gaussian model the weight is jointly Gaussian in the stacked
bead vector, so everything is available in closed form.  Writing ``P, b, c``
for the per-component quadratic data of ``log p(y, x | w)``, the stacked
precision is ``(beta/M)(I_M (x) P) + (M/(beta Gamma))(L (x) I_k)`` with ``L``
the ring Laplacian.  Fourier modes of the ring block-diagonalize it into

    A_n = (beta/M) P + (M/(beta Gamma)) lambda_n I_k,
    lambda_n = 2 (1 - cos(2 pi n / M)),

and because the linear term is identical across beads only the ``n = 0`` mode
carries it.  Consequences used throughout:

* every bead shares the classic posterior mean ``P^-1 b`` (independent of
  beta and Gamma);
* the per-bead covariance is ``(1/M) sum_n A_n^-1``, which grows with Gamma
  (smoothing) and collapses to ``P^-1 / beta`` as Gamma -> 0;
* ``log Z = (Mk/2) log(M/(beta Gamma)) - (1/2) sum_n log det A_n
  + (beta/2) b' P^-1 b + beta c``.

Gamma = 0 is never evaluated through these formulas (the prefactor
diverges); it is routed to the exact tempered-classic branch, which at
``beta = 1`` is plain EM.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .classic import (
    FitTrace,
    PosteriorParts,
    TraceRecord,
    _em_iterations,
    _normalize_logits,
    mstep_from_moments,
    tempered_posterior_parts,
)
from .errors import NumericalError, ParameterError
from .model import Dataset, MfaParams, component_quadratics, expected_complete_log_pdf


@dataclass(frozen=True)
class AnnealState:
    """Inverse temperature, coupling strength and bead count at one step."""

    beta: float
    gamma: float
    beads: int
    step: int = 0

    def __post_init__(self):
        if not 0.0 < self.beta <= 1.0:
            raise ParameterError(f"beta must lie in (0, 1], got {self.beta}")
        if self.gamma < 0.0:
            raise ParameterError("gamma must be non-negative")
        if self.beads < 1:
            raise ParameterError("bead count must be at least 1")
        if self.step < 0:
            raise ParameterError("step must be non-negative")


@dataclass(frozen=True)
class AnnealSchedule:
    """Iteration-indexed trajectory from (beta_init, gamma_init) to (1, 0).

    ``gamma_rule`` is linear-to-zero; ``beta_rule`` is either fixed-at-one
    (requires ``beta_init == 1``) or linear-to-one.  Both endpoints are hit
    exactly at ``total_steps``.
    """

    gamma_init: float = 1.0
    beta_init: float = 1.0
    total_steps: int = 200
    gamma_rule: str = "linear-to-zero"
    beta_rule: str = "fixed-at-one"

    def __post_init__(self):
        if self.gamma_init < 0.0:
            raise ParameterError("gamma_init must be non-negative")
        if not 0.0 < self.beta_init <= 1.0:
            raise ParameterError("beta_init must lie in (0, 1]")
        if self.total_steps < 0:
            raise ParameterError("total_steps must be non-negative")
        if self.gamma_rule != "linear-to-zero":
            raise ParameterError(f"unknown gamma_rule {self.gamma_rule!r}")
        if self.beta_rule not in ("fixed-at-one", "linear-to-one"):
            raise ParameterError(f"unknown beta_rule {self.beta_rule!r}")
        if self.beta_rule == "fixed-at-one" and self.beta_init != 1.0:
            raise ParameterError("beta_rule fixed-at-one requires beta_init == 1")

    def state_at(self, step: int, beads: int = 1) -> AnnealState:
        t = self.total_steps
        s = min(max(step, 0), t)
        if t == 0:
            gamma, beta = 0.0, 1.0
        else:
            gamma = self.gamma_init * (t - s) / t
            beta = 1.0 if self.beta_rule == "fixed-at-one" else (self.beta_init * (t - s) + s) / t
        return AnnealState(beta=beta, gamma=gamma, beads=beads, step=step)

    @property
    def is_trivial(self) -> bool:
        """True when every step is already at (beta, gamma) = (1, 0)."""
        return self.total_steps == 0 or (self.gamma_init == 0.0 and self.beta_init == 1.0)


@dataclass(frozen=True)
class BeadPosterior:
    """Perturbed posterior summary for a batch of points.

    ``log_partition`` (n, m) includes the bead-discretization prefactor but
    not the mixture weights; ``responsibilities`` normalizes
    ``exp(beta log pi_w + log_partition)`` per point.  ``bead_mean`` (n, m, k)
    is common to all beads by ring symmetry and ``bead_second_moment``
    (n, m, k, k) is the bead-averaged ``E[x_j x_j^T]``.
    """

    log_partition: np.ndarray
    bead_mean: np.ndarray
    bead_second_moment: np.ndarray
    responsibilities: np.ndarray
    anneal: AnnealState


def chain_mode_eigenvalues(beads: int) -> np.ndarray:
    """Eigenvalues ``2 (1 - cos(2 pi n / M))`` of the ring-coupling form.

    These diagonalize the quadratic form ``sum_j (x_j - x_{j-1})^2`` under
    periodic boundary conditions; mode 0 (the chain centroid) is always free.
    """
    if beads < 1:
        raise ParameterError("bead count must be at least 1")
    n = np.arange(beads)
    return 2.0 * (1.0 - np.cos(2.0 * np.pi * n / beads))


def _quantum_posterior_parts(points, params: MfaParams, anneal: AnnealState) -> PosteriorParts:
    """Exact bead-chain E-step via the ring-mode decomposition."""
    if anneal.gamma <= 0.0:
        raise ParameterError("bead-chain evaluation needs gamma > 0; gamma = 0 is the classic branch")
    y = np.atleast_2d(np.asarray(points, dtype=float))
    if y.shape[1] != params.d:
        raise ParameterError(f"points have dimension {y.shape[1]}, model has d={params.d}")
    beta, gamma, beads = anneal.beta, anneal.gamma, anneal.beads
    n, m, k = y.shape[0], params.m, params.k
    lam_modes = chain_mode_eigenvalues(beads)
    prefactor = 0.5 * beads * k * math.log(beads / (beta * gamma))
    eye = np.eye(k)

    log_part = np.empty((n, m))
    mean = np.empty((n, m, k))
    cov = np.empty((m, k, k))
    for w in range(m):
        precision, b, c = component_quadratics(y, params, w)
        modes = (beta / beads) * precision[None, :, :] + (
            beads / (beta * gamma)
        ) * lam_modes[:, None, None] * eye[None, :, :]
        try:
            chols = np.linalg.cholesky(modes)
        except np.linalg.LinAlgError as exc:
            bad = _first_bad_mode(modes)
            raise NumericalError(
                f"bead-mode precision not SPD for component {w}, mode {bad}"
            ) from exc
        logdet_sum = 2.0 * float(np.sum(np.log(np.diagonal(chols, axis1=1, axis2=2))))
        inv_modes = np.linalg.inv(modes)
        bead_cov = inv_modes.mean(axis=0)
        cov[w] = (bead_cov + bead_cov.T) / 2.0
        try:
            p_chol = cho_factor(precision, lower=True)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"singular latent precision for component {w}") from exc
        mean[:, w, :] = cho_solve(p_chol, b.T).T
        log_part[:, w] = (
            prefactor
            - 0.5 * logdet_sum
            + beta * (0.5 * np.sum(b * mean[:, w, :], axis=1) + c)
        )
    resp, log_norms = _normalize_logits(log_part, params.weights, beta)
    return PosteriorParts(resp, mean, cov, log_part, log_norms)


def _first_bad_mode(modes) -> int:
    for idx, block in enumerate(modes):
        if np.any(np.linalg.eigvalsh(block) <= 0.0):
            return idx
    return -1


def _posterior_parts(points, params: MfaParams, anneal: AnnealState) -> PosteriorParts:
    if anneal.gamma > 0.0:
        return _quantum_posterior_parts(points, params, anneal)
    return tempered_posterior_parts(points, params, anneal.beta)


def _as_bead_posterior(parts: PosteriorParts, anneal: AnnealState) -> BeadPosterior:
    return BeadPosterior(
        log_partition=parts.log_partition,
        bead_mean=parts.latent_mean,
        bead_second_moment=parts.second_moment(),
        responsibilities=parts.responsibilities,
        anneal=anneal,
    )


def bead_posterior(y, params: MfaParams, anneal: AnnealState) -> BeadPosterior:
    """Bead-chain posterior for one point (shape (d,)) or a batch (n, d).

    Requires ``gamma > 0``; the gamma = 0 limit is served exactly by
    :func:`tempered_classic_posterior` instead of a small-gamma evaluation,
    whose prefactor would diverge.
    """
    return _as_bead_posterior(_quantum_posterior_parts(y, params, anneal), anneal)


def tempered_classic_posterior(y, params: MfaParams, beta: float, beads: int = 1) -> BeadPosterior:
    """The exact gamma = 0 branch: beta-tempered classic posterior."""
    anneal = AnnealState(beta=beta, gamma=0.0, beads=beads)
    return _as_bead_posterior(tempered_posterior_parts(y, params, beta), anneal)


def free_energy(data: Dataset, params: MfaParams, anneal: AnnealState) -> float:
    """Annealed objective ``-(1/beta) sum_i log sum_w exp(beta log pi_w + log Z_iw)``.

    At ``beta = 1, gamma = 0`` this equals the negative incomplete log
    likelihood exactly (same value, different closed form).
    """
    parts = _posterior_parts(data.points, params, anneal)
    return -float(parts.log_norms.sum()) / anneal.beta


def u_function(data: Dataset, post: BeadPosterior, params_candidate: MfaParams) -> float:
    """Expected complete-data negative log likelihood under the bead posterior.

    The per-bead integrand is quadratic in each bead, so the bead-averaged
    expectation depends only on the common first and second bead moments.
    The additive candidate-independent constant of the annealed objective
    decomposition is dropped.
    """
    resp = post.responsibilities
    if resp.shape[1] != params_candidate.m:
        raise ParameterError(
            f"posterior has {resp.shape[1]} components, candidate has {params_candidate.m}"
        )
    total = 0.0
    for w in range(params_candidate.m):
        terms = expected_complete_log_pdf(
            data.points, post.bead_mean[:, w], post.bead_second_moment[:, w], params_candidate, w
        )
        total += float(resp[:, w] @ terms)
    return -total


def m_step_quantum(
    data: Dataset,
    post: BeadPosterior,
    *,
    diagonal_noise: bool = True,
) -> MfaParams:
    """Closed-form minimizer of :func:`u_function`.

    Identical algebra to the classic M-step with the classic posterior
    moments replaced by their bead-averaged counterparts.
    """
    params, _ = mstep_from_moments(
        data.points,
        post.responsibilities,
        post.bead_mean,
        post.bead_second_moment,
        diagonal_noise=diagonal_noise,
    )
    return params


def entropy_diagnostic(data: Dataset, params: MfaParams, anneal: AnnealState) -> float:
    """Perturbed-posterior entropy, reported via the identity S = beta (U - F)."""
    parts = _posterior_parts(data.points, params, anneal)
    post = _as_bead_posterior(parts, anneal)
    value_u = u_function(data, post, params)
    value_f = -float(parts.log_norms.sum()) / anneal.beta
    return anneal.beta * (value_u - value_f)


def iterate_at_fixed_anneal(
    data: Dataset,
    init: MfaParams,
    anneal: AnnealState,
    iters: int,
    tol: float | None = None,
) -> FitTrace:
    """Alternate E and M steps while (beta, gamma) stay frozen.

    This is the regime where the free energy is guaranteed non-increasing;
    the trace objective is the negative free energy at the frozen setting.
    With ``tol`` set, stops once the objective change drops below it.
    """
    if iters < 0:
        raise ParameterError("iters must be non-negative")
    trace = FitTrace()
    params = init
    pending = ()
    prev = None
    t = 0
    while True:
        started = time.perf_counter()
        try:
            parts = _posterior_parts(data.points, params, anneal)
            objective = float(parts.log_norms.sum()) / anneal.beta
            if not math.isfinite(objective):
                raise NumericalError("free energy is not finite")
        except NumericalError as exc:
            trace.outcome, trace.failure = "numerical_failure", str(exc)
            return trace
        wall = (time.perf_counter() - started) * 1e3
        beads_used = anneal.beads if anneal.gamma > 0.0 else 1
        trace.records.append(
            TraceRecord(t, objective, anneal.beta, anneal.gamma, beads_used, wall, params, pending)
        )
        if tol is not None and prev is not None and abs(objective - prev) < tol:
            trace.outcome = "converged"
            return trace
        if t >= iters:
            trace.outcome = "max_iterations"
            return trace
        prev = objective
        try:
            params, pending = mstep_from_moments(
                data.points,
                parts.responsibilities,
                parts.latent_mean,
                parts.second_moment(),
                diagonal_noise=params.diagonal_noise,
            )
        except (NumericalError, ParameterError) as exc:
            trace.outcome, trace.failure = "numerical_failure", str(exc)
            return trace
        t += 1


def run_dqaem(
    data: Dataset,
    init: MfaParams,
    schedule: AnnealSchedule,
    beads: int,
    max_iter: int,
    tol: float,
) -> FitTrace:
    """Annealed fit: advance the schedule one step per EM-style update.

    While the schedule is away from (beta, gamma) = (1, 0) the iterations use
    the bead-chain (or tempered) E-step and the trace objective is the
    negative free energy at the setting in force; no convergence test is
    applied during that phase.  Once the schedule lands on (1, 0) the run
    continues with exact classic EM until the log-likelihood change drops
    below ``tol`` or the total update budget ``max_iter`` is exhausted.

    A schedule that starts at (1, 0) makes this function reproduce
    :func:`annealem.classic.run_em` iteration for iteration.
    """
    if max_iter < 1:
        raise ParameterError("max_iter must be at least 1")
    if tol <= 0.0:
        raise ParameterError("tol must be positive")
    if beads < 1:
        raise ParameterError("bead count must be at least 1")
    trace = FitTrace()
    params = init
    pending = ()
    t = 0
    while True:
        state = schedule.state_at(t, beads)
        if state.gamma == 0.0 and state.beta == 1.0:
            _, outcome, failure = _em_iterations(
                data, params, max_iter - t, tol, trace.records, t
            )
            trace.outcome, trace.failure = outcome, failure
            return trace
        started = time.perf_counter()
        try:
            parts = _posterior_parts(data.points, params, state)
            objective = float(parts.log_norms.sum()) / state.beta
            if not math.isfinite(objective):
                raise NumericalError("free energy is not finite")
        except NumericalError as exc:
            trace.outcome, trace.failure = "numerical_failure", str(exc)
            return trace
        wall = (time.perf_counter() - started) * 1e3
        beads_used = state.beads if state.gamma > 0.0 else 1
        trace.records.append(
            TraceRecord(t, objective, state.beta, state.gamma, beads_used, wall, params, pending)
        )
        if t >= max_iter:
            trace.outcome = "max_iterations"
            return trace
        try:
            params, pending = mstep_from_moments(
                data.points,
                parts.responsibilities,
                parts.latent_mean,
                parts.second_moment(),
                diagonal_noise=params.diagonal_noise,
            )
        except (NumericalError, ParameterError) as exc:
            trace.outcome, trace.failure = "numerical_failure", str(exc)
            return trace
        t += 1


def run_daem(
    data: Dataset,
    init: MfaParams,
    schedule: AnnealSchedule,
    max_iter: int,
    tol: float,
) -> FitTrace:
    """Beta-annealed EM: the gamma = 0 slice of the annealed fit.

    Requires a schedule with ``gamma_init == 0``; every iteration uses the
    exact tempered-classic E-step.
    """
    if schedule.gamma_init != 0.0:
        raise ParameterError("beta-annealed runs need a schedule with gamma_init == 0")
    return run_dqaem(data, init, schedule, beads=1, max_iter=max_iter, tol=tol)
