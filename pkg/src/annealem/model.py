"""Mixture-of-factor-analyzers model: parameters, densities, sampling, file I/O.

The generative model has three stages: a component index ``w`` drawn from a
categorical distribution with weights ``pi``, a latent factor ``x ~ N(0, I_k)``,
and an observation ``y ~ N(mu_w + Lambda_w x, Phi)`` with a noise covariance
``Phi`` shared across components.  A Gaussian mixture with free component
covariances is the special case ``k = d`` with unconstrained loadings, so no
separate GMM type exists here.

Component indices are 0-based throughout the Python API.  The CSV label column
is written 1-based (and converted back on load) to keep the on-disk format
friendly to spreadsheet users.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import NumericalError, ParameterError

_LOG_2PI = math.log(2.0 * math.pi)

# Eigenvalue floor used when validating that a covariance is positive definite.
_SPD_TOL = 0.0


def _as_readonly(a, dtype=float):
    out = np.array(a, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class MfaParams:
    """Parameter block ``theta`` of a mixture of factor analyzers.

    Attributes
    ----------
    weights : (m,) array
        Mixture weights, strictly positive, summing to one.
    means : (m, d) array
        Component means in observation space.
    loadings : (m, d, k) array
        Factor loading matrix of each component.
    noise_cov : (d, d) array
        Shared observation-noise covariance, symmetric positive definite.
    diagonal_noise : bool
        When True (the default, and the common MFA convention) ``noise_cov``
        is restricted to a diagonal matrix and M-steps project onto that set.
    """

    weights: np.ndarray
    means: np.ndarray
    loadings: np.ndarray
    noise_cov: np.ndarray
    diagonal_noise: bool = True

    def __post_init__(self):
        object.__setattr__(self, "weights", _as_readonly(self.weights))
        object.__setattr__(self, "means", _as_readonly(self.means))
        object.__setattr__(self, "loadings", _as_readonly(self.loadings))
        object.__setattr__(self, "noise_cov", _as_readonly(self.noise_cov))
        self._validate()

    def _validate(self):
        w, mu, lam, phi = self.weights, self.means, self.loadings, self.noise_cov
        if w.ndim != 1 or mu.ndim != 2 or lam.ndim != 3 or phi.ndim != 2:
            raise ParameterError(
                "expected shapes (m,), (m,d), (m,d,k), (d,d); got "
                f"{w.shape}, {mu.shape}, {lam.shape}, {phi.shape}"
            )
        m, d = mu.shape
        if m < 1 or d < 1 or lam.shape[2] < 1:
            raise ParameterError("m, d and k must all be at least 1")
        if w.shape != (m,) or lam.shape[:2] != (m, d) or phi.shape != (d, d):
            raise ParameterError("inconsistent parameter shapes")
        for name, a in (("weights", w), ("means", mu), ("loadings", lam), ("noise_cov", phi)):
            if not np.all(np.isfinite(a)):
                raise ParameterError(f"{name} contains non-finite entries")
        if np.any(w <= 0.0):
            raise ParameterError("mixture weights must be strictly positive")
        if abs(float(w.sum()) - 1.0) > 1e-12:
            raise ParameterError(f"mixture weights sum to {w.sum()!r}, not 1")
        if not np.allclose(phi, phi.T, rtol=0.0, atol=1e-12):
            raise ParameterError("noise covariance is not symmetric")
        if self.diagonal_noise and np.any(phi[~np.eye(d, dtype=bool)] != 0.0):
            raise ParameterError("diagonal_noise is set but noise_cov has off-diagonal entries")
        if self.diagonal_noise:
            if np.any(np.diag(phi) <= _SPD_TOL):
                raise ParameterError("noise covariance has non-positive variances")
        elif np.any(np.linalg.eigvalsh(phi) <= _SPD_TOL):
            raise ParameterError("noise covariance is not positive definite")

    @property
    def m(self) -> int:
        return self.means.shape[0]

    @property
    def d(self) -> int:
        return self.means.shape[1]

    @property
    def k(self) -> int:
        return self.loadings.shape[2]

    def component_covariance(self, w: int) -> np.ndarray:
        """Marginal observation covariance ``Lambda_w Lambda_w^T + Phi``."""
        lam = self.loadings[w]
        return lam @ lam.T + self.noise_cov

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "loadings": self.loadings.tolist(),
            "noise_cov": self.noise_cov.tolist(),
            "diagonal_noise": self.diagonal_noise,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "MfaParams":
        return cls(
            weights=obj["weights"],
            means=obj["means"],
            loadings=obj["loadings"],
            noise_cov=obj["noise_cov"],
            diagonal_noise=bool(obj.get("diagonal_noise", True)),
        )


@dataclass(frozen=True)
class LatentPoint:
    """A complete-data draw: the latent factor and its component index."""

    x: np.ndarray
    w: int

    def __post_init__(self):
        object.__setattr__(self, "x", _as_readonly(self.x))
        if self.w < 0:
            raise ParameterError("component index must be non-negative")
        if not np.all(np.isfinite(self.x)):
            raise ParameterError("latent point contains non-finite entries")


@dataclass(frozen=True)
class Dataset:
    """Observed points, optionally with the generating truth attached."""

    points: np.ndarray
    labels: np.ndarray | None = None
    truth: MfaParams | None = None
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "points", _as_readonly(np.atleast_2d(self.points)))
        if self.labels is not None:
            object.__setattr__(self, "labels", _as_readonly(self.labels, dtype=int))
        if self.points.ndim != 2 or self.points.shape[0] < 1:
            raise ParameterError("dataset needs at least one point of shape (n, d)")
        if not np.all(np.isfinite(self.points)):
            raise ParameterError("dataset contains non-finite points")
        if self.labels is not None:
            if self.labels.shape != (self.points.shape[0],):
                raise ParameterError("label count does not match point count")
            if self.truth is not None and (
                self.labels.min() < 0 or self.labels.max() >= self.truth.m
            ):
                raise ParameterError("labels outside 0..m-1 of the truth parameters")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]


def sample_dataset(params: MfaParams, n: int, seed: int) -> Dataset:
    """Draw ``n`` i.i.d. points from the model; bit-identical for equal seeds.

    Sampling order is fixed (labels, factors, noise) so a given seed pins the
    dataset exactly; parallel experiment trials stay reproducible by offsetting
    the seed per trial.
    """
    if n < 1:
        raise ParameterError("n must be at least 1")
    rng = np.random.default_rng(seed)
    labels = rng.choice(params.m, size=n, p=params.weights)
    x = rng.standard_normal((n, params.k))
    noise = rng.standard_normal((n, params.d)) @ np.linalg.cholesky(params.noise_cov).T
    y = params.means[labels] + np.einsum("ndk,nk->nd", params.loadings[labels], x) + noise
    return Dataset(points=y, labels=labels, truth=params, seed=seed)


def complete_log_pdf(y, x, w: int, params: MfaParams) -> float:
    """Joint log density ``log p(y, x, w; theta)`` of one complete draw."""
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    if y.shape != (params.d,) or x.shape != (params.k,):
        raise ParameterError(
            f"expected y of shape ({params.d},) and x of shape ({params.k},); "
            f"got {y.shape} and {x.shape}"
        )
    if not 0 <= w < params.m:
        raise ParameterError(f"component index {w} outside 0..{params.m - 1}")
    resid = y - params.means[w] - params.loadings[w] @ x
    chol, logdet_phi = _noise_cholesky(params)
    maha = float(resid @ cho_solve(chol, resid))
    log_obs = -0.5 * (maha + logdet_phi + params.d * _LOG_2PI)
    log_lat = -0.5 * (float(x @ x) + params.k * _LOG_2PI)
    return float(np.log(params.weights[w])) + log_obs + log_lat


def incomplete_log_likelihood(data: Dataset, params: MfaParams) -> float:
    """Log likelihood of the data with factors and labels marginalized out.

    Evaluated through the marginal form ``sum_w pi_w N(y; mu_w, Lambda_w
    Lambda_w^T + Phi)`` with a max-shifted log-sum-exp over components.
    """
    return float(np.sum(marginal_log_pdf(data.points, params)))


def marginal_log_pdf(points, params: MfaParams) -> np.ndarray:
    """Per-point ``log p(y; theta)``, shape (n,)."""
    y = np.atleast_2d(np.asarray(points, dtype=float))
    if y.shape[1] != params.d:
        raise ParameterError(f"points have dimension {y.shape[1]}, model has d={params.d}")
    logs = np.empty((y.shape[0], params.m))
    for w in range(params.m):
        cov = params.component_covariance(w)
        try:
            chol = cho_factor(cov, lower=True)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - defensive
            raise NumericalError(f"marginal covariance of component {w} is not SPD") from exc
        if not np.all(np.isfinite(chol[0])):
            raise NumericalError(f"marginal covariance of component {w} is not SPD")
        dev = y - params.means[w]
        sol = cho_solve(chol, dev.T).T
        logdet = 2.0 * float(np.sum(np.log(np.diag(chol[0]))))
        logs[:, w] = (
            np.log(params.weights[w])
            - 0.5 * (np.sum(dev * sol, axis=1) + logdet + params.d * _LOG_2PI)
        )
    shift = logs.max(axis=1, keepdims=True)
    return (shift[:, 0] + np.log(np.sum(np.exp(logs - shift), axis=1)))


def expected_complete_log_pdf(points, mean, second_moment, params: MfaParams, w: int) -> np.ndarray:
    """Expectation of ``log p(y, x, w; theta)`` under per-point latent moments.

    The integrand is quadratic in ``x``, so only the first moment and the
    second-moment matrix of the latent distribution enter.  ``mean`` has shape
    (n, k) and ``second_moment`` (n, k, k); the result has shape (n,).
    """
    y = np.atleast_2d(np.asarray(points, dtype=float))
    mean = np.asarray(mean, dtype=float)
    second = np.asarray(second_moment, dtype=float)
    lam = params.loadings[w]
    chol, logdet_phi = _noise_cholesky(params)
    dev = y - params.means[w]
    phi_inv_dev = cho_solve(chol, dev.T).T          # (n, d)
    phi_inv_lam = cho_solve(chol, lam)              # (d, k)
    lam_quad = lam.T @ phi_inv_lam                  # (k, k)
    obs = -0.5 * (
        np.sum(dev * phi_inv_dev, axis=1)
        - 2.0 * np.sum((phi_inv_dev @ lam) * mean, axis=1)
        + np.einsum("kl,nkl->n", lam_quad, second)
        + logdet_phi
        + params.d * _LOG_2PI
    )
    lat = -0.5 * (np.einsum("nkk->n", second) + params.k * _LOG_2PI)
    return float(np.log(params.weights[w])) + obs + lat


# --------------------------------------------------------------------------
# Shared quadratic decomposition of log p(y, x | w).
#
# As a function of x,
#   log p(y, x | w) = -x' P x / 2 + x' b + c
# with P = I + Lambda' Phi^-1 Lambda (latent posterior precision),
# b = Lambda' Phi^-1 (y - mu) and c collecting the x-free terms.  Both the
# classic E-step and the bead-chain engine are built from (P, b, c).
# --------------------------------------------------------------------------


def _noise_cholesky(params: MfaParams):
    phi = params.noise_cov
    try:
        chol = cho_factor(phi, lower=True)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - validated at construction
        raise NumericalError("noise covariance is not SPD") from exc
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol[0]))))
    return chol, logdet


def component_quadratics(points, params: MfaParams, w: int):
    """Return ``(P, b, c)`` of component ``w`` for a batch of points.

    ``P`` is (k, k), ``b`` is (n, k) and ``c`` is (n,).
    """
    y = np.atleast_2d(np.asarray(points, dtype=float))
    lam = params.loadings[w]
    chol, logdet_phi = _noise_cholesky(params)
    phi_inv_lam = cho_solve(chol, lam)
    precision = np.eye(params.k) + lam.T @ phi_inv_lam
    dev = y - params.means[w]
    b = dev @ phi_inv_lam
    c = -0.5 * (
        np.sum(dev * cho_solve(chol, dev.T).T, axis=1)
        + logdet_phi
        + params.d * _LOG_2PI
        + params.k * _LOG_2PI
    )
    return precision, b, c


# --------------------------------------------------------------------------
# File formats: CSV for points (+ 1-based labels), JSON sidecar for the truth.
# --------------------------------------------------------------------------


def save_dataset(data: Dataset, csv_path, truth_path=None) -> None:
    csv_path = Path(csv_path)
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        header = [f"y_{j + 1}" for j in range(data.d)]
        if data.labels is not None:
            header.append("label")
        writer.writerow(header)
        for i in range(data.n):
            row = [repr(float(v)) for v in data.points[i]]
            if data.labels is not None:
                row.append(str(int(data.labels[i]) + 1))
            writer.writerow(row)
    if truth_path is not None:
        sidecar = {"seed": data.seed, "n": data.n}
        if data.truth is not None:
            sidecar["truth"] = data.truth.to_dict()
        Path(truth_path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_dataset(csv_path, truth_path=None) -> Dataset:
    csv_path = Path(csv_path)
    with csv_path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        has_labels = header and header[-1] == "label"
        ncols = len(header) - (1 if has_labels else 0)
        points, labels = [], []
        for row in reader:
            points.append([float(v) for v in row[:ncols]])
            if has_labels:
                labels.append(int(row[ncols]) - 1)
    truth = None
    seed = None
    if truth_path is not None and Path(truth_path).exists():
        sidecar = json.loads(Path(truth_path).read_text())
        seed = sidecar.get("seed")
        if "truth" in sidecar:
            truth = MfaParams.from_dict(sidecar["truth"])
    return Dataset(
        points=np.asarray(points, dtype=float),
        labels=np.asarray(labels, dtype=int) if labels else None,
        truth=truth,
        seed=seed,
    )
