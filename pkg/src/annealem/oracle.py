"""Brute-force evaluators that gate the bead-chain engine before it is trusted.

Three independent routes of increasing reach:

* :func:`brute_force_chain` integrates the defining bead weight on a dense
  trapezoidal grid (k = 1, M <= 4).  It shares no algebra with the engine --
  the density is re-derived inline and nothing is diagonalized.
* :func:`dense_chain_reference` assembles the full (M k) x (M k) stacked-bead
  precision and uses dense log-determinants and solves; it checks the ring-mode
  factorization at any k and up to M ~ 8.
* :func:`run_verification_gates` bundles the standard agreement checks into a
  report for the CLI ``verify`` subcommand.

Grids default to [-8, 8]: the gate instances are unit-scale, so Gaussian
integrands decay far inside that range, and plain exponentials neither
overflow nor need max-shifting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .classic import e_step
from .engine import AnnealState, bead_posterior, free_energy
from .errors import ParameterError
from .model import Dataset, MfaParams, component_quadratics, incomplete_log_likelihood

_LOG_2PI = math.log(2.0 * math.pi)

# Hard ceiling on the total grid size (points_per_dim ** (M * k)).
_GRID_CELL_GUARD = 1e8


@dataclass(frozen=True)
class GridSpec:
    """Uniform trapezoidal grid shared by every bead dimension."""

    lo: float = -8.0
    hi: float = 8.0
    points_per_dim: int = 64

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ParameterError("grid needs lo < hi")
        if self.points_per_dim < 16:
            raise ParameterError("points_per_dim must be at least 16")

    def check_size(self, dims: int) -> None:
        if float(self.points_per_dim) ** dims > _GRID_CELL_GUARD:
            raise ParameterError(
                f"grid of {self.points_per_dim}^{dims} cells exceeds the {_GRID_CELL_GUARD:g} guard"
            )


@dataclass(frozen=True)
class ChainQuadrature:
    """Quadrature result with per-quantity refinement error estimates."""

    log_partition: float
    bead_mean: np.ndarray
    bead_second_moment: np.ndarray
    errors: dict = field(default_factory=dict)


def _complete_log_density_line(y, w, params: MfaParams, xs) -> np.ndarray:
    """log p(y, x | w) on a line of scalar latent values (independent route)."""
    phi = params.noise_cov
    phi_inv = np.linalg.inv(phi)
    _, logdet = np.linalg.slogdet(phi)
    lam = params.loadings[w][:, 0]
    resid = (y - params.means[w])[None, :] - xs[:, None] * lam[None, :]
    maha = np.einsum("nd,de,ne->n", resid, phi_inv, resid)
    obs = -0.5 * (maha + logdet + params.d * _LOG_2PI)
    lat = -0.5 * (xs**2 + _LOG_2PI)
    return obs + lat


def _chain_quadrature_at(y, w, params, anneal, xs):
    """One trapezoid pass; returns (log_partition, bead_mean, bead_second)."""
    beads, beta, gamma = anneal.beads, anneal.beta, anneal.gamma
    h = xs[1] - xs[0]
    tw = np.full(xs.shape, h)
    tw[0] = tw[-1] = h / 2.0
    # Trapezoid weights folded into the per-bead log factor.
    pb = (beta / beads) * _complete_log_density_line(y, w, params, xs) + np.log(tw)
    coup = -(beads / (2.0 * beta * gamma)) * (xs[:, None] - xs[None, :]) ** 2

    if beads == 1:
        # Periodic boundary x_0 = x_1 kills the coupling term.
        sums = [np.exp(pb)]
    elif beads == 2:
        # The two chain links coincide, so the coupling enters twice.
        weight = np.exp(pb[:, None] + pb[None, :] + 2.0 * coup)
        sums = [weight.sum(axis=1), weight.sum(axis=0)]
    elif beads == 3:
        weight = np.exp(
            pb[:, None, None]
            + pb[None, :, None]
            + pb[None, None, :]
            + coup[:, :, None]
            + coup[None, :, :]
            + coup[:, None, :]
        )
        sums = [weight.sum(axis=(1, 2)), weight.sum(axis=(0, 2)), weight.sum(axis=(0, 1))]
    elif beads == 4:
        # Slab over the first bead to bound memory at points^3 cells.
        # Slab axes are (x_2, x_3, x_4); links (2,3) and (3,4) are bead-only,
        # links (1,2) and (4,1) pick up the fixed first-bead value.
        base = (
            pb[:, None, None]
            + pb[None, :, None]
            + pb[None, None, :]
            + coup[:, :, None]
            + coup[None, :, :]
        )
        sums = [np.zeros(xs.shape) for _ in range(4)]
        for i in range(xs.size):
            slab = np.exp(base + pb[i] + coup[i][:, None, None] + coup[i][None, None, :])
            sums[0][i] = slab.sum()
            sums[1] += slab.sum(axis=(1, 2))
            sums[2] += slab.sum(axis=(0, 2))
            sums[3] += slab.sum(axis=(0, 1))
    else:
        raise ParameterError("brute-force chain supports at most 4 beads")

    z = float(sums[0].sum())
    mean = float(np.mean([float(s @ xs) for s in sums]) / z)
    second = float(np.mean([float(s @ xs**2) for s in sums]) / z)
    log_partition = 0.5 * beads * math.log(beads / (2.0 * math.pi * beta * gamma)) + math.log(z)
    return log_partition, mean, second


def brute_force_chain(
    y, w: int, params: MfaParams, anneal: AnnealState, grid: GridSpec
) -> ChainQuadrature:
    """Integrate the defining bead weight of one (point, component) pair.

    Restricted to scalar latent factors and at most four beads, where a dense
    grid is affordable; the bead prefactor is included in the returned log
    partition.  A half-resolution pass provides the discretization-error
    estimates.
    """
    if params.k != 1:
        raise ParameterError("brute-force chain requires a scalar latent factor (k = 1)")
    if anneal.beads > 4:
        raise ParameterError("brute-force chain supports at most 4 beads")
    if anneal.gamma <= 0.0:
        raise ParameterError("brute-force chain needs gamma > 0")
    y = np.asarray(y, dtype=float)
    if y.shape != (params.d,):
        raise ParameterError(f"expected a single point of shape ({params.d},), got {y.shape}")
    grid.check_size(anneal.beads)

    xs = np.linspace(grid.lo, grid.hi, grid.points_per_dim)
    lp, mean, second = _chain_quadrature_at(y, w, params, anneal, xs)
    xs_half = np.linspace(grid.lo, grid.hi, grid.points_per_dim // 2)
    lp_h, mean_h, second_h = _chain_quadrature_at(y, w, params, anneal, xs_half)
    return ChainQuadrature(
        log_partition=lp,
        bead_mean=np.array([mean]),
        bead_second_moment=np.array([[second]]),
        errors={
            "log_partition": abs(lp - lp_h),
            "bead_mean": abs(mean - mean_h),
            "bead_second_moment": abs(second - second_h),
        },
    )


def brute_force_free_energy(
    data: Dataset, params: MfaParams, anneal: AnnealState, grid: GridSpec
) -> float:
    """Sum the per-point free energies obtained from brute-force chains."""
    log_pi = np.log(params.weights)
    total = 0.0
    for i in range(data.n):
        lps = np.array(
            [
                brute_force_chain(data.points[i], w, params, anneal, grid).log_partition
                for w in range(params.m)
            ]
        )
        logits = anneal.beta * log_pi + lps
        shift = logits.max()
        total += -(shift + math.log(np.exp(logits - shift).sum())) / anneal.beta
    return total


def dense_chain_reference(y, w: int, params: MfaParams, anneal: AnnealState) -> ChainQuadrature:
    """Stacked-bead reference using dense linear algebra instead of ring modes.

    Builds the (M k) x (M k) precision ``(beta/M)(I (x) P) + (M/(beta
    Gamma))(L (x) I)`` explicitly, with L the ring Laplacian, and reads the
    log partition, bead mean and bead-averaged second moment off dense
    factorizations.
    """
    if anneal.gamma <= 0.0:
        raise ParameterError("dense chain reference needs gamma > 0")
    y = np.atleast_2d(np.asarray(y, dtype=float))
    beads, beta, gamma = anneal.beads, anneal.beta, anneal.gamma
    k = params.k
    precision, b, c = component_quadratics(y, params, w)
    # Quadratic form of sum_j (x_j - x_{j-1})^2 with periodic wrap; the roll
    # construction also covers M = 1 (zero) and M = 2 (doubled link).
    ring = 2.0 * np.eye(beads) - np.roll(np.eye(beads), 1, axis=1) - np.roll(np.eye(beads), -1, axis=1)
    big = (beta / beads) * np.kron(np.eye(beads), precision) + (beads / (beta * gamma)) * np.kron(
        ring, np.eye(k)
    )
    sign, logdet = np.linalg.slogdet(big)
    if sign <= 0:
        raise ParameterError("stacked precision is not positive definite")
    big_inv = np.linalg.inv(big)
    diag_blocks = [big_inv[j * k : (j + 1) * k, j * k : (j + 1) * k] for j in range(beads)]
    bead_cov = np.mean(diag_blocks, axis=0)

    h = (beta / beads) * np.tile(b[0], beads)
    mu_full = big_inv @ h
    bead_means = mu_full.reshape(beads, k)
    bead_mean = bead_means.mean(axis=0)
    log_partition = (
        0.5 * beads * k * math.log(beads / (beta * gamma))
        - 0.5 * logdet
        + 0.5 * float(h @ mu_full)
        + beta * float(c[0])
    )
    second = bead_cov + np.mean(np.einsum("jk,jl->jkl", bead_means, bead_means), axis=0)
    return ChainQuadrature(
        log_partition=log_partition, bead_mean=bead_mean, bead_second_moment=second
    )


# --------------------------------------------------------------------------
# Verification gates
# --------------------------------------------------------------------------


def mixed_relative_error(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / scale))


def random_test_instance(rng, *, d=None, k=1, m=None, n=3):
    """Unit-scale random model plus a small batch of points for gate checks."""
    d = int(rng.integers(1, 3)) if d is None else d
    m = int(rng.integers(1, 3)) if m is None else m
    weights = rng.uniform(0.5, 1.5, size=m)
    weights = weights / weights.sum()
    params = MfaParams(
        weights=weights,
        means=rng.uniform(-0.5, 0.5, size=(m, d)),
        loadings=rng.uniform(-0.8, 0.8, size=(m, d, k)),
        noise_cov=np.diag(rng.uniform(0.6, 1.5, size=d)),
        diagonal_noise=True,
    )
    points = rng.uniform(-1.2, 1.2, size=(n, d))
    return params, points


_GATE_NAMES = ("bead-chain", "free-energy", "dense-chain", "classic-limit", "reduction")


def run_verification_gates(seed: int = 0, gates=None, grid: GridSpec | None = None) -> dict:
    """Run the oracle-agreement suite; returns a JSON-ready report.

    Each gate reports its worst mixed relative error and the tolerance it was
    held to.  The bead-chain quadrature gates use per-bead-count grid
    resolutions on [-10, 10] so that truncation stays below the tolerance.
    """
    if gates is None:
        gates = list(_GATE_NAMES)
    unknown = [g for g in gates if g not in _GATE_NAMES]
    if unknown:
        raise ParameterError(f"unknown gates: {unknown}; available: {list(_GATE_NAMES)}")
    report = {"seed": seed, "gates": []}

    def add(name, err, tol):
        report["gates"].append(
            {"name": name, "max_error": err, "tolerance": tol, "passed": bool(err <= tol)}
        )

    quad_grids = {
        1: GridSpec(-10.0, 10.0, 2001),
        2: GridSpec(-10.0, 10.0, 501),
        4: GridSpec(-10.0, 10.0, 96) if grid is None else grid,
    }
    if grid is not None:
        quad_grids = {1: grid, 2: grid, 4: grid}

    if "bead-chain" in gates:
        rng = np.random.default_rng(seed)
        worst = 0.0
        for trial in range(10):
            beads = (1, 2, 4)[trial % 3]
            params, points = random_test_instance(rng, k=1, n=1)
            anneal = AnnealState(
                beta=(1.0, 0.5)[trial % 2], gamma=float(rng.uniform(0.4, 1.2)), beads=beads
            )
            post = bead_posterior(points, params, anneal)
            for w in range(params.m):
                ref = brute_force_chain(points[0], w, params, anneal, quad_grids[beads])
                worst = max(
                    worst,
                    mixed_relative_error(post.log_partition[0, w], ref.log_partition),
                    mixed_relative_error(post.bead_mean[0, w], ref.bead_mean),
                    mixed_relative_error(post.bead_second_moment[0, w], ref.bead_second_moment),
                )
        add("bead-chain", worst, 1e-6)

    if "free-energy" in gates:
        rng = np.random.default_rng(seed + 1)
        worst = 0.0
        for trial in range(3):
            beads = (1, 2, 4)[trial % 3]
            params, points = random_test_instance(rng, k=1, m=2, n=2)
            anneal = AnnealState(beta=1.0, gamma=float(rng.uniform(0.4, 1.2)), beads=beads)
            data = Dataset(points=points)
            engine_f = free_energy(data, params, anneal)
            oracle_f = brute_force_free_energy(data, params, anneal, quad_grids[beads])
            worst = max(worst, mixed_relative_error(engine_f, oracle_f))
        add("free-energy", worst, 1e-6)

    if "dense-chain" in gates:
        rng = np.random.default_rng(seed + 2)
        worst = 0.0
        for trial in range(10):
            beads = (2, 4, 8)[trial % 3]
            k = (1, 2)[trial % 2]
            params, points = random_test_instance(rng, k=k, n=1)
            anneal = AnnealState(beta=(1.0, 0.5)[trial % 2], gamma=float(rng.uniform(0.2, 1.5)), beads=beads)
            post = bead_posterior(points, params, anneal)
            for w in range(params.m):
                ref = dense_chain_reference(points[0], w, params, anneal)
                worst = max(
                    worst,
                    mixed_relative_error(post.log_partition[0, w], ref.log_partition),
                    mixed_relative_error(post.bead_mean[0, w], ref.bead_mean),
                    mixed_relative_error(post.bead_second_moment[0, w], ref.bead_second_moment),
                )
        add("dense-chain", worst, 1e-8)

    if "classic-limit" in gates:
        rng = np.random.default_rng(seed + 3)
        worst = 0.0
        for _ in range(10):
            params, points = random_test_instance(rng, k=int(rng.integers(1, 3)), n=4)
            data = Dataset(points=points)
            anneal = AnnealState(beta=1.0, gamma=1e-8, beads=8)
            post = bead_posterior(points, params, anneal)
            classic = e_step(data, params)
            worst = max(
                worst,
                mixed_relative_error(post.bead_mean, classic.latent_mean),
                mixed_relative_error(post.bead_second_moment, classic.latent_second_moment),
                mixed_relative_error(post.responsibilities, classic.responsibilities),
            )
        add("classic-limit", worst, 1e-4)

    if "reduction" in gates:
        rng = np.random.default_rng(seed + 4)
        worst = 0.0
        for _ in range(10):
            params, points = random_test_instance(rng, k=int(rng.integers(1, 3)), n=5)
            data = Dataset(points=points)
            f = free_energy(data, params, AnnealState(beta=1.0, gamma=0.0, beads=1))
            worst = max(worst, abs(f + incomplete_log_likelihood(data, params)))
        add("reduction", worst, 1e-10)

    report["all_passed"] = all(g["passed"] for g in report["gates"])
    return report
