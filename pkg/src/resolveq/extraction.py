"""Inverse problem: material loss factors from measured internal quality factors.

Two routes are provided. :func:`weighted_lsq_solve` is the closed-form
error-weighted least-squares solution with its covariance matrix; it is
unconstrained and may return negative loss factors. :func:`nnls_solve`
enforces non-negativity, and :func:`monte_carlo_extract` propagates the
measurement noise through it to obtain distributions, which are then used to
decide whether each loss factor is resolved or only upper-bounded.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .errors import (
    MonteCarloError,
    SolverError,
    UnsolvableSystemError,
    ValidationError,
)
from .loss_model import (
    CHANNELS,
    MaterialLossVector,
    ModeMeasurement,
    ParticipationMatrix,
    forward_loss_rates,
)
from .nnls import lawson_hanson, lawson_hanson_batch

THREADS_ENV = "RESOLVEQ_THREADS"
BOUND_RULES = ("mc_percentile", "analytic_sigma_crossing")


@dataclass(frozen=True)
class ExtractionConfig:
    """Knobs for the Monte-Carlo extraction.

    ``bound_percentile`` is only used by the ``mc_percentile`` rule.
    ``zero_mass_threshold`` is the fraction of Monte-Carlo samples pinned at
    zero above which a channel counts as unresolved.
    """

    mc_samples: int = 5000
    seed: int = 20231
    bound_rule: str = "mc_percentile"
    bound_percentile: float = 0.95
    rank_tolerance: float = 1e-10
    zero_mass_threshold: float = 0.05
    nnls_max_iter: int | None = None
    nnls_tol: float = 1e-12
    max_failure_fraction: float = 0.01
    threads: int | None = None

    def __post_init__(self):
        if self.mc_samples < 100:
            raise ValidationError("mc_samples must be >= 100")
        if not 0 <= self.seed < 2**64:
            raise ValidationError("seed must be a 64-bit unsigned integer")
        if self.bound_rule not in BOUND_RULES:
            raise ValidationError(f"bound_rule must be one of {BOUND_RULES}")
        if not 0.5 < self.bound_percentile < 1:
            raise ValidationError("bound_percentile must lie in (0.5, 1)")
        if not self.rank_tolerance > 0:
            raise ValidationError("rank_tolerance must be > 0")
        if not 0 < self.zero_mass_threshold < 1:
            raise ValidationError("zero_mass_threshold must lie in (0, 1)")
        if self.threads is not None and self.threads < 1:
            raise ValidationError("threads must be >= 1")


@dataclass(frozen=True)
class Classification:
    """Resolved value ``value ± sigma``, or an upper bound ``<= bound``."""

    status: str
    value: float
    sigma: float
    bound: float | None = None

    @property
    def resolved(self) -> bool:
        return self.status == "resolved"

    def to_dict(self):
        if self.resolved:
            return {"status": self.status, "value": self.value, "sigma": self.sigma}
        return {"status": self.status, "bound": self.bound, "value": self.value, "sigma": self.sigma}


@dataclass
class ExtractionResult:
    """Everything an extraction run produces.

    ``x_hat`` is the non-negative point estimate; ``x_unconstrained`` and
    ``covariance`` come from the closed-form weighted least squares.
    Residuals are ``predicted - measured`` loss rates at ``x_hat``.
    """

    labels: tuple
    x_hat: MaterialLossVector
    x_unconstrained: np.ndarray
    covariance: np.ndarray
    mc_mean: np.ndarray
    mc_std: np.ndarray
    mc_percentiles: dict
    mc_zero_mass: np.ndarray
    classification: tuple
    residuals: np.ndarray
    measured_rates: np.ndarray
    n_failed: int = 0
    samples: np.ndarray | None = field(default=None, repr=False)

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))

    def to_dict(self):
        return {
            "channels": list(CHANNELS),
            "x_hat": self.x_hat.as_array().tolist(),
            "x_unconstrained": self.x_unconstrained.tolist(),
            "sigma": self.sigma.tolist(),
            "covariance": self.covariance.tolist(),
            "mc": {
                "mean": self.mc_mean.tolist(),
                "std": self.mc_std.tolist(),
                "percentiles": {f"{q:g}": v.tolist() for q, v in self.mc_percentiles.items()},
                "zero_mass": self.mc_zero_mass.tolist(),
                "n_failed": self.n_failed,
            },
            "classification": {
                name: c.to_dict() for name, c in zip(CHANNELS, self.classification)
            },
            "residuals": [
                {"mode": label, "measured": float(m), "predicted_minus_measured": float(r)}
                for label, m, r in zip(self.labels, self.measured_rates, self.residuals)
            ],
        }


# -- weighted system ---------------------------------------------------------

def _weighted_system(p, measurements):
    if isinstance(p, ParticipationMatrix):
        matrix = p.as_array()
        labels = p.labels
    else:
        matrix = np.atleast_2d(np.asarray(p, dtype=float))
        labels = tuple(m.label for m in measurements)
    if len(measurements) != len(matrix):
        raise ValidationError(
            f"{len(matrix)} participation rows but {len(measurements)} measurements"
        )
    if isinstance(p, ParticipationMatrix):
        measured_labels = tuple(m.label for m in measurements)
        if measured_labels != labels:
            raise ValidationError(
                f"mode order mismatch: participation {labels} vs measurements {measured_labels}"
            )
    y = np.array([m.loss_rate for m in measurements])
    sigma = np.array([m.loss_rate_sigma for m in measurements])
    return matrix, y, sigma, tuple(labels)


def _rank_check(weighted, labels, rank_tolerance):
    """Raise if the column-normalised weighted matrix is numerically rank deficient."""
    m, k = weighted.shape
    if m < k:
        raise UnsolvableSystemError(
            f"{m} modes cannot determine {k} loss channels", dependent_rows=labels
        )
    norms = np.linalg.norm(weighted, axis=0)
    if np.any(norms == 0):
        dead = [CHANNELS[i] for i in np.flatnonzero(norms == 0)]
        raise UnsolvableSystemError(f"no mode is sensitive to {dead}", dependent_rows=labels)
    u, s, _ = np.linalg.svd(weighted / norms, full_matrices=False)
    if s[-1] < rank_tolerance * s[0]:
        weights = np.abs(u[:, -1])
        rows = [label for label, w in zip(labels, weights) if w > 0.1 * weights.max()]
        raise UnsolvableSystemError(
            f"participation matrix is rank deficient (singular value ratio "
            f"{s[-1] / s[0]:.3g}); near-dependent rows: {rows}",
            dependent_rows=rows,
        )
    return norms


def weighted_covariance(matrix, sigma, rank_tolerance=1e-10, labels=None):
    """Covariance ``(P~^T P~)^-1`` of the weighted least-squares estimate.

    The inverse is formed on column-normalised weights to keep channels with
    very different units (1/ohm against dimensionless) well conditioned.
    """
    matrix = np.asarray(matrix, dtype=float)
    weighted = matrix / np.asarray(sigma, dtype=float)[:, None]
    labels = labels or tuple(f"mode-{i}" for i in range(len(matrix)))
    norms = _rank_check(weighted, labels, rank_tolerance)
    _, s, vt = np.linalg.svd(weighted / norms, full_matrices=False)
    inner = (vt.T / s**2) @ vt
    cov = inner / np.outer(norms, norms)
    return 0.5 * (cov + cov.T)


def weighted_lsq_solve(p, measurements: Sequence[ModeMeasurement], rank_tolerance=1e-10):
    """Closed-form weighted least-squares loss factors and their covariance.

    Solves ``x = C P~^T b`` with ``b_i = y_i / sigma_i``,
    ``P~_ij = P_ij / sigma_i`` and ``C = (P~^T P~)^-1``.

    Returns
    -------
    x : ndarray, shape (3,)
        Unconstrained estimate; components may be negative.
    C : ndarray, shape (3, 3)
    """
    matrix, y, sigma, labels = _weighted_system(p, measurements)
    cov = weighted_covariance(matrix, sigma, rank_tolerance, labels)
    weighted = matrix / sigma[:, None]
    x = cov @ (weighted.T @ (y / sigma))
    return x, cov


def _nnls_weighted(matrix, y, sigma, max_iter, tol):
    weighted = matrix / sigma[:, None]
    x, _ = lawson_hanson(weighted, y / sigma, max_iter=max_iter, tol=tol)
    return x


def nnls_solve(p, measurements: Sequence[ModeMeasurement], rank_tolerance=1e-10,
               max_iter=None, tol=1e-12) -> MaterialLossVector:
    """Error-weighted least-squares loss factors constrained to be non-negative."""
    matrix, y, sigma, labels = _weighted_system(p, measurements)
    _rank_check(matrix / sigma[:, None], labels, rank_tolerance)
    x = _nnls_weighted(matrix, y, sigma, max_iter, tol)
    return MaterialLossVector.from_array(np.maximum(x, 0.0))


# -- Monte Carlo -------------------------------------------------------------

def _default_threads():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return 1
    try:
        return max(1, int(value))
    except ValueError:
        raise ValidationError(f"{THREADS_ENV} must be an integer, got {value!r}") from None


#: Samples per random stream. Fixed so that results do not depend on threading.
MC_BLOCK = 256


def _draw_block(seed, block, count, y, sigma):
    """Perturbed loss rates for one block of samples.

    Non-positive draws are redrawn; rows that stay non-positive after many
    attempts come back as NaN.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(block,)))
    draws = y + sigma * rng.standard_normal((count, len(y)))
    for _ in range(1000):
        bad = draws <= 0
        if not bad.any():
            return draws
        rows, cols = np.nonzero(bad)
        draws[rows, cols] = y[cols] + sigma[cols] * rng.standard_normal(len(rows))
    draws[(draws <= 0).any(axis=1)] = np.nan
    return draws


def _run_blocks(blocks, seed, n_samples, matrix, y, sigma, max_iter, tol):
    weighted = matrix / sigma[:, None]
    parts = []
    for block in blocks:
        count = min(MC_BLOCK, n_samples - block * MC_BLOCK)
        draws = _draw_block(seed, block, count, y, sigma)
        out = np.full((count, matrix.shape[1]), np.nan)
        ok = np.all(np.isfinite(draws), axis=1)
        if ok.any():
            out[ok], _ = lawson_hanson_batch(weighted, draws[ok] / sigma, max_iter=max_iter, tol=tol)
        parts.append(out)
    return np.vstack(parts) if parts else np.empty((0, matrix.shape[1]))


def sample_loss_factors(p, measurements, config: ExtractionConfig = ExtractionConfig()):
    """Monte-Carlo NNLS samples, shape ``(mc_samples, 3)``; failed samples are NaN.

    Samples are drawn in fixed blocks of :data:`MC_BLOCK`, each from a stream
    keyed by ``(seed, block)``, so the output does not depend on how blocks
    are split across threads.
    """
    matrix, y, sigma, _ = _weighted_system(p, measurements)
    threads = config.threads or _default_threads()
    n = config.mc_samples
    blocks = np.arange(-(-n // MC_BLOCK))
    args = (config.seed, n, matrix, y, sigma, config.nnls_max_iter, config.nnls_tol)
    if threads == 1 or len(blocks) == 1:
        return _run_blocks(blocks, *args)
    chunks = [c for c in np.array_split(blocks, threads) if len(c)]
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        parts = list(pool.map(lambda chunk: _run_blocks(chunk, *args), chunks))
    return np.vstack(parts)


REPORTED_PERCENTILES = (2.5, 16.0, 50.0, 84.0, 97.5)


def _sigma_crossing_bound(matrix, eps, x_hat, channel):
    """Value of one channel at which sigma_x / x = 1, other channels held at x_hat."""
    from .sensitivity import minimum_resolvable

    fixed = dict(enumerate(x_hat))
    fixed.pop(channel)
    try:
        return minimum_resolvable(matrix, eps, channel, fixed)
    except SolverError:
        return None


def classify_and_bound(x_hat, covariance, samples, config: ExtractionConfig = ExtractionConfig(),
                       matrix=None, eps=None):
    """Label each channel as resolved or upper-bounded.

    A channel is resolved when ``sqrt(C_ii) / x_hat_i < 1`` and fewer than
    ``config.zero_mass_threshold`` of the Monte-Carlo samples sit at zero.

    Upper-bound values:

    ``mc_percentile``
        The ``bound_percentile`` quantile of the Monte-Carlo distribution,
        floored at the matching half-normal quantile of the analytic
        uncertainty, ``z * sqrt(C_ii)`` with ``z = Phi^-1((1 + p) / 2)``.
        Without the floor a channel whose samples are all clamped to zero
        would get a bound of exactly zero, which no measurement supports.
    ``analytic_sigma_crossing``
        The channel value at which ``sigma_x / x = 1`` with the remaining
        channels held at ``x_hat`` (needs `matrix` and `eps`); falls back to
        ``sqrt(C_ii)`` when no crossing exists.
    """
    x_hat = np.asarray(x_hat, dtype=float)
    sigma = np.sqrt(np.clip(np.diag(covariance), 0, None))
    finite = samples[np.all(np.isfinite(samples), axis=1)]
    zero_mass = np.mean(finite <= 0, axis=0)
    z = stats.norm.ppf(0.5 * (1 + config.bound_percentile))
    out = []
    for i in range(len(x_hat)):
        ratio = sigma[i] / x_hat[i] if x_hat[i] > 0 else math.inf
        if ratio < 1 and zero_mass[i] < config.zero_mass_threshold:
            out.append(Classification("resolved", float(x_hat[i]), float(sigma[i])))
            continue
        if config.bound_rule == "mc_percentile":
            bound = max(float(np.quantile(finite[:, i], config.bound_percentile)), z * sigma[i])
        else:
            if matrix is None or eps is None:
                raise ValidationError("analytic_sigma_crossing needs the participation matrix and eps")
            bound = _sigma_crossing_bound(matrix, eps, x_hat, i)
            if bound is None:
                bound = float(sigma[i])
        out.append(Classification("upper_bound", float(x_hat[i]), float(sigma[i]), float(bound)))
    return tuple(out)


def monte_carlo_extract(p, measurements: Sequence[ModeMeasurement],
                        config: ExtractionConfig = ExtractionConfig(),
                        keep_samples=False) -> ExtractionResult:
    """Full extraction: NNLS point estimate, covariance, Monte-Carlo statistics
    and resolved/bound classification."""
    matrix, y, sigma, labels = _weighted_system(p, measurements)
    x_unc, cov = weighted_lsq_solve(p, measurements, config.rank_tolerance)
    x_hat = nnls_solve(p, measurements, config.rank_tolerance,
                       config.nnls_max_iter, config.nnls_tol)

    samples = sample_loss_factors(p, measurements, config)
    failed = ~np.all(np.isfinite(samples), axis=1)
    n_failed = int(failed.sum())
    if n_failed > config.max_failure_fraction * config.mc_samples:
        raise MonteCarloError(
            f"{n_failed} of {config.mc_samples} Monte-Carlo samples failed to solve"
        )
    good = samples[~failed]

    eps = sigma / y
    classification = classify_and_bound(x_hat.as_array(), cov, samples, config, matrix, eps)
    residuals = forward_loss_rates(matrix, x_hat) - y
    return ExtractionResult(
        labels=labels,
        x_hat=x_hat,
        x_unconstrained=x_unc,
        covariance=cov,
        mc_mean=good.mean(axis=0),
        mc_std=good.std(axis=0, ddof=1),
        mc_percentiles={q: np.percentile(good, q, axis=0) for q in REPORTED_PERCENTILES},
        mc_zero_mass=np.mean(good <= 0, axis=0),
        classification=classification,
        residuals=residuals,
        measured_rates=y,
        n_failed=n_failed,
        samples=samples if keep_samples else None,
    )


def power_sweep_extract(p, sweep, config: ExtractionConfig = ExtractionConfig()):
    """Independent extraction at every drive power.

    Parameters
    ----------
    sweep : sequence of (photon_number, measurements)
        Every point must list the same modes in the same order.

    Returns
    -------
    list of (photon_number, ExtractionResult)
    """
    sweep = list(sweep)
    if not sweep:
        return []
    reference = tuple(m.label for m in sweep[0][1])
    for n_photon, measurements in sweep:
        labels = tuple(m.label for m in measurements)
        if labels != reference:
            raise ValidationError(
                f"mode set at n={n_photon:g} is {labels}, expected {reference}"
            )
    return [(n_photon, monte_carlo_extract(p, measurements, config))
            for n_photon, measurements in sweep]
