from __future__ import annotations

import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np
import pandas as pd
import scipy.linalg
from scipy.stats import bootstrap

from mblflow._statistics import log_slope_stats, wilson_intervals
from mblflow._validation import (
    DEFAULT_MAX_SITES,
    validate_probability_grid,
    validate_symmetric,
)
from mblflow.entities import Disorder, Spectrum
from mblflow.errors import EigensolverError, LevelCrossingError
from mblflow.model import build_hamiltonian

logger = logging.getLogger(__name__)

DEGENERACY_TOL = 1e-12
RESIDUAL_TOL = 1e-9


def fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip columns so that each largest-magnitude component is positive."""
    if vectors.size == 0:
        return vectors
    rows = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[rows, np.arange(vectors.shape[1])])
    signs[signs == 0.0] = 1.0
    return vectors * signs


def diagonalize(hamiltonian: np.ndarray) -> Spectrum:
    """
    Full eigendecomposition of a real symmetric matrix.

    Raises:
        EigensolverError: If the solver fails or some eigenpair leaves a residual
            ||H v - E v|| above RESIDUAL_TOL * ||H||_2.
    """
    validate_symmetric(hamiltonian, context="hamiltonian")
    try:
        energies, vectors = scipy.linalg.eigh(hamiltonian)
    except np.linalg.LinAlgError as exc:
        raise EigensolverError(f"eigensolver did not converge: {exc}") from exc
    norm = max(float(np.max(np.abs(energies), initial=0.0)), np.finfo(float).tiny)
    residual = np.linalg.norm(hamiltonian @ vectors - vectors * energies, axis=0)
    worst = float(np.max(residual, initial=0.0))
    if worst > RESIDUAL_TOL * norm:
        raise EigensolverError(
            f"eigenpair residual {worst:.3e} exceeds {RESIDUAL_TOL:g} * ||H||_2"
        )
    return Spectrum(energies=energies, vectors=fix_signs(vectors))


def eigvalsh_sorted(hamiltonian: np.ndarray) -> np.ndarray:
    """Ascending eigenvalues only."""
    try:
        return scipy.linalg.eigh(hamiltonian, eigvals_only=True)
    except np.linalg.LinAlgError as exc:
        raise EigensolverError(f"eigensolver did not converge: {exc}") from exc


def min_level_spacing(s: Spectrum | np.ndarray) -> float:
    energies = s.energies if isinstance(s, Spectrum) else np.sort(np.asarray(s))
    if energies.size < 2:
        raise ValueError("spectrum must contain at least 2 levels")
    return float(np.min(np.diff(energies)))


def mean_gap_ratio(energies: np.ndarray) -> float:
    """Average of min(s_a, s_{a+1}) / max(s_a, s_{a+1}) over adjacent spacings."""
    spacings = np.diff(np.sort(np.asarray(energies, dtype=float)))
    if spacings.size < 2:
        return float("nan")
    lower = np.minimum(spacings[:-1], spacings[1:])
    upper = np.maximum(spacings[:-1], spacings[1:])
    usable = upper > 0.0
    if not np.any(usable):
        return float("nan")
    return float(np.mean(lower[usable] / upper[usable]))


@dataclass(frozen=True, slots=True, eq=False)
class LevelStatsReport:
    """
    Empirical probability that the smallest level spacing falls below delta.

    Args:
        delta_grid (np.ndarray): Gap thresholds, ascending
        empirical_prob (np.ndarray): Fraction of realizations with min gap < delta
        counts (np.ndarray): Number of such realizations per threshold
        n_realizations (int): Ensemble size
        ci_lo (np.ndarray): Lower Wilson bound per threshold
        ci_hi (np.ndarray): Upper Wilson bound per threshold
        fitted_nu (float): Slope of log P against log delta, NaN when flagged
        nu_ci (tuple[float, float]): Bootstrap percentile interval of the slope
        fit (dict[str, float]): Full regression statistics of the fit
        flagged (bool): True when too few thresholds had enough hits to fit
        mean_gap_ratio (float): Ensemble mean of the adjacent-gap ratio
    """

    delta_grid: np.ndarray
    empirical_prob: np.ndarray
    counts: np.ndarray
    n_realizations: int
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    fitted_nu: float
    nu_ci: tuple[float, float]
    fit: dict[str, float]
    flagged: bool
    mean_gap_ratio: float = float("nan")

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "delta": self.delta_grid,
                "prob": self.empirical_prob,
                "ci_lo": self.ci_lo,
                "ci_hi": self.ci_hi,
            }
        )

    def fit_summary(self) -> dict[str, Any]:
        return {
            "fitted_nu": self.fitted_nu,
            "nu_ci_lo": self.nu_ci[0],
            "nu_ci_hi": self.nu_ci[1],
            "nu_se": self.fit.get("slope_se", float("nan")),
            "r_squared": self.fit.get("r_squared", float("nan")),
            "fit_points": self.fit.get("points", 0),
            "flagged": self.flagged,
            "n_realizations": self.n_realizations,
            "mean_gap_ratio": self.mean_gap_ratio,
        }

    def plot(self, **kwargs: object) -> None:
        """Log-log plot of the probability curve with its confidence band."""
        frame = self.to_frame()
        ax = frame.plot(
            x="delta",
            y="prob",
            logx=True,
            logy=True,
            marker="o",
            title="P(min level spacing < delta)",
            xlabel="delta",
            ylabel="probability",
            **kwargs,
        )
        ax.fill_between(frame["delta"], frame["ci_lo"], frame["ci_hi"], alpha=0.2)


def _nu_fit(
    gaps: np.ndarray, grid: np.ndarray, min_hits: int, max_prob: float
) -> tuple[np.ndarray, dict[str, float]]:
    counts = np.count_nonzero(gaps[:, None] < grid[None, :], axis=0)
    # saturated thresholds flatten the log-log curve
    usable = (counts >= max(min_hits, 1)) & (counts <= max_prob * gaps.size)
    stats = log_slope_stats(grid[usable], counts[usable] / gaps.size, log_x=True)
    return counts, stats


def level_statistics_from_gaps(
    gaps: Iterable[float],
    delta_grid: Iterable[float],
    *,
    min_realizations: int = 100,
    min_hits: int = 5,
    max_prob: float = 0.5,
    n_bootstrap: int = 999,
    seed: int = 0,
    gap_ratios: Iterable[float] | None = None,
) -> LevelStatsReport:
    """
    Estimate P(min gap < delta) from one minimum level spacing per realization.

    The exponent nu is the least-squares slope of log P against log delta over the
    thresholds with at least ``min_hits`` hits and an empirical probability of at
    most ``max_prob``. The small-delta power law only holds before P saturates
    towards 1, so larger thresholds are reported but not fitted. The uncertainty
    of nu is a percentile bootstrap over realizations, applying the same cuts to
    every resample. When fewer than two thresholds qualify the report is flagged
    and carries NaN for nu.
    """
    if not 0.0 < max_prob <= 1.0:
        raise ValueError("max_prob must be in (0, 1]")
    gap_array = np.asarray(list(gaps), dtype=float)
    grid = validate_probability_grid(delta_grid)
    if gap_array.size < min_realizations:
        raise ValueError(
            f"level statistics need at least {min_realizations} realizations, "
            f"got {gap_array.size}"
        )
    if gap_array.size == 0:
        raise ValueError("level statistics need at least one realization")
    if np.any(gap_array < 0.0) or not np.all(np.isfinite(gap_array)):
        raise ValueError("gaps must be finite and non-negative")

    counts, fit = _nu_fit(gap_array, grid, min_hits, max_prob)
    prob = counts / gap_array.size
    ci_lo, ci_hi = wilson_intervals(counts, gap_array.size)
    fitted_nu = fit["slope"]
    flagged = not np.isfinite(fitted_nu)
    if flagged:
        logger.info(
            "level statistics flagged: %d threshold(s) with >= %d hits and P <= %g",
            fit["points"],
            min_hits,
            max_prob,
        )

    nu_ci = (float("nan"), float("nan"))
    if not flagged and n_bootstrap > 0 and gap_array.size > 1:

        def _slope(sample: np.ndarray) -> float:
            return _nu_fit(sample, grid, min_hits, max_prob)[1]["slope"]

        with np.errstate(all="ignore"):
            res = bootstrap(
                (gap_array,),
                _slope,
                n_resamples=n_bootstrap,
                vectorized=False,
                method="percentile",
                random_state=np.random.default_rng(seed),
            )
        distribution = np.asarray(res.bootstrap_distribution, dtype=float)
        if np.any(np.isfinite(distribution)):
            lo, hi = np.nanpercentile(distribution, [2.5, 97.5])
            nu_ci = (float(lo), float(hi))

    ratio = float("nan")
    if gap_ratios is not None:
        ratios = np.asarray(list(gap_ratios), dtype=float)
        if np.any(np.isfinite(ratios)):
            ratio = float(np.nanmean(ratios))

    return LevelStatsReport(
        delta_grid=grid,
        empirical_prob=prob,
        counts=counts,
        n_realizations=int(gap_array.size),
        ci_lo=ci_lo,
        ci_hi=ci_hi,
        fitted_nu=float(fitted_nu),
        nu_ci=nu_ci,
        fit=fit,
        flagged=flagged,
        mean_gap_ratio=ratio,
    )


def estimate_level_statistics(
    realizations: Sequence[Disorder],
    delta_grid: Iterable[float],
    *,
    min_realizations: int = 100,
    min_hits: int = 5,
    max_prob: float = 0.5,
    n_bootstrap: int = 999,
    seed: int = 0,
    max_sites: int = DEFAULT_MAX_SITES,
) -> LevelStatsReport:
    """Diagonalize every realization and estimate the level-spacing statistics."""
    if len(realizations) < min_realizations:
        raise ValueError(
            f"level statistics need at least {min_realizations} realizations, "
            f"got {len(realizations)}"
        )
    gaps = []
    ratios = []
    for d in realizations:
        energies = eigvalsh_sorted(build_hamiltonian(d, max_sites=max_sites))
        gaps.append(min_level_spacing(energies))
        ratios.append(mean_gap_ratio(energies))
    return level_statistics_from_gaps(
        gaps,
        delta_grid,
        min_realizations=min_realizations,
        min_hits=min_hits,
        max_prob=max_prob,
        n_bootstrap=n_bootstrap,
        seed=seed,
        gap_ratios=ratios,
    )


def small_gap_probability(
    gaps: Iterable[float], n: int, eps_tilde: float
) -> tuple[float, float, float]:
    """Fraction of realizations whose smallest spacing is below eps_tilde^n."""
    if not 0.0 < eps_tilde < 1.0:
        raise ValueError("eps_tilde must be in (0, 1)")
    gap_array = np.asarray(list(gaps), dtype=float)
    if gap_array.size == 0:
        raise ValueError("gaps must not be empty")
    hits = int(np.count_nonzero(gap_array < eps_tilde**n))
    lo, hi = wilson_intervals(np.array([hits]), gap_array.size)
    return (hits / gap_array.size, float(lo[0]), float(hi[0]))


def _pair_differences(energies: np.ndarray, start: int, stop: int) -> np.ndarray:
    return energies[start:stop, None] - energies[None, :]


def radial_scaling_check(
    d: Disorder,
    lam: float,
    *,
    rel_floor: float = 1e-3,
    max_sites: int = DEFAULT_MAX_SITES,
) -> float:
    """
    Maximum relative deviation of D_ab(lam * d) from lam * D_ab(d) over all level
    pairs, where D_ab = E_a - E_b and every coupling is multiplied by ``lam``.

    Eigenvalues carry an absolute error of a few ulps of ||H||_2, so each deviation
    is taken relative to |lam * D_ab| + rel_floor * lam * ||H||_2. Pairs closer
    than that floor are compared on the scale of the spectrum.
    """
    if lam <= 0.0:
        raise ValueError("lambda must be greater than 0")
    if rel_floor <= 0.0:
        raise ValueError("rel_floor must be greater than 0")
    base = eigvalsh_sorted(build_hamiltonian(d, max_sites=max_sites))
    scaled = eigvalsh_sorted(build_hamiltonian(d.scaled(lam), max_sites=max_sites))
    norm = max(float(np.max(np.abs(base))), np.finfo(float).tiny)
    floor = rel_floor * lam * norm

    worst = 0.0
    chunk = 512
    for start in range(0, base.size, chunk):
        stop = min(start + chunk, base.size)
        expected = lam * _pair_differences(base, start, stop)
        actual = _pair_differences(scaled, start, stop)
        deviation = np.abs(actual - expected) / (np.abs(expected) + floor)
        worst = max(worst, float(np.max(deviation)))
    return worst


def _gap_at(d: Disorder, factor: float, alpha: int, beta: int, max_sites: int):
    spectrum = diagonalize(build_hamiltonian(d.scaled(factor), max_sites=max_sites))
    energies = spectrum.energies
    return energies[alpha] - energies[beta], spectrum.vectors[:, [alpha, beta]]


def radial_derivative_check(
    d: Disorder,
    alpha: int,
    beta: int,
    step: float | None = None,
    *,
    min_overlap: float = 0.99,
    max_sites: int = DEFAULT_MAX_SITES,
) -> tuple[float, float]:
    """
    Central finite difference of D_ab along the radial direction of the coupling
    vector, returned together with the analytic value D_ab(r0) / r0.

    Raises:
        LevelCrossingError: If the pair is degenerate or the tracked eigenvectors
            swap inside the stencil.
    """
    dim = 1 << d.n
    for name, value in (("alpha", alpha), ("beta", beta)):
        if not 0 <= value < dim:
            raise IndexError(f"{name} {value} is outside 0..{dim - 1}")
    if alpha == beta:
        raise ValueError("alpha and beta must differ")
    r0 = d.radius
    if step is None:
        step = 1e-3 * r0
    if not 0.0 < step < r0:
        raise ValueError("step must be positive and smaller than the radius")

    hamiltonian = build_hamiltonian(d, max_sites=max_sites)
    spectrum = diagonalize(hamiltonian)
    gap = spectrum.energies[alpha] - spectrum.energies[beta]
    norm = float(np.max(np.abs(spectrum.energies)))
    if abs(gap) < DEGENERACY_TOL * max(norm, np.finfo(float).tiny):
        raise LevelCrossingError(
            f"levels {alpha} and {beta} are degenerate (|D| = {abs(gap):.3e})"
        )

    plus, vectors_plus = _gap_at(d, 1.0 + step / r0, alpha, beta, max_sites)
    minus, vectors_minus = _gap_at(d, 1.0 - step / r0, alpha, beta, max_sites)
    overlaps = np.abs(np.sum(vectors_plus * vectors_minus, axis=0))
    if np.any(overlaps < min_overlap):
        raise LevelCrossingError(
            f"level crossing inside the stencil for pair ({alpha}, {beta}): "
            f"overlaps {overlaps.round(6).tolist()}"
        )

    fd_derivative = (plus - minus) / (2.0 * step)
    return float(fd_derivative), float(gap / r0)
