from __future__ import annotations

from collections.abc import Iterable, Sequence
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.optimize import linear_sum_assignment
from scipy.special import softmax
from scipy.stats import sem, t

from mblflow._statistics import log_slope_stats
from mblflow._validation import validate_site, validate_square_matrix
from mblflow.entities import LocalOperatorSpec, Spectrum, Weighting
from mblflow.model import spin_table

PROFILE_COLUMNS = (
    "distance",
    "median_max",
    "q90_max",
    "median_avg",
    "q90_avg",
    "n_realizations",
)


def pauli_action(
    factors: Iterable[tuple[int, str]], n: int
) -> tuple[int, np.ndarray]:
    """
    Signed-permutation form of a real Pauli product.

    Returns ``(mask, signs)`` with (O v)[b] = signs[b] * v[b ^ mask]. The y factor
    is represented by [[0, -1], [1, 0]] and an even number of them picks up
    (-1)^(#y / 2), which makes the product equal to the Hermitian Pauli string.
    """
    index = np.arange(1 << n)
    signs = np.ones(1 << n)
    mask = 0
    n_y = 0
    for site, axis in factors:
        validate_site(site, n, context="operator site")
        bit = (index >> site) & 1
        if axis == "z":
            signs *= 1 - 2 * bit
        elif axis == "x":
            mask ^= 1 << site
        elif axis == "y":
            mask ^= 1 << site
            signs *= 2 * bit - 1
            n_y += 1
        else:
            raise ValueError("axis must be one of: x, y, z")
    if n_y % 2:
        raise ValueError("an odd number of y factors has no real representation")
    if (n_y // 2) % 2:
        signs = -signs
    return mask, signs


def _apply(action: tuple[int, np.ndarray], vectors: np.ndarray) -> np.ndarray:
    mask, signs = action
    index = np.arange(vectors.shape[0])
    return signs[:, None] * vectors[index ^ mask]


def build_operator(spec: LocalOperatorSpec, anchor: int, n: int) -> np.ndarray:
    """Dense sigma-basis matrix of ``spec`` anchored at site ``anchor``."""
    mask, signs = pauli_action(spec.at(anchor, n), n)
    index = np.arange(1 << n)
    operator = np.zeros((1 << n, 1 << n))
    operator[index, index ^ mask] = signs
    return operator


def _check_rotation(rotation: np.ndarray, operator: np.ndarray | None = None) -> int:
    validate_square_matrix(rotation, context="rotation")
    if operator is not None and operator.shape != rotation.shape:
        raise ValueError("operator and rotation must have the same shape")
    return rotation.shape[0]


def _check_state(alpha: int, dim: int) -> int:
    if not 0 <= alpha < dim:
        raise IndexError(f"state index {alpha} is outside 0..{dim - 1}")
    return int(alpha)


def expectation(rotation: np.ndarray, operator: np.ndarray, alpha: int) -> float:
    """(R^T O R)[alpha, alpha]."""
    dim = _check_rotation(rotation, operator)
    column = rotation[:, _check_state(alpha, dim)]
    return float(column @ operator @ column)


def expectations(rotation: np.ndarray, operator: np.ndarray) -> np.ndarray:
    """Diagonal of R^T O R for every state."""
    _check_rotation(rotation, operator)
    return np.einsum("ba,ba->a", rotation, operator @ rotation)


def connected_correlation(
    rotation: np.ndarray,
    operator_i: np.ndarray,
    operator_j: np.ndarray,
    alpha: int,
) -> float:
    """<O_i O_j>_alpha - <O_i>_alpha <O_j>_alpha in the eigenstate column alpha."""
    dim = _check_rotation(rotation, operator_i)
    _check_rotation(rotation, operator_j)
    column = rotation[:, _check_state(alpha, dim)]
    applied_j = operator_j @ column
    joint = column @ operator_i @ applied_j
    return float(joint - (column @ operator_i @ column) * (column @ applied_j))


def connected_correlations(
    rotation: np.ndarray, operator_i: np.ndarray, operator_j: np.ndarray
) -> np.ndarray:
    _check_rotation(rotation, operator_i)
    _check_rotation(rotation, operator_j)
    applied_j = operator_j @ rotation
    joint = np.einsum("ba,ba->a", operator_i.T @ rotation, applied_j)
    return joint - expectations(rotation, operator_i) * np.einsum(
        "ba,ba->a", rotation, applied_j
    )


def site_magnetizations(rotation: np.ndarray) -> np.ndarray:
    """<S^z_i>_alpha for every state (rows) and site (columns)."""
    n = rotation.shape[0].bit_length() - 1
    return (rotation**2).T @ spin_table(n).astype(float)


def state_average(
    values: np.ndarray | Sequence[float],
    weighting: Weighting = Weighting(),
    energies: np.ndarray | None = None,
) -> float:
    """Uniform average over states, or the Gibbs average at inverse temperature beta."""
    values = np.asarray(values, dtype=float)
    if values.ndim != 1 or values.size == 0:
        raise ValueError("values must be a non-empty one-dimensional sequence")
    if weighting.kind == "uniform":
        return float(np.mean(values))
    if energies is None:
        raise ValueError("gibbs weighting needs the state energies")
    energies = np.asarray(energies, dtype=float)
    if energies.shape != values.shape:
        raise ValueError("energies must match values in length")
    weights = softmax(-weighting.beta * energies)
    return float(weights @ values)


def _state_averages(
    values: np.ndarray, weighting: Weighting, energies: np.ndarray
) -> np.ndarray:
    """Column-wise state averages of a (states, k) array."""
    if weighting.kind == "uniform":
        return values.mean(axis=0)
    return softmax(-weighting.beta * energies) @ values


@dataclass(frozen=True, slots=True)
class ScoreEstimate:
    """
    Disorder mean with a 95% Student-t interval.

    Args:
        mean (float): Mean over realizations
        ci_lo (float): Lower interval bound
        ci_hi (float): Upper interval bound
        n (int): Number of realizations
    """

    mean: float
    ci_lo: float
    ci_hi: float
    n: int

    @classmethod
    def from_values(
        cls, values: Iterable[float], confidence: float = 0.95
    ) -> ScoreEstimate:
        data = np.asarray(list(values), dtype=float)
        if data.size == 0:
            nan = float("nan")
            return cls(mean=nan, ci_lo=nan, ci_hi=nan, n=0)
        mean = float(np.mean(data))
        spread = float(sem(data)) if data.size > 1 else 0.0
        if not np.isfinite(spread) or spread == 0.0:
            return cls(mean=mean, ci_lo=mean, ci_hi=mean, n=int(data.size))
        lo, hi = t.interval(confidence, data.size - 1, loc=mean, scale=spread)
        return cls(mean=mean, ci_lo=float(lo), ci_hi=float(hi), n=int(data.size))


def default_site(n: int) -> int:
    return (n - 1) // 2


def localization_profile(
    spectrum: Spectrum, weighting: Weighting = Weighting()
) -> np.ndarray:
    """State average of |<S^z_i>_alpha| at every site i of one realization."""
    magnetization = np.abs(site_magnetizations(spectrum.vectors))
    return _state_averages(magnetization, weighting, spectrum.energies)


def localization_value(
    spectrum: Spectrum, site: int | None = None, weighting: Weighting = Weighting()
) -> float:
    """State average of |<S^z_site>_alpha| for one realization."""
    n = spectrum.n
    site = default_site(n) if site is None else validate_site(site, n)
    magnetization = site_magnetizations(spectrum.vectors)[:, site]
    return state_average(np.abs(magnetization), weighting, spectrum.energies)


def localization_score(
    ensemble: Sequence[Spectrum],
    site: int | None = None,
    weighting: Weighting = Weighting(),
    *,
    min_realizations: int = 100,
) -> ScoreEstimate:
    """Disorder mean of the state-averaged |<S^z_site>|, centre site by default."""
    if len(ensemble) < max(min_realizations, 1):
        raise ValueError(
            f"localization score needs at least {max(min_realizations, 1)} "
            f"realizations, got {len(ensemble)}"
        )
    return ScoreEstimate.from_values(
        localization_value(spectrum, site, weighting) for spectrum in ensemble
    )


def centered_pair(n: int, distance: int) -> tuple[int, int]:
    i = (n - 1 - distance) // 2
    return i, i + distance


def correlation_samples(
    spectrum: Spectrum,
    spec: LocalOperatorSpec = LocalOperatorSpec(),
    weighting: Weighting = Weighting(),
) -> tuple[np.ndarray, np.ndarray]:
    """
    max_alpha and state average of |<O_i; O_j>_alpha| for the centred pair at each
    distance 0 .. n-1; NaN where the operator does not fit on the chain.
    """
    n = spectrum.n
    vectors = spectrum.vectors
    maxima = np.full(n, np.nan)
    averages = np.full(n, np.nan)
    for distance in range(n):
        i, j = centered_pair(n, distance)
        if not (spec.fits(i, n) and spec.fits(j, n)):
            continue
        action_i = pauli_action(spec.at(i, n), n)
        action_j = pauli_action(spec.at(j, n), n)
        applied_j = _apply(action_j, vectors)
        applied_i = _apply(action_i, vectors)
        joint = np.einsum("ba,ba->a", applied_i, applied_j)
        mean_i = np.einsum("ba,ba->a", vectors, applied_i)
        mean_j = np.einsum("ba,ba->a", vectors, applied_j)
        correlation = np.abs(joint - mean_i * mean_j)
        maxima[distance] = float(np.max(correlation))
        averages[distance] = float(
            _state_averages(correlation[:, None], weighting, spectrum.energies)[0]
        )
    return maxima, averages


@dataclass(frozen=True, slots=True, eq=False)
class CorrelationProfile:
    """
    Ensemble quantiles of |<O_i; O_j>_alpha| per distance for centred pairs.

    Args:
        frame (pd.DataFrame): Columns distance, median_max, q90_max, median_avg,
            q90_avg, n_realizations
    """

    frame: pd.DataFrame

    @classmethod
    def from_samples(
        cls, maxima: np.ndarray, averages: np.ndarray
    ) -> CorrelationProfile:
        maxima = np.atleast_2d(np.asarray(maxima, dtype=float))
        averages = np.atleast_2d(np.asarray(averages, dtype=float))
        if maxima.shape != averages.shape:
            raise ValueError("maxima and averages must have the same shape")
        rows = []
        for distance in range(maxima.shape[1]):
            column_max = maxima[:, distance]
            column_avg = averages[:, distance]
            usable = np.isfinite(column_max) & np.isfinite(column_avg)
            if not np.any(usable):
                continue
            rows.append(
                {
                    "distance": distance,
                    "median_max": float(np.median(column_max[usable])),
                    "q90_max": float(np.quantile(column_max[usable], 0.9)),
                    "median_avg": float(np.median(column_avg[usable])),
                    "q90_avg": float(np.quantile(column_avg[usable], 0.9)),
                    "n_realizations": int(np.count_nonzero(usable)),
                }
            )
        return cls(frame=pd.DataFrame(rows, columns=list(PROFILE_COLUMNS)))

    def decay_slope(
        self, lo: int = 2, hi: int = 6, column: str = "median_max"
    ) -> dict[str, float]:
        """
        Least-squares slope of log(column) against distance over [lo, hi].

        Distances with a zero statistic are dropped; with fewer than two usable
        points the statistics are NaN.
        """
        if column not in self.frame.columns or column == "distance":
            raise ValueError(f"unknown profile column: {column}")
        window = self.frame.loc[self.frame["distance"].between(lo, hi)]
        return log_slope_stats(
            window["distance"].to_numpy(), window[column].to_numpy()
        )

    def plot(self, logy: bool = True, **kwargs: object) -> None:
        """Plot median and 90% quantiles against distance."""
        frame = self.frame
        if logy:
            frame = frame.loc[frame["median_max"] > 0.0]
        frame.plot(
            x="distance",
            y=["median_max", "q90_max", "median_avg", "q90_avg"],
            logy=logy,
            marker="o",
            title="Connected correlation against distance",
            xlabel="|i - j|",
            ylabel="|<O_i; O_j>|",
            **kwargs,
        )


def correlation_profile(
    ensemble: Sequence[Spectrum],
    spec: LocalOperatorSpec = LocalOperatorSpec(),
    weighting: Weighting = Weighting(),
    *,
    min_realizations: int = 100,
) -> CorrelationProfile:
    if len(ensemble) < max(min_realizations, 1):
        raise ValueError(
            f"correlation profile needs at least {max(min_realizations, 1)} "
            f"realizations, got {len(ensemble)}"
        )
    samples = [correlation_samples(s, spec, weighting) for s in ensemble]
    return CorrelationProfile.from_samples(
        np.array([m for m, _ in samples]), np.array([a for _, a in samples])
    )


@dataclass(frozen=True, slots=True, eq=False)
class StateMatching:
    """
    Pairing of flow states with oracle eigenstates.

    Args:
        flow_index (np.ndarray): Flow state matched to each oracle state
        overlap (np.ndarray): |<flow state, oracle state>| per oracle state
        degenerate (np.ndarray): True for oracle states in a near-degenerate cluster
    """

    flow_index: np.ndarray
    overlap: np.ndarray
    degenerate: np.ndarray


def match_states(
    flow: Spectrum, oracle: Spectrum, *, rel_tol: float = 1e-10
) -> StateMatching:
    """
    Match energy-sorted flow states to oracle states; clusters of oracle levels
    closer than ``rel_tol`` relative to the spectral radius are resolved by
    maximal overlap and flagged as degenerate.
    """
    if flow.size != oracle.size:
        raise ValueError("flow and oracle spectra must have the same size")
    energies = oracle.energies
    scale = max(float(np.max(np.abs(energies))), np.finfo(float).tiny)
    breaks = np.flatnonzero(np.diff(energies) > rel_tol * scale) + 1
    clusters = np.split(np.arange(energies.size), breaks)

    flow_index = np.arange(flow.size)
    degenerate = np.zeros(flow.size, dtype=bool)
    for cluster in clusters:
        if cluster.size == 1:
            continue
        degenerate[cluster] = True
        overlap = np.abs(oracle.vectors[:, cluster].T @ flow.vectors[:, cluster])
        rows, cols = linear_sum_assignment(-overlap)
        flow_index[cluster[rows]] = cluster[cols]

    overlaps = np.abs(
        np.einsum("ba,ba->a", oracle.vectors, flow.vectors[:, flow_index])
    )
    return StateMatching(flow_index=flow_index, overlap=overlaps, degenerate=degenerate)
