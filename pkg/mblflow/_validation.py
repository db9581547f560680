from __future__ import annotations

from collections.abc import Iterable

import numpy as np

from mblflow.errors import SizeCapError

DEFAULT_MAX_SITES = 14


def validate_size_cap(
    n: int,
    max_sites: int = DEFAULT_MAX_SITES,
    *,
    context: str = "chain",
) -> None:
    """Refuse dense 2^n x 2^n storage beyond the configured site cap."""
    if n < 1:
        raise ValueError(f"{context} must have at least one site")
    if n > max_sites:
        raise SizeCapError(
            f"{context} has {n} sites, above the dense size cap of {max_sites}; "
            "raise max_sites explicitly if the memory is available"
        )


def validate_site(site: int, n: int, *, context: str = "site") -> int:
    if isinstance(site, bool) or not isinstance(site, (int, np.integer)):
        raise TypeError(f"{context} must be an integer")
    if not 0 <= site < n:
        raise IndexError(f"{context} {site} is outside the chain 0..{n - 1}")
    return int(site)


def validate_sites(
    sites: Iterable[int], n: int, *, context: str = "sites"
) -> frozenset[int]:
    return frozenset(validate_site(site, n, context=context) for site in sites)


def validate_square_matrix(matrix: np.ndarray, *, context: str = "matrix") -> None:
    if not isinstance(matrix, np.ndarray):
        raise TypeError(f"{context} must be a numpy array")
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"{context} must be a square matrix, got {matrix.shape}")
    if matrix.shape[0] == 0:
        raise ValueError(f"{context} must not be empty")


def validate_basis_matrix(matrix: np.ndarray, *, context: str = "matrix") -> int:
    """Check the shape of a sigma-basis operator and return its site count."""
    validate_square_matrix(matrix, context=context)
    dim = matrix.shape[0]
    if dim & (dim - 1):
        raise ValueError(f"{context} dimension {dim} is not a power of two")
    return dim.bit_length() - 1


def validate_symmetric(
    matrix: np.ndarray,
    *,
    atol: float = 1e-12,
    context: str = "matrix",
) -> None:
    validate_square_matrix(matrix, context=context)
    if not np.all(np.isfinite(matrix)):
        raise ValueError(f"{context} must contain only finite values")
    scale = max(1.0, float(np.max(np.abs(matrix))))
    if np.max(np.abs(matrix - matrix.T)) > atol * scale:
        raise ValueError(f"{context} must be symmetric")


def validate_antisymmetric(
    matrix: np.ndarray,
    *,
    atol: float = 1e-12,
    context: str = "generator",
) -> None:
    validate_square_matrix(matrix, context=context)
    if np.max(np.abs(matrix + matrix.T), initial=0.0) > atol:
        raise ValueError(f"{context} must be antisymmetric to {atol:g}")


def validate_probability_grid(
    values: Iterable[float], *, context: str = "delta_grid"
) -> np.ndarray:
    grid = np.asarray(list(values), dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise ValueError(f"{context} must be a non-empty sequence of numbers")
    if not np.all(np.isfinite(grid)) or np.any(grid <= 0.0):
        raise ValueError(f"{context} values must be positive and finite")
    return np.sort(grid)
