"""Disordered spin-chain Hamiltonian in the sigma basis.

H = sum_i h_i S^z_i + sum_i gamma_i S^x_i + sum_{i=-1}^{n-1} J_i S^z_i S^z_{i+1}

with Pauli matrices and spins outside the chain frozen at +1. Basis index b
encodes sigma_i = 1 - 2 * bit_i(b).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from mblflow._validation import DEFAULT_MAX_SITES, validate_site, validate_size_cap
from mblflow.entities import Disorder, ModelParams, SpinConfig


def spin_table(n: int) -> np.ndarray:
    """All 2^n configurations as a (2^n, n) array of +1/-1 values."""
    if n < 1:
        raise ValueError("n must be at least 1")
    bits = (np.arange(1 << n)[:, None] >> np.arange(n)[None, :]) & 1
    return (1 - 2 * bits).astype(np.int8)


def _padded(sigma: np.ndarray) -> np.ndarray:
    ones = np.ones(sigma.shape[:-1] + (1,), dtype=sigma.dtype)
    return np.concatenate([ones, sigma, ones], axis=-1)


def _check_dimensions(sigma: SpinConfig, d: Disorder) -> None:
    if sigma.n != d.n:
        raise ValueError(
            f"spin configuration has {sigma.n} sites but disorder has {d.n}"
        )


def diagonal_energy(sigma: SpinConfig, d: Disorder) -> float:
    """Ising energy of one configuration with +1 boundary spins."""
    _check_dimensions(sigma, d)
    s = sigma.sigma.astype(float)
    padded = _padded(s)
    return float(d.fields @ s + d.bonds @ (padded[:-1] * padded[1:]))


def diagonal_energies(d: Disorder) -> np.ndarray:
    """Diagonal of H for every basis index, ordered by index."""
    s = spin_table(d.n).astype(float)
    padded = _padded(s)
    return s @ d.fields + (padded[:, :-1] * padded[:, 1:]) @ d.bonds


def flip_energy_diff(sigma: SpinConfig, i: int, d: Disorder) -> float:
    """E(sigma) - E(sigma with spin i flipped), in closed form."""
    _check_dimensions(sigma, d)
    validate_site(i, d.n)
    padded = _padded(sigma.sigma.astype(float))
    fields = d.fields
    bonds = d.bonds
    # padded[i] is sigma_{i-1}, padded[i + 2] is sigma_{i+1}; bonds[i] is J_{i-1}
    return float(
        2.0
        * padded[i + 1]
        * (fields[i] + bonds[i + 1] * padded[i + 2] + bonds[i] * padded[i])
    )


def build_hamiltonian(
    d: Disorder, *, max_sites: int = DEFAULT_MAX_SITES
) -> np.ndarray:
    """Dense real symmetric Hamiltonian of one disorder realization."""
    validate_size_cap(d.n, max_sites, context="disorder")
    dim = 1 << d.n
    hamiltonian = np.diag(diagonal_energies(d))
    index = np.arange(dim)
    for i, coupling in enumerate(d.transverse):
        hamiltonian[index, index ^ (1 << i)] = coupling
    return hamiltonian


def _draw(rng: np.random.Generator, size: int, distribution: str) -> np.ndarray:
    if distribution == "uniform":
        return rng.uniform(-1.0, 1.0, size=size)
    if distribution == "semicircle":
        # Beta(3/2, 3/2) mapped to [-1, 1] has density (2/pi) sqrt(1 - x^2)
        return 2.0 * rng.beta(1.5, 1.5, size=size) - 1.0
    raise ValueError(f"Unsupported distribution: {distribution}")


def sample_disorder(seed: int, p: ModelParams) -> Disorder:
    """Draw the 3n + 1 couplings of one realization from a seeded generator."""
    rng = np.random.default_rng(seed)
    h = _draw(rng, p.n, p.distribution)
    gamma_i = _draw(rng, p.n, p.distribution)
    bonds = _draw(rng, p.n + 1, p.distribution)
    return Disorder(h=tuple(h), Gamma=tuple(gamma_i), J=tuple(bonds), gamma=p.gamma)


def save_disorder(d: Disorder, path: str | Path) -> Path:
    output_path = Path(path)
    try:
        output_path.parent.mkdir(parents=True, exist_ok=True)
        output_path.write_text(json.dumps(d.to_json(), indent=2) + "\n", "utf-8")
    except OSError as exc:
        raise OSError(f"failed to write disorder to '{output_path}': {exc}") from exc
    return output_path


def load_disorder(path: str | Path) -> Disorder:
    input_path = Path(path)
    try:
        record = json.loads(input_path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ValueError(f"disorder file does not exist: {input_path}") from exc
    except json.JSONDecodeError as exc:
        raise ValueError(
            f"failed to parse disorder JSON from '{input_path}': {exc}"
        ) from exc
    return Disorder.from_json(record)
