from __future__ import annotations

import math
from collections.abc import Iterable
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np

from mblflow._validation import DEFAULT_MAX_SITES, validate_site

LENGTH_SCALE_RATIO = 15.0 / 8.0
DISTRIBUTIONS = ("uniform", "semicircle")
_DENSITY_BOUNDS = {"uniform": 0.5, "semicircle": 2.0 / math.pi}


def length_scale(k: int | float) -> float:
    """Length scale L_k = (15/8)^k of the k-th elimination step."""
    return LENGTH_SCALE_RATIO**k


def default_epsilon(gamma: float) -> float:
    """Resonance cutoff gamma^(1/20); the gamma -> 0 limit is 0."""
    return float(gamma) ** (1.0 / 20.0) if gamma > 0.0 else 0.0


def sites_to_mask(sites: Iterable[int]) -> int:
    mask = 0
    for site in sites:
        mask |= 1 << int(site)
    return mask


@dataclass(frozen=True, slots=True)
class SpinConfig:
    """
    Classical Ising configuration doubling as a basis index.

    Bit i of ``bits`` encodes sigma_i = 1 - 2 * b_i, so index 0 is the all-up state.

    Args:
        bits (int): Basis index in 0 .. 2^n - 1
        n (int): Number of sites
    """

    bits: int
    n: int

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if not 0 <= self.bits < 1 << self.n:
            raise ValueError(f"bits must lie in 0..{(1 << self.n) - 1}")

    @classmethod
    def from_sigma(cls, sigma: Iterable[int]) -> SpinConfig:
        values = [int(s) for s in sigma]
        if not values or any(s not in (-1, 1) for s in values):
            raise ValueError("sigma must be a non-empty sequence of +1/-1 values")
        bits = sum(1 << i for i, s in enumerate(values) if s == -1)
        return cls(bits=bits, n=len(values))

    @property
    def index(self) -> int:
        return self.bits

    @property
    def sigma(self) -> np.ndarray:
        """Spin values as an int array of +1/-1."""
        b = (self.bits >> np.arange(self.n)) & 1
        return 1 - 2 * b

    def flip(self, i: int) -> SpinConfig:
        validate_site(i, self.n)
        return SpinConfig(bits=self.bits ^ (1 << i), n=self.n)


@dataclass(frozen=True, slots=True)
class Disorder:
    """
    One realization of the random couplings of the spin chain.

    Raw draws are stored within [-1, 1]; ``scale`` multiplies every coupling
    (fields, bonds and transverse terms) so that radial rescalings stay exact.

    Args:
        h (tuple[float, ...]): On-site fields h_0 .. h_{n-1}
        Gamma (tuple[float, ...]): Transverse amplitudes Gamma_0 .. Gamma_{n-1}
        J (tuple[float, ...]): Bonds J_{-1} .. J_{n-1}; J[k] holds J_{k-1}
        gamma (float): Transverse coupling scale, gamma_i = gamma * Gamma_i
        scale (float, optional): Radial factor applied to all couplings,
            defaults to 1.0
    """

    h: tuple[float, ...]
    Gamma: tuple[float, ...]
    J: tuple[float, ...]
    gamma: float
    scale: float = 1.0

    def __post_init__(self) -> None:
        h = tuple(float(v) for v in self.h)
        gamma_i = tuple(float(v) for v in self.Gamma)
        bonds = tuple(float(v) for v in self.J)
        if not h:
            raise ValueError("h must contain at least one site")
        if len(gamma_i) != len(h):
            raise ValueError("Gamma must have the same length as h")
        if len(bonds) != len(h) + 1:
            raise ValueError("J must have n + 1 entries (bonds -1 .. n-1)")
        for name, values in (("h", h), ("Gamma", gamma_i), ("J", bonds)):
            if not all(math.isfinite(v) and -1.0 <= v <= 1.0 for v in values):
                raise ValueError(f"{name} entries must lie within [-1, 1]")
        if not math.isfinite(self.gamma) or self.gamma < 0.0:
            raise ValueError("gamma must be non-negative")
        if not math.isfinite(self.scale) or self.scale <= 0.0:
            raise ValueError("scale must be greater than 0")
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "Gamma", gamma_i)
        object.__setattr__(self, "J", bonds)
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def n(self) -> int:
        return len(self.h)

    @property
    def fields(self) -> np.ndarray:
        """Effective on-site fields ``scale * h``."""
        return self.scale * np.asarray(self.h)

    @property
    def bonds(self) -> np.ndarray:
        """Effective bonds ``scale * J``, boundary bonds included."""
        return self.scale * np.asarray(self.J)

    @property
    def transverse(self) -> np.ndarray:
        """Effective transverse couplings ``scale * gamma * Gamma``."""
        return self.scale * (self.gamma * np.asarray(self.Gamma))

    @property
    def radius(self) -> float:
        """Euclidean norm r of the full effective coupling vector."""
        return float(
            np.sqrt(
                np.sum(self.fields**2)
                + np.sum(self.bonds**2)
                + np.sum(self.transverse**2)
            )
        )

    def scaled(self, factor: float) -> Disorder:
        """Same disorder shape with every coupling multiplied by ``factor``."""
        if not math.isfinite(factor) or factor <= 0.0:
            raise ValueError("factor must be greater than 0")
        return replace(self, scale=self.scale * factor)

    def with_gamma(self, gamma: float) -> Disorder:
        return replace(self, gamma=gamma)

    def to_json(self) -> dict[str, Any]:
        record: dict[str, Any] = {
            "n": self.n,
            "gamma": self.gamma,
            "h": list(self.h),
            "Gamma": list(self.Gamma),
            "J": list(self.J),
        }
        if self.scale != 1.0:
            record["scale"] = self.scale
        return record

    @classmethod
    def from_json(cls, record: dict[str, Any]) -> Disorder:
        missing = sorted({"n", "gamma", "h", "Gamma", "J"}.difference(record))
        if missing:
            raise ValueError(
                "disorder record is missing keys: "
                + ", ".join(f"'{key}'" for key in missing)
            )
        disorder = cls(
            h=tuple(record["h"]),
            Gamma=tuple(record["Gamma"]),
            J=tuple(record["J"]),
            gamma=float(record["gamma"]),
            scale=float(record.get("scale", 1.0)),
        )
        if disorder.n != int(record["n"]):
            raise ValueError(
                f"disorder record declares n={record['n']} but has {disorder.n} fields"
            )
        return disorder


@dataclass(frozen=True, slots=True)
class ModelParams:
    """
    Parameters of the disorder ensemble.

    Args:
        n (int): Chain length
        gamma (float): Transverse coupling scale
        epsilon (float | None, optional): Resonance cutoff, defaults to
            gamma^(1/20)
        distribution (str, optional): Coupling law, "uniform" on [-1, 1] or the
            bounded "semicircle" law, defaults to "uniform"
        boundary (str, optional): Only "plus" (spins outside the chain frozen
            at +1) is supported
        max_sites (int, optional): Dense size cap, defaults to 14
    """

    n: int
    gamma: float
    epsilon: float | None = None
    distribution: str = "uniform"
    boundary: str = "plus"
    max_sites: int = DEFAULT_MAX_SITES

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")
        if self.epsilon is None:
            object.__setattr__(self, "epsilon", default_epsilon(self.gamma))
        eps = float(self.epsilon)
        if self.gamma > 0.0 and not 0.0 < eps < 1.0:
            raise ValueError("epsilon must be in (0, 1)")
        if self.gamma == 0.0 and not 0.0 <= eps < 1.0:
            raise ValueError("epsilon must be in [0, 1) when gamma is 0")
        object.__setattr__(self, "epsilon", eps)
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(
                "distribution must be one of: " + ", ".join(DISTRIBUTIONS)
            )
        if self.boundary != "plus":
            raise ValueError("boundary must be 'plus'")
        if self.max_sites < 1:
            raise ValueError("max_sites must be at least 1")

    @property
    def rho0(self) -> float:
        """Upper bound of the coupling density."""
        return _DENSITY_BOUNDS[self.distribution]


@dataclass(frozen=True, slots=True)
class FlowParams:
    """
    Parameters of the multiscale rotation flow.

    Args:
        gamma (float): Transverse coupling scale, 0 <= gamma < 1
        epsilon (float | None, optional): Resonance cutoff, defaults to
            gamma^(1/20)
        m0 (int, optional): Offset of the separation scale, defaults to 0
        max_steps (int, optional): Last step attempted, defaults to 16
        offdiag_tol (float, optional): Convergence threshold on the off-diagonal
            Frobenius norm relative to ``||H||_F``, defaults to 1e-12
        denom_floor (float, optional): Denominators below this are resonant,
            defaults to 1e-13
        drift_tol (float, optional): Allowed relative spectrum drift per step,
            defaults to 1e-9
        check_spectrum (bool, optional): Verify spectrum invariance after every
            rotation, defaults to True
        max_sites (int, optional): Dense size cap, defaults to 14
    """

    gamma: float
    epsilon: float | None = None
    m0: int = 0
    max_steps: int = 16
    offdiag_tol: float = 1e-12
    denom_floor: float = 1e-13
    drift_tol: float = 1e-9
    check_spectrum: bool = True
    max_sites: int = DEFAULT_MAX_SITES

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")
        if self.epsilon is None:
            object.__setattr__(self, "epsilon", default_epsilon(self.gamma))
        eps = float(self.epsilon)
        if self.gamma > 0.0 and not self.gamma < eps < 1.0:
            raise ValueError("epsilon must satisfy gamma < epsilon < 1")
        if self.gamma == 0.0 and not 0.0 <= eps < 1.0:
            raise ValueError("epsilon must be in [0, 1) when gamma is 0")
        object.__setattr__(self, "epsilon", eps)
        if self.m0 < 0:
            raise ValueError("m0 must be non-negative")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")
        if self.offdiag_tol <= 0.0:
            raise ValueError("offdiag_tol must be greater than 0")
        if self.denom_floor <= 0.0:
            raise ValueError("denom_floor must be greater than 0")
        if self.drift_tol <= 0.0:
            raise ValueError("drift_tol must be greater than 0")

    def band(self, k: int) -> tuple[float, float]:
        """Half-open magnitude band [L_{k-1}, L_k) eliminated in step k."""
        return (length_scale(k - 1), length_scale(k))


@dataclass(frozen=True, slots=True, eq=False)
class TransitionSet:
    """
    Off-diagonal entries (source < target) selected in one flow step.

    Args:
        source (np.ndarray): Row basis indices
        target (np.ndarray): Column basis indices
        amplitude (np.ndarray): Entry values H[source, target]
        denominator (np.ndarray): Energy differences E_source - E_target
        band (np.ndarray): Magnitude orders log|amplitude| / log(gamma)
        resonant (np.ndarray): True for resonant entries
        n (int): Number of sites
    """

    source: np.ndarray
    target: np.ndarray
    amplitude: np.ndarray
    denominator: np.ndarray
    band: np.ndarray
    resonant: np.ndarray
    n: int

    def __post_init__(self) -> None:
        size = len(self.source)
        arrays = (self.target, self.amplitude, self.denominator, self.band)
        if any(len(a) != size for a in arrays) or len(self.resonant) != size:
            raise ValueError("transition arrays must have equal length")
        if np.any(np.asarray(self.source) == np.asarray(self.target)):
            raise ValueError("transitions must connect distinct configurations")

    @classmethod
    def empty(cls, n: int) -> TransitionSet:
        ints = np.zeros(0, dtype=np.int64)
        floats = np.zeros(0)
        return cls(ints, ints, floats, floats, floats, np.zeros(0, dtype=bool), n)

    def __len__(self) -> int:
        return len(self.source)

    def _subset(self, mask: np.ndarray) -> TransitionSet:
        return TransitionSet(
            source=self.source[mask],
            target=self.target[mask],
            amplitude=self.amplitude[mask],
            denominator=self.denominator[mask],
            band=self.band[mask],
            resonant=self.resonant[mask],
            n=self.n,
        )

    def perturbative(self) -> TransitionSet:
        return self._subset(~self.resonant)

    def resonant_subset(self) -> TransitionSet:
        return self._subset(self.resonant)

    @property
    def flip_masks(self) -> np.ndarray:
        return np.bitwise_xor(self.source, self.target)

    def supports(self) -> list[tuple[int, int]]:
        """Distinct site intervals spanned by the resonant transitions."""
        masks = np.unique(self.flip_masks[self.resonant])
        intervals = {
            (int(m & -m).bit_length() - 1, int(m).bit_length() - 1)
            for m in masks.tolist()
        }
        return sorted(intervals)


@dataclass(frozen=True, slots=True)
class Block:
    """
    A small resonant block.

    Args:
        sites (tuple[int, ...]): Core sites b, sorted
        scale (int): Step at which the block was formed
        volume (float): Core volume after the minimum-volume convention
        collar (tuple[int, ...]): Rotation region b-bar (core plus inner collar)
        outer_collar (tuple[int, ...]): Dependence region b-bar-bar
    """

    sites: tuple[int, ...]
    scale: int
    volume: float
    collar: tuple[int, ...]
    outer_collar: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.sites:
            raise ValueError("block must contain at least one site")
        if self.scale < 1:
            raise ValueError("block scale must be at least 1")
        core = set(self.sites)
        if not core.issubset(self.collar) or not set(self.collar).issubset(
            self.outer_collar
        ):
            raise ValueError("block regions must be nested: core, collar, outer")

    @property
    def diameter(self) -> int:
        return self.sites[-1] - self.sites[0]


@dataclass(frozen=True, slots=True)
class BlockSet:
    """
    Resonant-region taxonomy after a flow step.

    Args:
        n (int): Number of sites
        scale (int): Step k the taxonomy belongs to
        small_blocks (tuple[Block, ...]): Small blocks of all scales i <= k
        large_region (frozenset[int]): Core sites of the large-block region S_k'
        large_collar (frozenset[int]): Large region with its collar
        components (tuple[frozenset[int], ...], optional): Resonant components
            B^(k) found in step k
        resonant_sites (frozenset[int], optional): Every site reached by a
            resonance up to step k
    """

    n: int
    scale: int
    small_blocks: tuple[Block, ...] = ()
    large_region: frozenset[int] = field(default_factory=frozenset)
    large_collar: frozenset[int] = field(default_factory=frozenset)
    components: tuple[frozenset[int], ...] = ()
    resonant_sites: frozenset[int] = field(default_factory=frozenset)

    @classmethod
    def empty(cls, n: int, scale: int = 0) -> BlockSet:
        return cls(n=n, scale=scale)

    @property
    def large_mask(self) -> int:
        return sites_to_mask(self.large_collar)

    def large_runs(self) -> tuple[frozenset[int], ...]:
        """Maximal runs of adjacent sites in the collared large region."""
        runs: list[list[int]] = []
        for site in sorted(self.large_collar):
            if runs and runs[-1][-1] == site - 1:
                runs[-1].append(site)
            else:
                runs.append([site])
        return tuple(frozenset(run) for run in runs)

    def blocks_at(self, scale: int) -> tuple[Block, ...]:
        return tuple(b for b in self.small_blocks if b.scale == scale)

    def advanced(self, k: int) -> BlockSet:
        """The same taxonomy carried to a later scale without new resonances."""
        if k < self.scale:
            raise ValueError("cannot advance a block set to an earlier scale")
        if k == self.scale:
            return self
        return replace(self, scale=k, components=())


@dataclass(frozen=True, slots=True, eq=False)
class Spectrum:
    """
    Eigenvalues in ascending order with their orthonormal eigenvectors as columns.

    Args:
        energies (np.ndarray): Sorted eigenvalues
        vectors (np.ndarray): Eigenvectors, column alpha paired with energies[alpha]
    """

    energies: np.ndarray
    vectors: np.ndarray

    def __post_init__(self) -> None:
        energies = np.asarray(self.energies, dtype=float)
        vectors = np.asarray(self.vectors, dtype=float)
        if energies.ndim != 1 or vectors.shape != (energies.size, energies.size):
            raise ValueError("vectors must be a square matrix matching energies")
        if np.any(np.diff(energies) < 0.0):
            raise ValueError("energies must be sorted in ascending order")
        object.__setattr__(self, "energies", energies)
        object.__setattr__(self, "vectors", vectors)

    @property
    def size(self) -> int:
        return self.energies.size

    @property
    def n(self) -> int:
        return self.size.bit_length() - 1


_AXES = ("x", "y", "z")


@dataclass(frozen=True, slots=True)
class LocalOperatorSpec:
    """
    Product of Pauli factors placed relative to an anchor site.

    At most one factor per site; the number of y factors must be even so that the
    operator has a real symmetric representation.

    Args:
        factors (tuple[tuple[int, str], ...], optional): (offset, axis) pairs,
            defaults to a single z factor at the anchor
        radius (int | None, optional): Neighbourhood radius, defaults to the
            largest offset
    """

    factors: tuple[tuple[int, str], ...] = ((0, "z"),)
    radius: int | None = None

    def __post_init__(self) -> None:
        factors = tuple(
            (int(offset), str(axis).lower()) for offset, axis in self.factors
        )
        if not factors:
            raise ValueError("factors must not be empty")
        offsets = [offset for offset, _ in factors]
        if len(set(offsets)) != len(offsets):
            raise ValueError("factors must act on distinct sites")
        if any(axis not in _AXES for _, axis in factors):
            raise ValueError("axis must be one of: x, y, z")
        if sum(axis == "y" for _, axis in factors) % 2:
            raise ValueError(
                "operator specs with an odd number of y factors are not real; "
                "use an even number of y factors"
            )
        reach = max(abs(offset) for offset in offsets)
        radius = reach if self.radius is None else int(self.radius)
        if radius < reach:
            raise ValueError(f"radius must be at least {reach} for these factors")
        object.__setattr__(self, "factors", tuple(sorted(factors)))
        object.__setattr__(self, "radius", radius)

    @property
    def is_diagonal(self) -> bool:
        return all(axis == "z" for _, axis in self.factors)

    def at(self, anchor: int, n: int) -> tuple[tuple[int, str], ...]:
        """Absolute (site, axis) factors for the operator anchored at ``anchor``."""
        placed = tuple((anchor + offset, axis) for offset, axis in self.factors)
        for site, _ in placed:
            validate_site(site, n, context="operator site")
        return placed

    def fits(self, anchor: int, n: int) -> bool:
        return all(0 <= anchor + offset < n for offset, _ in self.factors)

    def to_json(self) -> dict[str, Any]:
        return {
            "factors": [[offset, axis] for offset, axis in self.factors],
            "radius": self.radius,
        }

    @classmethod
    def from_json(cls, record: dict[str, Any]) -> LocalOperatorSpec:
        if "factors" not in record:
            raise ValueError("operator record is missing key 'factors'")
        return cls(
            factors=tuple((int(o), str(a)) for o, a in record["factors"]),
            radius=record.get("radius"),
        )


@dataclass(frozen=True, slots=True)
class Weighting:
    """
    State weighting for averages over eigenstates.

    Args:
        kind (str, optional): "uniform" or "gibbs", defaults to "uniform"
        beta (float, optional): Inverse temperature for "gibbs", defaults to 0.0
    """

    kind: str = "uniform"
    beta: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("uniform", "gibbs"):
            raise ValueError("kind must be 'uniform' or 'gibbs'")
        if not math.isfinite(self.beta):
            raise ValueError("beta must be finite")
        if self.kind == "uniform" and self.beta != 0.0:
            raise ValueError("beta is only meaningful for gibbs weighting")

    @classmethod
    def gibbs(cls, beta: float) -> Weighting:
        return cls(kind="gibbs", beta=beta)
