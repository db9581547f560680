from __future__ import annotations

import logging
from collections.abc import Iterable, Sequence

import numpy as np
import pandas as pd
import scipy.linalg
from scipy.optimize import linear_sum_assignment

from mblflow._validation import (
    validate_antisymmetric,
    validate_basis_matrix,
    validate_size_cap,
    validate_symmetric,
)
from mblflow.entities import (
    BlockSet,
    Disorder,
    FlowParams,
    Spectrum,
    TransitionSet,
    length_scale,
    sites_to_mask,
)
from mblflow.errors import OrthogonalityError, SpectrumDriftError
from mblflow.geometry import build_blocks_step1, update_blocks
from mblflow.model import build_hamiltonian
from mblflow.oracle import eigvalsh_sorted, fix_signs

logger = logging.getLogger(__name__)

ORTHOGONALITY_TOL = 1e-8

TRACE_COLUMNS = (
    "k",
    "L_k",
    "band_lo",
    "band_hi",
    "n_perturbative",
    "n_resonant",
    "offdiag_norm",
    "spectrum_drift",
    "n_small_blocks",
    "n_large_sites",
)


def _offdiag_norm(matrix: np.ndarray) -> float:
    return float(np.linalg.norm(matrix - np.diag(np.diag(matrix))))


def _symmetrized(matrix: np.ndarray) -> np.ndarray:
    return 0.5 * (matrix + matrix.T)


class FlowState:
    """
    Effective Hamiltonian, cumulative rotation and block taxonomy of a flow run.

    The state is owned by a single caller and advanced in place by ``run_flow``.
    Every rotation is applied as H -> O^T H O and accumulated as R -> R O, so that
    the columns of R are the current approximate eigenvectors in the sigma basis.

    Typical usage:
        state = run_flow(disorder, FlowParams(gamma=0.02))
        state.trace_frame()
        spectrum = state.to_spectrum()
    """

    def __init__(self, hamiltonian: np.ndarray, params: FlowParams) -> None:
        """
        Initialize the flow at step 0.

        Args:
            hamiltonian: Real symmetric sigma-basis Hamiltonian of dimension 2^n.
            params: Flow parameters; ``check_spectrum`` controls whether the
                reference spectrum is computed for drift checks.
        """
        n = validate_basis_matrix(hamiltonian, context="hamiltonian")
        validate_symmetric(hamiltonian, context="hamiltonian")
        validate_size_cap(n, params.max_sites, context="hamiltonian")

        self._params = params
        self._n = n
        self._step = 0
        self._h_eff = np.array(hamiltonian, dtype=float, copy=True)
        self._r_cum = np.eye(1 << n)
        self._blocks = BlockSet.empty(n)
        self._block_history: list[BlockSet] = []
        self._trace: list[dict[str, float | int]] = []
        self._events: list[dict[str, object]] = []
        self._converged = False
        self._large_released = False

        self._norm_f = float(np.linalg.norm(hamiltonian))
        self._reference: np.ndarray | None = None
        self._norm_2 = 0.0
        if params.check_spectrum:
            self._reference = eigvalsh_sorted(hamiltonian)
            self._norm_2 = float(np.max(np.abs(self._reference)))
        self._step_drift = 0.0
        self._initial_offdiag = self.offdiag_norm

    def _record_event(self, event_type: str, step: int, **payload: object) -> None:
        """Append a structured event for machine-friendly downstream processing."""
        event: dict[str, object] = {"type": event_type, "step": step}
        event.update(payload)
        self._events.append(event)

    @property
    def params(self) -> FlowParams:
        return self._params

    @property
    def n(self) -> int:
        return self._n

    @property
    def step(self) -> int:
        return self._step

    @property
    def h_eff(self) -> np.ndarray:
        """Read-only view of the current effective Hamiltonian."""
        view = self._h_eff.view()
        view.flags.writeable = False
        return view

    @property
    def r_cum(self) -> np.ndarray:
        """Read-only view of the cumulative rotation."""
        view = self._r_cum.view()
        view.flags.writeable = False
        return view

    @property
    def blocks(self) -> BlockSet:
        return self._blocks

    @property
    def block_history(self) -> tuple[BlockSet, ...]:
        """Block taxonomy after each step, starting with step 1."""
        return tuple(self._block_history)

    @property
    def trace(self) -> list[dict[str, float | int]]:
        return [row.copy() for row in self._trace]

    @property
    def events(self) -> list[dict[str, object]]:
        return [event.copy() for event in self._events]

    @property
    def converged(self) -> bool:
        return self._converged

    @property
    def large_released(self) -> bool:
        """
        True once L_k covers the chain; from then on the collared large region
        is rotated like a block and its entries are no longer deferred.
        """
        return self._large_released

    @property
    def hamiltonian_norm(self) -> float:
        """Frobenius norm of the original Hamiltonian."""
        return self._norm_f

    @property
    def offdiag_norm(self) -> float:
        return _offdiag_norm(self._h_eff)

    @property
    def noise_floor(self) -> float:
        """Entries below this size are never selected for elimination."""
        return self._params.offdiag_tol * self._norm_f / self._h_eff.shape[0]

    @property
    def orthogonality_error(self) -> float:
        dim = self._r_cum.shape[0]
        return float(np.max(np.abs(self._r_cum.T @ self._r_cum - np.eye(dim))))

    def spectrum_drift(self) -> float:
        """Largest shift of the sorted spectrum relative to ||H||_2."""
        if self._reference is None:
            return float("nan")
        current = eigvalsh_sorted(self._h_eff)
        scale = max(self._norm_2, np.finfo(float).tiny)
        return float(np.max(np.abs(current - self._reference)) / scale)

    def _apply_rotation(self, rotation: np.ndarray, stage: str) -> None:
        self._h_eff = _symmetrized(rotation.T @ self._h_eff @ rotation)
        self._r_cum = self._r_cum @ rotation
        drift = self.spectrum_drift()
        if np.isfinite(drift):
            self._step_drift = max(self._step_drift, drift)
            if drift > self._params.drift_tol:
                self._record_event(
                    "spectrum_drift", self._step, stage=stage, drift=drift
                )
                raise SpectrumDriftError(
                    f"spectrum drifted by {drift:.3e} (relative) after {stage} "
                    f"in step {self._step}"
                )

    def _is_converged(self) -> bool:
        return self.offdiag_norm <= self._params.offdiag_tol * self._norm_f

    def _finish_step(
        self,
        k: int,
        band: tuple[float, float],
        n_perturbative: int,
        n_resonant: int,
        blocks: BlockSet,
    ) -> None:
        offdiag = self.offdiag_norm
        previous = self._trace[-1]["offdiag_norm"] if self._trace else None
        self._blocks = blocks
        self._block_history.append(blocks)
        self._trace.append(
            {
                "k": k,
                "L_k": length_scale(k),
                "band_lo": band[0],
                "band_hi": band[1],
                "n_perturbative": n_perturbative,
                "n_resonant": n_resonant,
                "offdiag_norm": offdiag,
                "spectrum_drift": self._step_drift,
                "n_small_blocks": len(blocks.small_blocks),
                "n_large_sites": len(blocks.large_region),
            }
        )
        orthogonality = self.orthogonality_error
        if orthogonality > ORTHOGONALITY_TOL:
            raise OrthogonalityError(
                f"cumulative rotation lost orthogonality ({orthogonality:.3e}) "
                f"in step {k}"
            )
        self._record_event(
            "step_completed",
            k,
            offdiag_norm=offdiag,
            orthogonality=orthogonality,
            n_perturbative=n_perturbative,
            n_resonant=n_resonant,
        )
        if previous is not None and offdiag > previous:
            self._record_event(
                "offdiag_increase", k, previous=previous, current=offdiag
            )
            logger.debug("off-diagonal norm increased in step %d", k)
        self._step_drift = 0.0

    def trace_frame(self) -> pd.DataFrame:
        """One row per completed step, k = 0 being the initial Hamiltonian."""
        initial = {
            "k": 0,
            "L_k": length_scale(0),
            "band_lo": float("nan"),
            "band_hi": float("nan"),
            "n_perturbative": 0,
            "n_resonant": 0,
            "offdiag_norm": self._initial_offdiag,
            "spectrum_drift": 0.0,
            "n_small_blocks": 0,
            "n_large_sites": 0,
        }
        return pd.DataFrame([initial, *self._trace], columns=list(TRACE_COLUMNS))

    def to_spectrum(self) -> Spectrum:
        """
        Diagonal of H_eff sorted ascending, with the matching columns of R_cum.

        The result is exact only once the flow has converged.
        """
        energies = np.diag(self._h_eff)
        order = np.argsort(energies, kind="stable")
        return Spectrum(
            energies=energies[order], vectors=fix_signs(self._r_cum[:, order])
        )

    def plot_trace(self, **kwargs: object) -> None:
        """Plot the off-diagonal norm per step on a logarithmic scale."""
        frame = self.trace_frame()
        frame.loc[frame["offdiag_norm"] > 0.0].plot(
            x="k",
            y="offdiag_norm",
            logy=True,
            marker="o",
            title="Off-diagonal norm per flow step",
            xlabel="step k",
            ylabel="||H_eff - diag||_F",
            **kwargs,
        )


def detect_resonant_sites(d: Disorder, eps: float) -> frozenset[int]:
    """
    Sites whose single-flip energy difference falls below ``eps`` for at least one
    choice of neighbouring spins; neighbours outside the chain are frozen at +1.
    """
    if eps < 0.0:
        raise ValueError("eps must be non-negative")
    fields = d.fields
    bonds = d.bonds
    resonant = set()
    for i in range(d.n):
        left = (1.0,) if i == 0 else (-1.0, 1.0)
        right = (1.0,) if i == d.n - 1 else (-1.0, 1.0)
        for s_minus in left:
            for s_plus in right:
                diff = 2.0 * (fields[i] + bonds[i + 1] * s_plus + bonds[i] * s_minus)
                if abs(diff) < eps:
                    resonant.add(i)
    return frozenset(resonant)


def first_step_generator(
    hamiltonian: np.ndarray,
    resonant_sites: Iterable[int],
    d: Disorder,
    eps: float,
) -> np.ndarray:
    """
    Generator A with A[s, s^(i)] = gamma_i / (E_s - E_s^(i)) at every nonresonant
    site i and zero elsewhere.
    """
    n = validate_basis_matrix(hamiltonian, context="hamiltonian")
    if n != d.n:
        raise ValueError(f"hamiltonian has {n} sites but disorder has {d.n}")
    resonant = frozenset(resonant_sites)
    energies = np.diag(hamiltonian)
    index = np.arange(1 << n)
    generator = np.zeros_like(hamiltonian, dtype=float)
    for i in range(n):
        if i in resonant:
            continue
        partner = index ^ (1 << i)
        amplitude = hamiltonian[index, partner]
        denominator = energies - energies[partner]
        active = amplitude != 0.0
        if np.any(active & (np.abs(denominator) < eps * (1.0 - 1e-9))):
            raise ValueError(
                f"site {i} was passed as nonresonant but has an energy "
                f"denominator below eps={eps:g}"
            )
        if np.any(active & (denominator == 0.0)):
            raise ValueError(f"zero energy denominator at nonresonant site {i}")
        safe = np.where(active, denominator, 1.0)
        generator[index, partner] = np.where(active, amplitude / safe, 0.0)
    return generator


def rotation_from_generator(generator: np.ndarray) -> np.ndarray:
    """Orthogonal rotation exp(-A) of an antisymmetric generator."""
    validate_antisymmetric(generator)
    rotation = scipy.linalg.expm(-generator)
    dim = rotation.shape[0]
    error = float(np.max(np.abs(rotation.T @ rotation - np.eye(dim))))
    if error > ORTHOGONALITY_TOL:
        raise OrthogonalityError(
            f"exp(-A) lost orthogonality: max |O^T O - I| = {error:.3e}"
        )
    return rotation


def conjugate(hamiltonian: np.ndarray, generator: np.ndarray) -> np.ndarray:
    """Return O^T H O with O = exp(-A), i.e. e^A H e^-A, symmetrized."""
    validate_symmetric(hamiltonian, context="hamiltonian")
    if generator.shape != hamiltonian.shape:
        raise ValueError("generator and hamiltonian must have the same shape")
    if not np.any(generator):
        return np.array(hamiltonian, dtype=float, copy=True)
    rotation = rotation_from_generator(generator)
    return _symmetrized(rotation.T @ hamiltonian @ rotation)


def band_of(amplitude: float | np.ndarray, gamma: float) -> float | np.ndarray:
    """Magnitude order m = log|amplitude| / log(gamma); +inf for zero amplitude."""
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must be in (0, 1)")
    with np.errstate(divide="ignore"):
        band = np.log(np.abs(amplitude)) / np.log(gamma)
    if np.ndim(band) == 0:
        return float(band)
    return band


def _hull_masks(flips: np.ndarray, n: int) -> np.ndarray:
    low = flips & -flips
    high = np.zeros_like(flips)
    for i in range(n):
        high = np.where(flips >> i > 0, np.int64(1) << i, high)
    return (high << 1) - low


def select_step_transitions(state: FlowState, k: int) -> TransitionSet:
    """
    Collect the off-diagonal entries of H_eff to eliminate in step k >= 2.

    Entries with band m < L_k are taken; those below L_{k-1} are leftovers that
    block rotations spread after they were first eliminated. Entries whose
    flipped-site interval meets the collared large region are deferred until the
    large region is released, and entries flipping only sites inside one rotated
    site set are left to the block rotation. Each entry is resonant when its
    denominator is below ``denom_floor`` or eps^m, or when
    |amplitude / denominator| > (gamma / eps)^m.
    """
    if k < 2:
        raise ValueError("select_step_transitions handles steps k >= 2")
    p = state.params
    h_eff = state.h_eff
    n = state.n
    threshold = max(p.gamma ** length_scale(k), state.noise_floor)
    rows, cols = np.nonzero(np.triu(np.abs(h_eff) > threshold, 1))
    rows = rows.astype(np.int64)
    cols = cols.astype(np.int64)
    if rows.size == 0:
        return TransitionSet.empty(n)

    flips = rows ^ cols
    if state.large_released:
        keep = np.ones(flips.shape, dtype=bool)
    else:
        keep = (_hull_masks(flips, n) & state.blocks.large_mask) == 0
    for sites in rotation_site_sets(state.blocks, state.large_released):
        keep &= (flips & ~np.int64(sites_to_mask(sites))) != 0
    rows, cols = rows[keep], cols[keep]

    amplitude = h_eff[rows, cols]
    energies = np.diag(h_eff)
    denominator = energies[rows] - energies[cols]
    band = np.asarray(band_of(amplitude, p.gamma), dtype=float)
    with np.errstate(over="ignore", under="ignore"):
        resonant = (
            (np.abs(denominator) < p.denom_floor)
            | (np.abs(denominator) < p.epsilon**band)
            | (
                np.abs(amplitude)
                > (p.gamma / p.epsilon) ** band * np.abs(denominator)
            )
        )
    return TransitionSet(
        source=rows,
        target=cols,
        amplitude=amplitude,
        denominator=denominator,
        band=band,
        resonant=resonant,
        n=n,
    )


def step_generator(state: FlowState, ts: TransitionSet) -> np.ndarray:
    """Antisymmetric A = amplitude / (E_s - E_t) on the perturbative entries."""
    dim = 1 << state.n
    generator = np.zeros((dim, dim))
    perturbative = ts.perturbative()
    if len(perturbative) == 0:
        return generator
    if np.any(perturbative.denominator == 0.0):
        raise ValueError("perturbative transition with a zero energy denominator")
    values = perturbative.amplitude / perturbative.denominator
    generator[perturbative.source, perturbative.target] = values
    generator[perturbative.target, perturbative.source] = -values
    return generator


def _deposit(values: np.ndarray, sites: Sequence[int]) -> np.ndarray:
    """Scatter the bits of ``values`` onto the given site positions."""
    result = np.zeros_like(values)
    for j, site in enumerate(sites):
        result |= ((values >> j) & 1) << site
    return result


def block_eigenbasis(
    submatrix: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Diagonalize one block sector.

    Eigenpairs are ranked by increasing energy (the metaspin labels). Each rank r
    is placed on the local basis state ``placement[r]`` it overlaps most, with the
    sign chosen so that this component is positive.
    """
    energies, vectors = np.linalg.eigh(submatrix)
    rows, cols = linear_sum_assignment(-np.abs(vectors))
    placement = np.empty_like(cols)
    placement[cols] = rows
    signs = np.sign(vectors[placement, np.arange(vectors.shape[1])])
    signs[signs == 0.0] = 1.0
    return energies, vectors * signs, placement


def _block_rotation(hamiltonian: np.ndarray, sites: Sequence[int], n: int):
    sites = sorted(sites)
    outside = [i for i in range(n) if i not in set(sites)]
    local = _deposit(np.arange(1 << len(sites), dtype=np.int64), sites)
    outer = _deposit(np.arange(1 << len(outside), dtype=np.int64), outside)
    index = outer[:, None] | local[None, :]

    rotation = np.zeros_like(hamiltonian)
    for sector in index:
        submatrix = hamiltonian[np.ix_(sector, sector)]
        _, vectors, placement = block_eigenbasis(submatrix)
        rotation[np.ix_(sector, sector[placement])] = vectors
    return rotation


def small_block_rotation(
    h_eff: np.ndarray, small_blocks: Iterable[Iterable[int]]
) -> tuple[np.ndarray, np.ndarray]:
    """
    Diagonalize the block-internal part of H_eff for each disjoint site set.

    Within every configuration of the sites outside a block, the entries that
    change only block spins (diagonal included) are diagonalized exactly. Blocks
    are rotated one after another; the product of the per-block rotations and the
    rotated Hamiltonian are returned.
    """
    n = validate_basis_matrix(h_eff, context="h_eff")
    validate_symmetric(h_eff, context="h_eff")
    site_sets = [frozenset(int(s) for s in block) for block in small_blocks]
    seen: set[int] = set()
    for sites in site_sets:
        if not sites:
            raise ValueError("small blocks must not be empty")
        if any(not 0 <= s < n for s in sites):
            raise IndexError(f"block sites {sorted(sites)} are outside the chain")
        if seen & sites:
            raise ValueError(
                f"small blocks overlap on sites {sorted(seen & sites)}"
            )
        seen |= sites

    total = np.eye(1 << n)
    hamiltonian = np.array(h_eff, dtype=float, copy=True)
    for sites in site_sets:
        rotation = _block_rotation(hamiltonian, sorted(sites), n)
        hamiltonian = _symmetrized(rotation.T @ hamiltonian @ rotation)
        total = total @ rotation
    return total, hamiltonian


def _single_flip_counts(
    hamiltonian: np.ndarray, resonant: frozenset[int], n: int
) -> tuple[int, int]:
    index = np.arange(1 << n)
    perturbative = resonant_count = 0
    for i in range(n):
        partner = index ^ (1 << i)
        upper = index < partner
        count = int(np.count_nonzero(hamiltonian[index[upper], partner[upper]]))
        if i in resonant:
            resonant_count += count
        else:
            perturbative += count
    return perturbative, resonant_count


def rotation_site_sets(
    blocks: BlockSet, include_large: bool = False
) -> list[frozenset[int]]:
    """
    Disjoint site sets rotated after a step: the collared small blocks, plus the
    runs of the collared large region when ``include_large`` is set. Sets that
    share a site are merged.
    """
    candidates = [frozenset(b.collar) for b in blocks.small_blocks]
    if include_large:
        candidates.extend(blocks.large_runs())
    merged: list[frozenset[int]] = []
    for sites in candidates:
        overlapping = [m for m in merged if m & sites]
        for m in overlapping:
            merged.remove(m)
            sites = sites | m
        merged.append(sites)
    return sorted(merged, key=min)


def _rotate_blocks(state: FlowState, blocks: BlockSet) -> None:
    site_sets = rotation_site_sets(blocks, include_large=state.large_released)
    if not site_sets:
        return
    rotation, _ = small_block_rotation(state._h_eff, site_sets)
    state._apply_rotation(rotation, "block rotation")
    state._record_event(
        "block_rotation",
        state._step,
        blocks=[list(b.sites) for b in blocks.small_blocks],
        rotated=[sorted(sites) for sites in site_sets],
    )


def _first_step(state: FlowState, d: Disorder) -> None:
    p = state.params
    state._step = 1
    resonant = detect_resonant_sites(d, p.epsilon)
    n_perturbative, n_resonant = _single_flip_counts(state._h_eff, resonant, d.n)
    generator = first_step_generator(state._h_eff, resonant, d, p.epsilon)
    if np.any(generator):
        state._apply_rotation(rotation_from_generator(generator), "conjugation")
    blocks = build_blocks_step1(resonant, d.n, m0=p.m0)
    _rotate_blocks(state, blocks)
    state._finish_step(1, p.band(1), n_perturbative, n_resonant, blocks)


def _later_step(state: FlowState, k: int) -> None:
    p = state.params
    state._step = k
    transitions = select_step_transitions(state, k)
    generator = step_generator(state, transitions)
    if np.any(generator):
        state._apply_rotation(rotation_from_generator(generator), "conjugation")
    blocks = update_blocks(state.blocks, transitions.supports(), k, p)
    if not state.large_released and length_scale(k) >= state.n:
        # every block now fits under the diameter rule of scale k
        state._large_released = True
        state._record_event(
            "large_region_released", k, sites=sorted(blocks.large_collar)
        )
    _rotate_blocks(state, blocks)
    n_resonant = int(np.count_nonzero(transitions.resonant))
    state._finish_step(
        k, p.band(k), len(transitions) - n_resonant, n_resonant, blocks
    )


def run_flow(d: Disorder, p: FlowParams) -> FlowState:
    """
    Run the multiscale flow until H_eff is diagonal to ``offdiag_tol`` or
    ``max_steps`` steps have been taken.

    Non-convergence is a legitimate outcome at larger gamma and is reported through
    ``FlowState.converged`` and a ``not_converged`` event. A spectrum drift beyond
    ``drift_tol`` raises ``SpectrumDriftError``.
    """
    if d.gamma != p.gamma:
        raise ValueError(
            f"disorder gamma {d.gamma:g} does not match flow gamma {p.gamma:g}"
        )
    state = FlowState(build_hamiltonian(d, max_sites=p.max_sites), p)
    if state._is_converged():
        state._converged = True
        state._record_event("converged", 0, offdiag_norm=state._initial_offdiag)
        return state

    _first_step(state, d)
    k = 1
    while not state._is_converged() and k < p.max_steps:
        k += 1
        _later_step(state, k)

    if state._is_converged():
        state._converged = True
        state._record_event("converged", k, offdiag_norm=state.offdiag_norm)
        logger.debug("flow converged after %d steps", k)
    else:
        state._record_event("not_converged", k, offdiag_norm=state.offdiag_norm)
        logger.info(
            "flow did not converge in %d steps (off-diagonal norm %.3e)",
            k,
            state.offdiag_norm,
        )
    return state
