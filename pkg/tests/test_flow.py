import itertools

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import pytest

from mblflow.entities import (
    BlockSet,
    Disorder,
    FlowParams,
    SpinConfig,
    TransitionSet,
)
from mblflow.errors import SpectrumDriftError
from mblflow.flow import (
    TRACE_COLUMNS,
    FlowState,
    band_of,
    block_eigenbasis,
    conjugate,
    detect_resonant_sites,
    first_step_generator,
    rotation_from_generator,
    rotation_site_sets,
    run_flow,
    select_step_transitions,
    small_block_rotation,
    step_generator,
)
from mblflow.geometry import make_block
from mblflow.model import build_hamiltonian, flip_energy_diff
from mblflow.oracle import diagonalize, eigvalsh_sorted


def _single_site_disorder(h_mid: float, j_left: float, j_right: float) -> Disorder:
    return Disorder(
        h=(0.9, h_mid, 0.9),
        Gamma=(0.5, 0.5, 0.5),
        J=(0.0, j_left, j_right, 0.0),
        gamma=0.05,
    )


def _random_antisymmetric(dim: int, scale: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    raw = rng.normal(scale=scale, size=(dim, dim))
    return raw - raw.T


@pytest.mark.parametrize(
    "h_mid, j_left, j_right, expected",
    [
        (0.5, 0.01, 0.02, frozenset()),
        (0.03, 0.02, 0.01, frozenset({1})),
    ],
)
def test_detect_resonant_sites_examples(h_mid, j_left, j_right, expected):
    d = _single_site_disorder(h_mid, j_left, j_right)
    assert detect_resonant_sites(d, 0.1) == expected


def test_detect_resonant_sites_matches_flip_energies(make_disorder):
    d = make_disorder(5, 0.02, seed=3)
    eps = 0.4
    brute = {
        i
        for i in range(d.n)
        for bits in itertools.product((1, -1), repeat=d.n)
        if abs(flip_energy_diff(SpinConfig.from_sigma(bits), i, d)) < eps
    }
    assert detect_resonant_sites(d, eps) == frozenset(brute)


def test_detect_resonant_sites_rejects_negative_eps(three_site_disorder):
    with pytest.raises(ValueError, match="non-negative"):
        detect_resonant_sites(three_site_disorder, -0.1)


def test_first_step_generator_is_antisymmetric_and_zero_at_resonant_sites(
    three_site_disorder,
):
    hamiltonian = build_hamiltonian(three_site_disorder)
    generator = first_step_generator(hamiltonian, {1}, three_site_disorder, 0.1)

    np.testing.assert_allclose(generator, -generator.T, atol=1e-15)
    index = np.arange(8)
    assert not np.any(generator[index, index ^ 0b010])
    assert np.all(generator[index, index ^ 0b001] != 0.0)


def test_first_step_generator_all_resonant_is_zero(three_site_disorder):
    hamiltonian = build_hamiltonian(three_site_disorder)
    generator = first_step_generator(hamiltonian, {0, 1, 2}, three_site_disorder, 0.1)
    assert not np.any(generator)


def test_first_step_generator_rejects_small_denominators(three_site_disorder):
    hamiltonian = build_hamiltonian(three_site_disorder)
    with pytest.raises(ValueError, match="passed as nonresonant"):
        first_step_generator(hamiltonian, set(), three_site_disorder, 0.5)


def test_first_step_conjugation_cancels_single_flips(three_site_disorder):
    d = three_site_disorder.with_gamma(1e-3)
    hamiltonian = build_hamiltonian(d)
    assert detect_resonant_sites(d, 0.1) == frozenset()

    generator = first_step_generator(hamiltonian, set(), d, 0.1)
    rotated = conjugate(hamiltonian, generator)

    index = np.arange(8)
    for i in range(3):
        before = np.abs(hamiltonian[index, index ^ (1 << i)])
        after = np.abs(rotated[index, index ^ (1 << i)])
        assert before.max() > 1e-4
        assert after.max() < 1e-6
    np.testing.assert_allclose(
        eigvalsh_sorted(rotated), eigvalsh_sorted(hamiltonian), atol=1e-12
    )


def test_rotation_from_generator_is_orthogonal():
    rotation = rotation_from_generator(_random_antisymmetric(8, 0.3, seed=1))
    np.testing.assert_allclose(rotation.T @ rotation, np.eye(8), atol=1e-12)


def test_rotation_from_generator_rejects_symmetric_input():
    with pytest.raises(ValueError, match="antisymmetric"):
        rotation_from_generator(np.ones((4, 4)))


def test_conjugate_with_zero_generator_returns_copy(three_site_disorder):
    hamiltonian = build_hamiltonian(three_site_disorder)
    result = conjugate(hamiltonian, np.zeros_like(hamiltonian))

    np.testing.assert_array_equal(result, hamiltonian)
    assert result is not hamiltonian


@pytest.mark.parametrize("seed", range(5))
def test_conjugate_preserves_spectrum(make_disorder, seed):
    hamiltonian = build_hamiltonian(make_disorder(3, 0.1, seed=seed))
    rotated = conjugate(hamiltonian, _random_antisymmetric(8, 0.5, seed=seed))
    np.testing.assert_allclose(
        eigvalsh_sorted(rotated), eigvalsh_sorted(hamiltonian), atol=1e-10
    )


def test_conjugate_rejects_mismatched_shapes(three_site_disorder):
    hamiltonian = build_hamiltonian(three_site_disorder)
    with pytest.raises(ValueError, match="same shape"):
        conjugate(hamiltonian, np.zeros((4, 4)))


def test_band_of():
    assert band_of(1e-4, 0.01) == pytest.approx(2.0)
    assert band_of(0.05**3, 0.05) == pytest.approx(3.0)
    assert band_of(0.0, 0.5) == float("inf")
    np.testing.assert_allclose(band_of(np.array([0.1, 0.01]), 0.1), [1.0, 2.0])


@pytest.mark.parametrize("gamma", [0.0, 1.0, -0.1])
def test_band_of_rejects_gamma_outside_unit_interval(gamma):
    with pytest.raises(ValueError, match="gamma must be in"):
        band_of(0.1, gamma)


def test_select_step_transitions_requires_later_steps(three_site_disorder):
    state = FlowState(build_hamiltonian(three_site_disorder), FlowParams(gamma=0.05))
    with pytest.raises(ValueError, match="k >= 2"):
        select_step_transitions(state, 1)


@pytest.mark.parametrize(
    "hamiltonian, resonant",
    [
        (np.array([[1.0, 1e-3], [1e-3, -1.0]]), False),
        (np.array([[0.3, 1e-2], [1e-2, 0.3]]), True),
    ],
)
def test_select_step_transitions_classifies_single_entry(hamiltonian, resonant):
    state = FlowState(hamiltonian, FlowParams(gamma=0.05))
    transitions = select_step_transitions(state, 2)

    assert len(transitions) == 1
    assert transitions.source.tolist() == [0]
    assert transitions.target.tolist() == [1]
    assert transitions.resonant.tolist() == [resonant]


def test_select_step_transitions_skips_entries_inside_small_blocks(
    three_site_disorder,
):
    state = FlowState(build_hamiltonian(three_site_disorder), FlowParams(gamma=0.05))
    block = make_block([1], 1, 3)
    state._blocks = BlockSet(n=3, scale=1, small_blocks=(block,))

    assert len(select_step_transitions(state, 2)) == 0


def test_select_step_transitions_defers_entries_meeting_the_large_region():
    disorder = Disorder(
        h=(0.9, 0.7, 0.5, -0.4, -0.6, -0.8),
        Gamma=(1.0,) * 6,
        J=(0.0,) * 7,
        gamma=0.3,
    )
    hamiltonian = build_hamiltonian(disorder)
    # flips sites 1 and 4, so its interval straddles the collar {2, 3}
    straddle = 0b010010
    hamiltonian[0, straddle] = hamiltonian[straddle, 0] = 0.2
    state = FlowState(hamiltonian, FlowParams(gamma=0.3))
    state._blocks = BlockSet(
        n=6,
        scale=1,
        large_region=frozenset({2}),
        large_collar=frozenset({2, 3}),
    )

    deferred = select_step_transitions(state, 2)
    assert set(deferred.flip_masks.tolist()) == {0b1, 0b10, 0b10000, 0b100000}

    state._large_released = True
    released = select_step_transitions(state, 2)
    # single flips inside the released collar are left to its block rotation
    assert set(released.flip_masks.tolist()) == {
        0b1,
        0b10,
        0b10000,
        0b100000,
        straddle,
    }


def test_select_step_transitions_flags_two_flip_near_degeneracy():
    hamiltonian = np.diag([0.6, 0.1, -0.2, 0.6 + 1e-6])
    for row, col in [(0, 1), (0, 2), (1, 3), (2, 3), (0, 3)]:
        hamiltonian[row, col] = hamiltonian[col, row] = 1e-3
    state = FlowState(hamiltonian, FlowParams(gamma=0.05, epsilon=0.2))

    transitions = select_step_transitions(state, 2)

    assert len(transitions) == 5
    resonant = transitions.resonant_subset()
    assert list(zip(resonant.source.tolist(), resonant.target.tolist())) == [(0, 3)]
    assert resonant.flip_masks.tolist() == [0b11]


def test_step_generator_uses_only_perturbative_entries(three_site_disorder):
    state = FlowState(build_hamiltonian(three_site_disorder), FlowParams(gamma=0.05))
    transitions = TransitionSet(
        source=np.array([0, 1]),
        target=np.array([3, 2]),
        amplitude=np.array([0.01, 0.02]),
        denominator=np.array([0.5, 0.001]),
        band=np.array([1.5, 1.3]),
        resonant=np.array([False, True]),
        n=3,
    )
    generator = step_generator(state, transitions)

    assert np.count_nonzero(generator) == 2
    assert generator[0, 3] == pytest.approx(0.02)
    assert generator[3, 0] == pytest.approx(-0.02)


def test_step_generator_empty_set_is_zero(three_site_disorder):
    state = FlowState(build_hamiltonian(three_site_disorder), FlowParams(gamma=0.05))
    assert not np.any(step_generator(state, TransitionSet.empty(3)))


def test_block_eigenbasis_places_states_by_overlap():
    submatrix = np.array([[1.0, 0.1], [0.1, 0.0]])
    energies, vectors, placement = block_eigenbasis(submatrix)

    assert energies[0] < energies[1]
    assert placement.tolist() == [1, 0]
    assert vectors[1, 0] > 0.0
    assert vectors[0, 1] > 0.0


def test_small_block_rotation_over_whole_chain_diagonalizes(make_disorder):
    hamiltonian = build_hamiltonian(make_disorder(4, 0.1, seed=2))
    rotation, rotated = small_block_rotation(hamiltonian, [range(4)])

    off_diagonal = rotated - np.diag(np.diag(rotated))
    assert np.max(np.abs(off_diagonal)) < 1e-12 * np.linalg.norm(hamiltonian)
    np.testing.assert_allclose(
        np.sort(np.diag(rotated)), eigvalsh_sorted(hamiltonian), atol=1e-12
    )
    np.testing.assert_allclose(rotation.T @ rotation, np.eye(16), atol=1e-12)


def test_small_block_rotation_without_blocks_is_identity(three_site_disorder):
    hamiltonian = build_hamiltonian(three_site_disorder)
    rotation, rotated = small_block_rotation(hamiltonian, [])

    np.testing.assert_array_equal(rotation, np.eye(8))
    np.testing.assert_array_equal(rotated, hamiltonian)


def test_small_block_rotation_zeroes_block_internal_entries(three_site_disorder):
    hamiltonian = build_hamiltonian(three_site_disorder)
    _, rotated = small_block_rotation(hamiltonian, [{1}])

    index = np.arange(8)
    assert np.max(np.abs(rotated[index, index ^ 0b010])) < 1e-14


@pytest.mark.parametrize(
    "blocks, error, error_match",
    [
        ([{0, 1}, {1, 2}], ValueError, "overlap"),
        ([set()], ValueError, "must not be empty"),
        ([{3}], IndexError, "outside the chain"),
    ],
)
def test_small_block_rotation_rejects_bad_blocks(
    three_site_disorder, blocks, error, error_match
):
    hamiltonian = build_hamiltonian(three_site_disorder)
    with pytest.raises(error, match=error_match):
        small_block_rotation(hamiltonian, blocks)


def test_rotation_site_sets_merge_large_runs_with_touching_collars():
    block = make_block([1], 1, 10)
    blocks = BlockSet(
        n=10,
        scale=2,
        small_blocks=(block,),
        large_region=frozenset({3, 7}),
        large_collar=frozenset({2, 3, 4, 6, 7, 8}),
    )

    assert rotation_site_sets(blocks) == [frozenset({0, 1, 2})]
    assert rotation_site_sets(blocks, include_large=True) == [
        frozenset({0, 1, 2, 3, 4}),
        frozenset({6, 7, 8}),
    ]


def test_run_flow_at_zero_gamma_stops_at_step_zero(make_disorder):
    d = make_disorder(4, 0.0)
    state = run_flow(d, FlowParams(gamma=0.0))

    assert state.converged
    assert state.step == 0
    np.testing.assert_array_equal(state.r_cum, np.eye(16))
    assert len(state.trace_frame()) == 1
    assert [e["type"] for e in state.events] == ["converged"]


def test_run_flow_rejects_mismatched_gamma(make_disorder):
    with pytest.raises(ValueError, match="does not match"):
        run_flow(make_disorder(3, 0.02), FlowParams(gamma=0.03))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_run_flow_reproduces_oracle_spectrum(make_disorder, seed):
    d = make_disorder(5, 0.02, seed=seed)
    state = run_flow(d, FlowParams(gamma=0.02))
    oracle = diagonalize(build_hamiltonian(d))
    spectrum = state.to_spectrum()

    assert state.converged
    np.testing.assert_allclose(spectrum.energies, oracle.energies, atol=1e-8)
    overlaps = np.abs(spectrum.vectors.T @ oracle.vectors)
    assert overlaps.max(axis=1).min() >= 0.999
    np.testing.assert_allclose(state.r_cum.T @ state.r_cum, np.eye(32), atol=1e-10)


def test_run_flow_releases_large_region_once_scale_covers_chain(make_disorder):
    state = run_flow(make_disorder(5, 0.02), FlowParams(gamma=0.02))

    released = [e for e in state.events if e["type"] == "large_region_released"]
    assert len(released) == 1
    assert released[0]["step"] == 3
    assert state.large_released


def test_run_flow_trace_frame(make_disorder):
    state = run_flow(make_disorder(4, 0.02, seed=5), FlowParams(gamma=0.02))
    frame = state.trace_frame()

    assert list(frame.columns) == list(TRACE_COLUMNS)
    assert frame["k"].tolist() == list(range(len(frame)))
    assert frame["k"].iloc[-1] == state.step
    assert len(state.block_history) == state.step
    step_types = [e["type"] for e in state.events if e["type"] == "step_completed"]
    assert len(step_types) == state.step


def test_run_flow_is_deterministic(make_disorder):
    d = make_disorder(4, 0.05, seed=9)
    first = run_flow(d, FlowParams(gamma=0.05))
    second = run_flow(d, FlowParams(gamma=0.05))

    pd.testing.assert_frame_equal(first.trace_frame(), second.trace_frame())
    np.testing.assert_array_equal(first.r_cum, second.r_cum)


def test_run_flow_rotation_vanishes_with_gamma(make_disorder):
    base = make_disorder(4, 0.01, seed=4)
    distances = []
    for gamma in (1e-2, 1e-3, 1e-4):
        state = run_flow(base.with_gamma(gamma), FlowParams(gamma=gamma))
        distances.append(np.linalg.norm(state.r_cum - np.eye(16)))

    assert distances[0] > distances[1] > distances[2]


def test_run_flow_stops_at_max_steps(make_disorder):
    state = run_flow(make_disorder(4, 0.02), FlowParams(gamma=0.02, max_steps=1))

    assert not state.converged
    assert state.step == 1
    assert state.events[-1]["type"] == "not_converged"


def test_spectrum_drift_raises(mocker, three_site_disorder):
    mocker.patch.object(FlowState, "spectrum_drift", return_value=1.0)
    with pytest.raises(SpectrumDriftError, match="drifted"):
        run_flow(three_site_disorder, FlowParams(gamma=0.05))


def test_run_flow_plot_trace(make_disorder):
    state = run_flow(make_disorder(4, 0.02, seed=5), FlowParams(gamma=0.02))

    state.plot_trace()

    axes = plt.gca()
    assert axes.get_title() == "Off-diagonal norm per flow step"
    assert axes.get_yscale() == "log"
    assert state.hamiltonian_norm == pytest.approx(
        np.linalg.norm(state.h_eff), rel=1e-12
    )
    plt.close("all")
