"""Full-scale Monte Carlo checks, enabled with MBLFLOW_RUN_ACCEPTANCE=1."""

import numpy as np
import pandas as pd
import pytest

from mblflow.ensemble import RunConfig, derive_seed, run_ensemble
from mblflow.entities import FlowParams, LocalOperatorSpec, ModelParams
from mblflow.flow import detect_resonant_sites, run_flow
from mblflow.geometry import (
    build_blocks_step1,
    estimate_connectivity,
    resonant_site_frequency,
    step1_bound,
)
from mblflow.model import build_hamiltonian, sample_disorder
from mblflow.observables import (
    build_operator,
    connected_correlations,
    correlation_profile,
    expectations,
    match_states,
)
from mblflow.oracle import (
    diagonalize,
    estimate_level_statistics,
    radial_derivative_check,
    radial_scaling_check,
)


def _disorders(n: int, gamma: float, count: int, master: int = 0):
    params = ModelParams(n=n, gamma=gamma)
    return [sample_disorder(derive_seed(master, i), params) for i in range(count)]


@pytest.mark.parametrize("gamma", [0.01, 0.05])
def test_every_flow_step_preserves_the_spectrum(acceptance, gamma):
    for d in _disorders(8, gamma, 50):
        state = run_flow(d, FlowParams(gamma=gamma))
        assert state.trace_frame()["spectrum_drift"].max() <= 1e-9
        assert state.orthogonality_error <= 1e-10


@pytest.mark.parametrize("n", [4, 6, 8])
def test_converged_flow_matches_the_oracle(acceptance, n):
    operator = build_operator(LocalOperatorSpec(), (n - 1) // 2, n)
    partner = build_operator(LocalOperatorSpec(), n - 1, n)
    converged = 0
    for d in _disorders(n, 0.02, 100):
        state = run_flow(d, FlowParams(gamma=0.02))
        if not state.converged:
            continue
        converged += 1
        oracle = diagonalize(build_hamiltonian(d))
        flow = state.to_spectrum()
        scale = np.max(np.abs(oracle.energies))
        np.testing.assert_allclose(
            flow.energies, oracle.energies, rtol=0.0, atol=1e-8 * scale
        )

        matching = match_states(flow, oracle)
        keep = ~matching.degenerate
        assert matching.overlap[keep].min() >= 0.999
        flow_vectors = flow.vectors[:, matching.flow_index]
        np.testing.assert_allclose(
            expectations(flow_vectors, operator)[keep],
            expectations(oracle.vectors, operator)[keep],
            atol=1e-6,
        )
        np.testing.assert_allclose(
            connected_correlations(flow_vectors, operator, partner)[keep],
            connected_correlations(oracle.vectors, operator, partner)[keep],
            atol=1e-6,
        )
    assert converged >= 90


def test_localization_decreases_with_gamma(acceptance):
    cfg = RunConfig(
        n=8, gamma=(1e-3, 1e-2, 5e-2), realizations=200, workers=4,
        connectivity_steps=1,
    )
    scores = [g.localization.mean for g in run_ensemble(cfg).gammas]

    assert scores[0] >= 0.95
    assert scores[0] >= scores[1] >= scores[2]


def test_correlations_decay_faster_at_weaker_coupling(acceptance):
    spec = LocalOperatorSpec()
    slopes = {}
    for gamma in (0.02, 0.05):
        spectra = [
            diagonalize(build_hamiltonian(d)) for d in _disorders(10, gamma, 200)
        ]
        profile = correlation_profile(spectra, spec)
        slopes[gamma] = profile.decay_slope(lo=2, hi=6)["slope"]

    assert slopes[0.05] < 0.0
    assert slopes[0.02] < slopes[0.05]


def test_radial_identities(acceptance):
    for d in _disorders(8, 0.05, 100, master=1):
        assert radial_scaling_check(d, 2.0) <= 1e-10
        assert radial_scaling_check(d, 3.0) <= 1e-10
    for d in _disorders(6, 0.05, 20, master=2):
        derivative, expected = radial_derivative_check(d, (1 << d.n) - 1, 0)
        assert derivative == pytest.approx(expected, rel=1e-6)


def test_resonance_frequency_is_linear_in_epsilon(acceptance):
    epsilons = np.array([0.05, 0.1, 0.2])
    n = 12
    draws = _disorders(n, 0.02, 100_000 // n + 1)
    frequencies = []
    for eps in epsilons:
        frequency, lo, hi, samples = resonant_site_frequency(
            (detect_resonant_sites(d, eps) for d in draws), n
        )
        assert samples >= 100_000
        assert frequency <= 2.0 * eps * (1.0 + 3.0 * (hi - lo))
        frequencies.append(frequency)

    frequencies = np.array(frequencies)
    slope = (epsilons @ frequencies) / (epsilons @ epsilons)
    residual = frequencies - slope * epsilons
    assert 1.0 - (residual @ residual) / (frequencies @ frequencies) >= 0.99


def test_step1_connectivity_respects_the_bound(acceptance):
    eps = 0.2
    n = 12
    block_sets = [
        build_blocks_step1(detect_resonant_sites(d, eps), n)
        for d in _disorders(n, 0.02, 10_000)
    ]
    table = estimate_connectivity(block_sets, "P", 1).by_distance()
    table = table.loc[table["distance"] <= 3]

    assert table["prob"].is_monotonic_decreasing
    width = table["ci_hi"] - table["ci_lo"]
    bound = table["distance"].map(lambda r: step1_bound(eps, r))
    assert (table["prob"] <= bound + 3.0 * width).all()


def test_level_statistics_instrument(acceptance):
    reports = {
        n: estimate_level_statistics(
            _disorders(n, 0.05, 2000), np.logspace(-6, -1, 11), seed=n
        )
        for n in (6, 8)
    }

    for report in reports.values():
        assert np.all(np.diff(report.empirical_prob) >= 0.0)
        assert not report.flagged
        assert report.fitted_nu > 0.0
        assert report.nu_ci[0] > 0.0
    small, large = reports[6], reports[8]
    assert large.nu_ci[0] <= small.fitted_nu <= large.nu_ci[1]
    assert small.nu_ci[0] <= large.fitted_nu <= small.nu_ci[1]


def test_ensemble_is_independent_of_worker_count(acceptance):
    cfg = RunConfig(n=6, gamma=(0.02, 0.05), realizations=40, seed=3)
    reports = [
        run_ensemble(cfg.with_overrides(workers=workers)) for workers in (1, 8, 1)
    ]

    for other in reports[1:]:
        pd.testing.assert_frame_equal(
            reports[0].summary_frame(), other.summary_frame()
        )
        for first, second in zip(reports[0].gammas, other.gammas):
            pd.testing.assert_frame_equal(first.records, second.records)
