"""Disorder-ensemble driver.

Every realization is a pure function of ``(RunConfig, gamma, index)``: its seed
is derived from the master seed and the index, and the aggregation only ever
consumes results in index order. Worker count and completion order therefore
never change the reported numbers.
"""

from __future__ import annotations

import logging
import math
import time
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import yaml
from joblib import Parallel, delayed
from threadpoolctl import threadpool_limits

from mblflow._validation import (
    DEFAULT_MAX_SITES,
    validate_probability_grid,
    validate_size_cap,
)
from mblflow.entities import (
    DISTRIBUTIONS,
    BlockSet,
    Disorder,
    FlowParams,
    LocalOperatorSpec,
    ModelParams,
    Weighting,
)
from mblflow.errors import EnsembleFailureError
from mblflow.flow import FlowState, detect_resonant_sites, run_flow
from mblflow.geometry import (
    CONNECTIVITY_KINDS,
    ConnectivityEstimate,
    estimate_connectivity,
    resonant_site_frequency,
)
from mblflow.model import build_hamiltonian, sample_disorder
from mblflow.observables import (
    CorrelationProfile,
    ScoreEstimate,
    correlation_samples,
    default_site,
    localization_profile,
)
from mblflow.oracle import (
    LevelStatsReport,
    diagonalize,
    eigvalsh_sorted,
    level_statistics_from_gaps,
    mean_gap_ratio,
    min_level_spacing,
    small_gap_probability,
)

logger = logging.getLogger(__name__)

MODES = ("full", "level-stats")
BASES = ("flow", "oracle")
FORMATS = ("csv", "json")
FAILURE_FRACTION = 0.01
DEFAULT_DELTA_GRID = tuple(float(x) for x in np.logspace(-6, -1, 11))
RECORD_COLUMNS = (
    "gamma",
    "index",
    "seed",
    "converged",
    "steps",
    "offdiag_norm",
    "localization",
    "n_resonant_sites",
    "n_small_blocks",
    "n_large_sites",
    "min_level_spacing",
    "gap_ratio",
)


def derive_seed(master_seed: int, index: int) -> int:
    """
    Seed of realization ``index``: the first 64-bit word of
    ``SeedSequence(master_seed, spawn_key=(index,))`` shifted to 63 bits.
    """
    if master_seed < 0 or index < 0:
        raise ValueError("master_seed and index must be non-negative")
    words = np.random.SeedSequence(master_seed, spawn_key=(index,)).generate_state(
        1, np.uint64
    )
    return int(words[0] >> np.uint64(1))


def _as_gammas(value: float | Iterable[float]) -> tuple[float, ...]:
    if isinstance(value, (int, float)):
        return (float(value),)
    return tuple(float(g) for g in value)


def _as_observable(value: LocalOperatorSpec | Iterable[Any]) -> LocalOperatorSpec:
    if isinstance(value, LocalOperatorSpec):
        return value
    if isinstance(value, dict):
        return LocalOperatorSpec.from_json(value)
    return LocalOperatorSpec(factors=tuple((int(o), str(a)) for o, a in value))


@dataclass(frozen=True, slots=True)
class RunConfig:
    """
    Complete description of an ensemble run.

    Args:
        n (int, optional): Chain length, defaults to 8
        gamma (tuple[float, ...], optional): Transverse coupling scales, one
            ensemble per value, defaults to (0.02,)
        epsilon (float | None, optional): Resonance cutoff override
        realizations (int, optional): Realizations per gamma, defaults to 100
        seed (int, optional): Master seed, defaults to 0
        beta (float | None, optional): Gibbs inverse temperature; uniform state
            weighting when None
        delta_grid (tuple[float, ...], optional): Level-spacing thresholds
        eps_tilde (float, optional): Base of the exponential small-gap threshold
            eps_tilde^n, defaults to 0.5
        observable (LocalOperatorSpec, optional): Correlation observable,
            defaults to single-site S^z
        m0 (int, optional): Separation scale offset, defaults to 0
        max_steps (int, optional): Flow step limit, defaults to 16
        offdiag_tol (float, optional): Flow convergence threshold, defaults
            to 1e-12
        connectivity_steps (int, optional): Steps k = 1 .. K with connectivity
            estimates, defaults to 3
        distribution (str, optional): Coupling law, defaults to "uniform"
        basis (str, optional): Eigenvectors used for observables, "flow" or
            "oracle", defaults to "flow"
        max_sites (int, optional): Dense size cap, defaults to 14
        out (str | None, optional): Output directory
        workers (int, optional): Worker processes, defaults to 1
        format (str, optional): "csv" or "json", defaults to "csv"
    """

    n: int = 8
    gamma: tuple[float, ...] = (0.02,)
    epsilon: float | None = None
    realizations: int = 100
    seed: int = 0
    beta: float | None = None
    delta_grid: tuple[float, ...] = DEFAULT_DELTA_GRID
    eps_tilde: float = 0.5
    observable: LocalOperatorSpec = field(default_factory=LocalOperatorSpec)
    m0: int = 0
    max_steps: int = 16
    offdiag_tol: float = 1e-12
    connectivity_steps: int = 3
    distribution: str = "uniform"
    basis: str = "flow"
    max_sites: int = DEFAULT_MAX_SITES
    out: str | None = None
    workers: int = 1
    format: str = "csv"

    def __post_init__(self) -> None:
        object.__setattr__(self, "gamma", _as_gammas(self.gamma))
        object.__setattr__(self, "observable", _as_observable(self.observable))
        object.__setattr__(
            self, "delta_grid", tuple(validate_probability_grid(self.delta_grid))
        )
        validate_size_cap(self.n, self.max_sites, context="run config")
        if not self.gamma:
            raise ValueError("gamma must name at least one value")
        if any(not 0.0 <= g < 1.0 for g in self.gamma):
            raise ValueError("gamma values must be in [0, 1)")
        if self.realizations < 1:
            raise ValueError("realizations must be at least 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.beta is not None and not math.isfinite(self.beta):
            raise ValueError("beta must be finite")
        if not 0.0 < self.eps_tilde < 1.0:
            raise ValueError("eps_tilde must be in (0, 1)")
        if self.connectivity_steps < 1:
            raise ValueError("connectivity_steps must be at least 1")
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(
                "distribution must be one of: " + ", ".join(DISTRIBUTIONS)
            )
        if self.basis not in BASES:
            raise ValueError("basis must be one of: " + ", ".join(BASES))
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        if self.format not in FORMATS:
            raise ValueError("format must be one of: " + ", ".join(FORMATS))
        # parameter objects validate epsilon, m0, max_steps and offdiag_tol
        for gamma in self.gamma:
            self.flow_params(gamma)
            self.model_params(gamma)

    @property
    def weighting(self) -> Weighting:
        return Weighting() if self.beta is None else Weighting.gibbs(self.beta)

    def model_params(self, gamma: float) -> ModelParams:
        return ModelParams(
            n=self.n,
            gamma=gamma,
            epsilon=self.epsilon,
            distribution=self.distribution,
            max_sites=self.max_sites,
        )

    def flow_params(self, gamma: float) -> FlowParams:
        return FlowParams(
            gamma=gamma,
            epsilon=self.epsilon,
            m0=self.m0,
            max_steps=self.max_steps,
            offdiag_tol=self.offdiag_tol,
            max_sites=self.max_sites,
        )

    def to_dict(self) -> dict[str, Any]:
        """Flat, JSON-ready record that ``from_dict`` turns back into this config."""
        record = {f.name: getattr(self, f.name) for f in fields(self)}
        record["gamma"] = list(self.gamma)
        record["delta_grid"] = list(self.delta_grid)
        record["observable"] = self.observable.to_json()
        return record

    @classmethod
    def from_dict(cls, record: dict[str, Any]) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(record) - known)
        if unknown:
            raise ValueError("unknown config key(s): " + ", ".join(unknown))
        return cls(**record)

    @classmethod
    def from_file(cls, path: str | Path) -> RunConfig:
        """Read a flat YAML mapping of config keys."""
        config_path = Path(path)
        try:
            with config_path.open(encoding="utf-8") as handle:
                record = yaml.safe_load(handle) or {}
        except FileNotFoundError as exc:
            raise ValueError(f"config file does not exist: {config_path}") from exc
        except yaml.YAMLError as exc:
            raise ValueError(
                f"failed to parse config file '{config_path}': {exc}"
            ) from exc
        if not isinstance(record, dict):
            raise ValueError(
                f"invalid config file '{config_path}': expected a mapping of keys"
            )
        try:
            return cls.from_dict(record)
        except (TypeError, ValueError) as exc:
            raise ValueError(f"invalid config file '{config_path}': {exc}") from exc

    def with_overrides(self, **overrides: Any) -> RunConfig:
        """Copy with every override that is not None applied."""
        changes = {key: value for key, value in overrides.items() if value is not None}
        known = {f.name for f in fields(self)}
        unknown = sorted(set(changes) - known)
        if unknown:
            raise ValueError("unknown config key(s): " + ", ".join(unknown))
        return replace(self, **changes)


@dataclass(frozen=True, slots=True)
class RealizationRecord:
    """
    Summary row of one realization.

    Args:
        gamma (float): Transverse coupling scale
        index (int): Realization index
        seed (int): Seed derived from the master seed and the index
        converged (bool): Whether the flow reached its off-diagonal tolerance
        steps (int): Flow steps taken
        offdiag_norm (float): Final off-diagonal Frobenius norm of H_eff
        localization (float): State average of |<S^z>| at the centre site
        n_resonant_sites (int): Sites reached by any resonance
        n_small_blocks (int): Small blocks in the final taxonomy
        n_large_sites (int): Sites of the final large region
        min_level_spacing (float): Smallest adjacent gap of the exact spectrum
        gap_ratio (float): Mean adjacent-gap ratio of the exact spectrum
        site_localization (tuple[float, ...]): State average of |<S^z_i>| per site
    """

    gamma: float
    index: int
    seed: int
    converged: bool
    steps: int
    offdiag_norm: float
    localization: float
    n_resonant_sites: int
    n_small_blocks: int
    n_large_sites: int
    min_level_spacing: float
    gap_ratio: float
    site_localization: tuple[float, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True, slots=True, eq=False)
class RealizationResult:
    """Record of one realization plus the samples the aggregates are built from."""

    record: RealizationRecord
    max_correlation: np.ndarray
    avg_correlation: np.ndarray
    block_sets: tuple[BlockSet, ...]
    resonant_sites: frozenset[int]


@dataclass(frozen=True, slots=True)
class RealizationFailure:
    gamma: float
    index: int
    seed: int
    error: str


def _block_set_at(state: FlowState, k: int) -> BlockSet:
    history = state.block_history
    if len(history) >= k:
        return history[k - 1]
    if history:
        return history[-1].advanced(k)
    return BlockSet.empty(state.n).advanced(k)


def _level_stats_realization(
    cfg: RunConfig, gamma: float, index: int, seed: int
) -> RealizationResult:
    disorder = sample_disorder(seed, cfg.model_params(gamma))
    energies = eigvalsh_sorted(build_hamiltonian(disorder, max_sites=cfg.max_sites))
    nan = float("nan")
    record = RealizationRecord(
        gamma=gamma,
        index=index,
        seed=seed,
        converged=False,
        steps=0,
        offdiag_norm=nan,
        localization=nan,
        n_resonant_sites=0,
        n_small_blocks=0,
        n_large_sites=0,
        min_level_spacing=min_level_spacing(energies),
        gap_ratio=mean_gap_ratio(energies),
    )
    empty = np.full(cfg.n, np.nan)
    return RealizationResult(
        record=record,
        max_correlation=empty,
        avg_correlation=empty.copy(),
        block_sets=(),
        resonant_sites=frozenset(),
    )


@dataclass(frozen=True, slots=True, eq=False)
class RealizationTrace:
    """Disorder, final flow state and measured result of one realization."""

    disorder: Disorder
    state: FlowState
    result: RealizationResult


def trace_realization(cfg: RunConfig, gamma: float, index: int) -> RealizationTrace:
    """Sample, build, flow, measure and classify one realization."""
    seed = derive_seed(cfg.seed, index)
    flow_params = cfg.flow_params(gamma)
    disorder = sample_disorder(seed, cfg.model_params(gamma))
    state = run_flow(disorder, flow_params)
    exact = diagonalize(build_hamiltonian(disorder, max_sites=cfg.max_sites))
    spectrum = state.to_spectrum() if cfg.basis == "flow" else exact

    weighting = cfg.weighting
    per_site = localization_profile(spectrum, weighting)
    maxima, averages = correlation_samples(spectrum, cfg.observable, weighting)
    history = state.block_history
    if history:
        resonant_sites = history[-1].resonant_sites
    else:
        resonant_sites = detect_resonant_sites(disorder, flow_params.epsilon)

    blocks = state.blocks
    record = RealizationRecord(
        gamma=gamma,
        index=index,
        seed=seed,
        converged=state.converged,
        steps=state.step,
        offdiag_norm=state.offdiag_norm,
        localization=float(per_site[default_site(cfg.n)]),
        n_resonant_sites=len(resonant_sites),
        n_small_blocks=len(blocks.small_blocks),
        n_large_sites=len(blocks.large_region),
        min_level_spacing=min_level_spacing(exact),
        gap_ratio=mean_gap_ratio(exact.energies),
        site_localization=tuple(float(v) for v in per_site),
    )
    result = RealizationResult(
        record=record,
        max_correlation=maxima,
        avg_correlation=averages,
        block_sets=tuple(
            _block_set_at(state, k) for k in range(1, cfg.connectivity_steps + 1)
        ),
        resonant_sites=resonant_sites,
    )
    return RealizationTrace(disorder=disorder, state=state, result=result)


def run_realization(
    cfg: RunConfig, gamma: float, index: int, mode: str = "full"
) -> RealizationResult:
    """
    Result of one realization; "level-stats" mode computes only the exact
    spectrum and skips the flow.
    """
    if mode not in MODES:
        raise ValueError("mode must be one of: " + ", ".join(MODES))
    if mode == "level-stats":
        return _level_stats_realization(
            cfg, gamma, index, derive_seed(cfg.seed, index)
        )
    return trace_realization(cfg, gamma, index).result


def _realization_task(
    cfg: RunConfig, gamma: float, index: int, mode: str
) -> RealizationResult | RealizationFailure:
    with threadpool_limits(limits=1):
        try:
            return run_realization(cfg, gamma, index, mode)
        except (ArithmeticError, RuntimeError, ValueError) as exc:
            return RealizationFailure(
                gamma=gamma,
                index=index,
                seed=derive_seed(cfg.seed, index),
                error=f"{type(exc).__name__}: {exc}",
            )


@dataclass(frozen=True, slots=True, eq=False)
class GammaReport:
    """
    Aggregates of the ensemble at one gamma.

    ``localization`` covers every successful realization; the converged and
    non-converged strata are reported separately so that dropping hard
    realizations never biases the headline number.
    """

    gamma: float
    records: pd.DataFrame
    failures: tuple[RealizationFailure, ...]
    level_stats: LevelStatsReport | None
    localization: ScoreEstimate | None = None
    localization_converged: ScoreEstimate | None = None
    localization_not_converged: ScoreEstimate | None = None
    profile: CorrelationProfile | None = None
    connectivity: tuple[ConnectivityEstimate, ...] = ()
    resonance_frequency: tuple[float, float, float, int] | None = None
    small_gap: tuple[float, float, float] | None = None

    @property
    def n_realizations(self) -> int:
        return len(self.records)

    def summary(self) -> dict[str, Any]:
        """Flat scalar summary of the aggregates."""
        summary: dict[str, Any] = {
            "gamma": self.gamma,
            "n_realizations": self.n_realizations,
            "n_failures": len(self.failures),
        }
        if "converged" in self.records and self.localization is not None:
            summary["n_converged"] = int(self.records["converged"].sum())
        for name in (
            "localization",
            "localization_converged",
            "localization_not_converged",
        ):
            estimate = getattr(self, name)
            if estimate is not None:
                summary.update({f"{name}_{k}": v for k, v in asdict(estimate).items()})
        if self.profile is not None:
            summary.update(
                {f"decay_{k}": v for k, v in self.profile.decay_slope().items()}
            )
        if self.resonance_frequency is not None:
            freq, lo, hi, samples = self.resonance_frequency
            summary.update(
                {
                    "resonance_frequency": freq,
                    "resonance_frequency_ci_lo": lo,
                    "resonance_frequency_ci_hi": hi,
                    "resonance_site_samples": samples,
                }
            )
        if self.level_stats is not None:
            summary.update(
                {f"level_{k}": v for k, v in self.level_stats.fit_summary().items()}
            )
        if self.small_gap is not None:
            prob, lo, hi = self.small_gap
            summary.update(
                {
                    "small_gap_prob": prob,
                    "small_gap_ci_lo": lo,
                    "small_gap_ci_hi": hi,
                }
            )
        return summary

    def connectivity_table(self) -> pd.DataFrame:
        if not self.connectivity:
            return pd.DataFrame()
        return pd.concat([c.table for c in self.connectivity], ignore_index=True)


@dataclass(frozen=True, slots=True, eq=False)
class EnsembleReport:
    config: RunConfig
    mode: str
    gammas: tuple[GammaReport, ...]
    wall_time: float

    @property
    def n_realizations(self) -> int:
        return sum(report.n_realizations for report in self.gammas)

    def summary_frame(self) -> pd.DataFrame:
        return pd.DataFrame([report.summary() for report in self.gammas])


def _level_stats(
    records: pd.DataFrame, cfg: RunConfig, gamma_index: int
) -> LevelStatsReport | None:
    gaps = records["min_level_spacing"].to_numpy()
    if gaps.size == 0:
        return None
    return level_statistics_from_gaps(
        gaps,
        cfg.delta_grid,
        min_realizations=1,
        seed=derive_seed(cfg.seed, gamma_index),
        gap_ratios=records["gap_ratio"].to_numpy(),
    )


def _aggregate(
    cfg: RunConfig,
    gamma: float,
    gamma_index: int,
    outcomes: Sequence[RealizationResult | RealizationFailure],
    mode: str,
) -> GammaReport:
    results = [o for o in outcomes if isinstance(o, RealizationResult)]
    failures = tuple(o for o in outcomes if isinstance(o, RealizationFailure))
    records = pd.DataFrame(
        [r.record.to_dict() for r in results],
        columns=[*RECORD_COLUMNS, "site_localization"],
    )
    level_stats = _level_stats(records, cfg, gamma_index)
    small_gap = None
    if results:
        small_gap = small_gap_probability(
            records["min_level_spacing"], cfg.n, cfg.eps_tilde
        )
    if mode == "level-stats" or not results:
        return GammaReport(
            gamma=gamma,
            records=records,
            failures=failures,
            level_stats=level_stats,
            small_gap=small_gap,
        )

    converged = records["converged"].to_numpy(dtype=bool)
    values = records["localization"].to_numpy(dtype=float)
    connectivity = tuple(
        estimate_connectivity(
            [r.block_sets[k - 1] for r in results], kind, k, min_realizations=1
        )
        for k in range(1, cfg.connectivity_steps + 1)
        for kind in CONNECTIVITY_KINDS
    )
    return GammaReport(
        gamma=gamma,
        records=records,
        failures=failures,
        level_stats=level_stats,
        localization=ScoreEstimate.from_values(values),
        localization_converged=ScoreEstimate.from_values(values[converged]),
        localization_not_converged=ScoreEstimate.from_values(values[~converged]),
        profile=CorrelationProfile.from_samples(
            np.array([r.max_correlation for r in results]),
            np.array([r.avg_correlation for r in results]),
        ),
        connectivity=connectivity,
        resonance_frequency=resonant_site_frequency(
            [r.resonant_sites for r in results], cfg.n
        ),
        small_gap=small_gap,
    )


def run_ensemble(cfg: RunConfig, mode: str = "full") -> EnsembleReport:
    """
    Run ``cfg.realizations`` realizations per gamma and aggregate them.

    Realizations run on ``cfg.workers`` processes, each with single-threaded
    BLAS. Failing realizations are logged and counted; more than 1% failures
    raise ``EnsembleFailureError``.
    """
    if mode not in MODES:
        raise ValueError("mode must be one of: " + ", ".join(MODES))
    start = time.perf_counter()
    tasks = [
        (gamma, index) for gamma in cfg.gamma for index in range(cfg.realizations)
    ]
    outcomes = Parallel(n_jobs=cfg.workers)(
        delayed(_realization_task)(cfg, gamma, index, mode) for gamma, index in tasks
    )

    failures = [o for o in outcomes if isinstance(o, RealizationFailure)]
    for failure in failures:
        logger.warning(
            "realization %d at gamma=%g (seed %d) failed: %s",
            failure.index,
            failure.gamma,
            failure.seed,
            failure.error,
        )
    if len(failures) > FAILURE_FRACTION * len(tasks):
        raise EnsembleFailureError(
            f"{len(failures)} of {len(tasks)} realizations failed, "
            f"above the {FAILURE_FRACTION:.0%} limit"
        )

    reports = []
    for gamma_index, gamma in enumerate(cfg.gamma):
        chunk = outcomes[
            gamma_index * cfg.realizations : (gamma_index + 1) * cfg.realizations
        ]
        reports.append(_aggregate(cfg, gamma, gamma_index, chunk, mode))
    wall_time = time.perf_counter() - start
    logger.info(
        "ensemble of %d realization(s) finished in %.2fs", len(tasks), wall_time
    )
    return EnsembleReport(
        config=cfg, mode=mode, gammas=tuple(reports), wall_time=wall_time
    )
