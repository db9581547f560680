from mblflow.entities import (
    Block,
    BlockSet,
    Disorder,
    FlowParams,
    LocalOperatorSpec,
    ModelParams,
    Spectrum,
    SpinConfig,
    TransitionSet,
    Weighting,
)
from mblflow.ensemble import (
    EnsembleReport,
    GammaReport,
    RealizationRecord,
    RunConfig,
    derive_seed,
    run_ensemble,
    run_realization,
)
from mblflow.flow import FlowState, run_flow
from mblflow.geometry import (
    ConnectivityEstimate,
    build_blocks_step1,
    estimate_connectivity,
    update_blocks,
)
from mblflow.model import build_hamiltonian, sample_disorder
from mblflow.observables import (
    CorrelationProfile,
    ScoreEstimate,
    connected_correlation,
    correlation_profile,
    expectation,
    localization_score,
    state_average,
)
from mblflow.oracle import LevelStatsReport, diagonalize, estimate_level_statistics
from mblflow.report import emit_report

__all__ = [
    "Block",
    "BlockSet",
    "ConnectivityEstimate",
    "CorrelationProfile",
    "Disorder",
    "EnsembleReport",
    "FlowParams",
    "FlowState",
    "GammaReport",
    "LevelStatsReport",
    "LocalOperatorSpec",
    "ModelParams",
    "RealizationRecord",
    "RunConfig",
    "ScoreEstimate",
    "Spectrum",
    "SpinConfig",
    "TransitionSet",
    "Weighting",
    "build_blocks_step1",
    "build_hamiltonian",
    "connected_correlation",
    "correlation_profile",
    "derive_seed",
    "diagonalize",
    "emit_report",
    "estimate_connectivity",
    "estimate_level_statistics",
    "expectation",
    "localization_score",
    "run_ensemble",
    "run_flow",
    "run_realization",
    "sample_disorder",
    "state_average",
    "update_blocks",
]
