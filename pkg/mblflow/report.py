from __future__ import annotations

import json
import logging
import math
from datetime import UTC, datetime
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Any

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from mblflow.ensemble import FORMATS, RECORD_COLUMNS, EnsembleReport, GammaReport

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


def package_version() -> str:
    try:
        return version("mblflow")
    except PackageNotFoundError:
        return "unknown"


def sanitize_for_json(value: Any) -> Any:
    """Turn NumPy scalars, tuples and non-finite floats into plain JSON values."""
    if isinstance(value, dict):
        return {str(key): sanitize_for_json(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [sanitize_for_json(item) for item in value]
    if isinstance(value, np.ndarray):
        return [sanitize_for_json(item) for item in value.tolist()]
    if isinstance(value, np.generic):
        return sanitize_for_json(value.item())
    if value is pd.NA or value is pd.NaT:
        return None
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, Path):
        return str(value)
    return value


def _gamma_dir_name(gamma: float) -> str:
    return f"gamma_{gamma:.6g}"


def _records_frame(report: GammaReport) -> pd.DataFrame:
    records = report.records
    frame = records.loc[:, list(RECORD_COLUMNS)].copy()
    per_site = [tuple(row) for row in records["site_localization"]]
    if per_site and all(per_site):
        sites = pd.DataFrame(
            per_site, columns=[f"site_{i}" for i in range(len(per_site[0]))]
        )
        frame = pd.concat([frame.reset_index(drop=True), sites], axis=1)
    return frame


def _localization_frame(report: GammaReport) -> pd.DataFrame:
    rows = []
    for stratum, estimate in (
        ("all", report.localization),
        ("converged", report.localization_converged),
        ("not_converged", report.localization_not_converged),
    ):
        if estimate is not None:
            rows.append(
                {
                    "stratum": stratum,
                    "mean": estimate.mean,
                    "ci_lo": estimate.ci_lo,
                    "ci_hi": estimate.ci_hi,
                    "n": estimate.n,
                }
            )
    return pd.DataFrame(rows, columns=["stratum", "mean", "ci_lo", "ci_hi", "n"])


def _connectivity_by_distance(report: GammaReport) -> pd.DataFrame:
    frames = []
    for estimate in report.connectivity:
        frame = estimate.by_distance()
        frame.insert(0, "k", estimate.k)
        frame.insert(0, "kind", estimate.kind)
        frames.append(frame)
    if not frames:
        return pd.DataFrame()
    return pd.concat(frames, ignore_index=True)


def _failures_frame(report: GammaReport) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {"gamma": f.gamma, "index": f.index, "seed": f.seed, "error": f.error}
            for f in report.failures
        ],
        columns=["gamma", "index", "seed", "error"],
    )


def _tables(report: GammaReport) -> dict[str, pd.DataFrame]:
    tables = {"records": _records_frame(report)}
    if report.localization is not None:
        tables["localization"] = _localization_frame(report)
    if report.profile is not None:
        tables["correlation_profile"] = report.profile.frame
    if report.connectivity:
        tables["connectivity"] = report.connectivity_table()
        tables["connectivity_by_distance"] = _connectivity_by_distance(report)
    if report.level_stats is not None:
        tables["level_stats"] = report.level_stats.to_frame()
    if report.failures:
        tables["failures"] = _failures_frame(report)
    return tables


def _write_table(frame: pd.DataFrame, path: Path, fmt: str) -> None:
    if fmt == "csv":
        frame.to_csv(path, index=False)
    else:
        records = sanitize_for_json(frame.to_dict(orient="records"))
        path.write_text(
            json.dumps(records, indent=2, allow_nan=False) + "\n", encoding="utf-8"
        )


def _write_json(payload: dict[str, Any], path: Path) -> None:
    path.write_text(
        json.dumps(sanitize_for_json(payload), indent=2, allow_nan=False) + "\n",
        encoding="utf-8",
    )


def _write_plots(report: GammaReport, directory: Path) -> list[Path]:
    written = []
    if report.profile is not None and not report.profile.frame.empty:
        report.profile.plot()
        path = directory / "correlation_profile.png"
        plt.gcf().savefig(path)
        plt.close("all")
        written.append(path)
    if report.level_stats is not None and np.any(report.level_stats.empirical_prob):
        report.level_stats.plot()
        path = directory / "level_stats.png"
        plt.gcf().savefig(path)
        plt.close("all")
        written.append(path)
    return written


def emit_report(
    report: EnsembleReport,
    out_dir: str | Path,
    fmt: str = "csv",
    plots: bool = False,
) -> list[Path]:
    """
    Write one table per aggregate under ``out_dir/gamma_<value>/``, a summary
    table and ``manifest.json``. Returns the written paths.

    The manifest echoes the full config, so ``RunConfig.from_dict(manifest
    ["config"])`` reproduces the run.
    """
    if fmt not in FORMATS:
        raise ValueError("format must be one of: " + ", ".join(FORMATS))
    if report.n_realizations == 0:
        raise ValueError("cannot emit a report for an empty ensemble")

    output_dir = Path(out_dir)
    written: list[Path] = []
    try:
        output_dir.mkdir(parents=True, exist_ok=True)
        for gamma_report in report.gammas:
            directory = output_dir / _gamma_dir_name(gamma_report.gamma)
            directory.mkdir(exist_ok=True)
            for name, frame in _tables(gamma_report).items():
                path = directory / f"{name}.{fmt}"
                _write_table(frame, path, fmt)
                written.append(path)
            if plots:
                written.extend(_write_plots(gamma_report, directory))

        summary_path = output_dir / f"summary.{fmt}"
        _write_table(report.summary_frame(), summary_path, fmt)
        written.append(summary_path)

        manifest_path = output_dir / MANIFEST_NAME
        manifest = {
            "software": "mblflow",
            "version": package_version(),
            "mode": report.mode,
            "seed": report.config.seed,
            "config": report.config.to_dict(),
            "wall_time_seconds": report.wall_time,
            "created": datetime.now(UTC).isoformat(),
            "files": [str(p.relative_to(output_dir)) for p in written],
        }
        _write_json(manifest, manifest_path)
        written.append(manifest_path)
    except OSError as exc:
        path = getattr(exc, "filename", None) or output_dir
        raise OSError(f"failed to write report to '{path}': {exc}") from exc

    logger.info("wrote %d report file(s) to %s", len(written), output_dir)
    return written


def load_manifest(path: str | Path) -> dict[str, Any]:
    manifest_path = Path(path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    try:
        return json.loads(manifest_path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ValueError(f"manifest does not exist: {manifest_path}") from exc
    except json.JSONDecodeError as exc:
        raise ValueError(
            f"failed to parse manifest '{manifest_path}': {exc}"
        ) from exc
