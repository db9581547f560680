import json
import math
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from mblflow.ensemble import EnsembleReport, RunConfig, run_ensemble
from mblflow.report import (
    MANIFEST_NAME,
    emit_report,
    load_manifest,
    sanitize_for_json,
)


@pytest.fixture(scope="module")
def report() -> EnsembleReport:
    cfg = RunConfig(n=4, gamma=(0.02,), realizations=3, seed=5, connectivity_steps=1)
    return run_ensemble(cfg)


def test_emit_report_writes_tables_and_manifest(tmp_path, report):
    out = tmp_path / "out"
    written = emit_report(report, out)

    gamma_dir = out / "gamma_0.02"
    for name in (
        "records",
        "localization",
        "correlation_profile",
        "connectivity",
        "connectivity_by_distance",
        "level_stats",
    ):
        assert (gamma_dir / f"{name}.csv").is_file()
    assert not (gamma_dir / "failures.csv").exists()
    assert (out / "summary.csv").is_file()
    assert written[-1] == out / MANIFEST_NAME

    records = pd.read_csv(gamma_dir / "records.csv")
    assert records["index"].tolist() == [0, 1, 2]
    assert [f"site_{i}" for i in range(4)] == [
        c for c in records.columns if c.startswith("site_")
    ]

    localization = pd.read_csv(gamma_dir / "localization.csv")
    assert localization["stratum"].tolist()[0] == "all"
    assert localization["n"].iloc[0] == 3


def test_manifest_reproduces_the_config(tmp_path, report):
    emit_report(report, tmp_path)
    manifest = load_manifest(tmp_path)

    assert manifest["software"] == "mblflow"
    assert manifest["mode"] == "full"
    assert manifest["seed"] == 5
    assert manifest["wall_time_seconds"] >= 0.0
    assert "gamma_0.02/records.csv" in manifest["files"]
    assert RunConfig.from_dict(manifest["config"]) == report.config


def test_emit_report_json_format(tmp_path, report):
    emit_report(report, tmp_path, fmt="json")

    summary = json.loads((tmp_path / "summary.json").read_text(encoding="utf-8"))
    assert len(summary) == 1
    assert summary[0]["gamma"] == 0.02
    assert summary[0]["n_realizations"] == 3
    records = json.loads(
        (tmp_path / "gamma_0.02" / "records.json").read_text(encoding="utf-8")
    )
    assert [r["index"] for r in records] == [0, 1, 2]


def test_emit_report_writes_plots(tmp_path, report):
    written = emit_report(report, tmp_path, plots=True)

    assert tmp_path / "gamma_0.02" / "correlation_profile.png" in written
    assert (tmp_path / "gamma_0.02" / "correlation_profile.png").stat().st_size > 0


def test_emit_report_rejects_bad_format(tmp_path, report):
    with pytest.raises(ValueError, match="format must be one of"):
        emit_report(report, tmp_path / "out", fmt="parquet")
    assert not (tmp_path / "out").exists()


def test_emit_report_rejects_empty_ensemble(tmp_path):
    empty = EnsembleReport(config=RunConfig(), mode="full", gammas=(), wall_time=0.0)

    with pytest.raises(ValueError, match="empty ensemble"):
        emit_report(empty, tmp_path / "out")
    assert not (tmp_path / "out").exists()


def test_emit_report_wraps_write_errors(tmp_path, report):
    blocked = tmp_path / "blocked"
    blocked.write_text("not a directory", encoding="utf-8")

    with pytest.raises(OSError, match="failed to write report"):
        emit_report(report, blocked)


def test_load_manifest_missing(tmp_path):
    with pytest.raises(ValueError, match="does not exist"):
        load_manifest(tmp_path)


def test_sanitize_for_json():
    payload = {
        "a": np.float64(1.5),
        "b": (1, np.int64(2)),
        "c": float("nan"),
        "d": np.array([1.0, math.inf]),
        "e": Path("x"),
        3: "three",
    }

    assert sanitize_for_json(payload) == {
        "a": 1.5,
        "b": [1, 2],
        "c": None,
        "d": [1.0, None],
        "e": "x",
        "3": "three",
    }
