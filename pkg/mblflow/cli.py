import argparse
import json
import logging
from pathlib import Path
from typing import Any, NoReturn

from mblflow.ensemble import (
    BASES,
    FORMATS,
    EnsembleReport,
    RunConfig,
    run_ensemble,
    trace_realization,
)
from mblflow.errors import EnsembleFailureError
from mblflow.report import emit_report, sanitize_for_json

CONFIG_ERROR = 1
ENSEMBLE_FAILURE = 2
DEFAULT_OUT = "mblflow-out"


class _ArgumentParser(argparse.ArgumentParser):
    """Usage errors are configuration errors and exit with code 1."""

    def error(self, message: str) -> NoReturn:
        self.print_usage()
        self.exit(CONFIG_ERROR, f"{self.prog}: error: {message}\n")


def _add_common_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="Flat YAML config file")
    parser.add_argument("--n", type=int, default=None, help="Chain length")
    parser.add_argument(
        "--gamma",
        type=float,
        nargs="+",
        default=None,
        help="Transverse coupling scale(s)",
    )
    parser.add_argument(
        "--epsilon", type=float, default=None, help="Resonance cutoff override"
    )
    parser.add_argument("--seed", type=int, default=None, help="Master seed")
    parser.add_argument(
        "--beta",
        type=float,
        default=None,
        help="Gibbs inverse temperature, uniform state weighting when omitted",
    )
    parser.add_argument("--max-steps", type=int, default=None)
    parser.add_argument("--basis", choices=list(BASES), default=None)
    parser.add_argument("--format", choices=list(FORMATS), default=None)
    parser.add_argument("--out", default=None, help="Output path")
    parser.add_argument("--verbose", action="store_true")


def _add_ensemble_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--realizations", type=int, default=None)
    parser.add_argument("--workers", type=int, default=None)
    parser.add_argument(
        "--plots", action="store_true", help="Also write PNG figures"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(description="mblflow command line interface")
    subparsers = parser.add_subparsers(dest="command", required=True)

    run_parser = subparsers.add_parser(
        "run", help="Run one realization and print its full flow record"
    )
    trace_parser = subparsers.add_parser(
        "flow-trace", help="Print the per-step trace table of one realization"
    )
    for single in (run_parser, trace_parser):
        _add_common_arguments(single)
        single.add_argument(
            "--index", type=int, default=0, help="Realization index"
        )

    for name, help_text in (
        ("ensemble", "Run a disorder ensemble and write every aggregate"),
        ("level-stats", "Estimate level-spacing statistics with the oracle only"),
        ("corr-decay", "Run an ensemble and report correlation decay slopes"),
    ):
        ensemble_parser = subparsers.add_parser(name, help=help_text)
        _add_common_arguments(ensemble_parser)
        _add_ensemble_arguments(ensemble_parser)

    return parser


def _load_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    return cfg.with_overrides(
        n=args.n,
        gamma=tuple(args.gamma) if args.gamma else None,
        epsilon=args.epsilon,
        seed=args.seed,
        beta=args.beta,
        max_steps=args.max_steps,
        basis=args.basis,
        format=args.format,
        out=args.out,
        realizations=getattr(args, "realizations", None),
        workers=getattr(args, "workers", None),
    )


def _single_gamma(cfg: RunConfig) -> float:
    if len(cfg.gamma) != 1:
        raise ValueError("run and flow-trace take a single --gamma value")
    return cfg.gamma[0]


def _emit_json(payload: Any, output: str | None) -> None:
    json_output = json.dumps(sanitize_for_json(payload), indent=2, allow_nan=False)
    if output:
        output_path = Path(output)
        output_path.parent.mkdir(parents=True, exist_ok=True)
        output_path.write_text(json_output + "\n", encoding="utf-8")
    else:
        print(json_output)


def _run_single(cfg: RunConfig, index: int) -> dict[str, Any]:
    trace = trace_realization(cfg, _single_gamma(cfg), index)
    state = trace.state
    blocks = state.blocks
    return {
        "config": cfg.to_dict(),
        "disorder": trace.disorder.to_json(),
        "record": trace.result.record.to_dict(),
        "trace": state.trace_frame().to_dict(orient="records"),
        "blocks": {
            "scale": blocks.scale,
            "small_blocks": [
                {"sites": list(b.sites), "scale": b.scale, "volume": b.volume}
                for b in blocks.small_blocks
            ],
            "large_region": sorted(blocks.large_region),
            "resonant_sites": sorted(blocks.resonant_sites),
        },
        "events": state.events,
    }


def _flow_trace(cfg: RunConfig, index: int, output: str | None) -> None:
    frame = trace_realization(cfg, _single_gamma(cfg), index).state.trace_frame()
    if cfg.format == "json":
        _emit_json(frame.to_dict(orient="records"), output)
    elif output:
        output_path = Path(output)
        output_path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(output_path, index=False)
    else:
        print(frame.to_csv(index=False), end="")


def _decay_summary(report: EnsembleReport) -> list[dict[str, Any]]:
    rows = []
    for gamma_report in report.gammas:
        if gamma_report.profile is None:
            continue
        rows.append(
            {
                "gamma": gamma_report.gamma,
                **gamma_report.profile.decay_slope(),
                "profile": gamma_report.profile.frame.to_dict(orient="records"),
            }
        )
    return rows


def _run_ensemble_command(command: str, cfg: RunConfig, plots: bool) -> None:
    mode = "level-stats" if command == "level-stats" else "full"
    report = run_ensemble(cfg, mode=mode)
    written = emit_report(report, cfg.out or DEFAULT_OUT, cfg.format, plots=plots)
    if command == "corr-decay":
        payload: Any = _decay_summary(report)
    else:
        payload = report.summary_frame().to_dict(orient="records")
    _emit_json({"summary": payload, "files": [str(p) for p in written]}, None)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )

    try:
        cfg = _load_config(args)
        if args.command == "run":
            _emit_json(_run_single(cfg, args.index), cfg.out)
        elif args.command == "flow-trace":
            _flow_trace(cfg, args.index, cfg.out)
        else:
            _run_ensemble_command(args.command, cfg, args.plots)
        return 0
    except EnsembleFailureError as exc:
        parser.exit(ENSEMBLE_FAILURE, f"Error: {exc}\n")
    except (OSError, RuntimeError, TypeError, ValueError) as exc:
        parser.exit(CONFIG_ERROR, f"Error: {exc}\n")


if __name__ == "__main__":
    raise SystemExit(main())
