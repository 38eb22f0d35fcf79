"""Command-line pipeline for track degradation modelling.

Each stage reads and writes plain files so intermediate results can be
inspected and stages re-run.

Usage:
    trackdeg simulate scenario.toml --out out/          # synthetic dataset + truth
    trackdeg ingest raw.csv --config pipeline.toml      # raw channels -> segment series
    trackdeg identify out/segment_series.csv            # flag tamping intervals
    trackdeg fit out/segment_series_flagged.csv         # posterior + diagnostics
    trackdeg hit --posterior out/posterior.csv          # hitting-time tables

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 chains not
converged.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Any, NoReturn

import pandas as pd
from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from trackdeg import __version__
from trackdeg.config import PipelineConfig, load_config, load_scenario, require_file
from trackdeg.diagnostics import RHAT_GATE, check_convergence, worst_rhat
from trackdeg.errors import (
    ConfigError,
    ConvergenceError,
    DataError,
    DecompositionError,
    InitializationError,
    NumericError,
)
from trackdeg.ingest import FLOAT_FORMAT, SeriesDataset, ingest_files
from trackdeg.maintenance import identify_all, read_work_orders, report, write_work_orders
from trackdeg.mcmc import fit
from trackdeg.posterior import (
    ModelKind,
    PosteriorSamples,
    correlation_summary,
    summarize,
    zplus_predictive,
)
from trackdeg.predict import Thresholds, compare_models, hitting_time, predictive_bands, validate
from trackdeg.synthgen import generate, unflagged
from trackdeg.tracing import get_tracer, setup_tracing

console = Console(stderr=True)
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NOT_CONVERGED = 3


class ArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to the config exit code."""

    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def setup_logging(debug: bool = False, verbose: bool = False) -> None:
    """Configure logging."""
    level = logging.DEBUG if debug else logging.INFO if verbose else logging.WARNING
    logging.basicConfig(
        level=level,
        format="%(asctime)s - %(levelname)s - %(name)s - %(message)s",
    )


def _write_table(frame: pd.DataFrame, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.info(f"Wrote {path}")


def _print_dict(title: str, values: dict[str, Any]) -> None:
    table = Table(show_header=False, box=None)
    table.add_column("key", style="cyan")
    table.add_column("value")
    for key, value in values.items():
        if isinstance(value, float):
            value = f"{value:.4g}"
        elif isinstance(value, dict):
            value = json.dumps(value, default=float)
        table.add_row(str(key), str(value))
    console.print(Panel(table, title=title, border_style="dim"))


def _series_path(args: argparse.Namespace, config: PipelineConfig, default: str) -> Path:
    if getattr(args, "series", None):
        return require_file(Path(args.series), "segment-series file")
    if config.paths.series is not None:
        return require_file(config.paths.series, "segment-series file")
    return require_file(config.paths.out / default, "segment-series file")


def _posterior_path(value: str | None, fallback: Path | None, what: str = "posterior file") -> Path:
    return require_file(Path(value) if value else fallback, what)


def _segments(samples: PosteriorSamples, segment: int | None) -> list[int]:
    if segment is None:
        return list(samples.segment_ids)
    samples.segment_index(segment)
    return [segment]


# ----------------------------------------------------------------------
# Subcommands
# ----------------------------------------------------------------------


def cmd_simulate(args: argparse.Namespace, config: PipelineConfig) -> int:
    scenario_path = require_file(
        Path(args.scenario) if args.scenario else config.paths.scenario, "scenario file"
    )
    spec = load_scenario(scenario_path)
    if args.seed is not None:
        spec = spec.model_copy(update={"seed": args.seed})
    out = config.paths.out
    dataset, truth = generate(spec)
    unflagged(dataset).write_csv(out / "segment_series.csv")
    truth.write_csv(out / "truth.csv")
    write_work_orders(truth.work_orders, out / "work_orders.csv", dataset.epoch)
    _print_dict(
        "simulate",
        {"segments": len(dataset), "tamping events": truth.n_events, "out": str(out)},
    )
    return EXIT_OK


def cmd_ingest(args: argparse.Namespace, config: PipelineConfig) -> int:
    raw = [Path(p) for p in args.raw] or list(config.paths.raw)
    if not raw:
        raise ConfigError("No raw files given (arguments or [paths] raw)")
    for path in raw:
        require_file(path, "raw file")
    dataset, load_report = ingest_files(raw, config.segmentation, config.fit.threads)
    out = config.paths.out
    dataset.write_csv(out / "segment_series.csv")
    _write_table(load_report.to_frame(), out / "load_report.csv")
    _print_dict("ingest", {"segments": len(dataset), **load_report.to_dict()})
    return EXIT_OK


def cmd_identify(args: argparse.Namespace, config: PipelineConfig) -> int:
    path = _series_path(args, config, "segment_series.csv")
    orders_path = Path(args.work_orders) if args.work_orders else config.paths.work_orders
    if orders_path is not None:
        require_file(orders_path, "work-order file")
    dataset = SeriesDataset.read_csv(path)
    flagged = dataset.replace(identify_all(dataset, config.identification), identified=True)
    orders = read_work_orders(orders_path, dataset.epoch) if orders_path else None
    result = report(flagged, orders)
    out = config.paths.out
    flagged.write_csv(out / "segment_series_flagged.csv")
    _write_table(result.to_frame(), out / "maintenance_report.csv")
    _print_dict("identify", result.to_dict())
    return EXIT_OK


def _training_set(dataset: SeriesDataset, holdout: int) -> SeriesDataset:
    if holdout <= 0:
        return dataset
    short = [s.segment_id for s in dataset if s.n_obs < holdout + 2]
    if short:
        raise DataError(
            f"--holdout {holdout} leaves fewer than 2 observations in segment(s) "
            f"{', '.join(map(str, short))}"
        )
    return dataset.replace([s.truncated(s.n_obs - holdout) for s in dataset])


def cmd_fit(args: argparse.Namespace, config: PipelineConfig) -> int:
    path = _series_path(args, config, "segment_series_flagged.csv")
    fit_config = config.fit
    if args.model:
        fit_config = fit_config.model_copy(update={"model_kind": ModelKind(args.model)})
    dataset = SeriesDataset.read_csv(path)
    if not dataset.identified:
        raise DataError(f"{path}: maintenance flags are not assigned; run `trackdeg identify` first")
    training = _training_set(dataset, args.holdout)

    with get_tracer().start_as_current_span("fit") as span:
        span.set_attribute("segments", len(training))
        span.set_attribute("chains", fit_config.n_chains)
        span.set_attribute("seed", fit_config.seed)
        samples = fit(training.series, fit_config)

    out = config.paths.out
    name = "posterior.csv" if fit_config.model_kind is ModelKind.MULTIVARIATE else "posterior_univariate.csv"
    samples.write_csv(out / name)
    diag = samples.diagnostics()
    diag_frame = pd.DataFrame(
        [{"parameter": k, "split_rhat": d.split_rhat, "ess": d.ess} for k, d in diag.items()]
    )
    _write_table(diag_frame, out / name.replace("posterior", "diagnostics"))

    worst_name, worst = worst_rhat(diag)
    _print_dict(
        "fit",
        {
            "segments": len(training),
            "parameters": len(diag),
            "worst R-hat": f"{worst:.4f} ({worst_name})" if worst_name else "n/a",
            "acceptance": {b: round(sum(r) / len(r), 3) for b, r in samples.acceptance.items()},
        },
    )
    if worst_name is not None and worst > RHAT_GATE:
        message = f"not converged: R-hat of {worst_name} is {worst:.3f} > {RHAT_GATE}"
        if not args.force:
            raise ConvergenceError(message, worst)
        logger.warning(message)
        console.print(f"[yellow]Warning: {message} (--force given)[/]")
    return EXIT_OK


def cmd_validate(args: argparse.Namespace, config: PipelineConfig) -> int:
    path = _series_path(args, config, "segment_series_flagged.csv")
    posterior = _posterior_path(args.posterior, config.paths.posterior or config.paths.out / "posterior.csv")
    holdout = args.holdout or config.predict.holdout
    dataset = SeriesDataset.read_csv(path)
    samples = PosteriorSamples.read_csv(posterior)
    with get_tracer().start_as_current_span("validate") as span:
        span.set_attribute("segments", len(dataset))
        result = validate(
            samples,
            dataset.series,
            holdout,
            level=config.predict.level,
            max_draws=config.predict.max_draws,
            seed=config.effective_seed,
            force=args.force,
        )
    _write_table(result.records, config.paths.out / "validation.csv")
    _print_dict("validate", result.to_dict())
    return EXIT_OK


def cmd_predict(args: argparse.Namespace, config: PipelineConfig) -> int:
    posterior = _posterior_path(args.posterior, config.paths.posterior or config.paths.out / "posterior.csv")
    samples = PosteriorSamples.read_csv(posterior)
    horizon = args.horizon or config.predict.horizon_days
    frames = []
    for sid in _segments(samples, args.segment):
        anchor = samples.anchors.get(sid)
        if anchor is None:
            raise DataError(f"Posterior has no last observation for segment {sid}")
        bands = predictive_bands(
            samples,
            sid,
            anchor.time + horizon,
            quantiles=config.predict.quantiles,
            step=config.predict.band_step_days,
            max_draws=config.predict.max_draws,
            seed=config.effective_seed,
            force=args.force,
        )
        bands.insert(0, "segment_id", sid)
        frames.append(bands)
    _write_table(pd.concat(frames, ignore_index=True), config.paths.out / "bands.csv")
    _print_dict("predict", {"segments": len(frames), "horizon_days": horizon})
    return EXIT_OK


def _require_thresholds(config: PipelineConfig) -> Thresholds:
    if config.thresholds is None:
        raise ConfigError("Thresholds are required: add a [thresholds] section to the config")
    return config.thresholds


def cmd_hit(args: argparse.Namespace, config: PipelineConfig) -> int:
    thresholds = _require_thresholds(config)
    posterior = _posterior_path(args.posterior, config.paths.posterior or config.paths.out / "posterior.csv")
    samples = PosteriorSamples.read_csv(posterior)
    check_convergence(samples, args.force)
    pc = config.predict
    paths, hists, probs, summary = [], [], [], []
    for sid in _segments(samples, args.segment):
        with get_tracer().start_as_current_span("hit") as span:
            span.set_attribute("segment", sid)
            result = hitting_time(
                samples,
                sid,
                thresholds,
                horizon=pc.horizon_days,
                n_paths=args.paths or pc.n_paths,
                seed=config.effective_seed,
                step=pc.step_days,
                max_draws=pc.max_draws,
            )
        paths.append(
            pd.DataFrame(
                {
                    "segment_id": sid,
                    "path": range(result.n_paths),
                    "draw": result.draw_index,
                    "time": result.times,
                    "first_indicator": [
                        result.labels[q] if q >= 0 else "" for q in result.first_indicator
                    ],
                }
            )
        )
        hist = result.histogram(pc.bins)
        hist.insert(0, "segment_id", sid)
        hists.append(hist)
        prob = result.probability_table()
        prob.insert(0, "segment_id", sid)
        probs.append(prob)
        summary.append(result.to_dict())
    out = config.paths.out
    _write_table(pd.concat(paths, ignore_index=True), out / "hitting_times.csv")
    _write_table(pd.concat(hists, ignore_index=True), out / "hit_histogram.csv")
    _write_table(pd.concat(probs, ignore_index=True), out / "first_hit.csv")
    for item in summary:
        _print_dict(f"hit: segment {item['segment_id']}", item)
    return EXIT_OK


def cmd_compare(args: argparse.Namespace, config: PipelineConfig) -> int:
    thresholds = _require_thresholds(config)
    multi_path = _posterior_path(args.posterior, config.paths.posterior or config.paths.out / "posterior.csv")
    uni_path = _posterior_path(
        args.univariate,
        config.paths.univariate_posterior or config.paths.out / "posterior_univariate.csv",
        "univariate posterior file",
    )
    multi = PosteriorSamples.read_csv(multi_path)
    uni = PosteriorSamples.read_csv(uni_path)
    check_convergence(multi, args.force)
    check_convergence(uni, args.force)
    pc = config.predict
    frames, rows = [], []
    for sid in _segments(multi, args.segment):
        result = compare_models(
            multi,
            uni,
            sid,
            thresholds,
            horizon=pc.horizon_days,
            n_paths=args.paths or pc.n_paths,
            seed=config.effective_seed,
            step=pc.step_days,
            max_draws=pc.max_draws,
        )
        frame = result.to_frame()
        frame.insert(0, "segment_id", sid)
        frames.append(frame)
        rows.append(result.to_dict())
    out = config.paths.out
    _write_table(pd.concat(frames, ignore_index=True), out / "compare_quantiles.csv")
    summary = pd.DataFrame(rows)
    _write_table(summary, out / "compare.csv")
    _print_dict(
        "compare",
        {
            "segments": len(rows),
            "univariate sooner": int((summary["median_difference"] <= 0).sum()),
            "mean median difference (days)": float(summary["median_difference"].mean()),
        },
    )
    return EXIT_OK


def cmd_summarize(args: argparse.Namespace, config: PipelineConfig) -> int:
    posterior = _posterior_path(args.posterior, config.paths.posterior or config.paths.out / "posterior.csv")
    samples = PosteriorSamples.read_csv(posterior)
    out = config.paths.out
    _write_table(summarize(samples).reset_index(), out / "summary.csv")
    _write_table(correlation_summary(samples).reset_index(names="indicator"), out / "correlation.csv")
    _write_table(zplus_predictive(samples, args.draws, config.effective_seed), out / "zplus_predictive.csv")
    _print_dict("summarize", {"parameters": len(samples.scalar_parameters()), "out": str(out)})
    return EXIT_OK


# ----------------------------------------------------------------------
# Parser
# ----------------------------------------------------------------------


def _common_flags() -> argparse.ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("--config", help="Pipeline config file (TOML)")
    common.add_argument("--seed", type=int, help="Master random seed")
    common.add_argument("--threads", type=int, help="Maximum worker threads")
    common.add_argument("--out", help="Output directory (overrides TRACKDEG_OUT)")
    common.add_argument(
        "--force", action="store_true", help="Continue past a failed convergence gate"
    )
    common.add_argument("--debug", action="store_true", help="Enable debug logging")
    common.add_argument("--verbose", action="store_true", help="Enable info logging")
    common.add_argument("--trace", action="store_true", help="Print OpenTelemetry spans")
    return common


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(
        prog="trackdeg",
        description="Multivariate Wiener degradation modelling of track geometry",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="Exit codes: 0 ok, 1 usage/config error, 2 data error, 3 not converged",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    common = [_common_flags()]

    p = sub.add_parser("simulate", parents=common, help="Generate a synthetic dataset")
    p.add_argument("scenario", nargs="?", help="Scenario file (TOML)")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("ingest", parents=common, help="Raw channel files to segment series")
    p.add_argument("raw", nargs="*", help="Raw channel files")
    p.set_defaults(handler=cmd_ingest)

    p = sub.add_parser("identify", parents=common, help="Flag tamping intervals")
    p.add_argument("series", nargs="?", help="Segment-series file")
    p.add_argument("--work-orders", help="Work-order file (segment_id,date)")
    p.set_defaults(handler=cmd_identify)

    p = sub.add_parser("fit", parents=common, help="Fit the hierarchical model")
    p.add_argument("series", nargs="?", help="Flagged segment-series file")
    p.add_argument("--model", choices=[k.value for k in ModelKind], help="Model kind")
    p.add_argument(
        "--holdout", type=int, default=0, help="Drop the last N inspections of every segment"
    )
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("validate", parents=common, help="Score held-out inspections")
    p.add_argument("series", nargs="?", help="Full flagged segment-series file")
    p.add_argument("--posterior", help="Posterior fitted with --holdout")
    p.add_argument("--holdout", type=int, help="Held-out inspections per segment")
    p.set_defaults(handler=cmd_validate)

    p = sub.add_parser("predict", parents=common, help="Predictive bands")
    p.add_argument("--posterior", help="Posterior file")
    p.add_argument("--segment", type=int, help="Segment id (default: all)")
    p.add_argument("--horizon", type=float, help="Days after the last inspection")
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("hit", parents=common, help="Threshold hitting times")
    p.add_argument("--posterior", help="Posterior file")
    p.add_argument("--segment", type=int, help="Segment id (default: all)")
    p.add_argument("--paths", type=int, help="Simulated paths per segment")
    p.set_defaults(handler=cmd_hit)

    p = sub.add_parser("compare", parents=common, help="Multivariate vs univariate hitting times")
    p.add_argument("--posterior", help="Multivariate posterior file")
    p.add_argument("--univariate", help="Univariate posterior file")
    p.add_argument("--segment", type=int, help="Segment id (default: all)")
    p.add_argument("--paths", type=int, help="Simulated paths per segment")
    p.set_defaults(handler=cmd_compare)

    p = sub.add_parser("summarize", parents=common, help="Posterior summary tables")
    p.add_argument("--posterior", help="Posterior file")
    p.add_argument("--draws", type=int, default=1000, help="Predictive z+ draws")
    p.set_defaults(handler=cmd_summarize)
    return parser


Handler = Callable[[argparse.Namespace, PipelineConfig], int]


def main(argv: Sequence[str] | None = None) -> int:
    """Main entry point for the CLI."""
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.debug, args.verbose)
    setup_tracing(args.trace)

    try:
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        config = load_config(args.config).with_overrides(
            seed=args.seed,
            threads=args.threads,
            out=Path(args.out) if args.out else None,
        )
        handler: Handler = args.handler
        with get_tracer().start_as_current_span(args.command):
            return handler(args, config)
    except ConfigError as e:
        console.print(f"[red]Config error: {e}[/]")
        return EXIT_CONFIG
    except ConvergenceError as e:
        console.print(f"[red]Not converged: {e}[/]")
        return EXIT_NOT_CONVERGED
    except InitializationError as e:
        console.print(f"[red]Initialization failed: {e}[/]")
        return EXIT_DATA
    except (DataError, DecompositionError, NumericError) as e:
        console.print(f"[red]Data error: {e}[/]")
        return EXIT_DATA
    except ValueError as e:
        logger.debug("Unclassified value error", exc_info=True)
        console.print(f"[red]Error: {e}[/]")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
