#!/usr/bin/env python3
"""
🩻 FLUORO CALIBRATE
Command-line surface of the toolkit:

    simulate     synthetic bead-phantom observations + ground truth
    calibrate    robust self-calibration of one or two fluoroscopes
    triangulate  3D points from corrected observations
    evaluate     accuracy of a calibration on held-out exposures
    report       merge evaluation runs into one results table

Exit codes: 0 success, 1 bad input / format / config or refused artifact,
2 no convergence, 3 divergence, 4 any other calibration error.
"""

import argparse
import logging
import os
import sys
from typing import Optional, Sequence

try:
    from .calibration_errors import CalibrationError, FormatError, NoConvergence, Diverged, EvaluationError
    from .network import Scheme, InitialValues, filter_observations
    from .calibration_loop import LoopSettings, calibrate_observations
    from .synthetic_generator import generate_from_config
    from .evaluation import (
        SplitSpec, EvaluationReport, CalibrationSolution, evaluate, triangulate, improvement, render_markdown,
        write_report_csv, read_report_csv, write_plot_data, plot_report, aggregate_reports
    )
    from .evaluation_io import (
        parse_observations, write_observations, write_initial_values, read_initial_values, write_truth,
        read_truth, write_points, write_fields, write_trace, CalibrationArtifact
    )
    from .utils.config import CalibrationConfig, setup_logger
except ImportError:
    from calibration_errors import CalibrationError, FormatError, NoConvergence, Diverged, EvaluationError
    from network import Scheme, InitialValues, filter_observations
    from calibration_loop import LoopSettings, calibrate_observations
    from synthetic_generator import generate_from_config
    from evaluation import (
        SplitSpec, EvaluationReport, CalibrationSolution, evaluate, triangulate, improvement, render_markdown,
        write_report_csv, read_report_csv, write_plot_data, plot_report, aggregate_reports
    )
    from evaluation_io import (
        parse_observations, write_observations, write_initial_values, read_initial_values, write_truth,
        read_truth, write_points, write_fields, write_trace, CalibrationArtifact
    )
    from utils.config import CalibrationConfig, setup_logger

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NO_CONVERGENCE = 2
EXIT_DIVERGED = 3
EXIT_FAILURE = 4


def _load_config(path: Optional[str]) -> CalibrationConfig:
    return CalibrationConfig.load(path) if path else CalibrationConfig()


def _prepare_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _is_biplanar(initial: InitialValues) -> bool:
    return initial.rop is not None and len(initial.intrinsics) == 2


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    config = _load_config(args.config)
    if args.seed is not None:
        config = CalibrationConfig.from_dict({**config.to_dict(), "seed": args.seed})
    out = _prepare_dir(args.out)
    print(f"🎲 Simulating {config.n_exposures} exposures of a {config.n_beads}-bead phantom "
          f"({'biplanar' if config.biplanar else 'single system'}, seed {config.seed})")
    dataset, initial = generate_from_config(config)
    write_observations(os.path.join(out, "observations.csv"), dataset.observations)
    write_truth(os.path.join(out, "truth.json"), dataset.truth)
    write_initial_values(os.path.join(out, "initial.json"), initial)
    print(f"✅ {len(dataset.observations)} observations written to {out}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    config = _load_config(args.config)
    scheme = Scheme.parse(args.scheme or config.scheme)
    settings = LoopSettings.from_config(config)
    observations = parse_observations(args.obs, config.sigma_default)
    initial = read_initial_values(args.init)
    biplanar = _is_biplanar(initial)

    exposures = sorted({o.exposure_id for o in observations})
    train, test = exposures, []
    if args.train_exposures is not None:
        pool, test = SplitSpec().split(exposures)
        train = SplitSpec.training_subset(pool, args.train_exposures)
    chosen = set(train)
    training = filter_observations([o for o in observations if o.exposure_id in chosen])

    print(f"🩻 Calibrating with scheme '{scheme.label}' on {len(train)} exposures "
          f"({len(training)} observations{', ROP constrained' if biplanar else ''})")
    result = calibrate_observations(training, initial, scheme, settings, biplanar)

    out = _prepare_dir(args.out)
    artifact = CalibrationArtifact.from_result(result, config, train, test)
    artifact.save(os.path.join(out, "calibration.json"))
    write_fields(out, result.fields)
    write_trace(os.path.join(out, "trace.csv"), result.loop_state)

    if not result.converged:
        print(f"⚠️ Outer loop stopped without converging after {result.iterations + 1} iterations; "
              "best state saved")
        return EXIT_NO_CONVERGENCE
    print(f"✅ Converged after {result.iterations + 1} outer iterations, BA cost {result.ba_cost:.6f}")
    return EXIT_OK


def cmd_triangulate(args) -> int:
    artifact = CalibrationArtifact.load(args.calib)
    observations = parse_observations(args.obs)
    points = triangulate(artifact.solution, observations)
    write_points(args.out, points)
    print(f"✅ {len(points)} points triangulated to {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    config = _load_config(args.config)
    settings = LoopSettings.from_config(config)
    artifact = CalibrationArtifact.load(args.calib)
    truth = read_truth(args.truth)
    observations = parse_observations(args.obs, config.sigma_default)
    if args.init:
        initial = read_initial_values(args.init)
    else:
        logger.info("No initial values given; starting the evaluation adjustments from the reference geometry")
        initial = InitialValues(truth.intrinsics, truth.poses, truth.points, truth.rop)

    trained = set(artifact.train_exposures or artifact.network.exposure_ids)
    held_out = set(artifact.test_exposures) or {o.exposure_id for o in observations} - trained
    test = [o for o in observations if o.exposure_id in held_out]
    if not test:
        raise EvaluationError("No held-out exposures to evaluate on")
    print(f"📏 Evaluating on {len(held_out)} held-out exposures")

    solution = artifact.solution
    biplanar = solution.biplanar
    baseline_result = calibrate_observations(list(artifact.network.observations), initial, Scheme.NONE, settings,
                                             biplanar)
    baseline = CalibrationSolution.from_result(baseline_result)
    size = len(trained)
    rows = []
    for scheme, candidate in ((Scheme.NONE, baseline), (solution.scheme, solution)):
        rmse, reprojection, protocol = evaluate(candidate, test, truth.points, initial, settings)
        rows.append(EvaluationReport(scheme, size, rmse, reprojection, artifact.network.redundancy(),
                                     protocol=protocol))
    rows[1].improvement = improvement(rows[0].average, rows[1].average)

    out = _prepare_dir(args.out)
    write_report_csv(rows, os.path.join(out, "report.csv"))
    table = render_markdown(rows)
    with open(os.path.join(out, "report.md"), "w", encoding="utf-8") as handle:
        handle.write(table)
    write_plot_data(rows, os.path.join(out, "plotdata.csv"))
    print(table, end="")
    print(f"✅ Report written to {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    paths = []
    for root, dirs, files in os.walk(args.runs):
        dirs.sort()
        if "report.csv" in files:
            paths.append(os.path.join(root, "report.csv"))
    if not paths:
        raise FormatError(f"{args.runs}: no report.csv found")
    rows = []
    for path in paths:
        rows.extend(read_report_csv(path))
    merged = aggregate_reports(rows)
    table = render_markdown(merged)
    with open(os.path.join(args.runs, "summary.md"), "w", encoding="utf-8") as handle:
        handle.write(table)
    write_plot_data(merged, os.path.join(args.runs, "summary_plotdata.csv"))
    if args.plot:
        try:
            plot_report(merged, os.path.join(args.runs, "summary.png"))
        except ImportError as e:
            logger.warning(f"⚠️ matplotlib not available, plot skipped: {e}")
    print(table, end="")
    print(f"✅ Merged {len(paths)} run(s) into {os.path.join(args.runs, 'summary.md')}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fluoro_calibrate",
                                     description="Robust self-calibration of X-ray fluoroscopes")
    parser.add_argument("--log-level", type=str, default=None, help="DEBUG, INFO, WARNING or ERROR")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="Generate a synthetic bead-phantom dataset")
    p.add_argument("--config", type=str, help="Flat JSON run configuration")
    p.add_argument("--seed", type=int, help="Override the config seed")
    p.add_argument("--out", type=str, required=True, help="Output directory")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("calibrate", help="Self-calibrate from observations and initial values")
    p.add_argument("--obs", type=str, required=True, help="Observation CSV")
    p.add_argument("--init", type=str, required=True, help="Initial values JSON")
    p.add_argument("--config", type=str, help="Flat JSON run configuration")
    p.add_argument("--scheme", type=str, help="none, knn, knn+iop, knn+smoothing or knn+iop+smoothing")
    p.add_argument("--train-exposures", type=int, help="Train on N exposures of the training half only")
    p.add_argument("--out", type=str, required=True, help="Output directory")
    p.set_defaults(handler=cmd_calibrate)

    p = sub.add_parser("triangulate", help="Triangulate corrected observations")
    p.add_argument("--calib", type=str, required=True, help="calibration.json")
    p.add_argument("--obs", type=str, required=True, help="Observation CSV")
    p.add_argument("--out", type=str, required=True, help="Output point CSV")
    p.set_defaults(handler=cmd_triangulate)

    p = sub.add_parser("evaluate", help="Evaluate a calibration on held-out exposures")
    p.add_argument("--calib", type=str, required=True, help="calibration.json")
    p.add_argument("--truth", type=str, required=True, help="Ground-truth JSON")
    p.add_argument("--obs", type=str, required=True, help="Observation CSV")
    p.add_argument("--init", type=str, help="Initial values JSON for the held-out adjustments")
    p.add_argument("--config", type=str, help="Flat JSON run configuration")
    p.add_argument("--out", type=str, required=True, help="Output directory")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("report", help="Merge evaluation runs into one table")
    p.add_argument("--runs", type=str, required=True, help="Directory searched for report.csv files")
    p.add_argument("--plot", action="store_true", help="Also render summary.png with matplotlib")
    p.set_defaults(handler=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logger("", args.log_level)
    try:
        return args.handler(args)
    except (FormatError, OSError) as e:
        logger.error(f"❌ {e}")
        return EXIT_INPUT
    except NoConvergence as e:
        logger.error(f"❌ {e}")
        return EXIT_NO_CONVERGENCE
    except Diverged as e:
        logger.error(f"❌ {e}")
        return EXIT_DIVERGED
    except CalibrationError as e:
        logger.error(f"❌ {e}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
