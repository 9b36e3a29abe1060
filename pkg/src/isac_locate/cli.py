"""isac-locate command line: single-scenario runs, experiments and config checks."""

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from pydantic import ValidationError

from .association import detect_ghosts, exhaustive_ml_oracle
from .config import LOG_LEVEL
from .errors import ConfigError, ExperimentAssertionError, IsacError
from .harness import run_experiment
from .io import atomic_write_text, read_points, read_range_sets, write_frame, write_range_sets
from .localization import ml_localize
from .models import ExperimentConfig, Scenario
from .ofdm import observe_all
from .ranging import estimate_all_range_sets, quantized_range_sets, true_range_sets
from .scenario import (
    GainModel,
    build_channel_taps,
    check_resolvable,
    random_scenario,
    resample_targets_until_resolvable,
    scenario_from_settings,
)
from .settings import dump_config, load_config, validate_config
from .version import __version__

logger = logging.getLogger("isac-locate.cli")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_ASSERTION = 4


# --- Argument parsing ---


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", "-c", type=Path, help="INI run configuration")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="Override one config value (repeatable)",
    )
    parser.add_argument("--seed", type=int, help="Master seed (experiment.seed)")
    parser.add_argument("--output-dir", "-o", type=Path, help="Output directory (output.dir)")
    parser.add_argument("--workers", type=int, help="Worker processes (experiment.workers)")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true")
    verbosity.add_argument("-q", "--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="isac-locate",
        description="Two-phase device-free target localization in OFDM cellular networks",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("range", help="Phase I: LASSO range estimation on one scenario")
    _common(p)

    p = sub.add_parser("localize", help="Phase II: joint association and localization")
    _common(p)
    p.add_argument("--ranges", type=Path, help="Range sets CSV (bs_id,rank,range_m)")
    p.add_argument("--oracle", action="store_true", help="Exhaustive search instead of the pruned ML search")

    p = sub.add_parser("ghosts", help="Count coordinate sets consistent with perfect ranges")
    _common(p)
    p.add_argument("--ranges", type=Path, help="Range sets CSV (bs_id,rank,range_m)")

    p = sub.add_parser("experiment", help="Monte Carlo experiment")
    _common(p)
    p.add_argument("--kind", choices=["range-error", "localization-error", "theorem1", "theorem2", "lemma1"])
    p.add_argument("--trials", type=int)

    p = sub.add_parser("validate", help="Check a config file and report problems by line")
    _common(p)
    return parser


def _overrides(args: argparse.Namespace) -> list[str]:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"experiment.seed={args.seed}")
    if args.workers is not None:
        overrides.append(f"experiment.workers={args.workers}")
    if args.output_dir is not None:
        overrides.append(f"output.dir={args.output_dir}")
    if getattr(args, "kind", None):
        overrides.append(f"experiment.kind={args.kind}")
    if getattr(args, "trials", None) is not None:
        overrides.append(f"experiment.trials={args.trials}")
    return overrides


def _setup_logging(args: argparse.Namespace) -> None:
    level = LOG_LEVEL
    if args.verbose:
        level = "DEBUG"
    elif args.quiet:
        level = "WARNING"
    logging.basicConfig(level=level, format="%(asctime)s [%(levelname)s] %(name)s: %(message)s")
    logging.getLogger("isac-locate").setLevel(level)


# --- Scenario helpers ---


def _rng(config: ExperimentConfig) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(config.experiment.seed))


def _bs_coords(config: ExperimentConfig) -> list[tuple[float, float]]:
    s = config.scenario
    if s.bs_coords is not None:
        return list(s.bs_coords)
    if s.bs_file:
        return read_points(s.bs_file)
    raise ConfigError("BS coordinates required: set scenario.bs_coords or scenario.bs_file")


def _has_fixed_scenario(config: ExperimentConfig) -> bool:
    s = config.scenario
    return (s.bs_coords is not None or bool(s.bs_file)) and (s.target_coords is not None or bool(s.target_file))


def _scenario(config: ExperimentConfig, rng: np.random.Generator, check_cp: bool = True) -> Scenario:
    """Fixed scenario from the config, or a random resolvable one drawn from ``rng``."""
    if _has_fixed_scenario(config):
        return scenario_from_settings(config.scenario)
    exp = config.experiment
    base = random_scenario(exp.n_bs, exp.k_values[0], config.scenario.region_side, rng)
    scenario, rejections = resample_targets_until_resolvable(base, config.ofdm, rng, check_cp=check_cp)
    logger.info(f"Random scenario: M={scenario.n_bs}, K={scenario.n_targets} ({rejections} rejections)")
    return scenario


def _output_dir(config: ExperimentConfig) -> Path:
    out = Path(config.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "effective_config.ini", dump_config(config))
    return out


def _print_points(points) -> None:
    for k, (x, y) in enumerate(points, start=1):
        print(f"  target {k}: ({x:.6f}, {y:.6f})")


# --- Subcommands ---


def cmd_range(config: ExperimentConfig) -> int:
    rng = _rng(config)
    scenario = _scenario(config, rng)
    params = config.ofdm
    check_resolvable(scenario, params)
    channel = build_channel_taps(
        scenario, params, GainModel.from_settings(config.scenario), rng, bistatic=config.ranging.interference
    )
    observations = observe_all(channel, params, rng, noiseless=config.ranging.noiseless)
    estimates = estimate_all_range_sets(observations, params, config.ranging)

    for m, est in enumerate(estimates, start=1):
        ranges = ", ".join(f"{r:.4f}" for r in est.range_set.ranges)
        note = "" if est.lasso.converged else " (not converged)"
        print(f"BS {m}: [{ranges}]{note}")
    out = _output_dir(config)
    write_range_sets([est.range_set for est in estimates], out / "range_sets.csv")
    logger.info(f"Range sets written to {out / 'range_sets.csv'}")
    return EXIT_OK


def cmd_localize(config: ExperimentConfig, ranges_path: Optional[Path], oracle: bool) -> int:
    params = config.ofdm
    truth = None
    if ranges_path is not None:
        range_sets = read_range_sets(ranges_path)
        bs_coords = _bs_coords(config)
        if config.scenario.target_coords is not None or config.scenario.target_file:
            truth = scenario_from_settings(config.scenario).target_array
    else:
        scenario = _scenario(config, _rng(config), check_cp=False)
        range_sets = quantized_range_sets(scenario, params)
        bs_coords = scenario.bs_coords
        truth = scenario.target_array

    sigma = config.localization.resolve_sigma(params.delta_d)
    if oracle:
        result = exhaustive_ml_oracle(range_sets, bs_coords, sigma)
    else:
        delta0 = config.localization.resolve_delta0(params.delta_d, sigma)
        result = ml_localize(range_sets, bs_coords, sigma, delta0, config.localization)

    print(f"objective={result.objective:.6g}, candidates evaluated={result.candidates_evaluated}")
    _print_points(result.coords)
    print("association:")
    print(result.association.row_string())
    out = _output_dir(config)
    write_frame(result.to_frame(truth), out / "localization.csv")
    return EXIT_OK


def cmd_ghosts(config: ExperimentConfig, ranges_path: Optional[Path]) -> int:
    if ranges_path is not None:
        range_sets = read_range_sets(ranges_path)
        bs_coords = _bs_coords(config)
    else:
        if not _has_fixed_scenario(config):
            raise ConfigError("ghosts needs a fixed scenario (bs_coords and target_coords) or --ranges")
        scenario = scenario_from_settings(config.scenario)
        range_sets = true_range_sets(scenario)
        bs_coords = scenario.bs_coords

    report = detect_ghosts(range_sets, bs_coords, config.localization.eps_geo)
    if report.has_ghost:
        print(f"ghost detected, tau={report.tau}")
    else:
        print(f"no ghost, tau={report.tau}")
    for i, solution in enumerate(report.solutions, start=1):
        print(f"solution {i}:")
        _print_points(solution.coords)
    out = _output_dir(config)
    write_frame(report.to_frame(), out / "ghosts.csv")
    return EXIT_OK


def cmd_experiment(config: ExperimentConfig) -> int:
    out = Path(config.output.dir)
    report = run_experiment(config, out)
    frame = report.report_frame()
    print(frame.to_string(index=False))
    print(f"wall clock {report.wall_clock:.1f}s, outputs in {out}")
    return EXIT_OK


def cmd_validate(path: Optional[Path], overrides: Sequence[str]) -> int:
    if path is None:
        print("validate needs --config", file=sys.stderr)
        return EXIT_USAGE
    diagnostics = validate_config(path, overrides)
    for d in diagnostics:
        print(d)
    if diagnostics:
        return EXIT_CONFIG
    print(f"{path}: ok")
    return EXIT_OK


# --- Entry point ---


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args)
    overrides = _overrides(args)

    if args.command == "validate":
        return cmd_validate(args.config, overrides)

    try:
        config = load_config(args.config, overrides)
        if args.command == "range":
            return cmd_range(config)
        if args.command == "localize":
            return cmd_localize(config, args.ranges, args.oracle)
        if args.command == "ghosts":
            return cmd_ghosts(config, args.ranges)
        return cmd_experiment(config)
    except (ConfigError, ValidationError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ExperimentAssertionError as e:
        print(f"assertion failed: {e}", file=sys.stderr)
        if e.replay_path:
            print(f"replay with: isac-locate ghosts --config {e.replay_path}", file=sys.stderr)
        return EXIT_ASSERTION
    except IsacError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
