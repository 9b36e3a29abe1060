"""Monte Carlo experiment driver: range error, localization error and ghost checks.

Every trial draws from its own generator seeded by
SeedSequence(seed, spawn_key=(experiment, K, trial)), so results do not
depend on the worker count, and curves that are compared against each
other (transmit powers, range models) see the same scenarios.
"""

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from .association import detect_ghosts
from .config import METRICS_ENABLED, PROGRESS_ENABLED
from .errors import (
    EmptyFeasibleSet,
    ExperimentAssertionError,
    IsacError,
)
from .io import atomic_write_text, write_frame
from .localization import hungarian_assign, ml_localize, sample_noisy_ranges
from .metrics import ErrorRateAggregator, TrialContext, TrialLogger, init_trial_logger, shutdown_trial_logger
from .models import ExperimentConfig, Scenario
from .ofdm import observe_all
from .ranging import estimate_all_range_sets, quantized_range_sets, true_range_sets
from .retry import RelaxationConfig, retry_relaxed
from .scenario import (
    GainModel,
    build_channel_taps,
    check_resolvable,
    lemma1_scenario,
    random_scenario,
    resample_targets_until_resolvable,
)
from .settings import dump_config

logger = logging.getLogger("isac-locate.harness")

EXPERIMENT_CODES = {
    "range-error": 1,
    "localization-error": 2,
    "theorem1": 3,
    "theorem2": 4,
    "lemma1": 5,
}

# delta0 doubles on an empty G^(3), starting from at least one tap width
DELTA0_RELAXATION = RelaxationConfig(max_attempts=4, growth=2.0)


def trial_rng(seed: int, kind: str, n_targets: int, trial: int) -> np.random.Generator:
    ss = np.random.SeedSequence(seed, spawn_key=(EXPERIMENT_CODES[kind], n_targets, trial))
    return np.random.default_rng(ss)


@dataclass
class ExperimentReport:
    kind: str
    config: ExperimentConfig
    rows: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0
    failures: list[dict] = field(default_factory=list)

    @property
    def degenerate(self) -> int:
        return sum(r["degenerate"] for r in self.rows)

    @property
    def passed(self) -> bool:
        return not self.failures

    def report_frame(self) -> pd.DataFrame:
        columns = ["K", "error_prob", "ci_low", "ci_high", "trials", "degenerate", "curve", "errors", "events", "rejections"]
        return pd.DataFrame(self.rows, columns=columns)

    def plot_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [{"curve": r["curve"], "x": r["K"], "y": r["error_prob"]} for r in self.rows],
            columns=["curve", "x", "y"],
        )

    def error_prob(self, curve: str, k: int) -> float:
        for r in self.rows:
            if r["curve"] == curve and r["K"] == k:
                return r["error_prob"]
        raise KeyError(f"No row for curve={curve!r}, K={k}")


# --- Trial workers (top-level so they pickle) ---


def _range_error_trial(task: tuple) -> list[dict]:
    config, k, trial = task
    exp = config.experiment
    results = []
    for p in exp.tx_powers:
        curve = f"p={p:g}W"
        ctx = TrialContext("range-error", curve, trial, k, (exp.seed, k, trial))
        rng = trial_rng(exp.seed, "range-error", k, trial)
        try:
            base = random_scenario(exp.n_bs, k, config.scenario.region_side, rng)
            scenario, rejections = resample_targets_until_resolvable(base, config.ofdm, rng)
            ctx.mark_stage("rejections", rejections)
            params = config.ofdm.model_copy(update={"tx_power": p})
            true_taps = check_resolvable(scenario, params)
            channel = build_channel_taps(
                scenario,
                params,
                GainModel.from_settings(config.scenario),
                rng,
                bistatic=config.ranging.interference,
            )
            observations = observe_all(channel, params, rng, noiseless=config.ranging.noiseless)
            estimates = estimate_all_range_sets(observations, params, config.ranging)
            wrong = sum(est.support != set(int(t) for t in true_taps[m]) for m, est in enumerate(estimates))
            ctx.mark_stage("bs_with_support_error", wrong)
            ctx.record_outcome(int(wrong > 0), 1)
        except IsacError as e:
            logger.warning(f"range-error trial {trial} (K={k}, {curve}) degenerate: {e}")
            ctx.set_error(e)
            ctx.record_outcome(1, 1)
        results.append(ctx.finalize())
    return results


def _localize_for_curve(ranges, scenario: Scenario, sigma: float, config: ExperimentConfig):
    delta_d = config.ofdm.delta_d
    delta0 = config.localization.resolve_delta0(delta_d, sigma)
    return retry_relaxed(
        ml_localize,
        ranges,
        scenario.bs_array,
        sigma,
        param="delta0",
        initial=delta0,
        config=RelaxationConfig(DELTA0_RELAXATION.max_attempts, DELTA0_RELAXATION.growth, floor=2.0 * delta_d),
        exceptions=(EmptyFeasibleSet,),
        settings=config.localization,
    )


def target_errors(truth: np.ndarray, estimates: np.ndarray) -> np.ndarray:
    """Per-true-target distance to its estimate under the closest one-to-one matching."""
    cost = np.linalg.norm(truth[:, None, :] - estimates[None, :, :], axis=-1)
    perm, _ = hungarian_assign(cost)
    return cost[np.arange(len(truth)), perm]


def localization_curves(config: ExperimentConfig) -> list[tuple[str, Optional[float]]]:
    """(model label, sigma) pairs; sigma None means tap-midpoint ranges."""
    model = config.experiment.range_model
    curves: list[tuple[str, Optional[float]]] = []
    if model in ("true", "both"):
        curves.append(("true", None))
    if model in ("gaussian", "both"):
        curves.extend((f"gaussian s2={s2:g}", math.sqrt(s2)) for s2 in config.experiment.sigma2_values)
    return curves


def _localization_trial(task: tuple) -> list[dict]:
    config, k, trial = task
    exp = config.experiment
    params = config.ofdm
    results = []
    rng = trial_rng(exp.seed, "localization-error", k, trial)
    try:
        base = random_scenario(exp.n_bs, k, config.scenario.region_side, rng)
        scenario, rejections = resample_targets_until_resolvable(base, params, rng, check_cp=False)
    except IsacError as e:
        scenario, rejections, setup_error = None, 0, e
    else:
        setup_error = None

    for label, sigma in localization_curves(config):
        ctxs = [
            TrialContext("localization-error", f"{label}, r={r:g}", trial, k, (exp.seed, k, trial))
            for r in exp.radii
        ]
        try:
            if setup_error is not None:
                raise setup_error
            if sigma is None:
                ranges = quantized_range_sets(scenario, params)
                sigma_used = config.localization.resolve_sigma(params.delta_d)
            else:
                ranges = sample_noisy_ranges(scenario, sigma, rng)
                # weights need sigma > 0 even for zero-variance draws
                if config.localization.sigma is not None:
                    sigma_used = config.localization.sigma
                elif sigma > 0:
                    sigma_used = sigma
                else:
                    sigma_used = config.localization.resolve_sigma(params.delta_d)
            degenerate = any(rs.flagged for rs in ranges)
            result = _localize_for_curve(ranges, scenario, sigma_used, config)
            errors = target_errors(scenario.target_array, result.coords)
            for ctx, r in zip(ctxs, exp.radii):
                ctx.record_outcome(int(np.sum(errors > r)), k)
                ctx.mark_stage("rejections", rejections)
                ctx.mark_stage("feasible_set_size", result.feasible_set_size)
                ctx.mark_stage("candidates_evaluated", result.candidates_evaluated)
                ctx.mark_stage("max_error_m", float(np.max(errors)))
                ctx.set_flag("degenerate", degenerate)
        except IsacError as e:
            logger.warning(f"localization trial {trial} (K={k}, {label}) degenerate: {e}")
            for ctx in ctxs:
                ctx.set_error(e)
                ctx.record_outcome(k, k)
        results.extend(ctx.finalize() for ctx in ctxs)
    return results


def _ghost_trial(task: tuple) -> list[dict]:
    config, kind, k, n_bs, trial = task
    exp = config.experiment
    ctx = TrialContext(kind, f"{kind} M={n_bs}", trial, k, (exp.seed, k, trial))
    rng = trial_rng(exp.seed, kind, k, trial)
    try:
        scenario = random_scenario(n_bs, k, config.scenario.region_side, rng)
        ctx.mark_stage("bs_coords", scenario.bs_coords)
        ctx.mark_stage("target_coords", scenario.target_coords)
        report = detect_ghosts(true_range_sets(scenario), scenario.bs_array, config.localization.eps_geo)
        ctx.mark_stage("tau", report.tau)
        ctx.mark_stage("candidates_evaluated", report.candidates_checked)
        ctx.record_outcome(int(report.has_ghost), 1)
    except IsacError as e:
        logger.warning(f"{kind} trial {trial} (K={k}) degenerate: {e}")
        ctx.set_error(e)
        ctx.record_outcome(1, 1)
    return [ctx.finalize()]


# --- Execution ---


def run_trials(
    worker: Callable[[tuple], list[dict]],
    tasks: Sequence[tuple],
    workers: int = 1,
    desc: str = "trials",
) -> list[dict]:
    """Run ``worker`` over ``tasks``; results come back in task order."""
    progress = dict(total=len(tasks), desc=desc, disable=not PROGRESS_ENABLED, leave=False)
    records: list[dict] = []
    if workers <= 1:
        for task in tqdm(tasks, **progress):
            records.extend(worker(task))
        return records
    chunksize = max(1, len(tasks) // (workers * 8))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for out in tqdm(pool.map(worker, tasks, chunksize=chunksize), **progress):
            records.extend(out)
    return records


def _collect(
    kind: str,
    config: ExperimentConfig,
    records: list[dict],
    trial_logger: Optional[TrialLogger],
) -> ExperimentReport:
    aggregator = ErrorRateAggregator()
    for rec in records:
        aggregator.record(rec)
        if trial_logger is not None:
            trial_logger.log(rec)
    return ExperimentReport(kind=kind, config=config, rows=aggregator.snapshot())


def run_range_error(config: ExperimentConfig, trial_logger: Optional[TrialLogger] = None) -> ExperimentReport:
    exp = config.experiment
    tasks = [(config, k, t) for k in exp.k_values for t in range(exp.trials)]
    logger.info(f"range-error: {len(tasks)} trials x {len(exp.tx_powers)} powers, workers={exp.workers}")
    records = run_trials(_range_error_trial, tasks, exp.workers, "range-error")
    return _collect("range-error", config, records, trial_logger)


def run_localization_error(config: ExperimentConfig, trial_logger: Optional[TrialLogger] = None) -> ExperimentReport:
    exp = config.experiment
    tasks = [(config, k, t) for k in exp.k_values for t in range(exp.trials)]
    logger.info(
        f"localization-error: {len(tasks)} trials, Delta d={config.ofdm.delta_d:.4f} m, "
        f"region={config.scenario.region_side:g} m, workers={exp.workers}"
    )
    records = run_trials(_localization_trial, tasks, exp.workers, "localization-error")
    return _collect("localization-error", config, records, trial_logger)


def _lemma1_cases() -> list[tuple[str, Scenario, bool]]:
    return [
        ("perpendicular, symmetric", lemma1_scenario(), True),
        ("perpendicular, perturbed 0.1 m", lemma1_scenario(perturbation=(0.1, 0.0)), False),
        ("not perpendicular, symmetric", lemma1_scenario(perpendicular=False), False),
    ]


def run_theorem_checks(config: ExperimentConfig, trial_logger: Optional[TrialLogger] = None) -> ExperimentReport:
    """Ghost checks under perfect ranges; failures are collected, not raised."""
    exp = config.experiment
    kind = exp.kind
    if kind == "lemma1":
        records = []
        failures = []
        for label, scenario, expect_ghost in _lemma1_cases():
            ctx = TrialContext(kind, label, 0, scenario.n_targets, (exp.seed, 0, 0))
            report = detect_ghosts(true_range_sets(scenario), scenario.bs_array, config.localization.eps_geo)
            ctx.mark_stage("tau", report.tau)
            ctx.record_outcome(int(report.has_ghost != expect_ghost), 1)
            rec = ctx.finalize()
            records.append(rec)
            if rec["error"]:
                failures.append({"label": label, "scenario": scenario, "tau": report.tau})
        result = _collect(kind, config, records, trial_logger)
        result.failures = failures
        return result

    tasks = []
    for k in exp.k_values:
        n_bs = 2 * k + 1 if kind == "theorem1" else exp.n_bs
        tasks.extend((config, kind, k, n_bs, t) for t in range(exp.trials))
    logger.info(f"{kind}: {len(tasks)} perfect-range trials, workers={exp.workers}")
    records = run_trials(_ghost_trial, tasks, exp.workers, kind)
    result = _collect(kind, config, records, trial_logger)
    for rec in records:
        if rec["error"] and rec.get("bs_coords") is not None:
            scenario = Scenario(
                bs_coords=rec["bs_coords"],
                target_coords=rec["target_coords"],
                region_side=config.scenario.region_side,
            )
            result.failures.append(
                {"label": f"K={rec['K']} trial {rec['trial']}", "scenario": scenario, "tau": rec["tau"]}
            )
    return result


RUNNERS = {
    "range-error": run_range_error,
    "localization-error": run_localization_error,
    "theorem1": run_theorem_checks,
    "theorem2": run_theorem_checks,
    "lemma1": run_theorem_checks,
}


# --- Outputs ---


def _replay_config(config: ExperimentConfig, scenario: Scenario) -> ExperimentConfig:
    settings = config.scenario.model_copy(
        update={"bs_coords": list(scenario.bs_coords), "target_coords": list(scenario.target_coords)}
    )
    return config.model_copy(update={"scenario": settings})


def write_report(report: ExperimentReport, output_dir) -> list[Path]:
    """report.csv, plot_data.csv, effective_config.ini and failures/*.ini."""
    out = Path(output_dir)
    written = [
        write_frame(report.report_frame(), out / "report.csv"),
        write_frame(report.plot_frame(), out / "plot_data.csv"),
        atomic_write_text(out / "effective_config.ini", dump_config(report.config)),
    ]
    for i, failure in enumerate(report.failures, start=1):
        path = out / "failures" / f"failure_{i:03d}.ini"
        atomic_write_text(path, dump_config(_replay_config(report.config, failure["scenario"])))
        failure["replay_path"] = str(path)
        written.append(path)
    return written


def run_experiment(config: ExperimentConfig, output_dir=None, raise_on_failure: bool = True) -> ExperimentReport:
    """Run the configured experiment, write outputs, and enforce theorem checks.

    Raises ExperimentAssertionError (after writing outputs) when a ghost
    check fails and ``raise_on_failure`` is set.
    """
    kind = config.experiment.kind
    trial_logger = None
    if output_dir is not None and METRICS_ENABLED:
        Path(output_dir).mkdir(parents=True, exist_ok=True)
        (Path(output_dir) / "trials.jsonl").unlink(missing_ok=True)
        trial_logger = init_trial_logger(Path(output_dir) / "trials.jsonl")

    start = time.time()
    try:
        report = RUNNERS[kind](config, trial_logger)
    finally:
        if trial_logger is not None:
            shutdown_trial_logger(trial_logger)
    report.wall_clock = round(time.time() - start, 3)
    logger.info(f"{kind} finished in {report.wall_clock:.1f}s ({report.degenerate} degenerate trials)")

    if output_dir is not None:
        write_report(report, output_dir)

    if report.failures and raise_on_failure:
        first = report.failures[0]
        raise ExperimentAssertionError(
            f"{kind}: {len(report.failures)} check(s) failed; first: {first['label']} (tau={first['tau']})",
            replay_path=first.get("replay_path"),
        )
    return report
