import json
import pickle

import pytest

from isac_locate.metrics import (
    ErrorRateAggregator,
    TrialContext,
    init_trial_logger,
    shutdown_trial_logger,
)
from isac_locate.metrics.aggregator import wilson_interval


# --- Test Wilson interval ---

def test_wilson_interval_zero_errors():
    low, high = wilson_interval(0, 10000)
    assert low == pytest.approx(0.0, abs=1e-12)
    assert high == pytest.approx(3.84 / (10000 + 3.84), rel=0.01)


def test_wilson_interval_contains_estimate():
    low, high = wilson_interval(30, 100)
    assert low < 0.3 < high
    assert 0.2 < low and high < 0.4


def test_wilson_interval_no_events():
    assert wilson_interval(0, 0) == (0.0, 1.0)


# --- Test trial context ---

def test_trial_context_defaults_and_outcome():
    ctx = TrialContext("theorem2", "theorem2 M=4", 7, 3, (0, 3, 7))
    ctx.record_outcome(2, 3)
    rec = ctx.finalize()
    assert rec["K"] == 3 and rec["trial"] == 7
    assert rec["seed_key"] == [0, 3, 7]
    assert rec["errors"] == 2 and rec["events"] == 3 and rec["error"]
    assert not rec["degenerate"]
    assert rec["wall_time"] >= 0


def test_trial_context_error_marks_degenerate():
    ctx = TrialContext("range-error", "p=6W", 0, 2, (0, 2, 0))
    ctx.set_error(ValueError("bad draw"))
    rec = ctx.finalize()
    assert rec["degenerate"]
    assert rec["error_type"] == "ValueError: bad draw"


def test_trial_context_pickles():
    ctx = TrialContext("lemma1", "case", 0, 2, (0, 0, 0))
    ctx.mark_stage("tau", 2)
    assert pickle.loads(pickle.dumps(ctx)).data["tau"] == 2


# --- Test aggregator ---

def test_aggregator_groups_by_curve_and_k():
    agg = ErrorRateAggregator()
    for errors in (0, 1, 0, 1):
        agg.record({"curve": "a", "K": 2, "errors": errors, "events": 1})
    agg.record({"curve": "a", "K": 3, "errors": 2, "events": 3, "degenerate": True, "rejections": 4})
    agg.record({"curve": "b", "K": 2, "errors": 0, "events": 1})
    rows = agg.snapshot()
    assert [(r["curve"], r["K"]) for r in rows] == [("a", 2), ("a", 3), ("b", 2)]
    first, second, third = rows
    assert first["error_prob"] == 0.5 and first["trials"] == 4
    assert second["error_prob"] == pytest.approx(2 / 3)
    assert second["degenerate"] == 1 and second["rejections"] == 4
    assert third["error_prob"] == 0.0
    assert first["ci_low"] <= 0.5 <= first["ci_high"]


def test_empty_aggregator():
    assert ErrorRateAggregator().snapshot() == []


# --- Test trial logger ---

def test_trial_logger_writes_jsonl(tmp_path):
    path = tmp_path / "out" / "trials.jsonl"
    trial_logger = init_trial_logger(path)
    for i in range(5):
        trial_logger.log({"trial": i, "K": 2, "bs_coords": [(0.0, 1.0)]})
    shutdown_trial_logger(trial_logger)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert [json.loads(line)["trial"] for line in lines] == [0, 1, 2, 3, 4]
    assert json.loads(lines[0])["bs_coords"] == [[0.0, 1.0]]
