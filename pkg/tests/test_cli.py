from pathlib import Path

import pandas as pd
import pytest

from isac_locate import harness
from isac_locate.cli import EXIT_ASSERTION, EXIT_CONFIG, EXIT_OK, EXIT_USAGE, build_parser, main
from isac_locate.scenario import lemma1_scenario

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
EXAMPLE1_BS = "scenario.bs_coords=0,3; 5,0; 0,-4"


# --- Test parser ---

def test_parser_maps_flags():
    args = build_parser().parse_args(["experiment", "--kind", "theorem1", "--trials", "5", "--seed", "3", "-q"])
    assert args.kind == "theorem1" and args.trials == 5 and args.seed == 3
    assert args.quiet and not args.verbose


def test_unknown_command_is_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["bogus"])
    assert info.value.code == 2


def test_verbose_and_quiet_conflict():
    with pytest.raises(SystemExit) as info:
        main(["ghosts", "-v", "-q"])
    assert info.value.code == 2


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--version"])
    assert info.value.code == 0
    assert "isac-locate" in capsys.readouterr().out


# --- Test ghosts ---

def test_ghosts_example1(tmp_path, capsys):
    assert main(["ghosts", "-c", str(CONFIGS / "example1.ini"), "-o", str(tmp_path), "-q"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "ghost detected, tau=2" in out
    assert out.count("solution") == 2
    assert len(pd.read_csv(tmp_path / "ghosts.csv")) == 4
    assert (tmp_path / "effective_config.ini").exists()


def test_ghosts_example2(tmp_path, capsys):
    assert main(["ghosts", "-c", str(CONFIGS / "example2.ini"), "-o", str(tmp_path), "-q"]) == EXIT_OK
    assert "no ghost, tau=1" in capsys.readouterr().out


def test_ghosts_from_range_file(tmp_path, capsys):
    argv = ["ghosts", "--ranges", str(CONFIGS / "example1_ranges.csv"), "--set", EXAMPLE1_BS, "-o", str(tmp_path), "-q"]
    assert main(argv) == EXIT_OK
    assert "tau=2" in capsys.readouterr().out


def test_ghosts_without_scenario_is_config_error(tmp_path, capsys):
    assert main(["ghosts", "-o", str(tmp_path), "-q"]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_missing_config_file(tmp_path, capsys):
    assert main(["ghosts", "-c", str(tmp_path / "nope.ini"), "-q"]) == EXIT_CONFIG
    assert "not found" in capsys.readouterr().err


def test_bad_override_value(tmp_path):
    argv = ["ghosts", "-c", str(CONFIGS / "example1.ini"), "--set", "ofdm.max_paths=900", "-o", str(tmp_path), "-q"]
    assert main(argv) == EXIT_CONFIG


# --- Test range and localize ---

def test_range_noiseless(tmp_path, capsys):
    argv = ["range", "-c", str(CONFIGS / "example1.ini"), "--set", "ranging.noiseless=true", "-o", str(tmp_path), "-q"]
    assert main(argv) == EXIT_OK
    lines = [line for line in capsys.readouterr().out.splitlines() if line.startswith("BS ")]
    assert len(lines) == 3
    frame = pd.read_csv(tmp_path / "range_sets.csv")
    assert list(frame.columns) == ["bs_id", "rank", "range_m"]
    assert sorted(frame["bs_id"].unique()) == [1, 2, 3]


def test_localize_from_range_file(tmp_path, capsys):
    argv = [
        "localize",
        "--ranges", str(CONFIGS / "example1_ranges.csv"),
        "--set", EXAMPLE1_BS,
        "--set", "localization.sigma=0.5",
        "-o", str(tmp_path),
        "-q",
    ]
    assert main(argv) == EXIT_OK
    out = capsys.readouterr().out
    assert out.startswith("objective=")
    assert "association:" in out
    assert len(pd.read_csv(tmp_path / "localization.csv")) == 2


def test_localize_oracle_on_fixed_scenario(tmp_path, capsys):
    argv = ["localize", "-c", str(CONFIGS / "example2.ini"), "--oracle", "-o", str(tmp_path), "-q"]
    assert main(argv) == EXIT_OK
    assert "candidates evaluated=4" in capsys.readouterr().out


# --- Test experiment ---

def test_experiment_theorem2(tmp_path, capsys):
    argv = [
        "experiment",
        "-c", str(CONFIGS / "theorem2.ini"),
        "--trials", "3",
        "--set", "experiment.k_values=2",
        "-o", str(tmp_path),
        "-q",
    ]
    assert main(argv) == EXIT_OK
    assert "error_prob" in capsys.readouterr().out
    frame = pd.read_csv(tmp_path / "report.csv")
    assert list(frame["error_prob"]) == [0.0]


def test_experiment_failure_exit_code(tmp_path, capsys, monkeypatch):
    monkeypatch.setattr(harness, "_lemma1_cases", lambda: [("forced", lemma1_scenario(), False)])
    argv = ["experiment", "-c", str(CONFIGS / "lemma1.ini"), "-o", str(tmp_path), "-q"]
    assert main(argv) == EXIT_ASSERTION
    err = capsys.readouterr().err
    assert "replay with: isac-locate ghosts --config" in err
    assert (tmp_path / "failures" / "failure_001.ini").exists()


# --- Test validate ---

def test_validate_ok(capsys):
    assert main(["validate", "-c", str(CONFIGS / "localization_100mhz.ini")]) == EXIT_OK
    assert capsys.readouterr().out.strip().endswith(": ok")


def test_validate_reports_lines(tmp_path, capsys):
    path = tmp_path / "bad.ini"
    path.write_text("[ofdm]\ncp_length = 232\nmax_paths = 300\n", encoding="utf-8")
    assert main(["validate", "-c", str(path)]) == EXIT_CONFIG
    assert f"{path}:1: ofdm: L must be < Q" in capsys.readouterr().out


def test_validate_needs_config(capsys):
    assert main(["validate"]) == EXIT_USAGE
