"""Run configuration files: INI sections validated into ExperimentConfig.

Each INI section maps onto one pydantic model, so unknown keys and bad
values surface as ValidationErrors. ``--set section.key=value`` overrides
are merged into the raw values before validation.
"""

import configparser
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Optional, Union

from pydantic import ValidationError

from .errors import ConfigError
from .models import ExperimentConfig, Scenario, format_points

logger = logging.getLogger("isac-locate.settings")

SECTIONS = ("scenario", "ofdm", "ranging", "localization", "experiment", "output")
_POINT_FIELDS = {"bs_coords", "target_coords"}
_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^\s*([A-Za-z0-9_.\-]+)\s*[=:]")


@dataclass(frozen=True)
class Diagnostic:
    path: str
    line: int
    message: str

    def __str__(self) -> str:
        return f"{self.path}:{self.line}: {self.message}"


# --- Parsing ---


def parse_override(text: str) -> tuple[str, str, str]:
    """``section.key=value`` -> (section, key, value)."""
    if "=" not in text:
        raise ConfigError(f"Override '{text}' must look like section.key=value")
    lhs, value = text.split("=", 1)
    if "." not in lhs:
        raise ConfigError(f"Override '{text}' must name a section: section.key=value")
    section, key = (p.strip() for p in lhs.split(".", 1))
    if section not in SECTIONS:
        raise ConfigError(f"Unknown section '{section}' in override '{text}'")
    return section, key, value.strip()


def _read_ini(path: Path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as f:
            parser.read_file(f)
    except FileNotFoundError as e:
        raise ConfigError(f"Config file not found: {path}") from e
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from e
    return parser


def _raw_sections(parser: configparser.ConfigParser, base_dir: Optional[Path]) -> dict[str, dict[str, Any]]:
    raw: dict[str, dict[str, Any]] = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"Unknown section [{section}]; expected one of {', '.join(SECTIONS)}")
        values = {}
        for key, value in parser.items(section):
            if value.strip() == "":
                continue  # empty means "use the default"
            if key in ("bs_file", "target_file") and base_dir is not None:
                candidate = Path(value)
                if not candidate.is_absolute():
                    value = str(base_dir / candidate)
            values[key] = value
        raw[section] = values
    return raw


def _merge(raw: dict[str, dict[str, Any]], overrides: Iterable[str]) -> dict[str, dict[str, Any]]:
    for text in overrides:
        section, key, value = parse_override(text)
        raw.setdefault(section, {})[key] = value
    return raw


def config_from_mapping(raw: dict[str, dict[str, Any]]) -> ExperimentConfig:
    return ExperimentConfig.model_validate(raw)


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Iterable[str] = (),
) -> ExperimentConfig:
    """Read an INI file (optional), apply overrides, validate.

    Raises ConfigError for unreadable files or unknown sections, and
    pydantic ValidationError for bad values.
    """
    raw: dict[str, dict[str, Any]] = {}
    if path is not None:
        path = Path(path)
        raw = _raw_sections(_read_ini(path), path.parent)
        logger.debug(f"Loaded config sections {list(raw)} from {path}")
    return config_from_mapping(_merge(raw, overrides))


# --- Echo ---


def _format_value(key: str, value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if key in _POINT_FIELDS:
        return format_points(value)
    if key == "allocation":
        return "; ".join(",".join(str(n) for n in subset) for subset in value)
    if isinstance(value, (list, tuple)):
        return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(config: ExperimentConfig) -> str:
    """INI text that re-parses to an equal ExperimentConfig (unset values omitted)."""
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        for key, value in getattr(config, section).model_dump().items():
            if value is None:
                continue
            lines.append(f"{key} = {_format_value(key, value)}")
        lines.append("")
    return "\n".join(lines)


# --- Validation with line numbers ---


def _line_index(path: Path) -> dict[tuple[str, Optional[str]], int]:
    """Map (section, key) and (section, None) to 1-based line numbers."""
    index: dict[tuple[str, Optional[str]], int] = {}
    section = None
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if m := _SECTION_RE.match(line):
            section = m.group(1).strip()
            index.setdefault((section, None), lineno)
        elif section and (m := _KEY_RE.match(line)):
            index.setdefault((section, m.group(1).strip().lower()), lineno)
    return index


def _locate(index, loc: tuple) -> int:
    section = str(loc[0]) if loc else None
    key = str(loc[1]) if len(loc) > 1 else None
    return index.get((section, key)) or index.get((section, None)) or 1


def validate_config(path: Union[str, Path], overrides: Iterable[str] = ()) -> list[Diagnostic]:
    """Every problem in a config file as ``path:line: message``; never raises on content."""
    path = Path(path)
    if not path.exists():
        return [Diagnostic(str(path), 0, "file not found")]
    try:
        raw = _raw_sections(_read_ini(path), path.parent)
    except ConfigError as e:
        return [Diagnostic(str(path), 1, str(e))]
    index = _line_index(path)

    try:
        config = config_from_mapping(_merge(raw, overrides))
    except ConfigError as e:
        return [Diagnostic(str(path), 1, str(e))]
    except ValidationError as e:
        return [
            Diagnostic(
                str(path),
                _locate(index, err["loc"]),
                f"{'.'.join(str(p) for p in err['loc'])}: {err['msg'].removeprefix('Value error, ')}",
            )
            for err in e.errors()
        ]

    diagnostics = []
    s = config.scenario
    if s.bs_coords is not None and s.target_coords is not None:
        try:
            Scenario(bs_coords=s.bs_coords, target_coords=s.target_coords, region_side=s.region_side)
        except ValidationError as e:
            line = index.get(("scenario", "bs_coords")) or index.get(("scenario", None)) or 1
            for err in e.errors():
                diagnostics.append(Diagnostic(str(path), line, f"scenario: {err['msg'].removeprefix('Value error, ')}"))
    n_bs = len(s.bs_coords) if s.bs_coords is not None else config.experiment.n_bs
    alloc = config.ofdm.allocation
    if alloc is not None and len(alloc) != n_bs:
        diagnostics.append(
            Diagnostic(
                str(path),
                index.get(("ofdm", "allocation"), 1),
                f"ofdm.allocation lists {len(alloc)} BSs but the scenario has {n_bs}",
            )
        )
    return diagnostics
