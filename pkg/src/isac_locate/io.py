"""CSV import/export and atomic file writes."""

import logging
import os
import tempfile
from pathlib import Path
from typing import Sequence, Union

import pandas as pd

from .errors import ConfigError

logger = logging.getLogger("isac-locate.io")

PathLike = Union[str, Path]


def atomic_write_text(path: PathLike, text: str) -> Path:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def write_frame(frame: pd.DataFrame, path: PathLike) -> Path:
    out = atomic_write_text(path, frame.to_csv(index=False, float_format="%.10g"))
    logger.debug(f"Wrote {len(frame)} rows to {out}")
    return out


def _read_csv(path: PathLike, columns: Sequence[str]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"File not found: {path}")
    frame = pd.read_csv(path)
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise ConfigError(f"{path}: missing column(s) {', '.join(missing)}")
    return frame


# --- Coordinates ---


def read_points(path: PathLike) -> list[tuple[float, float]]:
    """Coordinate list from a CSV with ``x,y`` columns."""
    frame = _read_csv(path, ["x", "y"])
    return [(float(x), float(y)) for x, y in zip(frame["x"], frame["y"])]


def write_points(points, path: PathLike) -> Path:
    frame = pd.DataFrame(list(points), columns=["x", "y"])
    return write_frame(frame, path)


# --- Range sets ---


def range_sets_to_frame(range_sets) -> pd.DataFrame:
    rows = [
        {"bs_id": m + 1, "rank": g + 1, "range_m": r}
        for m, rs in enumerate(range_sets)
        for g, r in enumerate(rs.ranges)
    ]
    return pd.DataFrame(rows, columns=["bs_id", "rank", "range_m"])


def write_range_sets(range_sets, path: PathLike) -> Path:
    return write_frame(range_sets_to_frame(range_sets), path)


def read_range_sets(path: PathLike):
    """Range sets from ``bs_id,rank,range_m``; BS ids must run 1..M."""
    from .ranging import RangeSet

    frame = _read_csv(path, ["bs_id", "rank", "range_m"])
    ids = sorted(frame["bs_id"].unique())
    if ids != list(range(1, len(ids) + 1)):
        raise ConfigError(f"{path}: bs_id must cover 1..M without gaps (got {ids})")
    sets = []
    for bs_id in ids:
        group = frame[frame["bs_id"] == bs_id].sort_values("rank")
        sets.append(RangeSet.from_values(group["range_m"].astype(float)))
    return sets
