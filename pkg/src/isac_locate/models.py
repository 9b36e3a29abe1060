"""Pydantic models for ISAC-LOCATE geometry, waveform and run configuration.

Numeric result types (tap vectors, range sets, associations) are plain
dataclasses next to the code that produces them; the models here are the
validated inputs.
"""

import logging
import math
from itertools import combinations
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .config import (
    DEFAULT_NOISE_FIGURE_DB,
    DEFAULT_OUTPUT_DIR,
    DEFAULT_TRIALS,
    DEFAULT_WORKERS,
    DELTA0_SIGMA_MULTIPLE,
    EPS_COLLINEAR,
    EPS_GEO,
    GN_MAX_ITER,
    GN_TOL,
    LASSO_MAX_ITER,
    LASSO_TOL,
    SPEED_OF_LIGHT,
    SUPPORT_NOISE_MULTIPLE,
    SUPPORT_REL_THRESHOLD,
    THERMAL_NOISE_DBM_PER_HZ,
)

logger = logging.getLogger("isac-locate.models")

Point = tuple[float, float]


# --- Parsing helpers (INI values arrive as strings) ---


def _split_list(value, cast):
    if isinstance(value, str):
        items = [v.strip() for v in value.replace(";", ",").split(",")]
        return [cast(v) for v in items if v]
    return value


def _parse_points(value):
    """Accept "x1,y1; x2,y2" or a list of pairs."""
    if isinstance(value, str):
        points = []
        for chunk in value.split(";"):
            chunk = chunk.strip()
            if not chunk:
                continue
            parts = [p.strip() for p in chunk.split(",")]
            if len(parts) != 2:
                raise ValueError(f"Point '{chunk}' must be 'x,y'")
            points.append((float(parts[0]), float(parts[1])))
        return points
    return value


def format_points(points) -> str:
    return "; ".join(f"{x!r},{y!r}" for x, y in points)


def collinear(p1, p2, p3, eps: float = EPS_COLLINEAR) -> bool:
    """Normalized triangle-area test: twice the area over the longest side squared."""
    a = np.asarray(p1, dtype=float)
    b = np.asarray(p2, dtype=float)
    c = np.asarray(p3, dtype=float)
    cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    longest = max(np.sum((b - a) ** 2), np.sum((c - a) ** 2), np.sum((c - b) ** 2))
    if longest == 0.0:
        return True
    return abs(cross) / longest < eps


def thermal_noise_power(bandwidth: float, noise_figure_db: float = DEFAULT_NOISE_FIGURE_DB) -> float:
    """Thermal floor over ``bandwidth`` plus noise figure, in watts."""
    dbm = THERMAL_NOISE_DBM_PER_HZ + noise_figure_db + 10.0 * math.log10(bandwidth)
    return 10.0 ** ((dbm - 30.0) / 10.0)


# --- Geometry ---


class Scenario(BaseModel):
    """BS and target placement inside a square region centered on the origin."""

    model_config = ConfigDict(frozen=True)

    bs_coords: list[Point] = Field(..., description="BS coordinates (a_m, b_m) in meters")
    target_coords: list[Point] = Field(..., description="Target coordinates (x_k, y_k) in meters")
    region_side: float = Field(..., gt=0, description="Side of the square region, meters")

    @field_validator("bs_coords", "target_coords", mode="before")
    @classmethod
    def parse_points(cls, v):
        return _parse_points(v)

    @model_validator(mode="after")
    def check_geometry(self) -> "Scenario":
        if len(self.bs_coords) < 3:
            raise ValueError(f"M must be >= 3 (got {len(self.bs_coords)})")
        if len(self.target_coords) < 1:
            raise ValueError("K must be >= 1")
        half = self.region_side / 2.0 + EPS_GEO
        for name, pts in (("BS", self.bs_coords), ("target", self.target_coords)):
            for i, (x, y) in enumerate(pts):
                if not (math.isfinite(x) and math.isfinite(y)):
                    raise ValueError(f"{name} {i + 1} has non-finite coordinates")
                if abs(x) > half or abs(y) > half:
                    raise ValueError(
                        f"{name} {i + 1} at ({x}, {y}) lies outside the {self.region_side} m region"
                    )
        for i, j, k in combinations(range(len(self.bs_coords)), 3):
            if collinear(self.bs_coords[i], self.bs_coords[j], self.bs_coords[k]):
                raise ValueError(f"BSs {i + 1}, {j + 1}, {k + 1} are collinear")
        return self

    @property
    def n_bs(self) -> int:
        return len(self.bs_coords)

    @property
    def n_targets(self) -> int:
        return len(self.target_coords)

    @property
    def bs_array(self) -> np.ndarray:
        return np.asarray(self.bs_coords, dtype=float)

    @property
    def target_array(self) -> np.ndarray:
        return np.asarray(self.target_coords, dtype=float)

    def distances(self) -> np.ndarray:
        """M x K matrix of BS-to-target distances d_{m,k}."""
        diff = self.bs_array[:, None, :] - self.target_array[None, :, :]
        return np.sqrt(np.sum(diff**2, axis=-1))


# --- OFDM waveform ---


AllocationScheme = Literal["disjoint-random", "interleaved", "contiguous"]


class OfdmParams(BaseModel):
    """Downlink OFDM numerology shared by every BS."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    n_subcarriers: int = Field(3300, ge=1, description="N")
    subcarrier_spacing: float = Field(30e3, gt=0, description="Delta f in Hz")
    cp_length: int = Field(232, ge=1, description="Q, samples")
    max_paths: int = Field(200, ge=1, description="L, samples")
    tx_power: float = Field(6.0, gt=0, description="p in watts")
    noise_power: Optional[float] = Field(None, ge=0, description="sigma_z^2 in watts; thermal if unset")
    noise_figure_db: float = Field(DEFAULT_NOISE_FIGURE_DB, description="Used for the thermal default")
    allocation_scheme: AllocationScheme = "disjoint-random"
    reuse_groups: Optional[int] = Field(None, ge=1, description="BSs sharing a group share sub-carriers")
    allocation: Optional[list[list[int]]] = Field(None, description="Per-BS 0-based sub-carrier indices")

    @field_validator("allocation", mode="before")
    @classmethod
    def parse_allocation(cls, v):
        """Accept "0,1,2; 3,4,5": one comma list per BS, separated by semicolons."""
        if isinstance(v, str):
            return [[int(n) for n in chunk.split(",") if n.strip()] for chunk in v.split(";") if chunk.strip()]
        return v

    @model_validator(mode="after")
    def check_numerology(self) -> "OfdmParams":
        if self.max_paths >= self.cp_length:
            raise ValueError("L must be < Q")
        if self.cp_length >= self.n_subcarriers:
            raise ValueError("Q must be < N")
        if self.allocation is not None:
            check_allocation(self.allocation, self.n_subcarriers)
        return self

    @property
    def bandwidth(self) -> float:
        return self.n_subcarriers * self.subcarrier_spacing

    @property
    def tap_width(self) -> float:
        """Range span of one delay tap, c0 / (2 N Delta f)."""
        return SPEED_OF_LIGHT / (2.0 * self.bandwidth)

    @property
    def delta_d(self) -> float:
        """Worst-case midpoint range error, c0 / (4 N Delta f)."""
        return SPEED_OF_LIGHT / (4.0 * self.bandwidth)

    @property
    def effective_noise_power(self) -> float:
        if self.noise_power is not None:
            return self.noise_power
        return thermal_noise_power(self.bandwidth, self.noise_figure_db)

    def with_allocation(self, allocation: list[list[int]]) -> "OfdmParams":
        return OfdmParams(**{**self.model_dump(), "allocation": allocation})


def check_allocation(allocation: list[list[int]], n_subcarriers: int) -> None:
    """Sets must be in range, and any two sets either identical (reuse) or disjoint."""
    seen: dict[frozenset, int] = {}
    union: set[int] = set()
    for m, subset in enumerate(allocation):
        s = frozenset(subset)
        if len(s) != len(subset):
            raise ValueError(f"Allocation for BS {m + 1} has duplicate sub-carriers")
        if any(n < 0 or n >= n_subcarriers for n in s):
            raise ValueError(f"Allocation for BS {m + 1} has indices outside 0..{n_subcarriers - 1}")
        if s in seen:
            continue
        if s & union:
            raise ValueError(f"Allocation for BS {m + 1} overlaps another BS's sub-carriers")
        seen[s] = m
        union |= s
    if len(union) > n_subcarriers:
        raise ValueError("Allocated sub-carriers exceed N")


# --- Run configuration sections ---


GainModelName = Literal["radar", "fixed-snr"]


class ScenarioSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    region_side: float = Field(200.0, gt=0)
    bs_coords: Optional[list[Point]] = None
    target_coords: Optional[list[Point]] = None
    bs_file: Optional[str] = None
    target_file: Optional[str] = None
    gain_model: GainModelName = "radar"
    rcs_amplitude: float = Field(1.0, gt=0, description="beta in |h| = beta / d^2")
    fixed_snr_db: float = Field(20.0, description="Per-tap post-processing SNR for the fixed-snr model")

    @field_validator("bs_coords", "target_coords", mode="before")
    @classmethod
    def parse_points(cls, v):
        return _parse_points(v)


class RangingSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lam: Optional[float] = Field(None, ge=0, description="LASSO weight; universal threshold if unset")
    lasso_tol: float = Field(LASSO_TOL, gt=0)
    lasso_max_iter: int = Field(LASSO_MAX_ITER, ge=1)
    support_noise_multiple: float = Field(SUPPORT_NOISE_MULTIPLE, ge=0)
    support_rel_threshold: float = Field(SUPPORT_REL_THRESHOLD, ge=0, lt=1)
    noiseless: bool = False
    interference: bool = Field(False, description="Add co-channel reuse-group BSs to the effective noise")


class LocalizationSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    sigma: Optional[float] = Field(None, gt=0, description="Range std in meters; Delta d / sqrt(3) if unset")
    delta0: Optional[float] = Field(None, ge=0, description="Triangle margin; 2 Delta d + 6 sigma if unset")
    gn_tol: float = Field(GN_TOL, gt=0)
    gn_max_iter: int = Field(GN_MAX_ITER, ge=1)
    eps_geo: float = Field(EPS_GEO, gt=0)
    bound_pruning: bool = True

    def resolve_sigma(self, delta_d: float) -> float:
        return self.sigma if self.sigma is not None else delta_d / math.sqrt(3.0)

    def resolve_delta0(self, delta_d: float, sigma_max: float) -> float:
        if self.delta0 is not None:
            return self.delta0
        return 2.0 * delta_d + DELTA0_SIGMA_MULTIPLE * sigma_max


ExperimentKind = Literal["range-error", "localization-error", "theorem1", "theorem2", "lemma1"]
RangeModelName = Literal["true", "gaussian", "both"]


class ExperimentSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: ExperimentKind = "theorem2"
    trials: int = Field(DEFAULT_TRIALS, ge=1)
    seed: int = 0
    n_bs: int = Field(4, ge=3)
    k_values: list[int] = Field(default_factory=lambda: [2, 3, 4, 5])
    tx_powers: list[float] = Field(default_factory=lambda: [6.0, 8.0])
    sigma2_values: list[float] = Field(default_factory=lambda: [0.2025, 0.25])
    radii: list[float] = Field(default_factory=lambda: [1.5, 2.5])
    range_model: RangeModelName = "both"
    workers: int = Field(DEFAULT_WORKERS, ge=1)

    @field_validator("k_values", mode="before")
    @classmethod
    def parse_ints(cls, v):
        return _split_list(v, int)

    @field_validator("tx_powers", "sigma2_values", "radii", mode="before")
    @classmethod
    def parse_floats(cls, v):
        return _split_list(v, float)

    @field_validator("k_values")
    @classmethod
    def check_k(cls, v: list[int]) -> list[int]:
        if not v or any(k < 1 for k in v):
            raise ValueError("k_values must be a non-empty list of positive integers")
        return v

    @field_validator("radii", "tx_powers")
    @classmethod
    def check_positive(cls, v: list[float]) -> list[float]:
        if any(x <= 0 for x in v):
            raise ValueError("values must be > 0")
        return v

    @field_validator("sigma2_values")
    @classmethod
    def check_non_negative(cls, v: list[float]) -> list[float]:
        if any(x < 0 for x in v):
            raise ValueError("variances must be >= 0")
        return v


class OutputSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dir: str = Field(default_factory=lambda: str(DEFAULT_OUTPUT_DIR))


class ExperimentConfig(BaseModel):
    """Complete run configuration: one model per INI section."""

    model_config = ConfigDict(extra="forbid")

    scenario: ScenarioSettings = Field(default_factory=ScenarioSettings)
    ofdm: OfdmParams = Field(default_factory=OfdmParams)
    ranging: RangingSettings = Field(default_factory=RangingSettings)
    localization: LocalizationSettings = Field(default_factory=LocalizationSettings)
    experiment: ExperimentSettings = Field(default_factory=ExperimentSettings)
    output: OutputSettings = Field(default_factory=OutputSettings)

    def fixed_scenario(self) -> Optional[Scenario]:
        """Scenario from explicit coordinates, if both lists are present."""
        s = self.scenario
        if s.bs_coords is None or s.target_coords is None:
            return None
        return Scenario(bs_coords=s.bs_coords, target_coords=s.target_coords, region_side=s.region_side)
