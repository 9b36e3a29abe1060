"""Geometry, ground-truth distances, delay taps and sparse channel synthesis."""

import logging
import math
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
from pydantic import ValidationError

from .config import EPS_TAP_BOUNDARY, MAX_REJECTIONS
from .errors import CollinearAnchors, ResolvabilityViolation, ScenarioError, TapOutOfRange
from .io import read_points
from .models import OfdmParams, Scenario, ScenarioSettings

logger = logging.getLogger("isac-locate.scenario")


@dataclass(frozen=True)
class TapVector:
    """Length-L complex channel; index 0 holds tap l = 1."""

    taps: np.ndarray

    @property
    def length(self) -> int:
        return len(self.taps)

    @property
    def support(self) -> set[int]:
        """1-based tap indices with non-zero gain."""
        return {int(i) + 1 for i in np.flatnonzero(self.taps)}

    @classmethod
    def zeros(cls, length: int) -> "TapVector":
        return cls(np.zeros(length, dtype=complex))


@dataclass(frozen=True)
class GainModel:
    """Reflection amplitude law used to synthesize taps.

    ``radar``: h = beta * exp(j phi) / d^2, so received power falls as d^-4
    and doubling the range divides |h|^2 by 16.
    ``fixed-snr``: every tap has the same post-processing SNR regardless of
    range, which keeps controlled tests independent of geometry.
    """

    kind: Literal["radar", "fixed-snr"] = "radar"
    rcs_amplitude: float = 1.0
    fixed_snr_db: float = 20.0

    @classmethod
    def from_settings(cls, settings: ScenarioSettings) -> "GainModel":
        return cls(settings.gain_model, settings.rcs_amplitude, settings.fixed_snr_db)

    def amplitude(self, d_tx: float, d_rx: float, tap_noise_var: float) -> float:
        if self.kind == "radar":
            return self.rcs_amplitude / (d_tx * d_rx)
        return math.sqrt(10.0 ** (self.fixed_snr_db / 10.0) * tap_noise_var)


# --- Distances and taps ---


def distance(bs, target) -> float:
    """Euclidean distance between a BS and a target, meters."""
    a = np.asarray(bs, dtype=float)
    b = np.asarray(target, dtype=float)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ScenarioError("distance() requires finite coordinates")
    return float(np.hypot(*(a - b)))


def bs_distance_matrix(bs_coords) -> np.ndarray:
    """Symmetric M x M matrix of inter-BS distances d^BS."""
    a = np.asarray(bs_coords, dtype=float)
    diff = a[:, None, :] - a[None, :, :]
    return np.sqrt(np.sum(diff**2, axis=-1))


def _tap_index(d: float, tap_width: float) -> int:
    q = d / tap_width
    boundary = round(q)
    if boundary >= 1 and math.isclose(q, boundary, rel_tol=EPS_TAP_BOUNDARY):
        return int(boundary)
    return int(math.ceil(q))


def delay_tap(d: float, params: OfdmParams, check_cp: bool = True) -> int:
    """Tap l with (l-1) w < d <= l w, w = c0 / (2 N Delta f).

    ``check_cp=False`` skips the L bound for experiments that never form a
    channel (range quantization only).
    """
    if not d > 0:
        raise TapOutOfRange(f"Range must be positive (got {d})")
    tap = _tap_index(d, params.tap_width)
    if check_cp and tap > params.max_paths:
        raise TapOutOfRange(
            f"Range {d:.3f} m maps to tap {tap} > L={params.max_paths}; "
            f"the cyclic prefix absorbs at most {params.max_paths * params.tap_width:.2f} m"
        )
    return tap


def target_taps(scenario: Scenario, params: OfdmParams, check_cp: bool = True) -> np.ndarray:
    """M x K integer matrix of monostatic delay taps."""
    dist = scenario.distances()
    taps = np.empty(dist.shape, dtype=int)
    for (m, k), d in np.ndenumerate(dist):
        taps[m, k] = delay_tap(d, params, check_cp=check_cp)
    return taps


def check_resolvable(scenario: Scenario, params: OfdmParams, check_cp: bool = True) -> np.ndarray:
    """Return the tap matrix, raising if two targets share a tap at some BS."""
    taps = target_taps(scenario, params, check_cp=check_cp)
    for m, row in enumerate(taps):
        values, counts = np.unique(row, return_counts=True)
        if np.any(counts > 1):
            tap = int(values[np.argmax(counts > 1)])
            raise ResolvabilityViolation(
                f"Targets share tap {tap} at BS {m + 1}", bs=m + 1, tap=tap
            )
    return taps


# --- Scenario generation ---


def _uniform_points(n: int, region_side: float, rng: np.random.Generator) -> list[tuple[float, float]]:
    half = region_side / 2.0
    pts = rng.uniform(-half, half, size=(n, 2))
    return [(float(x), float(y)) for x, y in pts]


def random_scenario(
    n_bs: int,
    n_targets: int,
    region_side: float,
    rng: np.random.Generator,
    max_attempts: int = MAX_REJECTIONS,
) -> Scenario:
    """Uniform BSs and targets in the square; collinear BS triples are redrawn."""
    for attempt in range(max_attempts):
        bs = _uniform_points(n_bs, region_side, rng)
        try:
            targets = _uniform_points(n_targets, region_side, rng)
            return Scenario(bs_coords=bs, target_coords=targets, region_side=region_side)
        except ValidationError as e:
            logger.debug(f"Redrawing BSs (attempt {attempt + 1}): {e.errors()[0]['msg']}")
    raise CollinearAnchors(f"No general-position BS layout after {max_attempts} attempts")


def resample_targets_until_resolvable(
    scenario: Scenario,
    params: OfdmParams,
    rng: np.random.Generator,
    check_cp: bool = True,
    max_attempts: int = MAX_REJECTIONS,
) -> tuple[Scenario, int]:
    """Redraw targets until every BS sees them in distinct taps.

    Returns the accepted scenario and the number of rejected draws.
    """
    rejections = 0
    current = scenario
    while True:
        try:
            check_resolvable(current, params, check_cp=check_cp)
            if rejections:
                logger.debug(f"Accepted target draw after {rejections} rejections")
            return current, rejections
        except (ResolvabilityViolation, TapOutOfRange) as e:
            rejections += 1
            if rejections >= max_attempts:
                raise ResolvabilityViolation(
                    f"Gave up after {rejections} target draws; last: {e}"
                ) from e
            current = Scenario(
                bs_coords=current.bs_coords,
                target_coords=_uniform_points(current.n_targets, current.region_side, rng),
                region_side=current.region_side,
            )


def lemma1_scenario(
    center: tuple[float, float] = (0.0, 0.0),
    arm: float = 1.0,
    target_offset: tuple[float, float] = (2.0, 3.0),
    perturbation: tuple[float, float] = (0.0, 0.0),
    region_side: float = 8.0,
    perpendicular: bool = True,
) -> Scenario:
    """Four BSs on two lines crossing at ``center`` and two targets mirrored about it.

    With ``perpendicular=True`` the lines are the axes through ``center``;
    otherwise the second line is tilted so that no pairing of the BSs gives
    perpendicular connecting lines. ``perturbation`` shifts the first target.
    """
    x0, y0 = center
    if perpendicular:
        offsets = [(-arm, 0.0), (arm, 0.0), (0.0, -arm), (0.0, arm)]
    else:
        offsets = [(-arm, 0.0), (arm, 0.0), (0.5 * arm, -arm), (-0.5 * arm, arm)]
    bs = [(x0 + dx, y0 + dy) for dx, dy in offsets]
    tx, ty = target_offset
    px, py = perturbation
    targets = [(x0 + tx + px, y0 + ty + py), (x0 - tx, y0 - ty)]
    return Scenario(bs_coords=bs, target_coords=targets, region_side=region_side)


# --- Channel synthesis ---


def _tap_noise_var(params: OfdmParams, m: int, n_bs: int) -> float:
    """Per-tap variance of the least-squares estimate, sigma^2 / (p |N_m|)."""
    if params.allocation is not None:
        size = len(params.allocation[m])
    else:
        size = params.n_subcarriers // n_bs
    return params.effective_noise_power / (params.tx_power * max(size, 1))


def build_ground_truth_taps(
    scenario: Scenario,
    params: OfdmParams,
    gain_model: GainModel,
    rng: np.random.Generator,
) -> list[TapVector]:
    """Monostatic channel h_{m,m} for every BS, one non-zero tap per target."""
    taps = check_resolvable(scenario, params)
    dist = scenario.distances()
    vectors = []
    for m in range(scenario.n_bs):
        h = np.zeros(params.max_paths, dtype=complex)
        noise_var = _tap_noise_var(params, m, scenario.n_bs)
        phases = rng.uniform(0.0, 2.0 * np.pi, size=scenario.n_targets)
        for k in range(scenario.n_targets):
            amp = gain_model.amplitude(dist[m, k], dist[m, k], noise_var)
            h[taps[m, k] - 1] = amp * np.exp(1j * phases[k])
        vectors.append(TapVector(h))
    return vectors


@dataclass
class ChannelTaps:
    """All BS-to-BS reflection channels h_{u,m}; (m, m) entries are monostatic."""

    n_bs: int
    taps: dict[tuple[int, int], TapVector] = field(default_factory=dict)
    dropped_paths: int = 0

    def monostatic(self) -> list[TapVector]:
        return [self.taps[(m, m)] for m in range(self.n_bs)]

    def get(self, u: int, m: int) -> Optional[TapVector]:
        return self.taps.get((u, m))


def build_channel_taps(
    scenario: Scenario,
    params: OfdmParams,
    gain_model: GainModel,
    rng: np.random.Generator,
    bistatic: bool = True,
) -> ChannelTaps:
    """Monostatic taps plus cross-BS paths with delay (d_u + d_m) / c0.

    Cross paths beyond L are dropped; two targets on the same cross tap add.
    """
    channel = ChannelTaps(n_bs=scenario.n_bs)
    for m, vec in enumerate(build_ground_truth_taps(scenario, params, gain_model, rng)):
        channel.taps[(m, m)] = vec
    if not bistatic:
        return channel

    dist = scenario.distances()
    for u in range(scenario.n_bs):
        for m in range(scenario.n_bs):
            if u == m:
                continue
            h = np.zeros(params.max_paths, dtype=complex)
            noise_var = _tap_noise_var(params, m, scenario.n_bs)
            for k in range(scenario.n_targets):
                path = dist[u, k] + dist[m, k]
                tap = _tap_index(path / 2.0, params.tap_width)
                if tap > params.max_paths:
                    channel.dropped_paths += 1
                    logger.debug(f"Dropping path BS{u + 1}->target{k + 1}->BS{m + 1} at tap {tap}")
                    continue
                phase = rng.uniform(0.0, 2.0 * np.pi)
                h[tap - 1] += gain_model.amplitude(dist[u, k], dist[m, k], noise_var) * np.exp(1j * phase)
            channel.taps[(u, m)] = TapVector(h)
    return channel


def scenario_from_settings(settings: ScenarioSettings) -> Scenario:
    """Fixed scenario from inline coordinates or CSV side files."""
    bs = settings.bs_coords
    targets = settings.target_coords
    if bs is None and settings.bs_file:
        bs = read_points(settings.bs_file)
    if targets is None and settings.target_file:
        targets = read_points(settings.target_file)
    if bs is None or targets is None:
        raise ScenarioError("Scenario needs bs_coords/bs_file and target_coords/target_file")
    return Scenario(bs_coords=bs, target_coords=targets, region_side=settings.region_side)

