"""Phase I: sparse tap recovery (LASSO), support detection and range sets."""

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import linalg

from .config import LASSO_MAX_ITER, LASSO_TOL, SUPPORT_REL_THRESHOLD
from .errors import NonConvergence, TapOutOfRange
from .models import OfdmParams, RangingSettings, Scenario
from .ofdm import Observation
from .retry import DEFAULT_RELAXATION, RelaxationConfig, retry_relaxed
from .scenario import target_taps

logger = logging.getLogger("isac-locate.ranging")


# --- Range sets ---


@dataclass(frozen=True)
class RangeSet:
    """Unlabeled ranges seen by one BS, addressable by rank g (1 = largest).

    Ordering is descending by range, ties broken by source tap ascending.
    """

    ranges: tuple[float, ...]
    source_taps: tuple[Optional[int], ...] = ()
    flagged: bool = False

    @classmethod
    def from_values(
        cls,
        values: Iterable[float],
        taps: Optional[Iterable[Optional[int]]] = None,
        flagged: bool = False,
    ) -> "RangeSet":
        vals = [float(v) for v in values]
        tap_list = [None if t is None else int(t) for t in taps] if taps is not None else [None] * len(vals)
        if len(tap_list) != len(vals):
            raise ValueError("ranges and taps differ in length")
        order = sorted(
            range(len(vals)),
            key=lambda i: (-vals[i], tap_list[i] if tap_list[i] is not None else 0),
        )
        return cls(
            ranges=tuple(vals[i] for i in order),
            source_taps=tuple(tap_list[i] for i in order),
            flagged=flagged or not vals,
        )

    def __len__(self) -> int:
        return len(self.ranges)

    def rank(self, g: int) -> float:
        """D_m(g), the g-th largest range (1-based)."""
        if not 1 <= g <= len(self.ranges):
            raise IndexError(f"Rank {g} outside 1..{len(self.ranges)}")
        return self.ranges[g - 1]

    @property
    def values(self) -> np.ndarray:
        return np.asarray(self.ranges, dtype=float)

    @property
    def taps(self) -> set[int]:
        return {t for t in self.source_taps if t is not None}


def range_midpoint(tap: int, params: OfdmParams, check_cp: bool = True) -> float:
    """Centre of tap l's range bin: (l - 1) w + w / 2."""
    if tap < 1 or (check_cp and tap > params.max_paths):
        raise TapOutOfRange(f"Tap {tap} outside 1..{params.max_paths}")
    return (tap - 1) * params.tap_width + params.delta_d


def extract_range_set(support: Iterable[int], params: OfdmParams) -> RangeSet:
    taps = sorted(support)
    if not taps:
        logger.debug("Empty support; returning a flagged range set")
    return RangeSet.from_values([range_midpoint(l, params) for l in taps], taps=taps)


def true_range_sets(scenario: Scenario) -> list[RangeSet]:
    """Perfect ranges D_m, one RangeSet per BS."""
    return [RangeSet.from_values(row) for row in scenario.distances()]


def quantized_range_sets(scenario: Scenario, params: OfdmParams) -> list[RangeSet]:
    """Tap-midpoint ranges: the noiseless Phase I output, without the CP bound."""
    taps = target_taps(scenario, params, check_cp=False)
    return [
        RangeSet.from_values([range_midpoint(int(l), params, check_cp=False) for l in row], taps=row)
        for row in taps
    ]


# --- Estimators ---


@dataclass
class LassoResult:
    taps: np.ndarray
    lam: float
    iterations: int = 0
    objective_history: list[float] = field(default_factory=list)
    kkt_residual: float = 0.0
    converged: bool = True


def _objective(h: np.ndarray, gram: np.ndarray, corr: np.ndarray, y_energy: float, lam: float) -> float:
    # 0.5 ||y - A h||^2 + lam ||h||_1, expanded on the Gram matrix
    quad = 0.5 * np.real(np.vdot(h, gram @ h)) - np.real(np.vdot(corr, h)) + 0.5 * y_energy
    return float(quad + lam * np.sum(np.abs(h)))


def _soft_threshold(z: np.ndarray, thresh: float) -> np.ndarray:
    """Complex shrinkage: magnitude reduced by ``thresh``, phase kept."""
    mag = np.abs(z)
    scale = np.maximum(mag - thresh, 0.0) / np.where(mag > 0, mag, 1.0)
    return z * scale


def kkt_residual(h: np.ndarray, gram: np.ndarray, corr: np.ndarray, lam: float) -> float:
    """Largest optimality violation of h, relative to max |A^H y|."""
    r = corr - gram @ h
    mag = np.abs(h)
    on = mag > 0
    viol = np.zeros(len(h))
    viol[on] = np.abs(r[on] - lam * h[on] / mag[on])
    viol[~on] = np.maximum(np.abs(r[~on]) - lam, 0.0)
    scale = max(float(np.max(np.abs(corr))), np.finfo(float).tiny)
    return float(np.max(viol) / scale) if len(h) else 0.0


def least_squares_estimate(obs: Observation) -> np.ndarray:
    """Closed-form (A^H A)^-1 A^H y; minimum-norm when underdetermined."""
    h, *_ = linalg.lstsq(obs.sensing_matrix, obs.y_tilde)
    return h


def estimate_noise_level(obs: Observation) -> float:
    """Robust per-tap noise std of the unregularized estimate.

    Uses the least-squares taps when |N_m| >= L, otherwise the matched
    filter. The median |h_l| of a mostly empty vector is Rayleigh noise,
    whose median is sigma * sqrt(ln 2).
    """
    a = obs.sensing_matrix
    if a.size == 0:
        return 0.0
    if obs.n_rows >= obs.n_taps:
        h = least_squares_estimate(obs)
    else:
        col_energy = np.sum(np.abs(a) ** 2, axis=0)
        h = (a.conj().T @ obs.y_tilde) / np.where(col_energy > 0, col_energy, 1.0)
    return float(np.median(np.abs(h)) / math.sqrt(math.log(2.0)))


def default_lambda(obs: Observation, sigma_h: Optional[float] = None) -> float:
    """Universal threshold sigma_h * ||a||^2 * sqrt(2 ln L) on the correlation scale."""
    if sigma_h is None:
        sigma_h = estimate_noise_level(obs)
    col_energy = float(np.mean(np.sum(np.abs(obs.sensing_matrix) ** 2, axis=0)))
    return sigma_h * col_energy * math.sqrt(2.0 * math.log(max(obs.n_taps, 2)))


def lasso_estimate(
    obs: Observation,
    lam: float,
    tol: float = LASSO_TOL,
    max_iter: int = LASSO_MAX_ITER,
    strict: bool = False,
) -> LassoResult:
    """Minimize 0.5 ||y - A h||^2 + lam ||h||_1 by monotone FISTA with backtracking.

    lam = 0 with a full-column-rank A returns the least-squares solution.
    Convergence needs both the relative objective change and the relative
    KKT residual below ``tol``; otherwise the result is returned with
    ``converged=False``, or NonConvergence is raised when ``strict``.
    """
    if lam < 0:
        raise ValueError("lam must be >= 0")
    a, y = obs.sensing_matrix, obs.y_tilde
    n_taps = obs.n_taps
    if not np.any(y):
        return LassoResult(taps=np.zeros(n_taps, dtype=complex), lam=lam, objective_history=[0.0])

    gram = a.conj().T @ a
    corr = a.conj().T @ y
    y_energy = float(np.real(np.vdot(y, y)))

    if lam == 0 and obs.n_rows >= n_taps and np.linalg.matrix_rank(gram) == n_taps:
        h = least_squares_estimate(obs)
        obj = _objective(h, gram, corr, y_energy, 0.0)
        return LassoResult(
            taps=h, lam=0.0, objective_history=[obj], kkt_residual=kkt_residual(h, gram, corr, 0.0)
        )

    x = np.zeros(n_taps, dtype=complex)
    x_prev = x.copy()
    z_point = x.copy()
    t = 1.0
    lip = max(float(np.max(np.real(np.diag(gram)))), np.finfo(float).tiny)
    f_x = _objective(x, gram, corr, y_energy, lam)
    history = [f_x]
    kkt = float("inf")

    for it in range(1, max_iter + 1):
        grad = gram @ z_point - corr
        smooth_z = 0.5 * np.real(np.vdot(z_point, gram @ z_point)) - np.real(np.vdot(corr, z_point))
        while True:
            cand = _soft_threshold(z_point - grad / lip, lam / lip)
            diff = cand - z_point
            smooth_c = 0.5 * np.real(np.vdot(cand, gram @ cand)) - np.real(np.vdot(corr, cand))
            bound = smooth_z + np.real(np.vdot(grad, diff)) + 0.5 * lip * np.real(np.vdot(diff, diff))
            if smooth_c <= bound + 1e-12 * abs(bound):
                break
            lip *= 2.0

        f_cand = _objective(cand, gram, corr, y_energy, lam)
        x_prev = x
        x = cand if f_cand <= f_x else x
        f_new = min(f_cand, f_x)

        t_next = (1.0 + math.sqrt(1.0 + 4.0 * t * t)) / 2.0
        z_point = x + (t / t_next) * (cand - x) + ((t - 1.0) / t_next) * (x - x_prev)
        t = t_next

        rel_change = abs(f_x - f_new) / max(abs(f_new), np.finfo(float).tiny)
        f_x = f_new
        history.append(f_x)
        kkt = kkt_residual(x, gram, corr, lam)
        if rel_change <= tol and kkt <= tol:
            logger.debug(f"LASSO converged in {it} iterations (kkt={kkt:.2e})")
            return LassoResult(x, lam, it, history, kkt, True)

    msg = f"LASSO hit max_iter={max_iter} with KKT residual {kkt:.2e} > tol={tol:.1e}"
    if strict:
        raise NonConvergence(msg, residual=kkt)
    logger.warning(msg)
    return LassoResult(x, lam, max_iter, history, kkt, False)


def detect_support(
    h_hat: np.ndarray,
    tau_abs: float = 0.0,
    rho: float = SUPPORT_REL_THRESHOLD,
) -> set[int]:
    """1-based taps with |h_l| > max(tau_abs, rho * max |h|)."""
    mag = np.abs(np.asarray(h_hat))
    if mag.size == 0:
        return set()
    tau = max(tau_abs, rho * float(np.max(mag)))
    return {int(i) + 1 for i in np.flatnonzero(mag > tau)}


@dataclass
class RangeEstimate:
    range_set: RangeSet
    support: set[int]
    lasso: LassoResult
    sigma_h: float


def estimate_range_set(
    obs: Observation,
    params: OfdmParams,
    settings: Optional[RangingSettings] = None,
    relaxation: RelaxationConfig = DEFAULT_RELAXATION,
) -> RangeEstimate:
    """Phase I for one BS: choose lambda, run LASSO, threshold, map taps to ranges."""
    settings = settings or RangingSettings()
    if settings.noiseless:
        sigma_h, lam = 0.0, 0.0
    else:
        sigma_h = estimate_noise_level(obs)
        lam = settings.lam if settings.lam is not None else default_lambda(obs, sigma_h)

    try:
        result = retry_relaxed(
            lasso_estimate,
            obs,
            lam,
            param="tol",
            initial=settings.lasso_tol,
            config=relaxation,
            exceptions=(NonConvergence,),
            max_iter=settings.lasso_max_iter,
            strict=True,
        )
    except NonConvergence:
        # reported through converged=False, never fatal
        loosest = relaxation.get_value(settings.lasso_tol, relaxation.max_attempts - 1)
        result = lasso_estimate(obs, lam, tol=loosest, max_iter=settings.lasso_max_iter)
    support = detect_support(
        result.taps,
        tau_abs=settings.support_noise_multiple * sigma_h,
        rho=settings.support_rel_threshold,
    )
    return RangeEstimate(extract_range_set(support, params), support, result, sigma_h)


def estimate_all_range_sets(
    observations: Sequence[Observation],
    params: OfdmParams,
    settings: Optional[RangingSettings] = None,
) -> list[RangeEstimate]:
    return [estimate_range_set(obs, params, settings) for obs in observations]
