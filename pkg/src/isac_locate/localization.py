"""Phase II under imperfect ranges: Gaussian range model, Gauss-Newton and the pruned ML association search."""

import logging
from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.optimize import linear_sum_assignment

from .association import Association, check_range_set_sizes, triple_feasibility
from .config import GN_MAX_HALVINGS, GN_MAX_ITER, GN_TOL
from .errors import CollinearAnchors, EmptyFeasibleSet, NonConvergence, SingularJacobian
from .models import LocalizationSettings, Scenario
from .ranging import RangeSet

logger = logging.getLogger("isac-locate.localization")


# --- Range error model ---


@dataclass(frozen=True)
class NoisyRangeModel:
    """Per-pair range standard deviations and how ranges are obtained."""

    sigma: np.ndarray  # M x K, meters
    mode: Literal["simulate-gaussian", "pass-through"] = "simulate-gaussian"

    def __post_init__(self):
        s = np.asarray(self.sigma, dtype=float)
        object.__setattr__(self, "sigma", s)
        if np.any(s <= 0):
            raise ValueError("sigma must be > 0 for every BS-target pair")

    @classmethod
    def homogeneous(cls, sigma: float, n_bs: int, n_targets: int, mode="simulate-gaussian"):
        return cls(np.full((n_bs, n_targets), float(sigma)), mode)

    @property
    def weights(self) -> np.ndarray:
        return 1.0 / self.sigma**2


def weight_matrix(sigma, n_bs: int, n_targets: int) -> np.ndarray:
    """1 / sigma^2 as an M x K matrix from a scalar, a matrix or a NoisyRangeModel."""
    if isinstance(sigma, NoisyRangeModel):
        return sigma.weights
    s = np.broadcast_to(np.asarray(sigma, dtype=float), (n_bs, n_targets))
    if np.any(s <= 0):
        raise ValueError("sigma must be > 0")
    return 1.0 / s**2


def sample_noisy_ranges(scenario: Scenario, sigma, rng: np.random.Generator) -> list[RangeSet]:
    """d + N(0, sigma^2) per BS-target pair, rank-sorted per BS.

    Negative draws are clamped to zero and the affected range set is flagged.
    """
    dist = scenario.distances()
    s = np.broadcast_to(np.asarray(sigma, dtype=float), dist.shape)
    if np.any(s < 0):
        raise ValueError("sigma must be >= 0")
    noisy = dist + s * rng.standard_normal(dist.shape)
    sets = []
    for m, row in enumerate(noisy):
        clamped = bool(np.any(row < 0))
        if clamped:
            logger.warning(f"Clamped {int(np.sum(row < 0))} negative range(s) at BS {m + 1}")
        sets.append(RangeSet.from_values(np.maximum(row, 0.0), flagged=clamped))
    return sets


# --- Single-target solvers ---


def weighted_objective(point, anchors, ranges, weights) -> tuple[float, np.ndarray]:
    """Sum of w_m (r_m - ||p - a_m||)^2 and its gradient in p."""
    p = np.asarray(point, dtype=float)
    a = np.asarray(anchors, dtype=float)
    r = np.asarray(ranges, dtype=float)
    w = np.asarray(weights, dtype=float)
    diff = p - a
    rho = np.linalg.norm(diff, axis=1)
    err = rho - r
    value = float(np.sum(w * err**2))
    unit = diff / np.where(rho > 0, rho, 1.0)[:, None]
    grad = 2.0 * (w * err) @ unit
    return value, grad


def linear_init(anchors, ranges) -> np.ndarray:
    """Closed-form point from squared-range differences against the first anchor."""
    a = np.asarray(anchors, dtype=float)
    r = np.asarray(ranges, dtype=float)
    if len(a) < 3:
        raise CollinearAnchors("Need at least 3 anchors")
    lhs = 2.0 * (a[1:] - a[0])
    scale = max(float(np.max(np.abs(lhs))), 1.0)
    if np.linalg.matrix_rank(lhs / scale, tol=1e-9) < 2:
        raise CollinearAnchors("Anchors are collinear")
    rhs = r[0] ** 2 - r[1:] ** 2 + np.sum(a[1:] ** 2, axis=1) - np.sum(a[0] ** 2)
    point, *_ = linalg.lstsq(lhs, rhs)
    return point


@dataclass
class GaussNewtonResult:
    point: np.ndarray
    objective: float
    iterations: int
    grad_norm: float
    converged: bool
    # objective at the start point and after every accepted step; a nudge off an anchor overwrites the last entry
    history: list[float] = field(default_factory=list)


def gauss_newton_localize(
    anchors,
    ranges,
    weights,
    init,
    tol: float = GN_TOL,
    max_iter: int = GN_MAX_ITER,
    strict: bool = False,
) -> GaussNewtonResult:
    """Damped Gauss-Newton on the weighted squared range residual.

    Each step is halved (at most GN_MAX_HALVINGS times) until the objective
    does not increase; a step that cannot decrease it ends the iteration at
    a numerically stationary point.
    """
    a = np.asarray(anchors, dtype=float)
    r = np.asarray(ranges, dtype=float)
    w = np.asarray(weights, dtype=float)
    p = np.asarray(init, dtype=float).copy()
    if not np.all(np.isfinite(p)):
        raise ValueError("init must be finite")
    span = max(float(np.ptp(a, axis=0).max()), 1.0)
    perturbations = 0

    value, grad = weighted_objective(p, a, r, w)
    history = [value]
    for it in range(max_iter + 1):
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm < tol:
            return GaussNewtonResult(p, value, it, grad_norm, True, history)
        if it == max_iter:
            break

        diff = p - a
        rho = np.linalg.norm(diff, axis=1)
        if np.any(rho < 1e-12 * span):
            perturbations += 1
            if perturbations > 3:
                raise SingularJacobian("Iterate keeps landing on an anchor")
            p = p + 1e-6 * span * np.array([1.0, 0.5])
            logger.debug(f"Iterate on an anchor; perturbed to {p}")
            value, grad = weighted_objective(p, a, r, w)
            history[-1] = value
            continue

        jac = diff / rho[:, None]
        err = rho - r
        normal = jac.T @ (w[:, None] * jac)
        try:
            step = -linalg.solve(normal, jac.T @ (w * err), assume_a="pos")
        except linalg.LinAlgError as e:
            raise SingularJacobian(f"Normal equations singular at {p}: {e}") from e

        t = 1.0
        for _ in range(GN_MAX_HALVINGS + 1):
            cand = p + t * step
            cand_value, cand_grad = weighted_objective(cand, a, r, w)
            if cand_value <= value:
                break
            t *= 0.5
        else:
            logger.debug(f"Line search stalled after {it} iterations (|grad|={grad_norm:.2e})")
            return GaussNewtonResult(p, value, it, grad_norm, True, history)

        moved = float(np.linalg.norm(cand - p))
        p, value, grad = cand, cand_value, cand_grad
        history.append(value)
        if moved <= 1e-12 * span:
            return GaussNewtonResult(p, value, it + 1, float(np.linalg.norm(grad)), True, history)

    msg = f"Gauss-Newton hit max_iter={max_iter} with |grad|={grad_norm:.2e}"
    if strict:
        raise NonConvergence(msg, residual=grad_norm)
    logger.warning(msg)
    return GaussNewtonResult(p, value, max_iter, grad_norm, False, history)


@dataclass(frozen=True)
class TargetFit:
    point: np.ndarray
    objective: float
    converged: bool


class TargetSolver:
    """Memoized per-target localization keyed by the rank column.

    ``solve((g_1, ..., g_M'))`` localizes the target that produced rank g_m
    at each of the first M' BSs. The first rank identifies the target
    because BS 1's association row is the identity.
    """

    def __init__(
        self,
        anchors,
        range_sets: Sequence[RangeSet],
        weights: np.ndarray,
        tol: float = GN_TOL,
        max_iter: int = GN_MAX_ITER,
    ):
        self.anchors = np.asarray(anchors, dtype=float)
        self.values = [rs.values for rs in range_sets]
        self.weights = np.asarray(weights, dtype=float)
        self.tol = tol
        self.max_iter = max_iter
        self._cache: dict[tuple[int, ...], TargetFit] = {}
        self.solves = 0

    def ranges_for(self, column: tuple[int, ...]) -> np.ndarray:
        return np.array([self.values[m][g - 1] for m, g in enumerate(column)])

    def solve(self, column: tuple[int, ...]) -> TargetFit:
        fit = self._cache.get(column)
        if fit is not None:
            return fit
        n = len(column)
        anchors = self.anchors[:n]
        ranges = self.ranges_for(column)
        weights = self.weights[:n, column[0] - 1]
        init = linear_init(anchors, ranges)
        result = gauss_newton_localize(anchors, ranges, weights, init, self.tol, self.max_iter)
        fit = TargetFit(result.point, result.objective, result.converged)
        self._cache[column] = fit
        self.solves += 1
        return fit


# --- Assignment ---


def hungarian_assign(cost) -> tuple[np.ndarray, float]:
    """Minimum-cost one-to-one assignment: perm[k] is the column given to row k."""
    c = np.asarray(cost, dtype=float)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError("cost must be a square matrix")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost entries must be finite")
    rows, cols = linear_sum_assignment(c)
    perm = np.empty(len(rows), dtype=int)
    perm[rows] = cols
    return perm, float(c[rows, cols].sum())


# --- Results ---


@dataclass
class LocalizationResult:
    coords: np.ndarray  # K x 2
    association: Association
    objective: float
    per_target_residuals: np.ndarray
    candidates_evaluated: int = 0
    feasible_set_size: int = 0  # members of G^(3) reached; all of them without bound pruning
    pruned: int = 0
    converged: bool = True

    @classmethod
    def from_solver(cls, solver: TargetSolver, association: Association, **stats) -> "LocalizationResult":
        fits = [solver.solve(association.column(k)) for k in range(association.n_targets)]
        residuals = np.array([f.objective for f in fits])
        return cls(
            coords=np.array([f.point for f in fits]),
            association=association,
            objective=float(residuals.sum()),
            per_target_residuals=residuals,
            converged=all(f.converged for f in fits),
            **stats,
        )

    def recompute_objective(self, range_sets: Sequence[RangeSet], bs_coords, sigma) -> float:
        """Sum over targets and BSs of (D_m(g_{m,k}) - ||p_k - a_m||)^2 / sigma^2."""
        anchors = np.asarray(bs_coords, dtype=float)
        w = weight_matrix(sigma, len(anchors), self.association.n_targets)
        total = 0.0
        for k, p in enumerate(self.coords):
            ranges = [range_sets[m].rank(g) for m, g in enumerate(self.association.column(k))]
            total += weighted_objective(p, anchors, ranges, w[:, k])[0]
        return total

    def to_frame(self, truth: Optional[np.ndarray] = None, trial: int = 0) -> pd.DataFrame:
        rows = []
        for k, (x, y) in enumerate(self.coords):
            row = {"trial": trial, "target": k + 1}
            if truth is not None:
                row.update(x_true=float(truth[k][0]), y_true=float(truth[k][1]))
            row.update(
                x_est=float(x),
                y_est=float(y),
                objective=self.objective,
                association=" ".join(str(g) for g in self.association.column(k)),
            )
            rows.append(row)
        return pd.DataFrame(rows)


# --- Pruned ML search ---

# relative slack on bound cuts: candidates tied with the best Gamma up to round-off are still evaluated
_BOUND_RTOL = 1e-12


def _assign_remaining(solver: TargetSolver, rows3: np.ndarray, n_bs: int) -> np.ndarray:
    """Hungarian association of BSs 4..M against the 3-BS target estimates."""
    k_count = rows3.shape[1]
    points = np.array([solver.solve(tuple(int(v) for v in rows3[:, k])).point for k in range(k_count)])
    rows = [rows3[0], rows3[1], rows3[2]]
    for m in range(3, n_bs):
        predicted = np.linalg.norm(points - solver.anchors[m], axis=1)
        cost = np.abs(predicted[:, None] - solver.values[m][None, :])
        perm, _ = hungarian_assign(cost)
        rows.append(perm + 1)
    return np.vstack(rows)


def triple_objectives(solver: TargetSolver, feasible: np.ndarray) -> np.ndarray:
    """3-BS residual of every triangle-feasible rank triple (g1, g2, g3); inf elsewhere."""
    table = np.full(feasible.shape, np.inf)
    for k, g2, g3 in zip(*np.nonzero(feasible)):
        table[k, g2, g3] = solver.solve((int(k) + 1, int(g2) + 1, int(g3) + 1)).objective
    return table


@dataclass
class _SearchState:
    best_gamma: float = np.inf
    best_key: tuple = ()
    best_rows: Optional[np.ndarray] = None
    evaluated: int = 0
    pruned: int = 0


def _branch_and_bound(
    solver: TargetSolver,
    table: np.ndarray,
    n_bs: int,
    bound_pruning: bool,
) -> _SearchState:
    """Depth-first search over G^(3), one (g2, g3) pair per target.

    A branch is cut when its partial 3-BS residual plus the cheapest
    completion of the remaining targets exceeds the best Gamma. Candidates
    compare on (Gamma, ranks at BS 2, ranks at BS 3), which is the
    enumeration order of ``iter_feasible_associations``.
    """
    k_count = table.shape[0]
    flat = table.reshape(k_count, -1)
    choices = []
    for k in range(k_count):
        idx = np.flatnonzero(np.isfinite(flat[k]))
        idx = idx[np.argsort(flat[k, idx], kind="stable")]
        choices.append([(int(i) // k_count, int(i) % k_count, float(flat[k, i])) for i in idx])
    row_min = np.array([c[0][2] if c else np.inf for c in choices])
    # tail[k]: no completion of targets k..K-1 costs less
    tail = np.append(np.cumsum(row_min[::-1])[::-1], 0.0)

    identity = np.arange(1, k_count + 1)
    state = _SearchState()
    row2 = [0] * k_count
    row3 = [0] * k_count

    def cut(bound: float) -> bool:
        return bound_pruning and bound > state.best_gamma * (1 + _BOUND_RTOL)

    def visit(k: int, used2: int, used3: int, partial: float) -> None:
        if k == k_count:
            rows3 = np.vstack([identity, np.array(row2) + 1, np.array(row3) + 1])
            rows = _assign_remaining(solver, rows3, n_bs) if n_bs > 3 else rows3
            gamma = sum(solver.solve(tuple(int(v) for v in rows[:, j])).objective for j in range(k_count))
            state.evaluated += 1
            key = tuple(row2) + tuple(row3)
            if (gamma, key) < (state.best_gamma, state.best_key) or state.best_rows is None:
                state.best_gamma, state.best_key, state.best_rows = gamma, key, rows
            return
        for g2, g3, value in choices[k]:
            if used2 >> g2 & 1 or used3 >> g3 & 1:
                continue
            # choices are sorted, so every later sibling is cut too
            if cut(partial + value + tail[k + 1]):
                state.pruned += 1
                break
            row2[k], row3[k] = g2, g3
            visit(k + 1, used2 | 1 << g2, used3 | 1 << g3, partial + value)

    if np.isfinite(tail[0]):
        visit(0, 0, 0, 0.0)
    return state


def ml_localize(
    range_sets: Sequence[RangeSet],
    bs_coords,
    sigma,
    delta0: float,
    settings: Optional[LocalizationSettings] = None,
    bound_pruning: Optional[bool] = None,
) -> LocalizationResult:
    """Joint association and localization over G^(3) with per-BS Hungarian matching.

    For every member of G^(3): 3-BS Gauss-Newton per target, Hungarian
    assignment for each BS beyond the third, full-M Gauss-Newton, and the
    total weighted residual Gamma. The smallest Gamma wins; ties go to the
    earliest candidate in enumeration order.

    The summed 3-BS residuals of a candidate never exceed its Gamma, so with
    bound pruning a partial association is dropped as soon as that sum is
    strictly above the best Gamma found. Without it every member of G^(3)
    is evaluated.
    """
    settings = settings or LocalizationSettings()
    if bound_pruning is None:
        bound_pruning = settings.bound_pruning
    anchors = np.asarray(bs_coords, dtype=float)
    n_bs = len(anchors)
    k_count = check_range_set_sizes(range_sets, max(n_bs, 3))
    solver = TargetSolver(
        anchors, range_sets, weight_matrix(sigma, n_bs, k_count), settings.gn_tol, settings.gn_max_iter
    )

    feasible = triple_feasibility(range_sets, anchors, delta0, eps_geo=settings.eps_geo)
    state = _branch_and_bound(solver, triple_objectives(solver, feasible), n_bs, bound_pruning)
    if state.best_rows is None:
        raise EmptyFeasibleSet(f"No association survives the triangle margin delta0={delta0:.3f} m")

    logger.debug(
        f"ML search: evaluated={state.evaluated}, pruned={state.pruned}, "
        f"Gamma={state.best_gamma:.4g}"
    )
    return LocalizationResult.from_solver(
        solver,
        Association(state.best_rows),
        candidates_evaluated=state.evaluated,
        feasible_set_size=state.evaluated,
        pruned=state.pruned,
    )
