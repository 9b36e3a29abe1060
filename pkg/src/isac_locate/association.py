"""Phase II foundations: exact trilateration, feasible associations and ghost detection.

Ranks are 1-based throughout: g_{m,k} = g means target k produced the g-th
largest range at BS m. Row 1 of every association is the identity.
"""

import logging
from dataclasses import dataclass, field
from itertools import combinations, permutations, product
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import linalg

from .config import EPS_COLLINEAR, EPS_GEO, ORACLE_MAX_BS, ORACLE_MAX_TARGETS
from .errors import AssociationError, CollinearAnchors, ComplexityGuard, NoFeasibleSolution
from .models import collinear
from .ranging import RangeSet
from .scenario import bs_distance_matrix

logger = logging.getLogger("isac-locate.association")

TriplePredicate = Callable[[int, int, int], bool]


@dataclass(frozen=True)
class Association:
    """M x K matrix of ranks g_{m,k}."""

    g: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.g, dtype=int)
        object.__setattr__(self, "g", g)
        if g.ndim != 2:
            raise ValueError("Association must be a 2-D rank matrix")
        k = g.shape[1]
        expected = np.arange(1, k + 1)
        if not np.array_equal(g[0], expected):
            raise ValueError("Row for BS 1 must be the identity")
        for m, row in enumerate(g):
            if not np.array_equal(np.sort(row), expected):
                raise ValueError(f"Row for BS {m + 1} is not a permutation of 1..{k}")

    @property
    def n_bs(self) -> int:
        return self.g.shape[0]

    @property
    def n_targets(self) -> int:
        return self.g.shape[1]

    def column(self, k: int) -> tuple[int, ...]:
        """Ranks used by target k (0-based) at every BS."""
        return tuple(int(v) for v in self.g[:, k])

    def row_string(self) -> str:
        return "|".join(" ".join(str(v) for v in row) for row in self.g)


# --- Trilateration ---


def check_anchors(bs_coords, eps: float = EPS_COLLINEAR) -> np.ndarray:
    """Reject BS layouts with three points on a common line."""
    anchors = np.asarray(bs_coords, dtype=float)
    for i, j, k in combinations(range(len(anchors)), 3):
        if collinear(anchors[i], anchors[j], anchors[k], eps):
            raise CollinearAnchors(f"BSs {i + 1}, {j + 1}, {k + 1} are collinear")
    return anchors


def trilaterate_exact(anchors, ranges, eps_geo: float = EPS_GEO) -> Optional[np.ndarray]:
    """Common point of three circles, or None.

    Differences of the squared circle equations give a 2 x 2 linear system;
    its solution is accepted only if all three range residuals are within
    ``eps_geo``.
    """
    a = np.asarray(anchors, dtype=float)
    r = np.asarray(ranges, dtype=float)
    if a.shape != (3, 2) or r.shape != (3,):
        raise ValueError("trilaterate_exact needs 3 anchors and 3 ranges")
    if collinear(a[0], a[1], a[2]):
        raise CollinearAnchors("Trilateration anchors are collinear")
    lhs = 2.0 * (a[1:] - a[0])
    rhs = r[0] ** 2 - r[1:] ** 2 + np.sum(a[1:] ** 2, axis=1) - np.sum(a[0] ** 2)
    point = linalg.solve(lhs, rhs)
    residual = np.max(np.abs(np.linalg.norm(a - point, axis=1) - r))
    if residual > eps_geo:
        return None
    return point


# --- Feasible associations for BSs 1-3 ---


def _pair_feasibility(d_a: np.ndarray, d_b: np.ndarray, d_bs: float, delta0: float) -> np.ndarray:
    """K x K mask of rank pairs satisfying both triangle inequalities."""
    diff = np.abs(d_a[:, None] - d_b[None, :])
    total = d_a[:, None] + d_b[None, :]
    return (diff <= d_bs + delta0) & (total >= d_bs - delta0)


def check_range_set_sizes(range_sets: Sequence[RangeSet], count: int) -> int:
    if len(range_sets) < count:
        raise AssociationError(f"Need at least {count} range sets, got {len(range_sets)}")
    k = len(range_sets[0])
    for m, rs in enumerate(range_sets):
        if len(rs) != k:
            raise AssociationError(f"BS {m + 1} reports {len(rs)} ranges, BS 1 reports {k}")
    if k == 0:
        raise AssociationError("Range sets are empty")
    return k


def triple_feasibility(
    range_sets: Sequence[RangeSet],
    bs_coords,
    delta0: float = 0.0,
    eps_geo: float = EPS_GEO,
) -> np.ndarray:
    """K x K x K mask of rank triples (g1, g2, g3) passing all three BS-pair triangle tests."""
    check_range_set_sizes(range_sets[:3], 3)
    anchors = np.asarray(bs_coords, dtype=float)[:3]
    dbs = bs_distance_matrix(anchors)
    d1, d2, d3 = (rs.values for rs in range_sets[:3])
    margin = delta0 + eps_geo
    p12 = _pair_feasibility(d1, d2, dbs[0, 1], margin)
    p13 = _pair_feasibility(d1, d3, dbs[0, 2], margin)
    p23 = _pair_feasibility(d2, d3, dbs[1, 2], margin)
    return p12[:, :, None] & p13[:, None, :] & p23[None, :, :]


def iter_feasible_associations(
    range_sets: Sequence[RangeSet],
    bs_coords,
    delta0: float = 0.0,
    predicate: Optional[TriplePredicate] = None,
    eps_geo: float = EPS_GEO,
) -> Iterator[np.ndarray]:
    """Yield 3 x K rank matrices in G^(3) (H when delta0 = 0).

    Order is lexicographic over (ranks at BS 2, ranks at BS 3). ``predicate``
    receives (g1, g2, g3) for a single target and can cut a branch early;
    results are cached per triple.
    """
    triple = triple_feasibility(range_sets, bs_coords, delta0, eps_geo)
    k_count = triple.shape[0]

    if predicate is not None:
        cache: dict[tuple[int, int, int], bool] = {}

        def allowed(k: int, g2: int, g3: int) -> bool:
            if not triple[k, g2, g3]:
                return False
            key = (k, g2, g3)
            if key not in cache:
                cache[key] = bool(predicate(k + 1, g2 + 1, g3 + 1))
            return cache[key]

    else:

        def allowed(k: int, g2: int, g3: int) -> bool:
            return bool(triple[k, g2, g3])

    reachable = triple.any(axis=2)
    identity = np.arange(1, k_count + 1)

    def perms2(k: int, used: list[bool], chosen: list[int]) -> Iterator[list[int]]:
        if k == k_count:
            yield list(chosen)
            return
        for g2 in range(k_count):
            if used[g2] or not reachable[k, g2]:
                continue
            used[g2] = True
            chosen.append(g2)
            yield from perms2(k + 1, used, chosen)
            chosen.pop()
            used[g2] = False

    def perms3(k: int, row2: list[int], used: list[bool], chosen: list[int]) -> Iterator[list[int]]:
        if k == k_count:
            yield list(chosen)
            return
        for g3 in range(k_count):
            if used[g3] or not allowed(k, row2[k], g3):
                continue
            used[g3] = True
            chosen.append(g3)
            yield from perms3(k + 1, row2, used, chosen)
            chosen.pop()
            used[g3] = False

    for row2 in perms2(0, [False] * k_count, []):
        for row3 in perms3(0, row2, [False] * k_count, []):
            yield np.vstack([identity, np.asarray(row2) + 1, np.asarray(row3) + 1])


def feasible_associations_3bs(
    range_sets: Sequence[RangeSet],
    bs_coords,
    delta0: float = 0.0,
) -> list[np.ndarray]:
    return list(iter_feasible_associations(range_sets, bs_coords, delta0))


# --- Ghost detection ---


@dataclass
class GhostSolution:
    coords: np.ndarray  # K x 2
    association: Association


@dataclass
class GhostReport:
    solutions: list[GhostSolution] = field(default_factory=list)
    candidates_checked: int = 0
    duplicates: int = 0

    @property
    def tau(self) -> int:
        return len(self.solutions)

    @property
    def has_ghost(self) -> bool:
        return self.tau > 1

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {"solution": s + 1, "target": k + 1, "x": float(x), "y": float(y)}
            for s, sol in enumerate(self.solutions)
            for k, (x, y) in enumerate(sol.coords)
        ]
        return pd.DataFrame(rows, columns=["solution", "target", "x", "y"])


def _ranks_for_points(points: np.ndarray, anchor: np.ndarray, expected: np.ndarray, eps_geo: float):
    """Match predicted distances to a BS's range set; ranks or None."""
    dist = np.linalg.norm(points - anchor, axis=1)
    order = sorted(range(len(dist)), key=lambda k: (-dist[k], k))
    if np.max(np.abs(dist[order] - expected)) > eps_geo:
        return None
    ranks = np.empty(len(dist), dtype=int)
    ranks[order] = np.arange(1, len(dist) + 1)
    return ranks


def _same_point_set(a: np.ndarray, b: np.ndarray, eps_geo: float) -> bool:
    sa = a[np.lexsort((a[:, 1], a[:, 0]))]
    sb = b[np.lexsort((b[:, 1], b[:, 0]))]
    return bool(np.max(np.abs(sa - sb)) <= eps_geo)


def detect_ghosts(
    range_sets: Sequence[RangeSet],
    bs_coords,
    eps_geo: float = EPS_GEO,
) -> GhostReport:
    """Count coordinate sets that reproduce every BS's perfect range set.

    For each association in H, trilaterate every target with BSs 1-3, then
    require the predicted range sets of BSs 4..M to equal the observed ones.
    tau > 1 means ghost targets exist.
    """
    anchors = check_anchors(bs_coords)
    n_bs = len(anchors)
    if n_bs < 3:
        raise AssociationError("Ghost detection needs at least 3 BSs")
    check_range_set_sizes(range_sets, n_bs)
    values = [rs.values for rs in range_sets]
    trilat_cache: dict[tuple[int, int, int], Optional[np.ndarray]] = {}

    def locate(g1: int, g2: int, g3: int) -> Optional[np.ndarray]:
        key = (g1, g2, g3)
        if key not in trilat_cache:
            ranges = [values[0][g1 - 1], values[1][g2 - 1], values[2][g3 - 1]]
            trilat_cache[key] = trilaterate_exact(anchors[:3], ranges, eps_geo)
        return trilat_cache[key]

    report = GhostReport()
    for g3rows in iter_feasible_associations(
        range_sets, anchors, 0.0, predicate=lambda *g: locate(*g) is not None, eps_geo=eps_geo
    ):
        report.candidates_checked += 1
        points = np.array([locate(*g3rows[:, k]) for k in range(g3rows.shape[1])])
        rows = [g3rows[0], g3rows[1], g3rows[2]]
        for m in range(3, n_bs):
            ranks = _ranks_for_points(points, anchors[m], values[m], eps_geo)
            if ranks is None:
                break
            rows.append(ranks)
        else:
            if any(_same_point_set(points, s.coords, eps_geo) for s in report.solutions):
                report.duplicates += 1
                continue
            report.solutions.append(GhostSolution(points, Association(np.vstack(rows))))

    if report.tau == 0:
        raise NoFeasibleSolution(
            f"No consistent coordinate set among {report.candidates_checked} candidates; "
            "ranges are not perfect"
        )
    logger.debug(f"Ghost check: tau={report.tau}, candidates={report.candidates_checked}")
    return report


# --- Exhaustive search ---


def exhaustive_ml_oracle(
    range_sets: Sequence[RangeSet],
    bs_coords,
    sigma,
    max_targets: int = ORACLE_MAX_TARGETS,
    max_bs: int = ORACLE_MAX_BS,
):
    """Global minimum of the weighted range objective over all (K!)^(M-1) associations."""
    from .localization import LocalizationResult, TargetSolver, weight_matrix

    anchors = np.asarray(bs_coords, dtype=float)
    n_bs = len(anchors)
    k_count = check_range_set_sizes(range_sets, n_bs)
    if k_count > max_targets or n_bs > max_bs:
        raise ComplexityGuard(
            f"Exhaustive search limited to K<={max_targets}, M<={max_bs} (got K={k_count}, M={n_bs})"
        )
    solver = TargetSolver(anchors, range_sets, weight_matrix(sigma, n_bs, k_count))
    identity = tuple(range(1, k_count + 1))

    best_cost = np.inf
    best_rows = None
    evaluated = 0
    for rows in product(permutations(identity), repeat=n_bs - 1):
        evaluated += 1
        g = (identity,) + rows
        cost = 0.0
        for k in range(k_count):
            cost += solver.solve(tuple(row[k] for row in g)).objective
            if cost >= best_cost:
                break
        if cost < best_cost:
            best_cost, best_rows = cost, g

    association = Association(np.array(best_rows))
    return LocalizationResult.from_solver(solver, association, candidates_evaluated=evaluated)
