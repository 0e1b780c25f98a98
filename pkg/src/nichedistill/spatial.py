"""Fixed-radius spatial neighborhoods over cell centroids.

A KD-tree answers closed-ball queries (ties at exactly r are kept),
and the working radius is calibrated by bisection so that the mean
neighbor count at locations sampled from existing cells matches a
target. Counts include the center cell itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .table import CellTable


@dataclass
class Neighborhood:
    """Cells within the calibrated radius of one center, nearest-first."""

    center: int
    members: np.ndarray
    rel_coords: np.ndarray


class NeighborhoodIndex:
    """Immutable KD-tree over centroids plus the calibrated radius."""

    def __init__(self, xy: np.ndarray, max_neighbors: int = 64):
        if len(xy) == 0:
            raise ValueError("cannot build a spatial index over an empty table")
        if max_neighbors < 1:
            raise ValueError("max_neighbors must be >= 1")
        self.xy = np.asarray(xy, dtype=np.float64)
        self.n = len(self.xy)
        self.tree = cKDTree(self.xy)
        self.max_neighbors = max_neighbors
        self.radius_um: Optional[float] = None

    def query_radius(self, point: np.ndarray, r: float) -> np.ndarray:
        """Indices with squared distance <= r*r, sorted by (distance, index)."""
        cand = np.array(self.tree.query_ball_point(point, r), dtype=np.int64)
        if cand.size == 0:
            return cand
        delta = self.xy[cand] - np.asarray(point, dtype=np.float64)
        d2 = delta[:, 0] * delta[:, 0] + delta[:, 1] * delta[:, 1]
        keep = d2 <= r * r
        cand, d2 = cand[keep], d2[keep]
        order = np.lexsort((cand, d2))
        return cand[order]


def build_index(cells: CellTable, max_neighbors: int = 64) -> NeighborhoodIndex:
    return NeighborhoodIndex(cells.xy, max_neighbors=max_neighbors)


def _mean_count(tree: cKDTree, sample_pts: np.ndarray, r: float) -> float:
    counts = tree.query_ball_point(sample_pts, r, return_length=True)
    return float(np.mean(counts))


def calibrate_radius(
    index: NeighborhoodIndex,
    target_count: int = 20,
    n_samples: int = 1000,
    seed: int = 0,
    allowed: Optional[np.ndarray] = None,
    rel_tol: float = 0.05,
    max_iters: int = 40,
) -> float:
    """Bisect for the radius whose mean neighbor count hits the target.

    Sample locations are drawn (with replacement) from the positions of
    allowed cells, and counts are taken over allowed cells only, so the
    sampled cell always counts itself. The sample is fixed up front,
    making the count a nondecreasing function of r.
    """
    if target_count < 1:
        raise ValueError("target_count must be >= 1")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if allowed is None:
        pool = index.xy
        tree = index.tree
    else:
        allowed = np.asarray(allowed, dtype=bool)
        if allowed.shape != (index.n,):
            raise ValueError(f"allowed mask length {allowed.shape} != table size {index.n}")
        pool = index.xy[allowed]
        if len(pool) == 0:
            raise ValueError("allowed mask excludes every cell")
        tree = cKDTree(pool)
    if len(pool) < target_count:
        raise ValueError(
            f"target_count {target_count} is unreachable: the achievable maximum "
            f"mean neighbor count is {len(pool)}"
        )

    rng = np.random.default_rng(seed)
    sample_pts = pool[rng.integers(0, len(pool), size=n_samples)]

    xmin, ymin = pool.min(axis=0)
    xmax, ymax = pool.max(axis=0)
    hi = float(np.hypot(xmax - xmin, ymax - ymin))
    if hi == 0.0:
        hi = 1.0  # all cells coincident; any positive r sees them all
    lo = 0.0
    r = hi
    for _ in range(max_iters):
        mid = 0.5 * (lo + hi)
        mean = _mean_count(tree, sample_pts, mid)
        if abs(mean - target_count) <= rel_tol * target_count:
            r = mid
            break
        if mean < target_count:
            lo = mid
        else:
            hi = mid
        r = hi
    if r <= 0.0:
        r = hi if hi > 0 else np.finfo(np.float64).tiny
    index.radius_um = float(r)
    return float(r)


def neighborhood_of(
    index: NeighborhoodIndex,
    cell: int,
    allowed: Optional[np.ndarray] = None,
    radius_um: Optional[float] = None,
) -> Neighborhood:
    """Allowed cells within the radius of ``cell``, nearest-first.

    Truncation to ``max_neighbors`` keeps the nearest members (ties
    broken by smaller index), except that the center is always kept.
    """
    r = radius_um if radius_um is not None else index.radius_um
    if r is None:
        raise ValueError("index is not calibrated; pass radius_um or run calibrate_radius")
    if not 0 <= cell < index.n:
        raise IndexError(f"cell index {cell} out of range [0, {index.n})")
    if allowed is not None:
        allowed = np.asarray(allowed, dtype=bool)
        if allowed.shape != (index.n,):
            raise ValueError(f"allowed mask length {allowed.shape} != table size {index.n}")
        if not allowed[cell]:
            raise ValueError(f"center cell {cell} is excluded by the allowed mask")

    members = index.query_radius(index.xy[cell], r)
    if allowed is not None:
        members = members[allowed[members]]
    if len(members) > index.max_neighbors:
        kept = members[: index.max_neighbors]
        if cell not in kept:
            # coincident ties can push the center past the cap; the
            # center must survive truncation
            kept = np.concatenate([kept[:-1], [cell]])
            delta = index.xy[kept] - index.xy[cell]
            d2 = delta[:, 0] * delta[:, 0] + delta[:, 1] * delta[:, 1]
            kept = kept[np.lexsort((kept, d2))]
        members = kept
    rel = index.xy[members] - index.xy[cell]
    return Neighborhood(center=cell, members=members, rel_coords=rel)
