import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nichedistill.spatial import NeighborhoodIndex, build_index, calibrate_radius, neighborhood_of
from nichedistill.table import CellRecord, CellTable


def brute_radius(xy, point, r):
    """Reference oracle: exhaustive distance filter, sorted by (d^2, index)."""
    delta = xy - np.asarray(point, dtype=np.float64)
    d2 = delta[:, 0] * delta[:, 0] + delta[:, 1] * delta[:, 1]
    keep = np.flatnonzero(d2 <= r * r)
    return keep[np.lexsort((keep, d2[keep]))]


def table_from_xy(xy):
    records = [
        CellRecord(id=f"c{i:06d}", x_um=float(x), y_um=float(y), embedding=np.zeros(1))
        for i, (x, y) in enumerate(xy)
    ]
    return CellTable.from_records(records)


class TestQuery:
    def test_single_cell(self):
        idx = NeighborhoodIndex(np.array([[5.0, 5.0]]))
        np.testing.assert_array_equal(idx.query_radius([5.0, 5.0], 1.0), [0])

    def test_matches_brute_force(self):
        rng = np.random.default_rng(3)
        xy = rng.uniform(0, 100, size=(100, 2))
        idx = NeighborhoodIndex(xy)
        for i in range(0, 100, 7):
            got = idx.query_radius(xy[i], 10.0)
            np.testing.assert_array_equal(got, brute_radius(xy, xy[i], 10.0))

    def test_coincident_cells_r_zero(self):
        xy = np.array([[1.0, 2.0], [1.0, 2.0], [3.0, 3.0]])
        idx = NeighborhoodIndex(xy)
        np.testing.assert_array_equal(idx.query_radius([1.0, 2.0], 0.0), [0, 1])

    def test_boundary_tie_included(self):
        # (3,4) lies at distance exactly 5 from the origin
        xy = np.array([[0.0, 0.0], [3.0, 4.0], [5.1, 0.0]])
        idx = NeighborhoodIndex(xy)
        np.testing.assert_array_equal(idx.query_radius([0.0, 0.0], 5.0), [0, 1])

    def test_empty_result(self):
        idx = NeighborhoodIndex(np.array([[0.0, 0.0]]))
        assert idx.query_radius([100.0, 100.0], 1.0).size == 0

    @settings(max_examples=60, deadline=None)
    @given(
        pts=st.lists(
            st.tuples(st.integers(0, 12), st.integers(0, 12)),
            min_size=1,
            max_size=50,
        ),
        cx=st.integers(0, 12),
        cy=st.integers(0, 12),
        r2=st.integers(0, 80),
    )
    def test_property_matches_brute_force(self, pts, cx, cy, r2):
        xy = np.array(pts, dtype=np.float64)
        idx = NeighborhoodIndex(xy)
        r = float(np.sqrt(r2))
        got = idx.query_radius([float(cx), float(cy)], r)
        np.testing.assert_array_equal(got, brute_radius(xy, [cx, cy], r))


class TestBuild:
    def test_empty_table_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            build_index(CellTable.from_records([]))

    def test_from_table(self):
        t = table_from_xy([(0.0, 0.0), (1.0, 0.0)])
        idx = build_index(t)
        assert idx.n == 2
        assert idx.radius_um is None


def poisson_field(lam, side, seed):
    rng = np.random.default_rng(seed)
    n = rng.poisson(lam * side * side)
    return rng.uniform(0, side, size=(n, 2))


class TestCalibration:
    def test_poisson_closed_form(self):
        lam = 0.01
        xy = poisson_field(lam, 1000.0, seed=11)
        idx = NeighborhoodIndex(xy)
        r = calibrate_radius(idx, target_count=20, n_samples=1000, seed=5)
        oracle = np.sqrt(20 / (np.pi * lam))
        assert abs(r - oracle) <= 0.10 * oracle
        assert idx.radius_um == r

    def test_doubling_density_shrinks_r_by_sqrt2(self):
        r_by_lam = {}
        for lam in (0.01, 0.02):
            xy = poisson_field(lam, 1000.0, seed=23)
            idx = NeighborhoodIndex(xy)
            r_by_lam[lam] = calibrate_radius(idx, target_count=20, n_samples=1000, seed=5)
        ratio = r_by_lam[0.02] / r_by_lam[0.01]
        assert abs(ratio - 1 / np.sqrt(2)) < 0.1

    def test_realized_mean_near_target(self):
        xy = poisson_field(0.01, 1000.0, seed=31)
        idx = NeighborhoodIndex(xy)
        r = calibrate_radius(idx, target_count=20, n_samples=1000, seed=5)
        counts = idx.tree.query_ball_point(xy, r, return_length=True)
        assert 0.9 * 20 <= counts.mean() <= 1.1 * 20

    def test_target_one(self):
        rng = np.random.default_rng(2)
        xy = rng.uniform(0, 100, size=(50, 2))
        idx = NeighborhoodIndex(xy)
        r = calibrate_radius(idx, target_count=1, n_samples=200, seed=0)
        assert r > 0
        counts = idx.tree.query_ball_point(xy, r, return_length=True)
        assert counts.mean() >= 1.0  # every center counts itself

    def test_monotone_in_target(self):
        xy = poisson_field(0.01, 800.0, seed=7)
        idx = NeighborhoodIndex(xy)
        radii = [
            calibrate_radius(idx, target_count=t, n_samples=500, seed=9)
            for t in (5, 10, 20, 40)
        ]
        assert all(a <= b for a, b in zip(radii, radii[1:]))

    def test_unreachable_target_names_maximum(self):
        rng = np.random.default_rng(4)
        idx = NeighborhoodIndex(rng.uniform(0, 10, size=(10, 2)))
        with pytest.raises(ValueError, match="achievable maximum.*10"):
            calibrate_radius(idx, target_count=20)

    def test_deterministic_given_seed(self):
        xy = poisson_field(0.01, 500.0, seed=13)
        r1 = calibrate_radius(NeighborhoodIndex(xy), target_count=15, seed=42)
        r2 = calibrate_radius(NeighborhoodIndex(xy), target_count=15, seed=42)
        assert r1 == r2

    def test_mask_restricts_pool(self):
        # allowed cells packed tightly, excluded cells far away and sparse:
        # calibrating on the mask must ignore the sparse region entirely
        rng = np.random.default_rng(17)
        dense = rng.uniform(0, 100, size=(400, 2))
        sparse = rng.uniform(5000, 6000, size=(50, 2))
        xy = np.vstack([dense, sparse])
        idx = NeighborhoodIndex(xy)
        allowed = np.zeros(len(xy), dtype=bool)
        allowed[:400] = True
        r = calibrate_radius(idx, target_count=10, n_samples=500, seed=3, allowed=allowed)
        oracle = np.sqrt(10 / (np.pi * 0.04))  # dense region density 400/100^2
        assert abs(r - oracle) <= 0.2 * oracle

    def test_mask_excluding_all_rejected(self):
        idx = NeighborhoodIndex(np.zeros((3, 2)))
        with pytest.raises(ValueError, match="excludes every cell"):
            calibrate_radius(idx, target_count=1, allowed=np.zeros(3, dtype=bool))


class TestNeighborhoodOf:
    def test_isolated_cell(self):
        idx = NeighborhoodIndex(np.array([[0.0, 0.0], [500.0, 500.0]]))
        nb = neighborhood_of(idx, 0, radius_um=10.0)
        np.testing.assert_array_equal(nb.members, [0])
        np.testing.assert_array_equal(nb.rel_coords, [[0.0, 0.0]])

    def test_center_rel_coords_zero(self):
        rng = np.random.default_rng(5)
        xy = rng.uniform(0, 50, size=(30, 2))
        idx = NeighborhoodIndex(xy)
        nb = neighborhood_of(idx, 4, radius_um=20.0)
        at_center = np.flatnonzero(nb.members == 4)[0]
        np.testing.assert_array_equal(nb.rel_coords[at_center], [0.0, 0.0])

    def test_mask_excludes_member(self):
        xy = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [50.0, 50.0]])
        idx = NeighborhoodIndex(xy)
        allowed = np.array([True, True, False, True, True])
        nb = neighborhood_of(idx, 0, allowed=allowed, radius_um=2.0)
        np.testing.assert_array_equal(np.sort(nb.members), [0, 1, 3])

    def test_masked_center_rejected(self):
        idx = NeighborhoodIndex(np.zeros((2, 2)))
        allowed = np.array([False, True])
        with pytest.raises(ValueError, match="excluded by the allowed mask"):
            neighborhood_of(idx, 0, allowed=allowed, radius_um=1.0)

    def test_uncalibrated_rejected(self):
        idx = NeighborhoodIndex(np.zeros((1, 2)))
        with pytest.raises(ValueError, match="not calibrated"):
            neighborhood_of(idx, 0)

    def test_truncation_keeps_nearest(self):
        rng = np.random.default_rng(19)
        angles = rng.uniform(0, 2 * np.pi, size=50)
        radii = rng.uniform(0.5, 9.5, size=50)
        ring = np.column_stack([radii * np.cos(angles), radii * np.sin(angles)])
        xy = np.vstack([[0.0, 0.0], ring])
        idx = NeighborhoodIndex(xy, max_neighbors=32)
        nb = neighborhood_of(idx, 0, radius_um=10.0)
        assert len(nb.members) == 32
        oracle = brute_radius(xy, xy[0], 10.0)[:32]
        np.testing.assert_array_equal(nb.members, oracle)

    def test_truncation_never_evicts_center(self):
        # 70 coincident points; ties break toward smaller index, which
        # would push center 69 out of a 64-wide cut without protection
        xy = np.zeros((70, 2))
        idx = NeighborhoodIndex(xy, max_neighbors=64)
        nb = neighborhood_of(idx, 69, radius_um=1.0)
        assert len(nb.members) == 64
        assert 69 in nb.members

    def test_members_within_radius(self):
        rng = np.random.default_rng(21)
        xy = rng.uniform(0, 30, size=(200, 2))
        idx = NeighborhoodIndex(xy)
        nb = neighborhood_of(idx, 17, radius_um=8.0)
        dist = np.hypot(nb.rel_coords[:, 0], nb.rel_coords[:, 1])
        assert np.all(dist <= 8.0)

    def test_matches_brute_force_with_mask(self):
        rng = np.random.default_rng(29)
        xy = rng.uniform(0, 40, size=(300, 2))
        allowed = rng.random(300) < 0.7
        allowed[11] = True
        idx = NeighborhoodIndex(xy)
        nb = neighborhood_of(idx, 11, allowed=allowed, radius_um=12.0)
        oracle = brute_radius(xy, xy[11], 12.0)
        oracle = oracle[allowed[oracle]][: idx.max_neighbors]
        np.testing.assert_array_equal(nb.members, oracle)
