import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nichedistill.metrics import (
    CompositionMatrix,
    align_niches,
    ari,
    composition,
    composition_matrix,
    jsd,
    macro_f1,
    nmi,
    permutation_test,
)


def ari_pair_oracle(a, b):
    """Exhaustive pair counting straight from the definition."""
    n11 = n10 = n01 = n00 = 0
    n = len(a)
    for i in range(n):
        for j in range(i + 1, n):
            same_a, same_b = a[i] == a[j], b[i] == b[j]
            if same_a and same_b:
                n11 += 1
            elif same_a:
                n10 += 1
            elif same_b:
                n01 += 1
            else:
                n00 += 1
    rows, cols = n11 + n10, n11 + n01
    total = n11 + n10 + n01 + n00
    expected = rows * cols / total
    maximum = (rows + cols) / 2
    return 1.0 if maximum == expected else (n11 - expected) / (maximum - expected)


def nmi_oracle(a, b):
    """Direct entropy / mutual-information evaluation."""
    n = len(a)
    ca, cb = sorted(set(a)), sorted(set(b))
    if len(ca) < 2 or len(cb) < 2:
        return 0.0
    mi = 0.0
    for x in ca:
        for y in cb:
            nxy = sum(1 for i in range(n) if a[i] == x and b[i] == y)
            if nxy:
                nx = sum(1 for v in a if v == x)
                ny = sum(1 for v in b if v == y)
                mi += (nxy / n) * math.log(n * nxy / (nx * ny))
    ha = -sum((list(a).count(x) / n) * math.log(list(a).count(x) / n) for x in ca)
    hb = -sum((list(b).count(y) / n) * math.log(list(b).count(y) / n) for y in cb)
    return mi / ((ha + hb) / 2)


class TestAri:
    def test_identical_exactly_one(self):
        labels = [0, 0, 1, 2, 2, 1]
        assert ari(labels, labels) == 1.0

    def test_relabel_gives_one(self):
        assert ari([0, 0, 1, 1], [1, 1, 0, 0]) == 1.0

    def test_four_point_example(self):
        a, b = [0, 0, 1, 1], [0, 1, 1, 1]
        np.testing.assert_allclose(ari(a, b), ari_pair_oracle(a, b), rtol=1e-12)

    def test_random_labelings_match_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(60):
            n = int(rng.integers(2, 13))
            a = rng.integers(0, 4, size=n)
            b = rng.integers(0, 4, size=n)
            np.testing.assert_allclose(ari(a, b), ari_pair_oracle(list(a), list(b)),
                                       rtol=1e-12, atol=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(
        labels=st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=2, max_size=30),
        seed=st.integers(0, 100),
    )
    def test_property_relabel_invariance_exact(self, labels, seed):
        a = np.array([x for x, _ in labels])
        b = np.array([y for _, y in labels])
        rng = np.random.default_rng(seed)
        perm_a = rng.permutation(4)
        perm_b = rng.permutation(4)
        assert ari(a, b) == ari(perm_a[a], b)
        assert ari(a, b) == ari(a, perm_b[b])

    def test_random_partitions_near_zero(self):
        rng = np.random.default_rng(7)
        vals = [
            ari(rng.integers(0, 10, 3000), rng.integers(0, 10, 3000)) for _ in range(8)
        ]
        assert abs(np.mean(vals)) < 0.02

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="lengths differ"):
            ari([0, 1], [0, 1, 2])

    def test_too_short(self):
        with pytest.raises(ValueError, match="at least 2"):
            ari([0], [0])


class TestNmi:
    def test_identical_exactly_one(self):
        assert nmi([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0
        assert nmi([0, 1, 2, 0, 1, 2], [2, 0, 1, 2, 0, 1]) == 1.0

    def test_constant_labeling_zero_with_warning(self):
        with pytest.warns(UserWarning, match="single-class"):
            assert nmi([0, 0, 0], [0, 1, 2]) == 0.0
        with pytest.warns(UserWarning):
            assert nmi([0, 0, 0], [0, 0, 0]) == 0.0

    def test_four_point_example(self):
        a, b = [0, 0, 1, 1], [0, 1, 1, 1]
        np.testing.assert_allclose(nmi(a, b), nmi_oracle(a, b), rtol=1e-12)

    def test_random_labelings_match_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(40):
            n = int(rng.integers(4, 13))
            a = list(rng.integers(0, 3, size=n))
            b = list(rng.integers(0, 3, size=n))
            if len(set(a)) < 2 or len(set(b)) < 2:
                continue
            np.testing.assert_allclose(nmi(a, b), nmi_oracle(a, b), rtol=1e-10, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(
        labels=st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=2, max_size=30),
        seed=st.integers(0, 100),
    )
    def test_property_relabel_invariance_exact(self, labels, seed):
        a = np.array([x for x, _ in labels])
        b = np.array([y for _, y in labels])
        rng = np.random.default_rng(seed)
        perm = rng.permutation(4)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            assert nmi(a, b) == nmi(perm[a], b)
            assert nmi(a, b) == nmi(a, perm[b])

    def test_bounds(self):
        rng = np.random.default_rng(2)
        for _ in range(30):
            v = nmi(rng.integers(0, 5, 50), rng.integers(0, 5, 50))
            assert 0.0 <= v <= 1.0


class TestJsd:
    def test_equal_is_zero(self):
        p = np.array([0.2, 0.3, 0.5])
        assert jsd(p, p.copy()) == 0.0

    def test_disjoint_support_is_one(self):
        assert jsd([1.0, 0.0], [0.0, 1.0]) == 1.0

    def test_half_overlap_value(self):
        # 0.5*KL(p||m) + 0.5*KL(q||m) with m = [0.75, 0.25]
        expected = 0.5 * math.log2(1 / 0.75) + 0.5 * (
            0.5 * math.log2(0.5 / 0.75) + 0.5 * math.log2(0.5 / 0.25)
        )
        np.testing.assert_allclose(jsd([1.0, 0.0], [0.5, 0.5]), expected, rtol=1e-12)
        np.testing.assert_allclose(expected, 0.3112781, atol=5e-8)

    def test_symmetric_and_bounded(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            k = int(rng.integers(2, 8))
            p = rng.dirichlet(np.ones(k))
            q = rng.dirichlet(np.ones(k))
            d1, d2 = jsd(p, q), jsd(q, p)
            assert d1 == d2
            assert 0.0 <= d1 <= 1.0

    def test_rejects_unnormalized(self):
        with pytest.raises(ValueError, match="sum to 1"):
            jsd([0.5, 0.6], [0.5, 0.5])

    def test_rejects_negative(self):
        with pytest.raises(ValueError, match="non-negative"):
            jsd([1.5, -0.5], [0.5, 0.5])

    def test_rejects_length_mismatch(self):
        with pytest.raises(ValueError, match="length mismatch"):
            jsd([1.0], [0.5, 0.5])


class TestComposition:
    def test_rows_weights_empty(self):
        labels = np.array([0, 0, 2, 2, 2, 0])
        types = np.array([0, 1, 1, 1, 0, 0])
        cm = composition(labels, types, n_niches=3, n_types=2)
        np.testing.assert_allclose(cm.rows[0], [2 / 3, 1 / 3])
        np.testing.assert_allclose(cm.rows[2], [1 / 3, 2 / 3])
        np.testing.assert_allclose(cm.rows[1], [0.5, 0.5])  # empty: uniform
        np.testing.assert_array_equal(cm.empty, [False, True, False])
        np.testing.assert_allclose(cm.weights, [0.5, 0.0, 0.5])
        assert abs(cm.weights.sum() - 1.0) < 1e-12

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError, match=r"\[0, 2\)"):
            composition_matrix(np.array([0, 2]), np.array([0, 0]), 2, 1)


def random_composition(k, c, rng, weights=None):
    rows = rng.dirichlet(np.ones(c), size=k)
    if weights is None:
        w = rng.dirichlet(np.ones(k))
    else:
        w = np.asarray(weights, dtype=np.float64)
    return CompositionMatrix(rows=rows, weights=w, empty=np.zeros(k, dtype=bool))


def exhaustive_alignment(teacher, method, weighted=True):
    """Try every injection of the smaller side; return the best score."""
    kt, km = teacher.rows.shape[0], method.rows.shape[0]
    best = None
    size = min(kt, km)
    jsd_full = np.array([[jsd(t, m) for m in method.rows] for t in teacher.rows])
    if kt <= km:
        candidates = [list(zip(range(kt), p)) for p in itertools.permutations(range(km), kt)]
    else:
        candidates = [list(zip(p, range(km))) for p in itertools.permutations(range(kt), km)]
    for pairs in candidates:
        cost = sum(
            (teacher.weights[t] if weighted else 1.0) * jsd_full[t, m] for t, m in pairs
        )
        if best is None or cost < best[0] - 1e-15:
            best = (cost, pairs)
    assert len(best[1]) == size
    return best


class TestAlignNiches:
    def test_identical_matrices_zero(self):
        rng = np.random.default_rng(4)
        cm = random_composition(5, 4, rng)
        out = align_niches(cm, cm)
        assert out.weighted_mean_jsd == 0.0
        assert len(out.pairs) == 5
        assert out.excluded_pairs == []

    def test_matches_exhaustive_search(self):
        rng = np.random.default_rng(5)
        for k in (2, 3, 4, 5, 6):
            teacher = random_composition(k, 4, rng)
            method = random_composition(k, 4, rng)
            out = align_niches(teacher, method)
            best_cost, _ = exhaustive_alignment(teacher, method)
            got_cost = sum(
                teacher.weights[t] * out.pair_jsd[i] for i, (t, _) in enumerate(out.pairs)
            )
            np.testing.assert_allclose(got_cost, best_cost, rtol=1e-10, atol=1e-12)

    def test_unweighted_mode_matches_exhaustive(self):
        rng = np.random.default_rng(13)
        teacher = random_composition(4, 3, rng)
        method = random_composition(4, 3, rng)
        out = align_niches(teacher, method, weighted=False)
        best_cost, _ = exhaustive_alignment(teacher, method, weighted=False)
        got = sum(out.pair_jsd)
        np.testing.assert_allclose(got, best_cost, rtol=1e-10)

    def test_method_permutation_invariance(self):
        rng = np.random.default_rng(6)
        teacher = random_composition(4, 3, rng)
        method = random_composition(4, 3, rng)
        base = align_niches(teacher, method).weighted_mean_jsd
        perm = rng.permutation(4)
        permuted = CompositionMatrix(
            rows=method.rows[perm], weights=method.weights[perm], empty=method.empty[perm]
        )
        assert align_niches(teacher, permuted).weighted_mean_jsd == base

    def test_rectangular_bijection_on_min(self):
        rng = np.random.default_rng(7)
        out = align_niches(random_composition(3, 4, rng), random_composition(6, 4, rng))
        assert len(out.pairs) == 3
        assert len({m for _, m in out.pairs}) == 3
        out = align_niches(random_composition(6, 4, rng), random_composition(3, 4, rng))
        assert len(out.pairs) == 3
        assert len({t for t, _ in out.pairs}) == 3

    def test_empty_niche_excluded_and_reported(self):
        rng = np.random.default_rng(8)
        teacher = random_composition(3, 4, rng, weights=[0.5, 0.5, 0.0])
        teacher.empty[2] = True
        teacher.rows[2] = 0.25
        method = CompositionMatrix(
            rows=teacher.rows.copy(), weights=teacher.weights.copy(),
            empty=teacher.empty.copy(),
        )
        out = align_niches(teacher, method)
        assert out.weighted_mean_jsd == 0.0
        assert (2, 2) in out.excluded_pairs

    def test_vocabulary_mismatch_rejected(self):
        rng = np.random.default_rng(9)
        a = random_composition(3, 4, rng)
        b = random_composition(3, 5, rng)
        with pytest.raises(ValueError, match="vocabularies differ"):
            align_niches(a, b)
        c = random_composition(3, 4, rng)
        a.vocab, c.vocab = ("t0", "t1", "t2", "t3"), ("t0", "t1", "t2", "xx")
        with pytest.raises(ValueError, match="vocabularies differ"):
            align_niches(a, c)

    def test_score_in_unit_interval(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            out = align_niches(random_composition(4, 3, rng), random_composition(4, 3, rng))
            assert 0.0 <= out.weighted_mean_jsd <= 1.0


class TestPermutationTest:
    def test_single_niche_fraction_one(self):
        rng = np.random.default_rng(11)
        cm = random_composition(1, 3, rng, weights=[1.0])
        out = align_niches(cm, cm)
        assert permutation_test(cm, cm, out, n_draws=100, seed=0) == 1.0

    def test_identity_fraction_matches_factorial(self):
        # distinct rows: only the identity permutation scores 0, so the
        # fraction estimates 1/3! = 1/6
        rng = np.random.default_rng(12)
        cm = random_composition(3, 6, rng)
        out = align_niches(cm, cm)
        frac = permutation_test(cm, cm, out, n_draws=12_000, seed=3)
        assert abs(frac - 1 / 6) < 0.02

    def test_deterministic(self):
        rng = np.random.default_rng(14)
        teacher = random_composition(4, 3, rng)
        method = random_composition(4, 3, rng)
        out = align_niches(teacher, method)
        a = permutation_test(teacher, method, out, n_draws=500, seed=9)
        b = permutation_test(teacher, method, out, n_draws=500, seed=9)
        assert a == b
        assert 0.0 <= a <= 1.0

    def test_rectangular_sides(self):
        rng = np.random.default_rng(15)
        teacher = random_composition(2, 3, rng)
        method = random_composition(5, 3, rng)
        out = align_niches(teacher, method)
        frac = permutation_test(teacher, method, out, n_draws=300, seed=1)
        assert 0.0 <= frac <= 1.0
        frac = permutation_test(method, teacher, align_niches(method, teacher), n_draws=300, seed=1)
        assert 0.0 <= frac <= 1.0


class TestMacroF1:
    def test_perfect(self):
        y = [0, 1, 2, 0, 1, 2]
        assert macro_f1(y, y) == 1.0

    def test_majority_class_value(self):
        # always predict class 0 on a balanced 3-class set: class 0 gets
        # precision 1/3 and recall 1, so F1 = 1/2; the others get 0
        y_true = [0, 0, 1, 1, 2, 2]
        y_pred = [0, 0, 0, 0, 0, 0]
        np.testing.assert_allclose(macro_f1(y_true, y_pred), (0.5 + 0.0 + 0.0) / 3, rtol=1e-12)

    def test_absent_class_warns_and_counts_zero(self):
        with pytest.warns(UserWarning, match="absent"):
            value = macro_f1([0, 0, 1], [0, 0, 1], classes=[0, 1, 2])
        np.testing.assert_allclose(value, 2 / 3, rtol=1e-12)

    def test_zero_denominator_convention(self):
        # class 1 never predicted: precision 0 by convention, F1 0
        assert macro_f1([1, 1], [0, 0], classes=[1]) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="length mismatch"):
            macro_f1([0, 1], [0])
