"""Evaluation machinery: agreement scores, composition divergence with
one-to-one niche alignment, permutation significance, and probe scoring.

ARI uses exact integer pair counting, and NMI sums its terms in sorted
order, so both are exactly invariant to relabeling either partition.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment


def composition_matrix(
    labels: np.ndarray,
    type_codes: np.ndarray,
    n_labels: int,
    n_types: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-label empirical cell-type distributions.

    Returns (matrix, empty) where matrix[k] is the type distribution
    among cells labeled k and empty[k] marks labels with no cells;
    empty rows are filled with the uniform distribution so downstream
    divergences stay defined.
    """
    labels = np.asarray(labels)
    type_codes = np.asarray(type_codes)
    if labels.shape != type_codes.shape:
        raise ValueError(f"labels shape {labels.shape} != type codes shape {type_codes.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_labels):
        raise ValueError(f"labels must lie in [0, {n_labels})")
    if type_codes.size and (type_codes.min() < 0 or type_codes.max() >= n_types):
        raise ValueError(f"type codes must lie in [0, {n_types})")
    counts = np.zeros((n_labels, n_types), dtype=np.float64)
    np.add.at(counts, (labels, type_codes), 1.0)
    totals = counts.sum(axis=1)
    empty = totals == 0
    matrix = np.empty_like(counts)
    matrix[~empty] = counts[~empty] / totals[~empty, None]
    matrix[empty] = 1.0 / n_types
    return matrix, empty


def _contingency(labels_a, labels_b) -> np.ndarray:
    a = np.asarray(labels_a).ravel()
    b = np.asarray(labels_b).ravel()
    if a.shape != b.shape:
        raise ValueError(f"label lengths differ: {a.shape[0]} vs {b.shape[0]}")
    if a.size < 2:
        raise ValueError("need at least 2 points")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    return table


def ari(labels_a, labels_b) -> float:
    """Adjusted Rand index, computed in exact integer arithmetic.

    The degenerate zero-denominator cases (both partitions trivial)
    only arise for identical partitions and return 1.0.
    """
    table = _contingency(labels_a, labels_b)
    n = int(table.sum())

    def comb2(values) -> int:
        return sum(int(v) * (int(v) - 1) // 2 for v in values)

    sum_cells = comb2(table.ravel())
    sum_rows = comb2(table.sum(axis=1))
    sum_cols = comb2(table.sum(axis=0))
    total = n * (n - 1) // 2
    # (sum_cells - rc/total) / ((rows+cols)/2 - rc/total), scaled by 2*total
    num = 2 * total * sum_cells - 2 * sum_rows * sum_cols
    den = total * (sum_rows + sum_cols) - 2 * sum_rows * sum_cols
    return 1.0 if den == 0 else num / den


def _sorted_float_sum(terms: np.ndarray) -> float:
    # canonical addend order makes the sum a function of the term
    # multiset, so relabeling (which only reorders terms) is exact
    return float(np.add.reduce(np.sort(terms)))


def nmi(labels_a, labels_b) -> float:
    """Mutual information normalized by the arithmetic mean of entropies.

    A labeling with a single class has zero entropy; that degenerate
    case is defined as 0 and warned about.
    """
    table = _contingency(labels_a, labels_b)
    rows = table.sum(axis=1)
    cols = table.sum(axis=0)
    if len(rows) < 2 or len(cols) < 2:
        warnings.warn("single-class labeling: NMI defined as 0", stacklevel=2)
        return 0.0
    n = float(table.sum())

    ti, tj = np.nonzero(table)
    nij = table[ti, tj].astype(np.float64)
    prod = (rows[ti] * cols[tj]).astype(np.float64)
    mi_terms = (nij / n) * np.log((n * nij) / prod)
    mi = max(0.0, _sorted_float_sum(mi_terms))

    def entropy(marginal) -> float:
        m = marginal.astype(np.float64)
        return _sorted_float_sum((m / n) * np.log(n / m))

    value = mi / (0.5 * (entropy(rows) + entropy(cols)))
    return min(1.0, max(0.0, value))


def _check_distribution(p: np.ndarray, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError(f"{name} must be a vector")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError(f"{name} must be non-negative and finite")
    if abs(float(p.sum()) - 1.0) > 1e-9:
        raise ValueError(f"{name} must sum to 1 within 1e-9, got {float(p.sum())!r}")
    return p


def jsd(p, q) -> float:
    """Jensen-Shannon divergence in bits; 0 iff p = q, at most 1."""
    p = _check_distribution(p, "p")
    q = _check_distribution(q, "q")
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape[0]} vs {q.shape[0]}")
    m = 0.5 * (p + q)

    def half_kl(x: np.ndarray) -> float:
        nz = x > 0
        return float(np.sum(x[nz] * np.log2(x[nz] / m[nz])))

    return min(1.0, max(0.0, 0.5 * half_kl(p) + 0.5 * half_kl(q)))


@dataclass
class CompositionMatrix:
    """Per-niche cell-type mixtures plus niche weights."""

    rows: np.ndarray
    weights: np.ndarray
    empty: np.ndarray
    vocab: Optional[tuple[str, ...]] = None

    @property
    def n_niches(self) -> int:
        return self.rows.shape[0]

    @property
    def n_types(self) -> int:
        return self.rows.shape[1]


def composition(
    labels: np.ndarray,
    type_codes: np.ndarray,
    n_niches: int,
    n_types: int,
    vocab: Optional[Sequence[str]] = None,
) -> CompositionMatrix:
    """Empirical composition rows, niche weights, and empty flags."""
    rows, empty = composition_matrix(labels, type_codes, n_niches, n_types)
    counts = np.bincount(np.asarray(labels), minlength=n_niches).astype(np.float64)
    n = counts.sum()
    weights = counts / n if n > 0 else counts
    return CompositionMatrix(
        rows=rows,
        weights=weights,
        empty=empty,
        vocab=tuple(vocab) if vocab is not None else None,
    )


@dataclass
class NicheAlignment:
    """One-to-one teacher-to-method matching and its summary score."""

    pairs: list[tuple[int, int]]
    pair_jsd: np.ndarray
    weighted_mean_jsd: float
    excluded_pairs: list[tuple[int, int]]
    permutation_fraction: Optional[float] = None


def _check_same_vocabulary(teacher: CompositionMatrix, method: CompositionMatrix) -> None:
    if teacher.n_types != method.n_types:
        raise ValueError(
            f"cell-type vocabularies differ: {teacher.n_types} vs {method.n_types} types"
        )
    if (
        teacher.vocab is not None
        and method.vocab is not None
        and teacher.vocab != method.vocab
    ):
        raise ValueError("cell-type vocabularies differ")


def _jsd_matrix(teacher: CompositionMatrix, method: CompositionMatrix) -> np.ndarray:
    return np.array(
        [[jsd(trow, mrow) for mrow in method.rows] for trow in teacher.rows]
    )


def _excluded_weighted_mean(
    teacher: CompositionMatrix,
    method: CompositionMatrix,
    pairs: list[tuple[int, int]],
    pair_jsd: np.ndarray,
) -> tuple[float, list[tuple[int, int]]]:
    excluded = [(t, m) for t, m in pairs if teacher.empty[t] or method.empty[m]]
    kept = [i for i, (t, m) in enumerate(pairs) if not (teacher.empty[t] or method.empty[m])]
    wsum = float(sum(teacher.weights[pairs[i][0]] for i in kept))
    if wsum == 0.0:
        return 0.0, excluded
    score = float(sum(teacher.weights[pairs[i][0]] * pair_jsd[i] for i in kept)) / wsum
    return score, excluded


def align_niches(
    teacher: CompositionMatrix,
    method: CompositionMatrix,
    weighted: bool = True,
) -> NicheAlignment:
    """Optimal one-to-one niche matching by the Hungarian algorithm.

    The assignment minimizes teacher_weight * JSD (the reported
    statistic); pairs touching an empty niche are excluded from the
    weighted mean and listed separately.
    """
    _check_same_vocabulary(teacher, method)
    full_jsd = _jsd_matrix(teacher, method)
    cost = teacher.weights[:, None] * full_jsd if weighted else full_jsd
    rows_idx, cols_idx = linear_sum_assignment(cost)
    pairs = [(int(t), int(m)) for t, m in zip(rows_idx, cols_idx)]
    pair_jsd = full_jsd[rows_idx, cols_idx]
    score, excluded = _excluded_weighted_mean(teacher, method, pairs, pair_jsd)
    return NicheAlignment(
        pairs=pairs,
        pair_jsd=pair_jsd,
        weighted_mean_jsd=score,
        excluded_pairs=excluded,
    )


def permutation_test(
    teacher: CompositionMatrix,
    method: CompositionMatrix,
    alignment: NicheAlignment,
    n_draws: int = 10_000,
    seed: int = 0,
) -> float:
    """Fraction of random one-to-one pairings scoring <= the alignment.

    Each draw pairs the smaller side injectively into the larger one,
    uniformly at random; scores use the same teacher-weighted mean with
    the same empty-niche exclusions.
    """
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    _check_same_vocabulary(teacher, method)
    full_jsd = _jsd_matrix(teacher, method)
    kt, km = full_jsd.shape
    rng = np.random.default_rng(seed)
    if kt <= km:
        sel = np.argsort(rng.random((n_draws, km)), axis=1)[:, :kt]
        gathered = full_jsd[np.arange(kt)[None, :], sel]
        excluded = teacher.empty[None, :] | method.empty[sel]
        w = np.where(excluded, 0.0, teacher.weights[None, :])
    else:
        sel = np.argsort(rng.random((n_draws, kt)), axis=1)[:, :km]
        gathered = full_jsd[sel, np.arange(km)[None, :]]
        excluded = teacher.empty[sel] | method.empty[None, :]
        w = np.where(excluded, 0.0, teacher.weights[sel])
    wsum = w.sum(axis=1)
    safe = np.where(wsum > 0, wsum, 1.0)
    scores = np.where(wsum > 0, (w * gathered).sum(axis=1) / safe, 0.0)
    return float(np.mean(scores <= alignment.weighted_mean_jsd))


def macro_f1(y_true, y_pred, classes: Optional[Sequence[int]] = None) -> float:
    """Unweighted mean of per-class F1.

    Zero-denominator precision/recall/F1 default to 0; classes from
    ``classes`` that never occur in ``y_true`` contribute 0 with a
    warning.
    """
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"length mismatch: {y_true.shape} vs {y_pred.shape}")
    if classes is None:
        classes = np.unique(y_true)
    scores = []
    for c in classes:
        if not np.any(y_true == c):
            warnings.warn(f"class {c} absent from test labels: F1 counted as 0", stacklevel=2)
            scores.append(0.0)
            continue
        tp = int(np.sum((y_pred == c) & (y_true == c)))
        fp = int(np.sum((y_pred == c) & (y_true != c)))
        fn = int(np.sum((y_pred != c) & (y_true == c)))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        scores.append(f1)
    return float(np.mean(scores))
