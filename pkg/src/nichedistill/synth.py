"""Desk-scale synthetic tissue with planted niches and a teacher oracle.

Cells fall uniformly in a square; the planted niche of a cell is the
nearest of K seeded centers (a Voronoi partition), and teacher logits
decay linearly with distance to each center, so the teacher argmax
reproduces the planted niches exactly. Cell types are drawn from
per-niche mixture rows kept pairwise-distinguishable by rejection
sampling, and embeddings sit near per-type prototype vectors, which
keeps the student's task learnable but not trivial.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import composition_matrix, jsd
from .table import CellRecord, CellTable

PATHOLOGY_MODES = ("by_niche", "independent")

# floor on pairwise JSD between planted mixture rows; below it two
# niches look alike in local composition and cannot be told apart by
# any model that never sees absolute position
MIN_COMPOSITION_JSD = 0.25


def _separated_compositions(
    rng: np.random.Generator,
    n_niches: int,
    n_types: int,
    alpha: float,
    min_jsd: float,
    tries_per_row: int = 200,
) -> np.ndarray:
    """Dirichlet rows rejection-sampled to keep niches distinguishable.

    Each row is redrawn until its JSD to every earlier row clears the
    floor; when the floor is unreachable (few types, many niches) the
    best candidate seen is kept, so generation always terminates and
    stays deterministic given the rng state.
    """
    rows = np.empty((n_niches, n_types), dtype=np.float64)
    conc = np.full(n_types, alpha)
    for k in range(n_niches):
        best, best_sep = None, -1.0
        for _ in range(tries_per_row):
            row = rng.dirichlet(conc)
            sep = min((jsd(row, rows[j]) for j in range(k)), default=np.inf)
            if sep > best_sep:
                best, best_sep = row, sep
            if sep >= min_jsd:
                break
        rows[k] = best
    return rows


@dataclass
class PlantedTissue:
    """Generated table plus the ground truth that produced it."""

    cells: CellTable
    true_niche: np.ndarray
    niche_centers: np.ndarray
    composition: np.ndarray
    noise_sigma: float
    type_codes: np.ndarray
    side_um: float


def generate(
    n_cells: int,
    n_niches: int,
    n_types: int,
    embedding_dim: int,
    sharpness: float = 40.0,
    noise_sigma: float = 0.1,
    seed: int = 0,
    side_um: float = 1000.0,
    composition_alpha: float = 0.5,
    n_pathology: int = 3,
    pathology_mode: str = "by_niche",
) -> PlantedTissue:
    """Generate a planted tissue; deterministic given the seed.

    teacher_logits[i, k] = -sharpness * dist(i, center_k) / side_um,
    so scaling sharpness scales every logit by the same factor and the
    argmax over k is the nearest center regardless of sharpness.
    """
    if n_niches < 1 or n_cells < n_niches:
        raise ValueError(f"need n_cells >= n_niches >= 1, got {n_cells}, {n_niches}")
    if n_types < 1 or embedding_dim < 1:
        raise ValueError("n_types and embedding_dim must be >= 1")
    if sharpness <= 0:
        raise ValueError("sharpness must be positive")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    if side_um <= 0 or composition_alpha <= 0:
        raise ValueError("side_um and composition_alpha must be positive")
    if n_pathology < 1:
        raise ValueError("n_pathology must be >= 1")
    if pathology_mode not in PATHOLOGY_MODES:
        raise ValueError(f"pathology_mode must be one of {PATHOLOGY_MODES}")

    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.0, side_um, size=(n_niches, 2))
    xy = rng.uniform(0.0, side_um, size=(n_cells, 2))

    delta = xy[:, None, :] - centers[None, :, :]
    dist = np.sqrt(delta[:, :, 0] ** 2 + delta[:, :, 1] ** 2)
    true_niche = np.argmin(dist, axis=1)
    teacher = -sharpness * dist / side_um

    composition = _separated_compositions(
        rng, n_niches, n_types, composition_alpha, MIN_COMPOSITION_JSD
    )

    cum = np.cumsum(composition, axis=1)[true_niche]
    u = rng.random(n_cells)
    type_codes = np.minimum((u[:, None] > cum).sum(axis=1), n_types - 1).astype(np.int64)

    if n_types <= embedding_dim:
        q, _ = np.linalg.qr(rng.normal(size=(embedding_dim, n_types)))
        prototypes = q.T
    else:
        prototypes = rng.normal(size=(n_types, embedding_dim))
        prototypes /= np.linalg.norm(prototypes, axis=1, keepdims=True)
    embeddings = prototypes[type_codes] + noise_sigma * rng.normal(size=(n_cells, embedding_dim))

    if pathology_mode == "by_niche":
        pathology = true_niche % n_pathology
    else:
        pathology = rng.integers(0, n_pathology, size=n_cells)

    records = [
        CellRecord(
            id=f"c{i:06d}",
            x_um=float(xy[i, 0]),
            y_um=float(xy[i, 1]),
            embedding=embeddings[i],
            teacher_logits=teacher[i],
            cell_type=f"type{type_codes[i]:02d}",
            pathology_label=f"lesion{pathology[i]:02d}",
        )
        for i in range(n_cells)
    ]
    cells = CellTable.from_records(
        records,
        extras={"true_niche": [str(k) for k in true_niche]},
    )
    return PlantedTissue(
        cells=cells,
        true_niche=true_niche,
        niche_centers=centers,
        composition=composition,
        noise_sigma=noise_sigma,
        type_codes=type_codes,
        side_um=side_um,
    )


def planted_compositions(
    tissue: PlantedTissue, labels: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Empirical per-niche type mixtures for any labeling of the cells."""
    n_niches, n_types = tissue.composition.shape
    return composition_matrix(labels, tissue.type_codes, n_niches, n_types)
