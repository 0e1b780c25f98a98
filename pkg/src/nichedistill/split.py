"""Within-slide spatial holdout with a physical exclusion buffer.

The slide's bounding box is cut into four equal-height horizontal
strips; one strip (second from the top by default) is held out for
testing. Cells whose centroid falls within half a crop width of a
train/test boundary are discarded so that no image crop can straddle
the split.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .table import CellTable

TRAIN, TEST, DISCARD = 0, 1, 2
TAG_NAMES = ("train", "test", "discard")
N_STRIPS = 4


@dataclass
class SplitAssignment:
    """Per-cell split tags plus the geometry that produced them."""

    tags: np.ndarray
    buffer_um: float
    strip_boundaries_um: np.ndarray
    test_strip: int
    axis: str = "y"

    @property
    def train_mask(self) -> np.ndarray:
        return self.tags == TRAIN

    @property
    def test_mask(self) -> np.ndarray:
        return self.tags == TEST

    @property
    def discard_mask(self) -> np.ndarray:
        return self.tags == DISCARD

    def tag_names(self) -> list[str]:
        return [TAG_NAMES[t] for t in self.tags]


def buffer_width_um(crop_size_px: int, resolution_um_per_px: float) -> float:
    """Half the crop edge, converted to micrometers."""
    if crop_size_px <= 0:
        raise ValueError("crop_size_px must be positive")
    if resolution_um_per_px <= 0:
        raise ValueError("resolution_um_per_px must be positive")
    return (crop_size_px / 2) * resolution_um_per_px


def make_split(
    cells: CellTable,
    crop_size_px: int,
    resolution_um_per_px: float,
    test_strip: int = 1,
    axis: str = "y",
) -> SplitAssignment:
    """Tag every cell train/test/discard.

    Strip 0 sits at the smallest coordinate value; with image-style y
    growing downward that is the top of the slide. Only boundaries
    between the test strip and an adjacent train strip discard cells
    (centroid within buffer_um of the cut line, inclusive); a boundary
    between two train strips discards nobody.
    """
    if test_strip not in range(N_STRIPS):
        raise ValueError(f"test_strip must be in 0..{N_STRIPS - 1}, got {test_strip}")
    if axis not in ("x", "y"):
        raise ValueError(f"axis must be 'x' or 'y', got {axis!r}")
    if len(cells) == 0:
        raise ValueError("cannot split an empty table")
    buffer_um = buffer_width_um(crop_size_px, resolution_um_per_px)

    v = cells.xy[:, 1] if axis == "y" else cells.xy[:, 0]
    vmin, vmax = float(v.min()), float(v.max())
    if vmax == vmin:
        raise ValueError(f"degenerate {axis}-extent: all cells share one coordinate")
    height = (vmax - vmin) / N_STRIPS
    cuts = vmin + height * np.arange(1, N_STRIPS)

    strip = np.clip(np.floor((v - vmin) / height).astype(np.int64), 0, N_STRIPS - 1)
    tags = np.full(len(cells), TRAIN, dtype=np.int8)
    tags[strip == test_strip] = TEST
    for j in (test_strip, test_strip + 1):
        if 1 <= j <= N_STRIPS - 1:
            tags[np.abs(v - cuts[j - 1]) <= buffer_um] = DISCARD
    return SplitAssignment(
        tags=tags,
        buffer_um=buffer_um,
        strip_boundaries_um=cuts,
        test_strip=test_strip,
        axis=axis,
    )


def split_masks(split: SplitAssignment) -> tuple[np.ndarray, np.ndarray]:
    """Boolean (train, test) masks; disjoint, discarded cells in neither."""
    return split.train_mask, split.test_mask


def save_split(cells: CellTable, split: SplitAssignment, path) -> Path:
    """Write one ``id<TAB>tag`` row per cell, in table order."""
    path = Path(path)
    lines = ["id\tsplit"]
    for cell_id, name in zip(cells.ids, split.tag_names()):
        lines.append(f"{cell_id}\t{name}")
    path.write_bytes(("\n".join(lines) + "\n").encode("utf-8"))
    return path


def load_split_tags(path, cells: CellTable) -> np.ndarray:
    """Read tags back, aligned to the table's row order."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].split("\t") != ["id", "split"]:
        raise ValueError("split file must start with an id<TAB>split header")
    by_id = {}
    for lineno, line in enumerate(lines[1:], start=1):
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"row {lineno}: expected 2 columns, got {len(parts)}")
        cell_id, name = parts
        if name not in TAG_NAMES:
            raise ValueError(f"row {lineno}: unknown tag {name!r}")
        by_id[cell_id] = TAG_NAMES.index(name)
    missing = [cell_id for cell_id in cells.ids if cell_id not in by_id]
    if missing:
        raise ValueError(f"split file lacks {len(missing)} table ids, first {missing[0]!r}")
    return np.array([by_id[cell_id] for cell_id in cells.ids], dtype=np.int8)
