"""Deterministic niche-map rendering.

The vector writer emits a dependency-free SVG scatter: one marker per
cell at its micrometer position, a legend, and an optional overlay with
the split boundaries and exclusion-buffer bands. A portable-pixmap
raster sits behind a flag for quick previews. Both writers are pure
string and array builders, so identical inputs give identical bytes.

The y axis follows image convention (values grow downward), which puts
strip 0 of a split at the top of the map. Marker color is keyed to the
label value itself, not its rank among the labels present, so a teacher
map and an aligned student map stay visually comparable.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .split import SplitAssignment
from .table import CellTable

# 20-color qualitative palette; labels >= 20 reuse colors with a new
# marker shape, so up to 80 niches stay distinguishable
PALETTE = (
    "#1f77b4", "#aec7e8", "#ff7f0e", "#ffbb78", "#2ca02c",
    "#98df8a", "#d62728", "#ff9896", "#9467bd", "#c5b0d5",
    "#8c564b", "#c49c94", "#e377c2", "#f7b6d2", "#7f7f7f",
    "#c7c7c7", "#bcbd22", "#dbdb8d", "#17becf", "#9edae5",
)

MARKER_NAMES = ("circle", "square", "triangle", "diamond")

BAND_FILL = "#cfcfcf"
LINE_STROKE = "#444444"


def niche_color(label: int) -> str:
    return PALETTE[label % len(PALETTE)]


def niche_marker(label: int) -> str:
    return MARKER_NAMES[(label // len(PALETTE)) % len(MARKER_NAMES)]


@dataclass
class MapStyle:
    """Pixel geometry of the rendered document."""

    width_px: float = 720.0
    margin_px: float = 24.0
    legend_width_px: float = 132.0
    dot_radius_px: float = 2.0


def _fmt(value: float) -> str:
    return f"{value:.2f}"


def _marker_element(name: str, x: float, y: float, r: float, color: str) -> str:
    if name == "circle":
        return f'<circle cx="{_fmt(x)}" cy="{_fmt(y)}" r="{_fmt(r)}" fill="{color}"/>'
    if name == "square":
        return (
            f'<rect x="{_fmt(x - r)}" y="{_fmt(y - r)}" width="{_fmt(2 * r)}"'
            f' height="{_fmt(2 * r)}" fill="{color}"/>'
        )
    if name == "triangle":
        pts = (
            f"{_fmt(x)},{_fmt(y - r)} {_fmt(x - r)},{_fmt(y + r)}"
            f" {_fmt(x + r)},{_fmt(y + r)}"
        )
        return f'<polygon points="{pts}" fill="{color}"/>'
    pts = (
        f"{_fmt(x)},{_fmt(y - r)} {_fmt(x + r)},{_fmt(y)}"
        f" {_fmt(x)},{_fmt(y + r)} {_fmt(x - r)},{_fmt(y)}"
    )
    return f'<polygon points="{pts}" fill="{color}"/>'


class _Frame:
    """Shared data-to-canvas mapping built from the full table extent."""

    def __init__(self, xy: np.ndarray, style: MapStyle):
        self.xmin, self.ymin = float(xy[:, 0].min()), float(xy[:, 1].min())
        xmax, ymax = float(xy[:, 0].max()), float(xy[:, 1].max())
        self.plot_w = style.width_px - style.legend_width_px - 2 * style.margin_px
        extent_x = xmax - self.xmin
        self.scale = self.plot_w / extent_x if extent_x > 0 else 1.0
        extent_y = ymax - self.ymin
        self.plot_h = extent_y * self.scale if extent_y > 0 else self.plot_w
        self.margin = style.margin_px

    def sx(self, x_um: float) -> float:
        return self.margin + (x_um - self.xmin) * self.scale

    def sy(self, y_um: float) -> float:
        return self.margin + (y_um - self.ymin) * self.scale


def _buffer_cuts(split: SplitAssignment) -> list[float]:
    """Cut lines adjacent to the test strip, the only ones with buffers."""
    cuts = []
    for j in (split.test_strip, split.test_strip + 1):
        if 1 <= j <= len(split.strip_boundaries_um):
            cuts.append(float(split.strip_boundaries_um[j - 1]))
    return cuts


def _overlay_svg(split: SplitAssignment, frame: _Frame) -> list[str]:
    parts = ['<g id="overlay">']
    x0, x1 = frame.margin, frame.margin + frame.plot_w
    y0, y1 = frame.margin, frame.margin + frame.plot_h
    for cut in _buffer_cuts(split):
        if split.axis == "y":
            top = frame.sy(cut - split.buffer_um)
            parts.append(
                f'<rect x="{_fmt(x0)}" y="{_fmt(top)}" width="{_fmt(frame.plot_w)}"'
                f' height="{_fmt(2 * split.buffer_um * frame.scale)}"'
                f' fill="{BAND_FILL}" fill-opacity="0.55"/>'
            )
        else:
            left = frame.sx(cut - split.buffer_um)
            parts.append(
                f'<rect x="{_fmt(left)}" y="{_fmt(y0)}" width="{_fmt(2 * split.buffer_um * frame.scale)}"'
                f' height="{_fmt(frame.plot_h)}" fill="{BAND_FILL}" fill-opacity="0.55"/>'
            )
    for cut in split.strip_boundaries_um:
        if split.axis == "y":
            cy = frame.sy(float(cut))
            parts.append(
                f'<line x1="{_fmt(x0)}" y1="{_fmt(cy)}" x2="{_fmt(x1)}" y2="{_fmt(cy)}"'
                f' stroke="{LINE_STROKE}" stroke-width="1.20" stroke-dasharray="6 3"/>'
            )
        else:
            cx = frame.sx(float(cut))
            parts.append(
                f'<line x1="{_fmt(cx)}" y1="{_fmt(y0)}" x2="{_fmt(cx)}" y2="{_fmt(y1)}"'
                f' stroke="{LINE_STROKE}" stroke-width="1.20" stroke-dasharray="6 3"/>'
            )
    parts.append("</g>")
    return parts


def _check_inputs(
    cells: CellTable, labels: np.ndarray, mask: Optional[np.ndarray]
) -> tuple[np.ndarray, np.ndarray]:
    xy = cells.xy
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (len(cells),):
            raise ValueError(f"mask length {mask.shape} does not match table ({len(cells)})")
        drawn_xy = xy[mask]
    else:
        drawn_xy = xy
    if labels.shape != (len(drawn_xy),):
        raise ValueError(
            f"labels length {labels.shape[0]} does not match drawn cells ({len(drawn_xy)})"
        )
    if labels.size and int(labels.min()) < 0:
        raise ValueError("labels must be non-negative")
    return drawn_xy, xy


def render_map(
    cells: CellTable,
    labels,
    out_path,
    split: Optional[SplitAssignment] = None,
    mask: Optional[np.ndarray] = None,
    raster: bool = False,
    style: Optional[MapStyle] = None,
) -> Path:
    """Write a niche map for the labeled cells and return the path.

    labels line up with the masked cells when a mask is given, with the
    whole table otherwise. The coordinate frame always spans the full
    table so companion maps share geometry.
    """
    style = style or MapStyle()
    labels = np.asarray(labels, dtype=np.int64)
    out_path = Path(out_path)
    drawn_xy, xy = _check_inputs(cells, labels, mask)
    frame = _Frame(xy, style)
    if raster:
        _write_ppm(drawn_xy, labels, frame, split, style, out_path)
        return out_path

    present = [int(k) for k in np.unique(labels)]
    width = style.width_px
    legend_h = 2 * style.margin_px + 16.0 * len(present)
    height = max(2 * style.margin_px + frame.plot_h, legend_h)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_fmt(width)}"'
        f' height="{_fmt(height)}" viewBox="0 0 {_fmt(width)} {_fmt(height)}">',
        f'<rect width="{_fmt(width)}" height="{_fmt(height)}" fill="#ffffff"/>',
    ]
    if split is not None:
        parts.extend(_overlay_svg(split, frame))
    parts.append('<g id="cells">')
    for (x_um, y_um), label in zip(drawn_xy, labels):
        parts.append(
            _marker_element(
                niche_marker(int(label)),
                frame.sx(float(x_um)),
                frame.sy(float(y_um)),
                style.dot_radius_px,
                niche_color(int(label)),
            )
        )
    parts.append("</g>")
    parts.append('<g id="legend">')
    x_leg = width - style.legend_width_px + 10.0
    for i, k in enumerate(present):
        y_row = style.margin_px + 8.0 + 16.0 * i
        parts.append(_marker_element(niche_marker(k), x_leg, y_row, 4.0, niche_color(k)))
        parts.append(
            f'<text x="{_fmt(x_leg + 12.0)}" y="{_fmt(y_row + 4.0)}"'
            f' font-family="sans-serif" font-size="11" fill="#222222">niche {k}</text>'
        )
    parts.append("</g>")
    parts.append("</svg>")
    out_path.write_bytes("\n".join(parts).encode("ascii") + b"\n")
    return out_path


def _hex_rgb(color: str) -> tuple[int, int, int]:
    return int(color[1:3], 16), int(color[3:5], 16), int(color[5:7], 16)


def _write_ppm(
    drawn_xy: np.ndarray,
    labels: np.ndarray,
    frame: _Frame,
    split: Optional[SplitAssignment],
    style: MapStyle,
    out_path: Path,
) -> None:
    w = int(round(style.width_px - style.legend_width_px))
    h = int(round(2 * style.margin_px + frame.plot_h))
    img = np.full((h, w, 3), 255, dtype=np.uint8)
    if split is not None:
        band = np.array(_hex_rgb(BAND_FILL), dtype=np.uint8)
        line = np.array(_hex_rgb(LINE_STROKE), dtype=np.uint8)
        for cut in _buffer_cuts(split):
            lo = cut - split.buffer_um
            hi = cut + split.buffer_um
            if split.axis == "y":
                r0 = max(0, int(round(frame.sy(lo))))
                r1 = min(h, int(round(frame.sy(hi))) + 1)
                img[r0:r1, :] = band
            else:
                c0 = max(0, int(round(frame.sx(lo))))
                c1 = min(w, int(round(frame.sx(hi))) + 1)
                img[:, c0:c1] = band
        for cut in split.strip_boundaries_um:
            if split.axis == "y":
                row = int(round(frame.sy(float(cut))))
                if 0 <= row < h:
                    img[row, :] = line
            else:
                col = int(round(frame.sx(float(cut))))
                if 0 <= col < w:
                    img[:, col] = line
    r = max(1, int(round(style.dot_radius_px)))
    dy, dx = np.mgrid[-r : r + 1, -r : r + 1]
    inside = dy * dy + dx * dx <= r * r
    offsets = np.stack([dy[inside], dx[inside]], axis=1)
    for (x_um, y_um), label in zip(drawn_xy, labels):
        center = np.array(
            [int(round(frame.sy(float(y_um)))), int(round(frame.sx(float(x_um))))]
        )
        pts = offsets + center
        ok = (
            (pts[:, 0] >= 0) & (pts[:, 0] < h) & (pts[:, 1] >= 0) & (pts[:, 1] < w)
        )
        pts = pts[ok]
        img[pts[:, 0], pts[:, 1]] = np.array(_hex_rgb(niche_color(int(label))), dtype=np.uint8)
    header = b"P6\n%d %d\n255\n" % (w, h)
    out_path.write_bytes(header + img.tobytes())
