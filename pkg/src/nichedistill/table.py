"""Per-cell data model and delimiter-separated table I/O.

The cell table is the interchange format between every pipeline stage:
one row per cell with centroid coordinates in micrometers, a feature
embedding, and optional teacher logits / categorical labels. Files are
UTF-8 CSV with a header row; LF is emitted, CRLF is accepted.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class TableFormatError(ValueError):
    """A table file violated the format contract.

    ``row`` is the 1-based data-row number (0 means the header) and
    ``column`` the offending column name, when known.
    """

    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None):
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column!r}")
        super().__init__(f"{message} ({', '.join(loc)})" if loc else message)
        self.row = row
        self.column = column


@dataclass(frozen=True)
class TableSchema:
    """Column-name configuration for cell table files."""

    id: str = "id"
    x: str = "x_um"
    y: str = "y_um"
    embedding_prefix: str = "emb_"
    teacher_prefix: str = "t_"
    cell_type: str = "cell_type"
    pathology: str = "pathology"


DEFAULT_SCHEMA = TableSchema()


@dataclass
class CellRecord:
    """One cell: identity, centroid (um), embedding, optional teacher/labels."""

    id: str
    x_um: float
    y_um: float
    embedding: np.ndarray
    teacher_logits: Optional[np.ndarray] = None
    cell_type: Optional[str] = None
    pathology_label: Optional[str] = None


def _intern(values: list[Optional[str]]) -> tuple[np.ndarray, list[str]]:
    vocab = sorted({v for v in values if v is not None})
    code_of = {v: i for i, v in enumerate(vocab)}
    codes = np.array([code_of[v] if v is not None else -1 for v in values], dtype=np.int32)
    return codes, vocab


@dataclass
class CellTable:
    """Immutable-after-construction container of cell records.

    Numeric views (``xy``, ``embeddings``, ``teacher_logits``) are
    materialized once so downstream geometry and training never re-walk
    the record list. Categorical labels are interned to dense codes,
    with the string vocabulary retained for reports.
    """

    records: list[CellRecord]
    embedding_dim: int
    teacher_dim: Optional[int]
    bounds: Optional[tuple[float, float, float, float]]  # xmin, ymin, xmax, ymax
    resolution_um_per_px: Optional[float] = None
    extras: dict[str, list[str]] = field(default_factory=dict)
    ids: list[str] = field(default_factory=list)
    xy: np.ndarray = None  # type: ignore[assignment]
    embeddings: np.ndarray = None  # type: ignore[assignment]
    teacher_logits: Optional[np.ndarray] = None
    cell_type_codes: np.ndarray = None  # type: ignore[assignment]
    cell_type_vocab: list[str] = field(default_factory=list)
    pathology_codes: np.ndarray = None  # type: ignore[assignment]
    pathology_vocab: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @classmethod
    def from_records(
        cls,
        records: Sequence[CellRecord],
        resolution_um_per_px: Optional[float] = None,
        extras: Optional[dict[str, list[str]]] = None,
    ) -> "CellTable":
        records = list(records)
        n = len(records)
        seen: set[str] = set()
        for i, rec in enumerate(records, start=1):
            if rec.id in seen:
                raise TableFormatError(f"duplicate id {rec.id!r}", row=i)
            seen.add(rec.id)
            if not (math.isfinite(rec.x_um) and math.isfinite(rec.y_um)):
                raise TableFormatError("non-finite coordinate", row=i)

        if n:
            dim = len(records[0].embedding)
        else:
            dim = 0
        emb = np.empty((n, dim), dtype=np.float64)
        for i, rec in enumerate(records):
            if len(rec.embedding) != dim:
                raise TableFormatError(
                    f"embedding length {len(rec.embedding)} != {dim}", row=i + 1
                )
            emb[i] = rec.embedding
        if not np.all(np.isfinite(emb)):
            bad = int(np.argwhere(~np.isfinite(emb))[0][0]) + 1
            raise TableFormatError("non-finite embedding component", row=bad)

        with_teacher = [rec for rec in records if rec.teacher_logits is not None]
        teacher: Optional[np.ndarray] = None
        teacher_dim: Optional[int] = None
        if with_teacher:
            if len(with_teacher) != n:
                raise TableFormatError("partial teacher coverage")
            teacher_dim = len(with_teacher[0].teacher_logits)
            teacher = np.empty((n, teacher_dim), dtype=np.float64)
            for i, rec in enumerate(records):
                if len(rec.teacher_logits) != teacher_dim:
                    raise TableFormatError(
                        f"teacher logit length {len(rec.teacher_logits)} != {teacher_dim}",
                        row=i + 1,
                    )
                teacher[i] = rec.teacher_logits
            if not np.all(np.isfinite(teacher)):
                bad = int(np.argwhere(~np.isfinite(teacher))[0][0]) + 1
                raise TableFormatError("non-finite teacher logit", row=bad)

        xy = np.array([[rec.x_um, rec.y_um] for rec in records], dtype=np.float64).reshape(n, 2)
        bounds = None
        if n:
            bounds = (
                float(xy[:, 0].min()),
                float(xy[:, 1].min()),
                float(xy[:, 0].max()),
                float(xy[:, 1].max()),
            )

        extras = dict(extras or {})
        for name, col in extras.items():
            if len(col) != n:
                raise TableFormatError(f"extra column {name!r} has length {len(col)} != {n}")

        type_codes, type_vocab = _intern([rec.cell_type for rec in records])
        path_codes, path_vocab = _intern([rec.pathology_label for rec in records])
        return cls(
            records=records,
            embedding_dim=dim,
            teacher_dim=teacher_dim,
            bounds=bounds,
            resolution_um_per_px=resolution_um_per_px,
            extras=extras,
            ids=[rec.id for rec in records],
            xy=xy,
            embeddings=emb,
            teacher_logits=teacher,
            cell_type_codes=type_codes,
            cell_type_vocab=type_vocab,
            pathology_codes=path_codes,
            pathology_vocab=path_vocab,
        )


def _parse_float(text: str, row: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise TableFormatError("non-finite or missing numeric", row=row, column=column) from None
    if not math.isfinite(value):
        raise TableFormatError("non-finite or missing numeric", row=row, column=column)
    return value


def _indexed_columns(header: list[str], prefix: str) -> list[int]:
    """Positions of prefix0..prefix{D-1}; the index set must be contiguous."""
    pattern = re.compile(re.escape(prefix) + r"(\d+)$")
    found: dict[int, int] = {}
    for pos, name in enumerate(header):
        m = pattern.match(name)
        if m:
            found[int(m.group(1))] = pos
    if not found:
        return []
    if sorted(found) != list(range(len(found))):
        raise TableFormatError(
            f"columns {prefix}* must cover 0..{len(found) - 1} without gaps", row=0
        )
    return [found[i] for i in range(len(found))]


def load_table(
    path: str | Path,
    schema: TableSchema = DEFAULT_SCHEMA,
    coords_in_px: bool = False,
    resolution_um_per_px: Optional[float] = None,
) -> CellTable:
    """Read and validate a cell table.

    Coordinates stored in pixels are converted to micrometers at
    ingestion when ``coords_in_px`` is set; ``resolution_um_per_px`` is
    then required. Unknown columns are preserved verbatim in
    ``table.extras`` and written back by :func:`save_table`.
    """
    path = Path(path)
    if coords_in_px and (resolution_um_per_px is None or resolution_um_per_px <= 0):
        raise ValueError("coords_in_px requires a positive resolution_um_per_px")
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise TableFormatError("empty file", row=0) from None
        header = [h.strip() for h in header]
        if len(set(header)) != len(header):
            raise TableFormatError("duplicate column names in header", row=0)

        col_pos = {name: i for i, name in enumerate(header)}
        for required in (schema.id, schema.x, schema.y):
            if required not in col_pos:
                raise TableFormatError("missing required column", row=0, column=required)
        emb_pos = _indexed_columns(header, schema.embedding_prefix)
        if not emb_pos:
            raise TableFormatError(
                "missing required column", row=0, column=f"{schema.embedding_prefix}0"
            )
        teach_pos = _indexed_columns(header, schema.teacher_prefix)
        type_pos = col_pos.get(schema.cell_type)
        path_pos = col_pos.get(schema.pathology)

        known = {col_pos[schema.id], col_pos[schema.x], col_pos[schema.y], *emb_pos, *teach_pos}
        if type_pos is not None:
            known.add(type_pos)
        if path_pos is not None:
            known.add(path_pos)
        extra_pos = [(name, i) for i, name in enumerate(header) if i not in known]
        extras: dict[str, list[str]] = {name: [] for name, _ in extra_pos}

        records: list[CellRecord] = []
        for row_num, row in enumerate(reader, start=1):
            if len(row) != len(header):
                raise TableFormatError(
                    f"expected {len(header)} fields, found {len(row)}", row=row_num
                )
            x = _parse_float(row[col_pos[schema.x]], row_num, schema.x)
            y = _parse_float(row[col_pos[schema.y]], row_num, schema.y)
            if coords_in_px:
                x *= resolution_um_per_px
                y *= resolution_um_per_px
            embedding = np.array(
                [
                    _parse_float(row[p], row_num, header[p])
                    for p in emb_pos
                ],
                dtype=np.float64,
            )
            teacher = None
            if teach_pos:
                raw = [row[p].strip() for p in teach_pos]
                if any(raw):
                    teacher = np.array(
                        [
                            _parse_float(row[p], row_num, header[p])
                            for p in teach_pos
                        ],
                        dtype=np.float64,
                    )
            cell_type = row[type_pos].strip() or None if type_pos is not None else None
            pathology = row[path_pos].strip() or None if path_pos is not None else None
            records.append(
                CellRecord(
                    id=row[col_pos[schema.id]],
                    x_um=x,
                    y_um=y,
                    embedding=embedding,
                    teacher_logits=teacher,
                    cell_type=cell_type,
                    pathology_label=pathology,
                )
            )
            for name, p in extra_pos:
                extras[name].append(row[p])

    return CellTable.from_records(
        records,
        resolution_um_per_px=resolution_um_per_px,
        extras=extras,
    )


def _fmt(value: float) -> str:
    # repr round-trips float64 exactly, which is stronger than the
    # 15-significant-digit contract.
    return repr(float(value))


def save_table(
    table: CellTable,
    path: str | Path,
    schema: TableSchema = DEFAULT_SCHEMA,
    extra_columns: Optional[dict[str, Sequence[str]]] = None,
) -> None:
    """Write a cell table; ``load_table(save_table(x))`` round-trips."""
    path = Path(path)
    extras = dict(table.extras)
    for name, col in (extra_columns or {}).items():
        if len(col) != len(table):
            raise ValueError(f"extra column {name!r} has length {len(col)} != {len(table)}")
        extras[name] = [str(v) for v in col]

    has_type = any(rec.cell_type is not None for rec in table.records)
    has_path = any(rec.pathology_label is not None for rec in table.records)
    header = [schema.id, schema.x, schema.y]
    header += [f"{schema.embedding_prefix}{i}" for i in range(table.embedding_dim)]
    if table.teacher_dim:
        header += [f"{schema.teacher_prefix}{i}" for i in range(table.teacher_dim)]
    if has_type:
        header.append(schema.cell_type)
    if has_path:
        header.append(schema.pathology)
    header += list(extras)

    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i, rec in enumerate(table.records):
            row = [rec.id, _fmt(rec.x_um), _fmt(rec.y_um)]
            row += [_fmt(v) for v in rec.embedding]
            if table.teacher_dim:
                row += [_fmt(v) for v in rec.teacher_logits]
            if has_type:
                row.append(rec.cell_type or "")
            if has_path:
                row.append(rec.pathology_label or "")
            row += [extras[name][i] for name in extras]
            writer.writerow(row)


def save_assignments(
    table: CellTable,
    labels: Sequence[int] | np.ndarray,
    path: str | Path,
    logits: Optional[np.ndarray] = None,
    mask: Optional[np.ndarray] = None,
    split_tags: Optional[Sequence[str]] = None,
) -> None:
    """Write per-cell niche labels as ``id,niche[,logit_*][,split]`` rows.

    ``mask`` restricts output to the selected cells; ``labels`` (and
    ``logits`` rows) must then match the masked count, in table order.
    """
    labels = np.asarray(labels)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (len(table),):
            raise ValueError(f"mask length {mask.shape} != table size {len(table)}")
        row_ids = [table.ids[i] for i in np.flatnonzero(mask)]
    else:
        row_ids = list(table.ids)
    if labels.shape != (len(row_ids),):
        raise ValueError(f"labels length {labels.shape[0]} != row count {len(row_ids)}")
    if labels.size and (not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0):
        raise ValueError("labels must be non-negative integers")
    if logits is not None:
        logits = np.asarray(logits, dtype=np.float64)
        if logits.shape[0] != len(row_ids):
            raise ValueError(f"logits rows {logits.shape[0]} != row count {len(row_ids)}")
        if labels.size and labels.max() >= logits.shape[1]:
            raise ValueError("labels must lie in [0, K)")
    if split_tags is not None and len(split_tags) != len(row_ids):
        raise ValueError(f"split tags length {len(split_tags)} != row count {len(row_ids)}")

    path = Path(path)
    header = ["id", "niche"]
    if logits is not None:
        header += [f"logit_{k}" for k in range(logits.shape[1])]
    if split_tags is not None:
        header.append("split")
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for r, cell_id in enumerate(row_ids):
            row = [cell_id, str(int(labels[r]))]
            if logits is not None:
                row += [_fmt(v) for v in logits[r]]
            if split_tags is not None:
                row.append(split_tags[r])
            writer.writerow(row)


@dataclass
class Assignments:
    """Contents of an assignments file, in file order."""

    ids: list[str]
    labels: np.ndarray
    logits: Optional[np.ndarray] = None
    split: Optional[list[str]] = None


def load_assignments(path: str | Path) -> Assignments:
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise TableFormatError("empty file", row=0) from None
        if header[:2] != ["id", "niche"]:
            raise TableFormatError("assignments must start with id,niche columns", row=0)
        logit_pos = _indexed_columns(header, "logit_")
        split_pos = header.index("split") if "split" in header else None

        ids: list[str] = []
        labels: list[int] = []
        logit_rows: list[list[float]] = []
        split: list[str] = []
        for row_num, row in enumerate(reader, start=1):
            if len(row) != len(header):
                raise TableFormatError(
                    f"expected {len(header)} fields, found {len(row)}", row=row_num
                )
            ids.append(row[0])
            try:
                labels.append(int(row[1]))
            except ValueError:
                raise TableFormatError("niche label must be an integer", row=row_num,
                                       column="niche") from None
            if logit_pos:
                logit_rows.append([_parse_float(row[p], row_num, header[p]) for p in logit_pos])
            if split_pos is not None:
                split.append(row[split_pos])
    return Assignments(
        ids=ids,
        labels=np.array(labels, dtype=np.int64),
        logits=np.array(logit_rows, dtype=np.float64) if logit_pos else None,
        split=split if split_pos is not None else None,
    )
