"""End-to-end run orchestration.

Each stage reads and writes plain files in the output directory, so
the same code backs both the one-shot pipeline command and the
standalone per-stage commands. Every numeric artifact is bitwise
deterministic given the configuration; wall-clock timings appear only
in the manifest, never in a numeric output.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .baselines import kmeans_baseline, one_hot, svm_probe
from .config import RunConfig, config_dict, save_config, validate_config
from .distill import DistillConfig, TrainReport, infer, train
from .metrics import align_niches, ari, composition, nmi, permutation_test
from .model import (
    ModelConfig,
    PositionalEncodingConfig,
    StudentParameters,
    load_checkpoint,
    save_checkpoint,
)
from .render import render_map
from .spatial import NeighborhoodIndex, build_index, calibrate_radius
from .split import TAG_NAMES, SplitAssignment, make_split, save_split
from .synth import generate
from .table import CellTable, load_assignments, load_table, save_assignments, save_table

TABLE_FILE = "cells.csv"
SPLIT_FILE = "split.tsv"
CONFIG_FILE = "run_config.ini"
CHECKPOINT_FILE = "student.ckpt"
STUDENT_ASSIGNMENTS_FILE = "student_assignments.csv"
TEACHER_ASSIGNMENTS_FILE = "teacher_assignments.csv"
BASELINE_ASSIGNMENTS_FILE = "baseline_assignments.csv"
METRICS_FILE = "metrics.json"
MANIFEST_FILE = "manifest.json"
TEACHER_MAP_STEM = "teacher_map"
STUDENT_MAP_STEM = "student_map"


@dataclass
class PipelineResult:
    """Everything a run produced, in memory and on disk."""

    out_dir: Path
    cells: CellTable
    split: SplitAssignment
    radius_um: float
    params: StudentParameters
    report: TrainReport
    metrics: dict
    paths: dict = field(default_factory=dict)


def teacher_labels(cells: CellTable) -> np.ndarray:
    """Argmax of the stored teacher logits, smallest index on ties."""
    if cells.teacher_logits is None:
        raise ValueError("table has no teacher logit columns")
    return np.argmax(cells.teacher_logits, axis=1).astype(np.int64)


def synth_table(cfg: RunConfig) -> CellTable:
    tissue = generate(
        n_cells=cfg.n_cells,
        n_niches=cfg.n_niches,
        n_types=cfg.n_types,
        embedding_dim=cfg.embedding_dim,
        sharpness=cfg.sharpness,
        noise_sigma=cfg.noise_sigma,
        seed=cfg.seed,
        side_um=cfg.side_um,
        composition_alpha=cfg.composition_alpha,
        n_pathology=cfg.n_pathology,
        pathology_mode=cfg.pathology_mode,
    )
    return tissue.cells


def load_or_synth_table(cfg: RunConfig) -> CellTable:
    if cfg.input_table:
        return load_table(cfg.input_table)
    return synth_table(cfg)


def prepare_split(cells: CellTable, cfg: RunConfig) -> SplitAssignment:
    return make_split(
        cells,
        crop_size_px=cfg.crop_size_px,
        resolution_um_per_px=cfg.resolution_um_per_px,
        test_strip=cfg.test_strip,
        axis=cfg.split_axis,
    )


def calibrated_index(
    cells: CellTable, cfg: RunConfig, allowed: Optional[np.ndarray] = None
) -> NeighborhoodIndex:
    index = build_index(cells, max_neighbors=cfg.max_neighbors)
    calibrate_radius(index, target_count=cfg.target_count, seed=cfg.seed, allowed=allowed)
    return index


def model_config(cfg: RunConfig, embedding_dim: int) -> ModelConfig:
    return ModelConfig(
        embedding_dim=embedding_dim,
        n_niches=cfg.n_niches,
        posenc=PositionalEncodingConfig(
            n_frequencies=cfg.n_frequencies, base_wavelength=cfg.base_wavelength
        ),
        d_model=cfg.d_model,
        d_ff=cfg.d_ff,
    )


def distill_config(cfg: RunConfig) -> DistillConfig:
    return DistillConfig(
        n_niches=cfg.n_niches,
        temperature=cfg.temperature,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        learning_rate=cfg.learning_rate,
        adam_beta1=cfg.adam_beta1,
        adam_beta2=cfg.adam_beta2,
        adam_eps=cfg.adam_eps,
        clip_norm=cfg.clip_norm,
        seed=cfg.seed,
    )


def _probe_score(
    cells: CellTable,
    split: SplitAssignment,
    labels_full: np.ndarray,
    logits_full: np.ndarray,
    cfg: RunConfig,
) -> Optional[float]:
    """Pathology macro-F1 from niche features, or None without labels."""
    if not cells.pathology_vocab:
        return None
    if cfg.probe_features == "logits":
        features = logits_full
    else:
        features = one_hot(np.maximum(labels_full, 0), cfg.n_niches)
    return svm_probe(
        features,
        cells.pathology_codes,
        split.train_mask,
        split.test_mask,
        c_reg=cfg.probe_c_reg,
        seed=cfg.seed,
        epochs=cfg.probe_epochs,
    )


def evaluate(
    cells: CellTable,
    split: SplitAssignment,
    student_labels_full: np.ndarray,
    student_logits_full: np.ndarray,
    baseline_labels: np.ndarray,
    cfg: RunConfig,
    radius_um: float,
) -> dict:
    """Test-strip metrics; keys follow the run-summary contract."""
    if not cells.cell_type_vocab:
        raise ValueError("evaluation needs a cell_type column")
    t_all = teacher_labels(cells)
    test = split.test_mask
    t_test = t_all[test]
    s_test = student_labels_full[test]
    n_types = len(cells.cell_type_vocab)
    vocab = tuple(cells.cell_type_vocab)

    teacher_cm = composition(t_test, cells.cell_type_codes[test], cfg.n_niches,
                             n_types, vocab=vocab)
    student_cm = composition(s_test, cells.cell_type_codes[test], cfg.n_niches,
                             n_types, vocab=vocab)
    alignment = align_niches(teacher_cm, student_cm)
    fraction = permutation_test(
        teacher_cm, student_cm, alignment,
        n_draws=cfg.n_permutation_draws, seed=cfg.seed,
    )
    return {
        "ari": ari(s_test, t_test),
        "nmi": nmi(s_test, t_test),
        "weighted_mean_jsd": alignment.weighted_mean_jsd,
        "permutation_fraction": fraction,
        "macro_f1": _probe_score(cells, split, student_labels_full,
                                 student_logits_full, cfg),
        "baseline_ari": ari(baseline_labels[test], t_test),
        "baseline_nmi": nmi(baseline_labels[test], t_test),
        "K": cfg.n_niches,
        "seed": cfg.seed,
        "r": radius_um,
    }


def evaluate_files(
    table_path,
    teacher_path,
    student_path,
    n_draws: int = 10000,
    seed: int = 0,
    probe_c_reg: float = 1.0,
    probe_epochs: int = 20,
    probe_features: str = "onehot",
    radius_um: Optional[float] = None,
) -> dict:
    """Compare two assignment files over the cells they share.

    Works across runs and tools: each side's niche count comes from its
    own file (logit width when present, max label + 1 otherwise), and
    the reported K is the teacher's. The probe runs only when the table
    carries pathology labels and the student file carries split tags
    with both train and test rows; macro_f1 is None otherwise. The r
    field echoes radius_um, which file-based evaluation cannot recover
    on its own.
    """
    cells = load_table(table_path)
    teacher = load_assignments(teacher_path)
    student = load_assignments(student_path)
    id_pos = {cell_id: i for i, cell_id in enumerate(cells.ids)}
    for side, name in ((teacher, "teacher"), (student, "student")):
        unknown = [cell_id for cell_id in side.ids if cell_id not in id_pos]
        if unknown:
            raise ValueError(f"{name} assignments id {unknown[0]!r} is not in the table")
    teacher_rows = dict(zip(teacher.ids, range(len(teacher.ids))))
    student_rows = dict(zip(student.ids, range(len(student.ids))))
    shared = [cid for cid in cells.ids if cid in teacher_rows and cid in student_rows]
    if len(shared) < 2:
        raise ValueError("assignment files share fewer than 2 cells")

    table_idx = np.array([id_pos[cid] for cid in shared])
    t_sel = np.array([teacher_rows[cid] for cid in shared])
    s_sel = np.array([student_rows[cid] for cid in shared])
    t_labels = teacher.labels[t_sel]
    s_labels = student.labels[s_sel]
    k_teacher = (
        teacher.logits.shape[1] if teacher.logits is not None else int(t_labels.max()) + 1
    )
    k_student = (
        student.logits.shape[1] if student.logits is not None else int(s_labels.max()) + 1
    )

    if not cells.cell_type_vocab:
        raise ValueError("evaluation needs a cell_type column")
    types = cells.cell_type_codes[table_idx]
    n_types = len(cells.cell_type_vocab)
    vocab = tuple(cells.cell_type_vocab)
    teacher_cm = composition(t_labels, types, k_teacher, n_types, vocab=vocab)
    student_cm = composition(s_labels, types, k_student, n_types, vocab=vocab)
    alignment = align_niches(teacher_cm, student_cm)
    fraction = permutation_test(teacher_cm, student_cm, alignment,
                                n_draws=n_draws, seed=seed)

    probe = None
    if cells.pathology_vocab and student.split is not None:
        tags = np.array([student.split[student_rows[cid]] for cid in shared])
        train_mask = tags == "train"
        test_mask = tags == "test"
        if train_mask.any() and test_mask.any():
            if probe_features == "logits" and student.logits is not None:
                features = student.logits[s_sel]
            else:
                features = one_hot(s_labels, k_student)
            probe = svm_probe(
                features, cells.pathology_codes[table_idx], train_mask, test_mask,
                c_reg=probe_c_reg, seed=seed, epochs=probe_epochs,
            )

    return {
        "ari": ari(s_labels, t_labels),
        "nmi": nmi(s_labels, t_labels),
        "weighted_mean_jsd": alignment.weighted_mean_jsd,
        "permutation_fraction": fraction,
        "macro_f1": probe,
        "K": k_teacher,
        "seed": seed,
        "r": radius_um,
    }


def format_metrics(metrics: dict) -> str:
    """Key-value report, one metric per line."""
    lines = [f"{key} = {metrics[key]}" for key in sorted(metrics)]
    return "\n".join(lines) + "\n"


def write_metrics(metrics: dict, path) -> Path:
    path = Path(path)
    path.write_bytes(json.dumps(metrics, sort_keys=True, indent=2).encode("ascii") + b"\n")
    return path


def _map_name(stem: str, cfg: RunConfig) -> str:
    return f"{stem}.ppm" if cfg.render_raster else f"{stem}.svg"


def _resolve_table(cfg: RunConfig) -> tuple[CellTable, Path]:
    """The configured input table, falling back to the run's own synth output."""
    if cfg.input_table:
        path = Path(cfg.input_table)
        return load_table(path), path
    path = Path(cfg.output_dir) / TABLE_FILE
    if not path.exists():
        raise FileNotFoundError(
            f"no input_table configured and {path} does not exist; run synth first"
        )
    return load_table(path), path


def run_synth_stage(cfg: RunConfig) -> dict:
    validate_config(cfg)
    cells = synth_table(cfg)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / TABLE_FILE
    save_table(cells, path)
    return {"table": str(path), "n_cells": len(cells)}


def run_split_stage(cfg: RunConfig) -> dict:
    validate_config(cfg)
    cells, _ = _resolve_table(cfg)
    split = prepare_split(cells, cfg)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = save_split(cells, split, out_dir / SPLIT_FILE)
    return {
        "split": str(path),
        "n_train": int(split.train_mask.sum()),
        "n_test": int(split.test_mask.sum()),
        "n_discard": int(split.discard_mask.sum()),
        "buffer_um": split.buffer_um,
    }


def run_calibrate_stage(cfg: RunConfig) -> dict:
    validate_config(cfg)
    cells, _ = _resolve_table(cfg)
    split = prepare_split(cells, cfg)
    index = calibrated_index(cells, cfg, allowed=split.train_mask)
    return {
        "radius_um": float(index.radius_um),
        "target_count": cfg.target_count,
        "n_train": int(split.train_mask.sum()),
    }


def run_train_stage(cfg: RunConfig) -> dict:
    validate_config(cfg)
    cells, _ = _resolve_table(cfg)
    split = prepare_split(cells, cfg)
    index = calibrated_index(cells, cfg, allowed=split.train_mask)
    params = StudentParameters(model_config(cfg, cells.embedding_dim), seed=cfg.seed)
    params, report = train(cells, index, split, params, distill_config(cfg))
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / CHECKPOINT_FILE
    save_checkpoint(params, path)
    save_config(cfg, out_dir / CONFIG_FILE)
    return {
        "checkpoint": str(path),
        "radius_um": float(index.radius_um),
        "final_train_loss": report.final_train_loss,
        "final_test_loss": report.final_test_loss,
        "n_params": params.n_params,
        "epochs": cfg.epochs,
    }


def run_infer_stage(cfg: RunConfig, subset: str = "both") -> dict:
    if subset not in ("train", "test", "both"):
        raise ValueError(f"subset must be train, test, or both, got {subset!r}")
    validate_config(cfg)
    cells, _ = _resolve_table(cfg)
    split = prepare_split(cells, cfg)
    index = calibrated_index(cells, cfg, allowed=split.train_mask)
    ckpt = Path(cfg.output_dir) / CHECKPOINT_FILE
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint {ckpt} does not exist; run train first")
    params = load_checkpoint(ckpt, expect_config=model_config(cfg, cells.embedding_dim))
    k = params.config.n_niches
    labels_full = np.full(len(cells), -1, dtype=np.int64)
    logits_full = np.zeros((len(cells), k), dtype=np.float64)
    wanted = []
    if subset in ("train", "both"):
        wanted.append(split.train_mask)
    if subset in ("test", "both"):
        wanted.append(split.test_mask)
    out_mask = np.zeros(len(cells), dtype=bool)
    for mask in wanted:
        logits, labels = infer(cells, index, mask, params)
        labels_full[mask] = labels
        logits_full[mask] = logits
        out_mask |= mask
    tags = [TAG_NAMES[t] for t in split.tags[out_mask]]
    path = Path(cfg.output_dir) / STUDENT_ASSIGNMENTS_FILE
    save_assignments(
        cells, labels_full[out_mask], path,
        logits=logits_full[out_mask], mask=out_mask, split_tags=tags,
    )
    return {"assignments": str(path), "n_rows": int(out_mask.sum())}


def run_eval_stage(
    cfg: RunConfig,
    table: Optional[str] = None,
    teacher: Optional[str] = None,
    student: Optional[str] = None,
) -> dict:
    validate_config(cfg, needs_eval=True)
    out_dir = Path(cfg.output_dir)
    table_path = Path(table) if table else _resolve_table(cfg)[1]
    teacher_path = Path(teacher) if teacher else out_dir / TEACHER_ASSIGNMENTS_FILE
    student_path = Path(student) if student else out_dir / STUDENT_ASSIGNMENTS_FILE
    for path in (teacher_path, student_path):
        if not path.exists():
            raise FileNotFoundError(f"assignments file {path} does not exist")
    metrics = evaluate_files(
        table_path, teacher_path, student_path,
        n_draws=cfg.n_permutation_draws, seed=cfg.seed,
        probe_c_reg=cfg.probe_c_reg, probe_epochs=cfg.probe_epochs,
        probe_features=cfg.probe_features,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    write_metrics(metrics, out_dir / METRICS_FILE)
    return metrics


def run_probe_stage(
    cfg: RunConfig,
    table: Optional[str] = None,
    assignments: Optional[str] = None,
) -> dict:
    validate_config(cfg, needs_eval=True)
    cells = load_table(table) if table else _resolve_table(cfg)[0]
    path = Path(assignments) if assignments else Path(cfg.output_dir) / STUDENT_ASSIGNMENTS_FILE
    if not path.exists():
        raise FileNotFoundError(f"assignments file {path} does not exist")
    got = load_assignments(path)
    if got.split is None:
        raise ValueError("probe needs split tags in the assignments file")
    if not cells.pathology_vocab:
        raise ValueError("probe needs a pathology column in the table")
    id_pos = {cell_id: i for i, cell_id in enumerate(cells.ids)}
    unknown = [cell_id for cell_id in got.ids if cell_id not in id_pos]
    if unknown:
        raise ValueError(f"assignments id {unknown[0]!r} is not in the table")
    table_idx = np.array([id_pos[cell_id] for cell_id in got.ids])
    tags = np.array(got.split)
    train_mask = tags == "train"
    test_mask = tags == "test"
    k = got.logits.shape[1] if got.logits is not None else int(got.labels.max()) + 1
    if cfg.probe_features == "logits" and got.logits is not None:
        features = got.logits
    else:
        features = one_hot(got.labels, k)
    score = svm_probe(
        features, cells.pathology_codes[table_idx], train_mask, test_mask,
        c_reg=cfg.probe_c_reg, seed=cfg.seed, epochs=cfg.probe_epochs,
    )
    return {
        "macro_f1": score,
        "n_train": int(train_mask.sum()),
        "n_test": int(test_mask.sum()),
    }


def run_render_stage(
    cfg: RunConfig,
    assignments: Optional[str] = None,
    out_name: Optional[str] = None,
    overlay: bool = True,
) -> dict:
    validate_config(cfg)
    cells, _ = _resolve_table(cfg)
    path = Path(assignments) if assignments else Path(cfg.output_dir) / STUDENT_ASSIGNMENTS_FILE
    if not path.exists():
        raise FileNotFoundError(f"assignments file {path} does not exist")
    got = load_assignments(path)
    id_pos = {cell_id: i for i, cell_id in enumerate(cells.ids)}
    unknown = [cell_id for cell_id in got.ids if cell_id not in id_pos]
    if unknown:
        raise ValueError(f"assignments id {unknown[0]!r} is not in the table")
    mask = np.zeros(len(cells), dtype=bool)
    rows = np.array([id_pos[cell_id] for cell_id in got.ids])
    mask[rows] = True
    # labels arrive in file order; render wants them in table order
    order = np.argsort(rows, kind="stable")
    labels = got.labels[order]
    split = prepare_split(cells, cfg) if overlay else None
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = out_name or _map_name("niche_map", cfg)
    out_path = render_map(
        cells, labels, out_dir / name,
        split=split, mask=mask, raster=cfg.render_raster,
    )
    return {"map": str(out_path), "n_cells": int(mask.sum())}


def run_pipeline(cfg: RunConfig) -> PipelineResult:
    """Execute every stage and leave all artifacts in cfg.output_dir."""
    validate_config(cfg, needs_eval=True)
    timings: dict[str, float] = {}
    started = time.perf_counter()
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"config": save_config(cfg, out_dir / CONFIG_FILE)}

    t0 = time.perf_counter()
    cells = load_or_synth_table(cfg)
    if not cfg.input_table:
        save_table(cells, out_dir / TABLE_FILE)
        paths["table"] = out_dir / TABLE_FILE
    else:
        paths["table"] = Path(cfg.input_table)
    timings["table"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    split = prepare_split(cells, cfg)
    paths["split"] = save_split(cells, split, out_dir / SPLIT_FILE)
    index = calibrated_index(cells, cfg, allowed=split.train_mask)
    timings["calibrate"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    params = StudentParameters(model_config(cfg, cells.embedding_dim), seed=cfg.seed)
    params, report = train(cells, index, split, params, distill_config(cfg))
    save_checkpoint(params, out_dir / CHECKPOINT_FILE)
    paths["checkpoint"] = out_dir / CHECKPOINT_FILE
    timings["train"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    # test and train cells are inferred separately so each side's
    # neighborhoods stay inside its own split
    test_logits, test_labels = infer(cells, index, split.test_mask, params)
    train_logits, train_labels = infer(cells, index, split.train_mask, params)
    k = cfg.n_niches
    labels_full = np.full(len(cells), -1, dtype=np.int64)
    logits_full = np.zeros((len(cells), k), dtype=np.float64)
    labels_full[split.test_mask] = test_labels
    labels_full[split.train_mask] = train_labels
    logits_full[split.test_mask] = test_logits
    logits_full[split.train_mask] = train_logits
    eval_mask = split.train_mask | split.test_mask
    tags = [TAG_NAMES[t] for t in split.tags[eval_mask]]
    save_assignments(
        cells, labels_full[eval_mask], out_dir / STUDENT_ASSIGNMENTS_FILE,
        logits=logits_full[eval_mask], mask=eval_mask, split_tags=tags,
    )
    paths["student_assignments"] = out_dir / STUDENT_ASSIGNMENTS_FILE
    t_all = teacher_labels(cells)
    save_assignments(
        cells, t_all, out_dir / TEACHER_ASSIGNMENTS_FILE,
        logits=cells.teacher_logits, split_tags=split.tag_names(),
    )
    paths["teacher_assignments"] = out_dir / TEACHER_ASSIGNMENTS_FILE
    timings["infer"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    baseline_labels = kmeans_baseline(
        cells.embeddings, cfg.n_niches, seed=cfg.seed, fit_mask=split.train_mask
    )
    save_assignments(
        cells, baseline_labels, out_dir / BASELINE_ASSIGNMENTS_FILE,
        split_tags=split.tag_names(),
    )
    paths["baseline_assignments"] = out_dir / BASELINE_ASSIGNMENTS_FILE
    metrics = evaluate(cells, split, labels_full, logits_full, baseline_labels,
                       cfg, float(index.radius_um))
    paths["metrics"] = write_metrics(metrics, out_dir / METRICS_FILE)
    timings["evaluate"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    paths["teacher_map"] = render_map(
        cells, t_all, out_dir / _map_name(TEACHER_MAP_STEM, cfg),
        split=split, raster=cfg.render_raster,
    )
    paths["student_map"] = render_map(
        cells, labels_full[eval_mask], out_dir / _map_name(STUDENT_MAP_STEM, cfg),
        split=split, mask=eval_mask, raster=cfg.render_raster,
    )
    timings["render"] = time.perf_counter() - t0
    timings["total"] = time.perf_counter() - started

    manifest = {
        "tool": "nichedistill",
        "version": __version__,
        "config": config_dict(cfg),
        "radius_um": float(index.radius_um),
        "n_params": params.n_params,
        "train": report.manifest,
        "artifacts": {name: p.name for name, p in paths.items()},
        "wall_clock_s": {name: round(v, 3) for name, v in timings.items()},
    }
    (out_dir / MANIFEST_FILE).write_bytes(
        json.dumps(manifest, sort_keys=True, indent=2).encode("ascii") + b"\n"
    )
    paths["manifest"] = out_dir / MANIFEST_FILE
    return PipelineResult(
        out_dir=out_dir,
        cells=cells,
        split=split,
        radius_um=float(index.radius_um),
        params=params,
        report=report,
        metrics=metrics,
        paths=paths,
    )
