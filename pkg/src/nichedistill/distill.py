"""Temperature-scaled distillation: loss, training loop, inference.

The student matches the teacher's softened niche distribution over
each cell's neighborhood. Loss per cell is tau^2 * KL(teacher_soft ||
student_soft); the KL is summed in ratio form, so two bitwise-equal
softened distributions give a loss of exactly 0.0.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import ModelConfig, StudentParameters, backward, encode_positions, forward
from .spatial import NeighborhoodIndex, neighborhood_of
from .split import SplitAssignment
from .table import CellTable

NONLINEARITY = "gelu_erf"


@dataclass
class DistillConfig:
    n_niches: int
    temperature: float = 2.0
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.n_niches < 1:
            raise ValueError("n_niches must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        for name in ("batch_size", "learning_rate", "adam_beta1", "adam_beta2",
                     "adam_eps", "clip_norm"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class TrainReport:
    epoch_losses: list[float]
    final_train_loss: float
    final_test_loss: Optional[float]
    wall_clock_s: float
    manifest: dict = field(default_factory=dict)


def soften(logits: np.ndarray, temperature: float) -> np.ndarray:
    """Temperature-scaled softmax with max-subtraction."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    z = logits / temperature
    e = np.exp(z - z.max())
    return e / e.sum()


def distill_loss(
    teacher_logits: np.ndarray,
    student_logits: np.ndarray,
    temperature: float,
) -> tuple[float, np.ndarray]:
    """One sample's loss and its gradient w.r.t. the student logits.

    loss = tau^2 * KL(p_teacher || p_student); grad = tau * (p_student
    - p_teacher). The KL is evaluated as sum p_t * log(p_t / p_s) over
    the teacher's support; float rounding can leave a tiny negative
    residue, which is clamped to keep the loss law exact.
    """
    teacher_logits = np.asarray(teacher_logits, dtype=np.float64)
    student_logits = np.asarray(student_logits, dtype=np.float64)
    if teacher_logits.shape != student_logits.shape:
        raise ValueError(
            f"teacher shape {teacher_logits.shape} != student shape {student_logits.shape}"
        )
    p_t = soften(teacher_logits, temperature)
    p_s = soften(student_logits, temperature)
    support = p_t > 0
    kl = float(np.sum(p_t[support] * np.log(p_t[support] / p_s[support])))
    loss = temperature * temperature * max(0.0, kl)
    grad = temperature * (p_s - p_t)
    return loss, grad


def build_tokens(
    cells: CellTable,
    index: NeighborhoodIndex,
    cell: int,
    allowed: Optional[np.ndarray],
    params: StudentParameters,
) -> tuple[np.ndarray, int]:
    """Neighborhood tokens (embedding + positional encoding) for one cell."""
    nb = neighborhood_of(index, cell, allowed=allowed)
    enc = encode_positions(nb.rel_coords, params.config.posenc, index.radius_um)
    tokens = np.hstack([cells.embeddings[nb.members], enc])
    center_slot = int(np.flatnonzero(nb.members == nb.center)[0])
    return tokens, center_slot


def _validate_teacher(cells: CellTable, n_niches: int) -> None:
    if cells.teacher_logits is None:
        raise ValueError("training requires teacher logits on every cell")
    if cells.teacher_dim != n_niches:
        raise ValueError(
            f"teacher logit dimension {cells.teacher_dim} != configured n_niches {n_niches}"
        )


class _Adam:
    def __init__(self, params: StudentParameters, cfg: DistillConfig):
        self.cfg = cfg
        self.m = {name: np.zeros_like(a) for name, a in params.arrays()}
        self.v = {name: np.zeros_like(a) for name, a in params.arrays()}
        self.t = 0

    def step(self, params: StudentParameters) -> None:
        cfg = self.cfg
        grads = params.grads
        norm2 = sum(float(np.sum(g * g)) for g in grads.values())
        norm = np.sqrt(norm2)
        scale = cfg.clip_norm / norm if norm > cfg.clip_norm else 1.0
        self.t += 1
        bc1 = 1.0 - cfg.adam_beta1 ** self.t
        bc2 = 1.0 - cfg.adam_beta2 ** self.t
        for name, a in params.arrays():
            g = grads[name] * scale
            m = self.m[name]
            v = self.v[name]
            m *= cfg.adam_beta1
            m += (1.0 - cfg.adam_beta1) * g
            v *= cfg.adam_beta2
            v += (1.0 - cfg.adam_beta2) * (g * g)
            a -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
        params.check_finite()


def _mean_loss(
    cells: CellTable,
    index: NeighborhoodIndex,
    idxs: np.ndarray,
    allowed: np.ndarray,
    params: StudentParameters,
    temperature: float,
) -> float:
    total = 0.0
    for i in idxs:
        tokens, center_slot = build_tokens(cells, index, int(i), allowed, params)
        logits, _ = forward(params, tokens, center_slot)
        loss, _ = distill_loss(cells.teacher_logits[i], logits, temperature)
        total += loss
    return total / len(idxs) if len(idxs) else 0.0


def train(
    cells: CellTable,
    index: NeighborhoodIndex,
    split: SplitAssignment,
    params: StudentParameters,
    cfg: DistillConfig,
) -> tuple[StudentParameters, TrainReport]:
    """Mini-batch Adam over shuffled training cells.

    Neighborhoods and tokens are fixed by the train mask, so they are
    materialized once up front; the shuffle order is the only seeded
    randomness. Deterministic given cfg.seed.
    """
    started = time.perf_counter()
    _validate_teacher(cells, cfg.n_niches)
    if params.config.n_niches != cfg.n_niches:
        raise ValueError(
            f"model head width {params.config.n_niches} != configured n_niches {cfg.n_niches}"
        )
    if index.radius_um is None:
        raise ValueError("index is not calibrated")

    train_mask = split.train_mask
    train_idx = np.flatnonzero(train_mask)
    if len(train_idx) == 0:
        raise ValueError("split has no training cells")
    samples = [build_tokens(cells, index, int(i), train_mask, params) for i in train_idx]
    teacher = cells.teacher_logits

    rng = np.random.default_rng(cfg.seed)
    adam = _Adam(params, cfg)
    epoch_losses: list[float] = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(train_idx))
        epoch_total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            params.zero_grads()
            for j in batch:
                tokens, center_slot = samples[j]
                logits, trace = forward(params, tokens, center_slot)
                loss, dlogits = distill_loss(teacher[train_idx[j]], logits, cfg.temperature)
                epoch_total += loss
                backward(params, trace, dlogits / len(batch))
            adam.step(params)
        epoch_losses.append(epoch_total / len(train_idx))

    final_train = _mean_loss(cells, index, train_idx, train_mask, params, cfg.temperature)
    test_idx = np.flatnonzero(split.test_mask)
    final_test = None
    if len(test_idx):
        final_test = _mean_loss(
            cells, index, test_idx, split.test_mask, params, cfg.temperature
        )
    report = TrainReport(
        epoch_losses=epoch_losses,
        final_train_loss=final_train,
        final_test_loss=final_test,
        wall_clock_s=time.perf_counter() - started,
        manifest={
            "n_niches": cfg.n_niches,
            "temperature": cfg.temperature,
            "epochs": cfg.epochs,
            "batch_size": cfg.batch_size,
            "learning_rate": cfg.learning_rate,
            "adam_beta1": cfg.adam_beta1,
            "adam_beta2": cfg.adam_beta2,
            "adam_eps": cfg.adam_eps,
            "clip_norm": cfg.clip_norm,
            "seed": cfg.seed,
            "radius_um": index.radius_um,
            "nonlinearity": NONLINEARITY,
            "n_params": params.n_params,
            "n_train": int(len(train_idx)),
            "n_test": int(len(test_idx)),
        },
    )
    return params, report


def infer(
    cells: CellTable,
    index: NeighborhoodIndex,
    mask: np.ndarray,
    params: StudentParameters,
) -> tuple[np.ndarray, np.ndarray]:
    """Student logits and argmax labels for the masked cells.

    Neighborhoods are restricted to the mask, so predictions on the
    masked cells never see any cell outside it. Ties in the argmax go
    to the smallest niche index. Rows follow table order.
    """
    if index.radius_um is None:
        raise ValueError("index is not calibrated")
    mask = np.asarray(mask, dtype=bool)
    sel = np.flatnonzero(mask)
    logits = np.empty((len(sel), params.config.n_niches), dtype=np.float64)
    for r, i in enumerate(sel):
        tokens, center_slot = build_tokens(cells, index, int(i), mask, params)
        logits[r], _ = forward(params, tokens, center_slot)
    labels = np.argmax(logits, axis=1) if len(sel) else np.empty(0, dtype=np.int64)
    return logits, labels.astype(np.int64)
