"""Histology student: positional encoding, a one-block transformer over
neighborhood tokens, exact reverse-mode gradients, and checkpoints.

Everything runs in float64 on one neighborhood at a time. The two
attention reductions over the token axis (softmax normalizer and the
context sum) sort their addends first, so logits are bitwise invariant
to any reordering of non-center tokens.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import erf

LN_EPS = 1e-5
CHECKPOINT_MAGIC = b"NDST0001"

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class PositionalEncodingConfig:
    """Geometric ladder of sin/cos features over relative coordinates."""

    n_frequencies: int = 8
    base_wavelength: float = 1.0  # fraction of the neighborhood radius

    @property
    def encoding_dim(self) -> int:
        return 4 * self.n_frequencies


def encode_positions(
    rel_coords: np.ndarray,
    cfg: PositionalEncodingConfig,
    radius_um: float,
) -> np.ndarray:
    """Map (dx, dy) offsets to [sin, cos, sin, cos] per frequency.

    Offsets are divided by the radius first, so rescaling coordinates
    and radius together leaves the encoding unchanged. The center's
    (0, 0) offset encodes to [0, 1, 0, 1, ...].
    """
    if radius_um <= 0:
        raise ValueError("radius_um must be positive")
    rel = np.asarray(rel_coords, dtype=np.float64).reshape(-1, 2)
    u = rel / radius_um
    omega = 2.0 * np.pi * (2.0 ** np.arange(cfg.n_frequencies)) / cfg.base_wavelength
    px = u[:, 0:1] * omega[None, :]
    py = u[:, 1:2] * omega[None, :]
    out = np.empty((len(rel), cfg.encoding_dim), dtype=np.float64)
    out[:, 0::4] = np.sin(px)
    out[:, 1::4] = np.cos(px)
    out[:, 2::4] = np.sin(py)
    out[:, 3::4] = np.cos(py)
    return out


@dataclass(frozen=True)
class ModelConfig:
    embedding_dim: int
    n_niches: int
    posenc: PositionalEncodingConfig = field(default_factory=PositionalEncodingConfig)
    d_model: int = 64
    d_ff: int = 128

    @property
    def input_dim(self) -> int:
        return self.embedding_dim + self.posenc.encoding_dim

    def header_dict(self) -> dict:
        return {
            "embedding_dim": self.embedding_dim,
            "n_niches": self.n_niches,
            "n_frequencies": self.posenc.n_frequencies,
            "base_wavelength": self.posenc.base_wavelength,
            "d_model": self.d_model,
            "d_ff": self.d_ff,
        }

    @classmethod
    def from_header_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            embedding_dim=int(d["embedding_dim"]),
            n_niches=int(d["n_niches"]),
            posenc=PositionalEncodingConfig(
                n_frequencies=int(d["n_frequencies"]),
                base_wavelength=float(d["base_wavelength"]),
            ),
            d_model=int(d["d_model"]),
            d_ff=int(d["d_ff"]),
        )


class StudentParameters:
    """All weights of the student, each with a paired gradient buffer."""

    ARRAY_NAMES = (
        "w_proj", "b_proj",
        "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias",
        "w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o",
        "w_ff1", "b_ff1", "w_ff2", "b_ff2",
        "w_head", "b_head",
    )

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        d, f = config.d_model, config.d_ff
        din, k = config.input_dim, config.n_niches
        rng = np.random.default_rng(seed)

        def linear(n_in, n_out):
            return rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))

        self.w_proj = linear(din, d)
        self.b_proj = np.zeros(d)
        self.ln1_gain = np.ones(d)
        self.ln1_bias = np.zeros(d)
        self.ln2_gain = np.ones(d)
        self.ln2_bias = np.zeros(d)
        self.w_q = linear(d, d)
        self.b_q = np.zeros(d)
        self.w_k = linear(d, d)
        self.b_k = np.zeros(d)
        self.w_v = linear(d, d)
        self.b_v = np.zeros(d)
        self.w_o = linear(d, d)
        self.b_o = np.zeros(d)
        self.w_ff1 = linear(d, f)
        self.b_ff1 = np.zeros(f)
        self.w_ff2 = linear(f, d)
        self.b_ff2 = np.zeros(d)
        self.w_head = linear(d, k)
        self.b_head = np.zeros(k)
        self.grads = {name: np.zeros_like(getattr(self, name)) for name in self.ARRAY_NAMES}

    def arrays(self):
        for name in self.ARRAY_NAMES:
            yield name, getattr(self, name)

    @property
    def n_params(self) -> int:
        return sum(a.size for _, a in self.arrays())

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def check_finite(self) -> None:
        for name, a in self.arrays():
            if not np.all(np.isfinite(a)):
                raise FloatingPointError(f"non-finite values in parameter {name!r}")


@dataclass
class ForwardTrace:
    """Activations cached by one forward pass; backward consumes it once."""

    tokens: np.ndarray
    center_slot: int
    h0: np.ndarray
    z1: np.ndarray
    ln1_xhat: np.ndarray
    ln1_inv: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    probs: np.ndarray
    context: np.ndarray
    h2: np.ndarray
    z2: np.ndarray
    ln2_xhat: np.ndarray
    ln2_inv: np.ndarray
    ff_pre: np.ndarray
    ff_act: np.ndarray
    h3: np.ndarray
    logits: np.ndarray
    consumed: bool = False


def _sorted_sum(terms: np.ndarray, axis: int) -> np.ndarray:
    # reduction order must not depend on token order: sorting first makes
    # the sum a function of the addend multiset alone
    return np.add.reduce(np.sort(terms, axis=axis), axis=axis)


def _layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    mean = x.mean(axis=1, keepdims=True)
    var = np.mean((x - mean) ** 2, axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mean) * inv
    return xhat * gain + bias, xhat, inv


def _layer_norm_backward(dout, xhat, inv, gain):
    dxhat = dout * gain
    dgain = (dout * xhat).sum(axis=0)
    dbias = dout.sum(axis=0)
    mean_dxhat = dxhat.mean(axis=1, keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
    return dx, dgain, dbias


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT2PI


def forward(
    params: StudentParameters,
    tokens: np.ndarray,
    center_slot: int = 0,
) -> tuple[np.ndarray, ForwardTrace]:
    """Run one neighborhood through the student.

    ``tokens`` is (T, D + 4F): per-member embedding with its positional
    encoding appended. Logits are read from the center token's slot.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[0] < 1:
        raise ValueError(f"tokens must be (T >= 1, input_dim), got {tokens.shape}")
    if tokens.shape[1] != params.config.input_dim:
        raise ValueError(
            f"token width {tokens.shape[1]} != model input_dim {params.config.input_dim}"
        )
    if not 0 <= center_slot < tokens.shape[0]:
        raise ValueError(f"center_slot {center_slot} out of range for {tokens.shape[0]} tokens")

    h0 = tokens @ params.w_proj + params.b_proj
    z1, ln1_xhat, ln1_inv = _layer_norm(h0, params.ln1_gain, params.ln1_bias)

    q = z1 @ params.w_q + params.b_q
    k = z1 @ params.w_k + params.b_k
    v = z1 @ params.w_v + params.b_v
    scale = 1.0 / np.sqrt(params.config.d_model)
    scores = (q @ k.T) * scale
    shifted = scores - scores.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    denom = _sorted_sum(exps, axis=1)[:, None]
    probs = exps / denom
    context = _sorted_sum(probs[:, :, None] * v[None, :, :], axis=1)
    h2 = h0 + (context @ params.w_o + params.b_o)

    z2, ln2_xhat, ln2_inv = _layer_norm(h2, params.ln2_gain, params.ln2_bias)
    ff_pre = z2 @ params.w_ff1 + params.b_ff1
    ff_act = _gelu(ff_pre)
    h3 = h2 + (ff_act @ params.w_ff2 + params.b_ff2)

    logits = h3[center_slot] @ params.w_head + params.b_head
    trace = ForwardTrace(
        tokens=tokens, center_slot=center_slot,
        h0=h0, z1=z1, ln1_xhat=ln1_xhat, ln1_inv=ln1_inv,
        q=q, k=k, v=v, probs=probs, context=context, h2=h2,
        z2=z2, ln2_xhat=ln2_xhat, ln2_inv=ln2_inv,
        ff_pre=ff_pre, ff_act=ff_act, h3=h3, logits=logits,
    )
    return logits, trace


def backward(params: StudentParameters, trace: ForwardTrace, dlogits: np.ndarray) -> None:
    """Accumulate exact parameter gradients for one traced forward."""
    if trace.consumed:
        raise RuntimeError("forward trace already consumed by a previous backward")
    trace.consumed = True
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if dlogits.shape != (params.config.n_niches,):
        raise ValueError(f"dlogits shape {dlogits.shape} != ({params.config.n_niches},)")
    g = params.grads
    c = trace.center_slot

    g["w_head"] += np.outer(trace.h3[c], dlogits)
    g["b_head"] += dlogits
    dh3 = np.zeros_like(trace.h3)
    dh3[c] = params.w_head @ dlogits

    dff_out = dh3
    g["w_ff2"] += trace.ff_act.T @ dff_out
    g["b_ff2"] += dff_out.sum(axis=0)
    dff_act = dff_out @ params.w_ff2.T
    dff_pre = dff_act * _gelu_grad(trace.ff_pre)
    g["w_ff1"] += trace.z2.T @ dff_pre
    g["b_ff1"] += dff_pre.sum(axis=0)
    dz2 = dff_pre @ params.w_ff1.T
    dx, dgain, dbias = _layer_norm_backward(dz2, trace.ln2_xhat, trace.ln2_inv, params.ln2_gain)
    g["ln2_gain"] += dgain
    g["ln2_bias"] += dbias
    dh2 = dh3 + dx

    dattn = dh2
    g["w_o"] += trace.context.T @ dattn
    g["b_o"] += dattn.sum(axis=0)
    dcontext = dattn @ params.w_o.T
    dprobs = dcontext @ trace.v.T
    dv = trace.probs.T @ dcontext
    # softmax backward, row-wise
    dscores = trace.probs * (dprobs - (dprobs * trace.probs).sum(axis=1, keepdims=True))
    scale = 1.0 / np.sqrt(params.config.d_model)
    dq = (dscores @ trace.k) * scale
    dk = (dscores.T @ trace.q) * scale
    g["w_q"] += trace.z1.T @ dq
    g["b_q"] += dq.sum(axis=0)
    g["w_k"] += trace.z1.T @ dk
    g["b_k"] += dk.sum(axis=0)
    g["w_v"] += trace.z1.T @ dv
    g["b_v"] += dv.sum(axis=0)
    dz1 = dq @ params.w_q.T + dk @ params.w_k.T + dv @ params.w_v.T
    dx, dgain, dbias = _layer_norm_backward(dz1, trace.ln1_xhat, trace.ln1_inv, params.ln1_gain)
    g["ln1_gain"] += dgain
    g["ln1_bias"] += dbias
    dh0 = dh2 + dx

    g["w_proj"] += trace.tokens.T @ dh0
    g["b_proj"] += dh0.sum(axis=0)


def save_checkpoint(params: StudentParameters, path: str | Path) -> None:
    """Write a deterministic binary checkpoint (no timestamps, fixed
    key order), so identical parameters produce identical bytes."""
    header = {
        "format": "student-checkpoint",
        "version": 1,
        "config": params.config.header_dict(),
        "arrays": [
            {"name": name, "shape": list(a.shape)} for name, a in params.arrays()
        ],
        "dtype": "<f8",
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for _, a in params.arrays():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path, expect_config: Optional[ModelConfig] = None) -> StudentParameters:
    path = Path(path)
    raw = path.read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a student checkpoint (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    hlen = int.from_bytes(raw[off : off + 8], "little")
    off += 8
    header = json.loads(raw[off : off + hlen].decode("utf-8"))
    off += hlen
    if header.get("format") != "student-checkpoint" or header.get("version") != 1:
        raise ValueError(f"{path}: unsupported checkpoint format/version")
    config = ModelConfig.from_header_dict(header["config"])
    if expect_config is not None and config != expect_config:
        raise ValueError(
            f"checkpoint dimensions {config.header_dict()} do not match "
            f"expected {expect_config.header_dict()}"
        )
    params = StudentParameters(config, seed=0)
    for spec in header["arrays"]:
        name, shape = spec["name"], tuple(spec["shape"])
        if name not in StudentParameters.ARRAY_NAMES:
            raise ValueError(f"{path}: unknown array {name!r}")
        expected = getattr(params, name).shape
        if shape != expected:
            raise ValueError(f"{path}: array {name!r} has shape {shape}, expected {expected}")
        size = int(np.prod(shape)) * 8
        a = np.frombuffer(raw[off : off + size], dtype="<f8").reshape(shape).copy()
        off += size
        setattr(params, name, a)
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes after arrays")
    params.grads = {name: np.zeros_like(getattr(params, name))
                    for name in StudentParameters.ARRAY_NAMES}
    return params
