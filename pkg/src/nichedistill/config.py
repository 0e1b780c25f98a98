"""Run configuration.

One flat dataclass holds every tunable; an INI file with section
headers stores it on disk, and each key doubles as a CLI flag of the
same name (flag wins). A pydantic mirror, built from the dataclass
fields, validates service payloads.

No postponed annotations here: the pydantic model is created from the
dataclass field types at import time, so they must be real types.
"""

import configparser
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Union

from pydantic import create_model

from .synth import PATHOLOGY_MODES

OUTPUT_DIR_ENV = "NICHEDISTILL_OUTPUT_DIR"

CONFIG_SECTIONS = ("paths", "synth", "data", "model", "train", "eval")


def _in(section):
    return {"section": section}


@dataclass
class RunConfig:
    """Every knob of a run, grouped by the INI section it lives in."""

    input_table: str = field(default="", metadata=_in("paths"))
    output_dir: str = field(default="runs/latest", metadata=_in("paths"))

    n_cells: int = field(default=20000, metadata=_in("synth"))
    n_types: int = field(default=6, metadata=_in("synth"))
    embedding_dim: int = field(default=16, metadata=_in("synth"))
    sharpness: float = field(default=40.0, metadata=_in("synth"))
    noise_sigma: float = field(default=0.1, metadata=_in("synth"))
    side_um: float = field(default=1000.0, metadata=_in("synth"))
    composition_alpha: float = field(default=0.5, metadata=_in("synth"))
    n_pathology: int = field(default=3, metadata=_in("synth"))
    pathology_mode: str = field(default="by_niche", metadata=_in("synth"))

    resolution_um_per_px: float = field(default=0.274, metadata=_in("data"))
    crop_size_px: int = field(default=224, metadata=_in("data"))
    test_strip: int = field(default=1, metadata=_in("data"))
    split_axis: str = field(default="y", metadata=_in("data"))
    target_count: int = field(default=20, metadata=_in("data"))
    max_neighbors: int = field(default=64, metadata=_in("data"))

    n_niches: int = field(default=8, metadata=_in("model"))
    d_model: int = field(default=64, metadata=_in("model"))
    d_ff: int = field(default=128, metadata=_in("model"))
    n_frequencies: int = field(default=8, metadata=_in("model"))
    base_wavelength: float = field(default=1.0, metadata=_in("model"))

    temperature: float = field(default=2.0, metadata=_in("train"))
    epochs: int = field(default=20, metadata=_in("train"))
    batch_size: int = field(default=64, metadata=_in("train"))
    learning_rate: float = field(default=1e-3, metadata=_in("train"))
    adam_beta1: float = field(default=0.9, metadata=_in("train"))
    adam_beta2: float = field(default=0.999, metadata=_in("train"))
    adam_eps: float = field(default=1e-8, metadata=_in("train"))
    clip_norm: float = field(default=5.0, metadata=_in("train"))
    seed: int = field(default=0, metadata=_in("train"))

    n_permutation_draws: int = field(default=10000, metadata=_in("eval"))
    probe_c_reg: float = field(default=1.0, metadata=_in("eval"))
    probe_epochs: int = field(default=20, metadata=_in("eval"))
    probe_features: str = field(default="onehot", metadata=_in("eval"))
    render_raster: bool = field(default=False, metadata=_in("eval"))


_FIELDS = {f.name: f for f in fields(RunConfig)}

# service-facing mirror of RunConfig with pydantic validation
RunSettings = create_model(
    "RunSettings", **{f.name: (f.type, f.default) for f in fields(RunConfig)}
)

_TRUE = frozenset(("1", "true", "yes", "on"))
_FALSE = frozenset(("0", "false", "no", "off"))


def default_config() -> RunConfig:
    cfg = RunConfig()
    env_dir = os.environ.get(OUTPUT_DIR_ENV, "")
    if env_dir:
        cfg.output_dir = env_dir
    return cfg


def coerce_value(key: str, raw: str) -> Union[bool, int, float, str]:
    """Parse a string to the declared type of the named config key."""
    if key not in _FIELDS:
        raise ValueError(f"unknown config key {key!r}")
    target = _FIELDS[key].type
    if target is bool:
        low = raw.strip().lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if target is int:
        try:
            return int(raw)
        except ValueError:
            raise ValueError(f"{key}: expected an integer, got {raw!r}") from None
    if target is float:
        try:
            return float(raw)
        except ValueError:
            raise ValueError(f"{key}: expected a number, got {raw!r}") from None
    return raw


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    parser.read_string(path.read_text())
    cfg = default_config()
    for section in parser.sections():
        if section not in CONFIG_SECTIONS:
            raise ValueError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in _FIELDS:
                raise ValueError(f"unknown config key {key!r} in [{section}]")
            expected = _FIELDS[key].metadata["section"]
            if expected != section:
                raise ValueError(f"key {key!r} belongs in [{expected}], found in [{section}]")
            setattr(cfg, key, coerce_value(key, raw))
    return cfg


def _fmt_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def save_config(cfg: RunConfig, path) -> Path:
    """Write the resolved configuration; the file round-trips exactly."""
    lines = []
    for section in CONFIG_SECTIONS:
        lines.append(f"[{section}]")
        for f in fields(RunConfig):
            if f.metadata["section"] == section:
                lines.append(f"{f.name} = {_fmt_value(getattr(cfg, f.name))}")
        lines.append("")
    path = Path(path)
    path.write_bytes("\n".join(lines).encode("ascii"))
    return path


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Fold CLI flag values over the file values; a set flag wins."""
    for key, value in overrides.items():
        if key not in _FIELDS:
            raise ValueError(f"unknown config key {key!r}")
        if value is None:
            continue
        if isinstance(value, str) and _FIELDS[key].type is not str:
            value = coerce_value(key, value)
        setattr(cfg, key, value)
    return cfg


def config_dict(cfg: RunConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(RunConfig)}


def validate_config(cfg: RunConfig, needs_eval: bool = False) -> None:
    """Reject configurations no stage could run with.

    needs_eval additionally requires n_niches >= 2, the minimum for any
    agreement metric to be defined.
    """
    positive = (
        "n_cells", "n_types", "embedding_dim", "n_pathology", "crop_size_px",
        "target_count", "max_neighbors", "n_niches", "d_model", "d_ff",
        "n_frequencies", "batch_size", "n_permutation_draws", "probe_epochs",
    )
    for key in positive:
        if getattr(cfg, key) < 1:
            raise ValueError(f"{key} must be >= 1, got {getattr(cfg, key)}")
    strictly_positive = (
        "sharpness", "side_um", "composition_alpha", "resolution_um_per_px",
        "base_wavelength", "temperature", "learning_rate", "clip_norm",
        "probe_c_reg",
    )
    for key in strictly_positive:
        if not getattr(cfg, key) > 0:
            raise ValueError(f"{key} must be > 0, got {getattr(cfg, key)}")
    if cfg.noise_sigma < 0:
        raise ValueError(f"noise_sigma must be >= 0, got {cfg.noise_sigma}")
    if cfg.epochs < 0:
        raise ValueError(f"epochs must be >= 0, got {cfg.epochs}")
    if cfg.seed < 0:
        raise ValueError(f"seed must be >= 0, got {cfg.seed}")
    if cfg.test_strip not in range(4):
        raise ValueError(f"test_strip must be in 0..3, got {cfg.test_strip}")
    if cfg.split_axis not in ("x", "y"):
        raise ValueError(f"split_axis must be 'x' or 'y', got {cfg.split_axis!r}")
    if cfg.pathology_mode not in PATHOLOGY_MODES:
        raise ValueError(
            f"pathology_mode must be one of {PATHOLOGY_MODES}, got {cfg.pathology_mode!r}"
        )
    if cfg.probe_features not in ("onehot", "logits"):
        raise ValueError(
            f"probe_features must be 'onehot' or 'logits', got {cfg.probe_features!r}"
        )
    if needs_eval and cfg.n_niches < 2:
        raise ValueError(f"evaluation needs n_niches >= 2, got {cfg.n_niches}")
