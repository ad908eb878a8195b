"""Run configuration: a flat key = value file format (no code execution) and
the dataclass of every knob with its default.

Section headers like [model] are allowed for readability and ignored; keys
are global.  Unknown or duplicate keys are rejected with their line number.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

from .evaluation import DynevalConfig
from .model import ModelConfig
from .training import TrainOptions


class ConfigError(Exception):
    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


@dataclass
class RunConfig:
    # model
    layers: int = 2
    state_size: int = 128
    cell: str = "rlstm"
    cap_input_gate: bool = True
    mogrifier_rounds: int = 4
    mogrifier_rank: int = 0
    keep_in: float = 1.0
    keep_cell: float = 1.0
    keep_state: float = 1.0
    keep_out: float = 1.0
    tie_embeddings: bool = False
    dropout_samples: int = 1
    residual_includes_embedding: bool = False
    input_mask_rows: bool = False
    t_max: float = math.e**3
    dtype: str = "float64"
    # data
    mode: str = "byte"
    train_path: str = ""
    valid_path: str = ""
    test_path: str = ""
    vocab_path: str = ""
    # optimization
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 10.0
    divergence_factor: float = 3.0
    lr_decay_on_restart: float = 0.9
    max_restarts: int = 20
    epochs: int = 1
    batch_size: int = 32
    window: int = 128
    val_interval: int = 0
    patience: int = 0
    target_val_nats: float = 0.0
    max_train_seconds: float = 0.0
    val_batch_size: int = 16
    val_window: int = 128
    # evaluation
    eval_split: str = "test"
    eval_batch_size: int = 1
    eval_window: int = 128
    temperature: float = 1.0
    temperature_grid_min: float = 0.70
    temperature_grid_max: float = 1.30
    temperature_grid_step: float = 0.02
    temperature_file: str = ""
    # dynamic evaluation
    dyn_segment: int = 100
    dyn_lr: float = 0.0
    dyn_decay: float = 0.0
    dyn_norm: str = "none"
    dyn_tune: bool = False
    # run plumbing
    seed: int = 0
    checkpoint_path: str = "checkpoint.bin"
    tta_checkpoint_path: str = ""
    metrics_path: str = "metrics.log"
    fast_gemm: bool = True


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _convert(name: str, raw: str, line: int):
    kind = _FIELDS[name].type
    raw = raw.strip()
    try:
        if kind == "bool":
            lowered = raw.lower()
            if lowered in ("true", "yes", "1", "on"):
                return True
            if lowered in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse {kind} value {raw!r} for key '{name}'", line) from None


def parse_config(text: str) -> RunConfig:
    values = {}
    lines = {}
    for lineno, raw_line in enumerate(text.split("\n"), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno)
        key, _, raw_value = line.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"unknown key '{key}'", lineno)
        if key in values:
            raise ConfigError(f"duplicate key '{key}' (first set on line {lines[key]})", lineno)
        values[key] = _convert(key, raw_value, lineno)
        lines[key] = lineno
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    return parse_config(text)


def resolved_items(cfg: RunConfig):
    """Every knob with its resolved value, in declaration order, for the
    metrics log header."""
    return [(f.name, getattr(cfg, f.name)) for f in dataclasses.fields(RunConfig)]


def to_model_config(cfg: RunConfig, vocab_size: int) -> ModelConfig:
    return ModelConfig(
        layers=cfg.layers,
        state_size=cfg.state_size,
        vocab_size=vocab_size,
        cell=cfg.cell,
        cap_input_gate=cfg.cap_input_gate,
        mogrifier_rounds=cfg.mogrifier_rounds,
        mogrifier_rank=cfg.mogrifier_rank,
        keep_in=cfg.keep_in,
        keep_cell=cfg.keep_cell,
        keep_state=cfg.keep_state,
        keep_out=cfg.keep_out,
        tie_embeddings=cfg.tie_embeddings,
        dropout_samples=cfg.dropout_samples,
        residual_includes_embedding=cfg.residual_includes_embedding,
        input_mask_rows=cfg.input_mask_rows,
        t_max=cfg.t_max,
        dtype=cfg.dtype,
    )


def to_train_options(cfg: RunConfig) -> TrainOptions:
    return TrainOptions(
        lr=cfg.lr,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        eps=cfg.eps,
        clip_norm=cfg.clip_norm,
        divergence_factor=cfg.divergence_factor,
        lr_decay_on_restart=cfg.lr_decay_on_restart,
        max_restarts=cfg.max_restarts,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        window=cfg.window,
        val_interval=cfg.val_interval,
        patience=cfg.patience,
        target_val_nats=cfg.target_val_nats,
        max_train_seconds=cfg.max_train_seconds,
        val_batch_size=cfg.val_batch_size,
        val_window=cfg.val_window,
    )


def to_dyneval_config(cfg: RunConfig) -> DynevalConfig:
    return DynevalConfig(
        segment=cfg.dyn_segment, lr=cfg.dyn_lr, decay=cfg.dyn_decay, norm_mode=cfg.dyn_norm
    )


def temperature_grid(cfg: RunConfig):
    lo, hi, step = cfg.temperature_grid_min, cfg.temperature_grid_max, cfg.temperature_grid_step
    if step <= 0 or hi < lo:
        raise ConfigError("temperature grid requires step > 0 and max >= min")
    count = int(round((hi - lo) / step)) + 1
    return [round(lo + k * step, 10) for k in range(count)]
