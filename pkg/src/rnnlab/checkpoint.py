"""Versioned binary checkpoints with bit-exact round-trips.

Layout:
  bytes 0-3   magic "RNLB"
  bytes 4-7   format version, unsigned 32-bit little-endian
  bytes 8-15  header length H, unsigned 64-bit little-endian
  H bytes     canonical JSON header (sorted keys, no whitespace): model
              config, optimizer scalars, averaging tail bookkeeping, rng
              state, best validation loss, learning rate, payload sizes
  rest        little-endian float64 payload: flattened parameters, first
              moment, second moment, long-tail mean, short-tail mean

JSON serializes floats via repr, which round-trips their binary values
exactly, so save -> load -> save reproduces the file byte for byte."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass

import numpy as np

from . import model
from .model import ModelConfig, ModelParams
from .ptree import flatten, unflatten_into
from .training import RAdamState, Tail, TtaState

MAGIC = b"RNLB"
VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    version: int
    config: ModelConfig
    params: ModelParams
    radam: RAdamState
    tta: TtaState
    rng_state: dict
    best_val_nats: float
    lr: float


def _header_dict(ckpt: Checkpoint, param_count: int) -> dict:
    return {
        "model_config": dataclasses.asdict(ckpt.config),
        "radam": {
            "step": ckpt.radam.step,
            "lr": ckpt.radam.lr,
            "beta1": ckpt.radam.beta1,
            "beta2": ckpt.radam.beta2,
            "eps": ckpt.radam.eps,
        },
        "tta": {
            "long": {"start": ckpt.tta.long.start, "count": ckpt.tta.long.count},
            "short": {"start": ckpt.tta.short.start, "count": ckpt.tta.short.count},
            "step": ckpt.tta.step,
        },
        "rng": ckpt.rng_state,
        "best_val_nats": ckpt.best_val_nats,
        "lr": ckpt.lr,
        "param_count": param_count,
    }


def save_checkpoint(path, ckpt: Checkpoint):
    params_flat = flatten(ckpt.params)
    count = params_flat.size
    for name, vec in (
        ("first moment", ckpt.radam.m),
        ("second moment", ckpt.radam.v),
        ("long tail", ckpt.tta.long.mean),
        ("short tail", ckpt.tta.short.mean),
    ):
        if vec.size != count:
            raise CheckpointError(f"{name} has {vec.size} entries, parameters have {count}")
    header = json.dumps(_header_dict(ckpt, count), sort_keys=True, separators=(",", ":"))
    header_bytes = header.encode("utf-8")
    payload = np.concatenate(
        [params_flat, ckpt.radam.m, ckpt.radam.v, ckpt.tta.long.mean, ckpt.tta.short.mean]
    ).astype("<f8")
    blob = (
        MAGIC
        + np.uint32(ckpt.version).tobytes()
        + np.uint64(len(header_bytes)).tobytes()
        + header_bytes
        + payload.tobytes()
    )
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file (bad magic)")
    version = int(np.frombuffer(blob[4:8], dtype="<u4")[0])
    if version != VERSION:
        raise CheckpointVersionError(
            f"checkpoint {path} has format version {version}; "
            f"this build reads version {VERSION}"
        )
    header_len = int(np.frombuffer(blob[8:16], dtype="<u8")[0])
    header = json.loads(blob[16 : 16 + header_len].decode("utf-8"))
    count = header["param_count"]
    payload = np.frombuffer(blob[16 + header_len :], dtype="<f8")
    if payload.size != 5 * count:
        raise CheckpointError(f"payload has {payload.size} floats, expected {5 * count}")
    chunks = [payload[i * count : (i + 1) * count].astype(np.float64) for i in range(5)]

    config = ModelConfig(**header["model_config"])
    params = model.empty_model_params(config)
    unflatten_into(params, chunks[0])
    r = header["radam"]
    radam = RAdamState(
        m=chunks[1], v=chunks[2], step=r["step"], lr=r["lr"], beta1=r["beta1"],
        beta2=r["beta2"], eps=r["eps"],
    )
    t = header["tta"]
    tta = TtaState(
        long=Tail(chunks[3], t["long"]["start"], t["long"]["count"]),
        short=Tail(chunks[4], t["short"]["start"], t["short"]["count"]),
        step=t["step"],
    )
    return Checkpoint(
        version=version,
        config=config,
        params=params,
        radam=radam,
        tta=tta,
        rng_state=header["rng"],
        best_val_nats=header["best_val_nats"],
        lr=header["lr"],
    )


def checkpoint_from_snapshot(
    config: ModelConfig, snap, beta1=0.9, beta2=0.999, eps=1e-8
) -> Checkpoint:
    """Build a Checkpoint from a training best-state snapshot."""
    params = model.empty_model_params(config)
    unflatten_into(params, snap.params_flat)
    radam = RAdamState(
        m=snap.m.copy(), v=snap.v.copy(), step=snap.opt_step, lr=snap.lr,
        beta1=beta1, beta2=beta2, eps=eps,
    )
    tta = TtaState(
        long=Tail(snap.tta_long.mean.copy(), snap.tta_long.start, snap.tta_long.count),
        short=Tail(snap.tta_short.mean.copy(), snap.tta_short.start, snap.tta_short.count),
        step=snap.tta_step,
    )
    return Checkpoint(
        version=VERSION,
        config=config,
        params=params,
        radam=radam,
        tta=tta,
        rng_state=snap.rng_state,
        best_val_nats=snap.val_nats,
        lr=snap.lr,
    )
