"""Versioned binary checkpoints.

Layout::

    b"IBRLCKPT" | u32 format version | u32 header length | header JSON | payload

The header (UTF-8 JSON, sorted keys) lists every array by name, shape and byte
offset, plus a SHA-256 of the payload.  The payload is the arrays back to back
as little-endian float64.  Saving the result of a load reproduces the file
byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nnkit as nn
from .policy import PolicyBundle, make_bundle

MAGIC = b"IBRLCKPT"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    config_hash: str
    iteration: int
    beta: float
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def to_bytes(ckpt: Checkpoint) -> bytes:
    index, chunks, offset = [], [], 0
    for name in sorted(ckpt.arrays):
        arr = np.ascontiguousarray(ckpt.arrays[name], dtype="<f8")
        raw = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = _dumps({
        "config_hash": ckpt.config_hash,
        "iteration": int(ckpt.iteration),
        "beta": float(ckpt.beta),
        "arrays": index,
        "meta": ckpt.meta,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    })
    return MAGIC + struct.pack("<II", ckpt.version, len(header)) + header + payload


def from_bytes(blob: bytes, expected_hash: str | None = None) -> Checkpoint:
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupted checkpoint header: {exc}") from exc
    payload = blob[16 + hlen:]
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header.get("payload_sha256"):
        raise CheckpointError(f"payload hash mismatch: file says {header.get('payload_sha256')}, data hashes to {digest}")
    if expected_hash is not None and header["config_hash"] != expected_hash:
        raise CheckpointError(f"checkpoint was written for config {header['config_hash']}, not {expected_hash}")
    arrays = {}
    for item in header["arrays"]:
        raw = payload[item["offset"]:item["offset"] + item["nbytes"]]
        arrays[item["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(item["shape"])
    return Checkpoint(header["config_hash"], header["iteration"], header["beta"], arrays, header["meta"], version)


def save(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load(path, expected_hash: str | None = None) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(blob, expected_hash)


# ------------------------------------------------------------ bundle / state


def bundle_meta(bundle: PolicyBundle) -> dict:
    return {"env": bundle.env, "deterministic": bundle.deterministic, "code_dim": bundle.code_dim}


def bundle_checkpoint(bundle: PolicyBundle, config_hash: str, iteration: int, beta: float,
                      meta: dict | None = None) -> Checkpoint:
    arrays = {f"param/{name}": p.data for name, p in bundle.named_parameters()}
    return Checkpoint(config_hash, iteration, beta, arrays, {"bundle": bundle_meta(bundle), **(meta or {})})


def bundle_from_checkpoint(ckpt: Checkpoint) -> PolicyBundle:
    info = ckpt.meta.get("bundle")
    if info is None:
        raise CheckpointError("checkpoint does not describe a policy bundle")
    bundle = make_bundle(info["env"], np.random.default_rng(0), deterministic=info["deterministic"],
                         code_dim=info["code_dim"])
    for name, p in bundle.named_parameters():
        key = f"param/{name}"
        if key not in ckpt.arrays:
            raise CheckpointError(f"checkpoint lacks parameter {name}")
        if ckpt.arrays[key].shape != p.shape:
            raise CheckpointError(f"parameter {name}: stored shape {ckpt.arrays[key].shape} != {p.shape}")
        p.data = ckpt.arrays[key].copy()
    return bundle


def state_checkpoint(state, config_hash: str, beta: float, meta: dict | None = None) -> Checkpoint:
    """Everything needed to resume training bitwise: parameters, Adam moments,
    rng streams, environment states and episode bookkeeping."""
    ckpt = bundle_checkpoint(state.bundle, config_hash, state.updates, beta, meta)
    names = [n for n, _ in state.bundle.named_parameters()]
    for name, m, v in zip(names, state.opt.m, state.opt.v):
        ckpt.arrays[f"adam_m/{name}"] = m
        ckpt.arrays[f"adam_v/{name}"] = v
    ckpt.meta["train"] = {
        "adam_step": state.opt.step,
        "env_steps": state.env_steps,
        "updates": state.updates,
        "recent": [float(x) for x in state.recent],
        "last_mean_return": state.last_mean_return if np.isfinite(state.last_mean_return) else None,
        "runner": state.runner.get_state(),
        "update_rng": state.update_rng.bit_generator.state,
    }
    return ckpt


def restore_state(ckpt: Checkpoint, config, envs):
    """Rebuild a TrainState from ``state_checkpoint`` output."""
    from .agents import init_state

    if "train" not in ckpt.meta:
        raise CheckpointError("checkpoint has no training state to resume from")
    bundle = bundle_from_checkpoint(ckpt)
    state = init_state(config, envs, bundle)
    t = ckpt.meta["train"]
    names = [n for n, _ in bundle.named_parameters()]
    state.opt.m = [ckpt.arrays[f"adam_m/{n}"].copy() for n in names]
    state.opt.v = [ckpt.arrays[f"adam_v/{n}"].copy() for n in names]
    state.opt.step = t["adam_step"]
    state.env_steps = t["env_steps"]
    state.updates = t["updates"]
    state.recent = deque(t["recent"], maxlen=100)
    state.last_mean_return = float("nan") if t["last_mean_return"] is None else t["last_mean_return"]
    state.runner.set_state(t["runner"])
    state.update_rng.bit_generator.state = t["update_rng"]
    return state
