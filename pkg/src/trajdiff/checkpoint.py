"""TPCK checkpoint files.

Layout (little-endian)::

    b"TPCK" | u32 version | u32 header_len | header JSON (sorted keys) | f64 blobs

The header holds the architecture, schedule length, data layout, config hash,
step counter, optimizer step and generator state, plus an index mapping each
tensor name to ``{"offset", "shape"}`` (offset counted in f64 elements from the
start of the blob section). Everything needed to resume training exactly is
stored; float64 values are written verbatim so reloaded nets are bit-exact.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Normalizer
from .diffusion import DiffusionModel, NoiseSchedule
from .errors import CheckpointError
from .nn import Adam
from .training import TrainState
from .unet import DenoiserNet, ValueNet

MAGIC = b"TPCK"
VERSION = 1
KINDS = {"diffusion": DenoiserNet, "value": ValueNet}


@dataclass
class Checkpoint:
    kind: str
    net: DenoiserNet | ValueNet
    schedule: NoiseSchedule
    horizon: int
    state_dim: int
    action_dim: int
    normalizer: Normalizer | None = None
    env_name: str | None = None
    config_hash: str = ""
    step: int = 0
    history: list = field(default_factory=list)
    optimizer: dict | None = None
    rng_state: dict | None = None
    clip_denoised: float | None = None

    def model(self) -> DiffusionModel:
        if self.kind != "diffusion":
            raise CheckpointError(f"checkpoint holds a {self.kind} net, not a diffusion model")
        return DiffusionModel(self.net, self.schedule, self.horizon, self.state_dim, self.action_dim,
                              normalizer=self.normalizer, clip_denoised=self.clip_denoised)

    def train_state(self, lr: float) -> TrainState:
        """Optimizer, generator and counters exactly as they were when saved."""
        if self.optimizer is None or self.rng_state is None:
            raise CheckpointError("checkpoint has no training state to resume from")
        opt = Adam(self.net.parameters(), lr=lr)
        opt.load_state_dict(self.optimizer)
        rng = np.random.default_rng()
        rng.bit_generator.state = self.rng_state
        return TrainState(self.step, opt, rng, [tuple(h) for h in self.history])


def _arch(net) -> dict:
    return {
        "transition_dim": net.transition_dim,
        "channels": list(net.channels),
        "embed_dim": net.embed_dim,
        "kernel_size": net.kernel_size,
        "groups": net.groups,
    }


def to_bytes(ckpt: Checkpoint) -> bytes:
    tensors: dict[str, np.ndarray] = {f"net/{k}": v for k, v in ckpt.net.state_dict().items()}
    tensors["schedule/betas"] = ckpt.schedule.betas[1:]
    if ckpt.normalizer is not None:
        tensors["normalizer/mins"] = np.asarray(ckpt.normalizer.mins)
        tensors["normalizer/maxs"] = np.asarray(ckpt.normalizer.maxs)
    opt_t = None
    if ckpt.optimizer is not None:
        opt_t = int(ckpt.optimizer["t"])
        for k, (m, v) in enumerate(zip(ckpt.optimizer["m"], ckpt.optimizer["v"])):
            tensors[f"adam/m/{k:04d}"] = m
            tensors[f"adam/v/{k:04d}"] = v
    index, offset = {}, 0
    for name, arr in tensors.items():
        index[name] = {"offset": offset, "shape": list(np.shape(arr))}
        offset += int(np.size(arr))
    header = {
        "kind": ckpt.kind,
        "arch": _arch(ckpt.net),
        "schedule_offset": ckpt.schedule.offset,
        "horizon": ckpt.horizon,
        "state_dim": ckpt.state_dim,
        "action_dim": ckpt.action_dim,
        "env_name": ckpt.env_name,
        "config_hash": ckpt.config_hash,
        "step": ckpt.step,
        "history": [[int(s), float(l)] for s, l in ckpt.history],
        "optimizer_t": opt_t,
        "rng_state": ckpt.rng_state,
        "clip_denoised": ckpt.clip_denoised,
        "index": index,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    blobs = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in tensors.values())
    return MAGIC + struct.pack("<II", VERSION, len(head)) + head + blobs


def from_bytes(raw: bytes) -> Checkpoint:
    if raw[:4] != MAGIC:
        raise CheckpointError("not a TPCK checkpoint (bad magic)")
    try:
        version, head_len = struct.unpack_from("<II", raw, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}", version=version)
        header = json.loads(raw[12:12 + head_len].decode())
        body = np.frombuffer(raw, dtype="<f8", offset=12 + head_len)
        tensors = {}
        for name, entry in header["index"].items():
            n = int(np.prod(entry["shape"], dtype=np.int64))
            start = entry["offset"]
            if start + n > body.size:
                raise CheckpointError(f"checkpoint truncated inside tensor {name!r}")
            tensors[name] = body[start:start + n].reshape(entry["shape"]).astype(np.float64)
        used = sum(int(np.prod(e["shape"], dtype=np.int64)) for e in header["index"].values())
        if used != body.size:
            raise CheckpointError(f"checkpoint has {body.size - used} unindexed values after the tensors")
        kind = header["kind"]
        if kind not in KINDS:
            raise CheckpointError(f"unknown checkpoint kind {kind!r}")
        net = KINDS[kind](**header["arch"])
        net.load_state_dict({k[4:]: v for k, v in tensors.items() if k.startswith("net/")})
    except CheckpointError:
        raise
    except (struct.error, ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    normalizer = None
    if "normalizer/mins" in tensors:
        normalizer = Normalizer(tensors["normalizer/mins"], tensors["normalizer/maxs"])
    optimizer = None
    if header["optimizer_t"] is not None:
        ms = sorted(k for k in tensors if k.startswith("adam/m/"))
        optimizer = {
            "t": header["optimizer_t"],
            "m": [tensors[k] for k in ms],
            "v": [tensors["adam/v/" + k[7:]] for k in ms],
        }
    return Checkpoint(
        kind=kind,
        net=net,
        schedule=NoiseSchedule.from_betas(tensors["schedule/betas"], offset=header["schedule_offset"]),
        horizon=header["horizon"],
        state_dim=header["state_dim"],
        action_dim=header["action_dim"],
        normalizer=normalizer,
        env_name=header["env_name"],
        config_hash=header["config_hash"],
        step=header["step"],
        history=header["history"],
        optimizer=optimizer,
        rng_state=header["rng_state"],
        clip_denoised=header.get("clip_denoised"),
    )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(to_bytes(ckpt))
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}", path=str(path)) from exc


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}", path=str(path)) from exc
    return from_bytes(raw)


def from_training(kind: str, net, schedule: NoiseSchedule, horizon: int, state_dim: int, action_dim: int,
                  state: TrainState | None = None, **meta) -> Checkpoint:
    """Bundle a net and (optionally) the live training state into a checkpoint."""
    ckpt = Checkpoint(kind, net, schedule, horizon, state_dim, action_dim, **meta)
    if state is not None:
        ckpt.step = state.step
        ckpt.history = list(state.history)
        ckpt.optimizer = state.optimizer.state_dict()
        ckpt.rng_state = state.rng.bit_generator.state
    return ckpt
