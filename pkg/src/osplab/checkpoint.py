"""Checkpoint files: a JSON manifest followed by raw little-endian tensors.

Layout::

    OSPLAB-CKPT <version>\\n
    <manifest byte length>\\n
    <manifest JSON>
    <payload>

Every tensor carries a CRC-32 of its bytes.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .model import ModelConfig, Params
from .numerics import RngState
from .optim import AdamState, Hyper, MuonState, OptimizerState

MAGIC = "OSPLAB-CKPT"
FORMAT_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(IOError):
    pass


@dataclass
class TrainState:
    config: TrainConfig
    step: int
    params: Params
    opt: OptimizerState
    rng: RngState
    # effective model config (differs from config.model after absorb/fold)
    model: ModelConfig = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.model is None:
            self.model = self.config.model


def _tensor_table(state: TrainState):
    for name, w in state.params.items():
        yield name, "param", w
    for name, ts in state.opt.tensors.items():
        if isinstance(ts, AdamState):
            yield name, "adam_m", ts.m
            yield name, "adam_v", ts.v
        else:
            yield name, "muon_buf", ts.buf


def save_checkpoint(state: TrainState, path) -> None:
    dtype = state.config.dtype
    le = _DTYPES[dtype]
    entries, chunks, offset = [], [], 0
    for name, kind, arr in _tensor_table(state):
        raw = np.ascontiguousarray(arr, dtype=le).tobytes()
        shape = list(arr.shape)
        entries.append({
            "name": name, "kind": kind, "shape": shape,
            "rows": shape[0] if len(shape) == 2 else 1,
            "cols": shape[-1] if shape else 1,
            "offset": offset, "nbytes": len(raw), "crc32": zlib.crc32(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "dtype": dtype,
        "step": state.step,
        "config": state.config.to_dict(),
        "model": {**state.model.__dict__},
        "rng": {"seed": state.rng.seed, "position": state.rng.position, "stream": state.rng.stream},
        "optimizer": {
            "mode": state.opt.mode,
            "hyper": {**state.opt.hyper.__dict__},
            "adam_t": {n: ts.t for n, ts in state.opt.tensors.items() if isinstance(ts, AdamState)},
        },
        "tensors": entries,
        "payload_bytes": offset,
    }
    text = json.dumps(manifest, indent=1, sort_keys=True).encode()
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "wb") as fh:
        fh.write(f"{MAGIC} {FORMAT_VERSION}\n{len(text)}\n".encode())
        fh.write(text)
        for c in chunks:
            fh.write(c)


def read_manifest(path) -> tuple[dict, bytes]:
    p = Path(path)
    if not p.is_file():
        raise CheckpointError(f"checkpoint not found: {p}")
    blob = p.read_bytes()
    try:
        head, size_line, rest = blob.split(b"\n", 2)
        magic, version = head.decode().split(" ")
        size = int(size_line)
    except ValueError as exc:
        raise CheckpointError(f"{p}: not a checkpoint file") from exc
    if magic != MAGIC:
        raise CheckpointError(f"{p}: bad magic {magic!r}")
    if int(version) != FORMAT_VERSION:
        raise CheckpointError(f"{p}: format version {version} unsupported (expected {FORMAT_VERSION})")
    if len(rest) < size:
        raise CheckpointError(f"{p}: truncated manifest")
    try:
        manifest = json.loads(rest[:size])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{p}: corrupt manifest") from exc
    payload = rest[size:]
    if len(payload) < manifest["payload_bytes"]:
        raise CheckpointError(f"{p}: truncated payload ({len(payload)} of {manifest['payload_bytes']} bytes)")
    return manifest, payload


def load_checkpoint(path) -> TrainState:
    manifest, payload = read_manifest(path)
    np_dtype = np.dtype(manifest["dtype"])
    le = _DTYPES[manifest["dtype"]]
    params: Params = {}
    adam: dict[str, dict] = {}
    muon: dict[str, np.ndarray] = {}
    for e in manifest["tensors"]:
        raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {e['name']}")
        if zlib.crc32(raw) != e["crc32"]:
            raise CheckpointError(f"{path}: checksum failure in {e['kind']} {e['name']}")
        arr = np.frombuffer(raw, dtype=le).astype(np_dtype).reshape(e["shape"])
        if e["kind"] == "param":
            params[e["name"]] = arr
        elif e["kind"] == "muon_buf":
            muon[e["name"]] = arr
        else:
            adam.setdefault(e["name"], {})[e["kind"]] = arr
    opt_meta = manifest["optimizer"]
    opt = OptimizerState(opt_meta["mode"], Hyper(**opt_meta["hyper"]))
    for name in params:
        if name in muon:
            opt.tensors[name] = MuonState(muon[name])
        elif name in adam:
            opt.tensors[name] = AdamState(adam[name]["adam_m"], adam[name]["adam_v"], opt_meta["adam_t"][name])
    r = manifest["rng"]
    return TrainState(
        config=TrainConfig.from_dict(manifest["config"]),
        step=manifest["step"],
        params=params,
        opt=opt,
        rng=RngState(r["seed"], r["position"], r["stream"]),
        model=ModelConfig(**manifest["model"]),
    )
