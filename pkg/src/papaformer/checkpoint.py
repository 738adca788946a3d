"""Bit-exact checkpoint serialization.

Layout: magic "PPCK", u32 version, u64 manifest byte length, UTF-8 JSON
manifest, then the payload of raw little-endian float32 tensors in manifest
order. The manifest carries per-tensor (name, shape, offset, provenance),
the model config, the optional training config, the rng stream state, and
free-form extras (step counters, epoch). save -> load -> save reproduces
identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from papaformer.model import ModelConfig, PaPaformerModel, build
from papaformer.tensor import RngState

CHECKPOINT_MAGIC = b"PPCK"
CHECKPOINT_VERSION = 1
_HEADER = "<4sIQ"


class CheckpointError(ValueError):
    """Checkpoint file or contents are malformed."""


@dataclass
class Checkpoint:
    """In-memory view of a checkpoint file."""

    model: PaPaformerModel
    provenance: dict  # tensor name -> reused/concatenated/fresh/trained
    train_config: dict | None = None
    rng: RngState | None = None
    opt_tensors: dict = field(default_factory=dict)  # name -> np.ndarray
    extra: dict = field(default_factory=dict)


def save_checkpoint(
    path: str,
    model: PaPaformerModel,
    provenance: dict | None = None,
    train_config: dict | None = None,
    rng: RngState | None = None,
    opt_tensors: dict | None = None,
    extra: dict | None = None,
) -> None:
    params = model.named_params()
    provenance = provenance or {}
    opt_tensors = opt_tensors or {}
    entries = []
    offset = 0
    payload = []
    for name, t in params.items():
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": "f4",
                "offset": offset,
                "provenance": provenance.get(name, "fresh"),
            }
        )
        payload.append(arr.tobytes())
        offset += arr.nbytes
    for name, arr in opt_tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        entries.append(
            {
                "name": f"opt.{name}",
                "shape": list(arr.shape),
                "dtype": "f4",
                "offset": offset,
                "provenance": "optimizer",
            }
        )
        payload.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "train_config": train_config,
        "rng": None if rng is None else {"seed": rng.seed, "position": rng.position},
        "extra": extra or {},
        "tensors": entries,
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack(_HEADER, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for b in payload:
            f.write(b)


def read_manifest(path: str) -> dict:
    with open(path, "rb") as f:
        head = f.read(struct.calcsize(_HEADER))
        magic, version, mlen = struct.unpack(_HEADER, head)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        return json.loads(f.read(mlen).decode("utf-8"))


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    magic, version, mlen = struct.unpack_from(_HEADER, raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    base = struct.calcsize(_HEADER)
    manifest = json.loads(raw[base : base + mlen].decode("utf-8"))
    payload_base = base + mlen
    config = ModelConfig.from_dict(manifest["model_config"])
    model = build(config, RngState(0))
    params = model.named_params()
    provenance = {}
    opt_tensors = {}
    seen = set()
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=payload_base + e["offset"]).reshape(
            e["shape"]
        )
        name = e["name"]
        if name.startswith("opt."):
            opt_tensors[name[4:]] = arr.copy()
            continue
        if name not in params:
            raise CheckpointError(f"{path}: tensor {name!r} not present in model built from config")
        if tuple(e["shape"]) != params[name].shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} shape {e['shape']} != model shape {params[name].shape}"
            )
        params[name].data = arr.astype(params[name].data.dtype).copy()
        provenance[name] = e["provenance"]
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)[:5]}")
    rng = None
    if manifest.get("rng"):
        rng = RngState(manifest["rng"]["seed"], manifest["rng"]["position"])
    return Checkpoint(
        model=model,
        provenance=provenance,
        train_config=manifest.get("train_config"),
        rng=rng,
        opt_tensors=opt_tensors,
        extra=manifest.get("extra", {}),
    )
