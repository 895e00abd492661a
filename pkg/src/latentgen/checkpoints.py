"""Versioned binary checkpoint container.

Layout: 8-byte magic (includes the format version), a little-endian u64
header length, a canonical-JSON header, then the raw array payload.  The
header carries the config echo, the training-step counter, and a directory
of named arrays (dtype, shape, offset).  Canonical JSON plus fixed array
ordering make save -> load -> save byte-identical, which the test suite
checks; the RNG state travels as a reserved uint8 array.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ContractError

CHECKPOINT_MAGIC = b"LGCP\x00\x00\x00\x01"
FORMAT_VERSION = 1
RNG_STATE_KEY = "_rng_state"


@dataclass
class Checkpoint:
    """Named weight arrays plus the config and counters needed to resume."""

    config: dict
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    format_version: int = FORMAT_VERSION

    def set_rng_state(self, generator: torch.Generator) -> None:
        self.arrays[RNG_STATE_KEY] = generator.get_state().numpy().copy()

    def namespace(self, prefix: str) -> dict[str, np.ndarray]:
        """All arrays under ``prefix/``, with the prefix stripped."""
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.arrays.items() if k.startswith(prefix + "/")}


def state_dict_arrays(prefix: str, module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {
        f"{prefix}/{name}": tensor.detach().cpu().numpy().copy()
        for name, tensor in module.state_dict().items()
    }


def load_state_dict(module: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    module.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    entries = []
    offset = 0
    blobs = []
    for name, arr in ckpt.arrays.items():
        data = np.ascontiguousarray(arr)
        le = data.astype(data.dtype.newbyteorder("<"), copy=False)
        blob = le.tobytes()
        entries.append({
            "name": name,
            "dtype": np.dtype(arr.dtype).newbyteorder("<").str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(blob),
        })
        blobs.append(blob)
        offset += len(blob)
    header = _canonical_json({
        "format_version": ckpt.format_version,
        "step": ckpt.step,
        "config": ckpt.config,
        "arrays": entries,
    })
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ContractError(
                f"{path}: bad magic/version {magic!r}, expected {CHECKPOINT_MAGIC!r}"
            )
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len))
        if header["format_version"] != FORMAT_VERSION:
            raise ContractError(
                f"{path}: unsupported format version {header['format_version']}"
            )
        payload = fh.read()
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        raw = payload[entry["offset"]: entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(np.dtype(entry["dtype"]).newbyteorder("="))
    return Checkpoint(
        config=header["config"],
        arrays=arrays,
        step=header["step"],
        format_version=header["format_version"],
    )
