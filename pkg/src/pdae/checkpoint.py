"""Self-contained binary checkpoint container.

Layout: magic "PDAE1" | u32 version | u64 header length | header JSON |
blob payload | 32-byte SHA-256 of everything before it. Parameter blobs
are little-endian float32 with a names table in the header, so the file is
portable and save -> load -> save is byte-identical. Writes are atomic
(temp file, then rename).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"PDAE1"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    """Everything needed to rebuild a model: schedule echo, network specs,
    named float32 parameter blobs (raw and EMA), training counters, and the
    resolved config the run used."""

    kind: str
    schedule: dict
    specs: dict = field(default_factory=dict)
    blobs: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def save(self, path: str | Path) -> None:
        names = sorted(self.blobs)
        arrays = []
        table = []
        offset = 0
        for name in names:
            arr = np.ascontiguousarray(self.blobs[name], dtype="<f4")
            table.append({"name": name, "shape": list(arr.shape), "offset": offset})
            arrays.append(arr)
            offset += arr.nbytes
        header = json.dumps(
            {
                "kind": self.kind,
                "schedule": self.schedule,
                "specs": self.specs,
                "counters": self.counters,
                "config": self.config,
                "blob_table": table,
            },
            sort_keys=True,
            separators=(",", ":"),
        ).encode()
        digest = hashlib.sha256()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as f:
                for chunk in (
                    MAGIC,
                    struct.pack("<I", VERSION),
                    struct.pack("<Q", len(header)),
                    header,
                    *[a.tobytes() for a in arrays],
                ):
                    digest.update(chunk)
                    f.write(chunk)
                f.write(digest.digest())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        raw = Path(path).read_bytes()
        if len(raw) < len(MAGIC) + 12 + 32 or raw[: len(MAGIC)] != MAGIC:
            raise CheckpointError(f"{path}: not a PDAE1 checkpoint")
        stored = raw[-32:]
        if hashlib.sha256(raw[:-32]).digest() != stored:
            raise CheckpointError(f"{path}: content checksum mismatch")
        pos = len(MAGIC)
        (version,) = struct.unpack_from("<I", raw, pos)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        pos += 4
        (hlen,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        header = json.loads(raw[pos : pos + hlen])
        pos += hlen
        blobs = {}
        for entry in header["blob_table"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            start = pos + entry["offset"]
            arr = np.frombuffer(raw, dtype="<f4", count=count, offset=start)
            blobs[entry["name"]] = arr.reshape(shape).copy()
        return cls(
            kind=header["kind"],
            schedule=header["schedule"],
            specs=header["specs"],
            blobs=blobs,
            counters=header["counters"],
            config=header["config"],
        )


def blobs_from_module(module: torch.nn.Module, prefix: str) -> dict:
    """state_dict -> named float32 blobs under a prefix."""
    return {
        f"{prefix}/{k}": v.detach().cpu().numpy().astype("<f4")
        for k, v in module.state_dict().items()
    }


def load_module_from_blobs(module: torch.nn.Module, blobs: dict, prefix: str) -> None:
    state = {}
    want = prefix + "/"
    for key, arr in blobs.items():
        if key.startswith(want):
            state[key[len(want):]] = torch.as_tensor(np.asarray(arr))
    if not state:
        raise CheckpointError(f"no parameters under prefix {prefix!r}")
    module.load_state_dict(state)


def schedule_echo(sched) -> dict:
    return {"kind": sched.kind, "T": sched.T, "params": list(sched.params)}


def schedule_from_echo(echo: dict):
    from .schedule import rebuild_schedule

    return rebuild_schedule(echo["kind"], echo["T"], tuple(echo["params"]))
