"""Named-array checkpoint container.

Layout::

    poseattn-checkpoint
    version 1
    checksum <sha256 of payload>
    arrays <n>
    <name> <d0,d1,...> <offset>      (one line per array, offsets in bytes)
    end
    <payload: little-endian float32, row-major, concatenated>
"""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = "poseattn-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, arrays: Mapping[str, np.ndarray]) -> None:
    entries = []
    chunks = []
    offset = 0
    for name, value in arrays.items():
        if any(ch.isspace() for ch in name) or not name:
            raise CheckpointError(f"invalid array name {name!r}")
        data = np.asarray(value, dtype="<f4")  # tobytes() is row-major regardless of layout
        raw = data.tobytes()
        shape = ",".join(str(d) for d in data.shape) or "-"
        entries.append(f"{name} {shape} {offset}")
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = [
        MAGIC,
        f"version {VERSION}",
        f"checksum {hashlib.sha256(payload).hexdigest()}",
        f"arrays {len(entries)}",
        *entries,
        "end",
    ]
    Path(path).write_bytes(("\n".join(header) + "\n").encode("ascii") + payload)


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    blob = path.read_bytes()
    lines = []
    pos = 0
    while True:
        nl = blob.find(b"\n", pos)
        if nl < 0:
            raise CheckpointError(f"{path}: header is not terminated by 'end'")
        line = blob[pos:nl].decode("ascii")
        pos = nl + 1
        lines.append(line)
        if line == "end":
            break
    if lines[0] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version = int(lines[1].split()[1])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    checksum = lines[2].split()[1]
    count = int(lines[3].split()[1])
    payload = blob[pos:]
    if hashlib.sha256(payload).hexdigest() != checksum:
        raise CheckpointError(f"{path}: checksum mismatch")
    out: dict[str, np.ndarray] = {}
    for line in lines[4 : 4 + count]:
        name, shape_text, offset_text = line.split()
        shape = () if shape_text == "-" else tuple(int(d) for d in shape_text.split(","))
        offset = int(offset_text)
        n = int(np.prod(shape)) if shape else 1
        out[name] = np.frombuffer(payload, dtype="<f4", count=n, offset=offset).reshape(shape).copy()
    if len(out) != count:
        raise CheckpointError(f"{path}: expected {count} arrays, found {len(out)}")
    return out
