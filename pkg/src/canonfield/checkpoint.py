"""Checkpoint persistence: named parameters in a manifest + f32 payload.

Layout: a UTF-8 header section terminated by a blank line, then the raw
little-endian float32 payload.  Header lines after the version string are
``name shape_csv offset`` with offsets counted in floats from the start of
the payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

HEADER = "VRF-CKPT-1"


class CheckpointError(IOError):
    pass


def save_checkpoint(path, params: dict) -> None:
    """Write a name -> Tensor/ndarray mapping. Values are stored as f32."""
    names = list(params)
    arrays = [np.asarray(params[n].data if isinstance(params[n], Tensor) else params[n]) for n in names]
    lines = [HEADER]
    offset = 0
    for name, arr in zip(names, arrays):
        if " " in name:
            raise CheckpointError(f"parameter name may not contain spaces: {name!r}")
        shape_csv = ",".join(str(d) for d in arr.shape) or "scalar"
        lines.append(f"{name} {shape_csv} {offset}")
        offset += arr.size
    header = ("\n".join(lines) + "\n\n").encode("utf-8")
    payload = np.concatenate([a.reshape(-1).astype("<f4") for a in arrays]) if arrays else np.zeros(0, "<f4")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def load_checkpoint(path) -> dict:
    """Read back a name -> float32 ndarray mapping."""
    raw = Path(path).read_bytes()
    sep = raw.find(b"\n\n")
    if sep < 0:
        raise CheckpointError(f"{path}: missing header terminator")
    lines = raw[:sep].decode("utf-8").split("\n")
    if not lines or lines[0] != HEADER:
        raise CheckpointError(f"{path}: bad version header {lines[:1]!r}, expected {HEADER!r}")
    payload = np.frombuffer(raw[sep + 2 :], dtype="<f4")
    out = {}
    for line in lines[1:]:
        name, shape_csv, offset_s = line.split(" ")
        shape = () if shape_csv == "scalar" else tuple(int(d) for d in shape_csv.split(","))
        n = int(np.prod(shape)) if shape else 1
        offset = int(offset_s)
        if offset + n > payload.size:
            raise CheckpointError(f"{path}: payload truncated for parameter {name!r}")
        out[name] = payload[offset : offset + n].reshape(shape).copy()
    return out
