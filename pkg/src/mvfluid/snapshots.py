"""Binary field snapshots and trajectory checkpoint directories.

A snapshot record is: the 8-byte magic ``MVF1SNAP``, an 8-byte
little-endian length, that many bytes of UTF-8 JSON with keys
{nx, ny, lx, ly, components, bc, time}, then
``components * (nx+1) * (ny+1)`` little-endian IEEE-754 doubles laid out
component-major, row-major within each component with y as the outer
index.  Records are self-delimiting, so several fields may be
concatenated into one file.
"""

from __future__ import annotations

import json
import os
import struct
from typing import BinaryIO

import numpy as np

from .grid import Field, Grid, StructuralError

MAGIC = b"MVF1SNAP"


def write_record(fh: BinaryIO, f: Field, time: float = 0.0) -> None:
    header = {
        "nx": f.grid.nx,
        "ny": f.grid.ny,
        "lx": f.grid.lx,
        "ly": f.grid.ly,
        "components": f.ncomp,
        "bc": f.bc,
        "time": time,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    fh.write(MAGIC)
    fh.write(struct.pack("<Q", len(blob)))
    fh.write(blob)
    fh.write(np.ascontiguousarray(f.values, dtype="<f8").tobytes())


def read_record(fh: BinaryIO) -> tuple[Field, float] | None:
    """Read one snapshot record; returns None at end of file."""
    magic = fh.read(8)
    if not magic:
        return None
    if magic != MAGIC:
        raise StructuralError(f"bad snapshot magic {magic!r}")
    (hlen,) = struct.unpack("<Q", fh.read(8))
    header = json.loads(fh.read(hlen).decode("utf-8"))
    grid = Grid(header["nx"], header["ny"], header["lx"], header["ly"])
    n = header["components"] * (grid.ny + 1) * (grid.nx + 1)
    raw = fh.read(8 * n)
    if len(raw) != 8 * n:
        raise StructuralError("truncated snapshot payload")
    vals = np.frombuffer(raw, dtype="<f8").reshape(header["components"], grid.ny + 1, grid.nx + 1)
    return Field(grid, vals.copy(), header["bc"]), float(header["time"])


def save_field(path: str | os.PathLike, f: Field, time: float = 0.0) -> None:
    with open(path, "wb") as fh:
        write_record(fh, f, time)


def load_field(path: str | os.PathLike) -> tuple[Field, float]:
    with open(path, "rb") as fh:
        rec = read_record(fh)
    if rec is None:
        raise StructuralError(f"empty snapshot file {path}")
    return rec


def save_fields(path: str | os.PathLike, fields: list[Field], time: float = 0.0) -> None:
    """Concatenate several field records into one file."""
    with open(path, "wb") as fh:
        for f in fields:
            write_record(fh, f, time)


def load_fields(path: str | os.PathLike) -> tuple[list[Field], float]:
    out = []
    time = 0.0
    with open(path, "rb") as fh:
        while True:
            rec = read_record(fh)
            if rec is None:
                break
            out.append(rec[0])
            time = rec[1]
    if not out:
        raise StructuralError(f"empty snapshot file {path}")
    return out, time
