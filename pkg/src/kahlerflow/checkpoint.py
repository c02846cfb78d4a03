"""Binary checkpoints of the potential ``u`` at time ``t``.

Layout (little endian)::

    b"MAFLOW01"                 8 bytes
    version                     u16
    n                           u8
    grid counts                 2n x u32
    periods                     2n x f64
    t                           f64
    samples of u                prod(grid) x f64, row-major

Samples are written with their exact bit patterns, so a read after a write
reproduces ``t`` and ``u`` bit for bit.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .torus import ScalarField, TorusDomain

MAGIC = b"MAFLOW01"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(eq=False)
class Checkpoint:
    t: float
    u: ScalarField

    @property
    def domain(self) -> TorusDomain:
        return self.u.domain


def _header(n: int) -> struct.Struct:
    return struct.Struct(f"<8sHB{2 * n}I{2 * n}dd")


def encode(t: float, u: ScalarField) -> bytes:
    dom = u.domain
    vals = u.real().values if not u.is_real else u.values
    head = _header(dom.n).pack(MAGIC, VERSION, dom.n, *dom.grid, *dom.periods, float(t))
    body = np.ascontiguousarray(vals, dtype="<f8").tobytes(order="C")
    return head + body


def write_checkpoint(state, path) -> Path:
    """Write ``state.t`` and ``state.u`` (any object carrying both) atomically."""
    path = Path(path)
    data = encode(state.t, state.u)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return path


def decode(data: bytes, expect: TorusDomain | None = None) -> Checkpoint:
    if len(data) < 11:
        raise CheckpointError(f"truncated checkpoint: expected at least 11 header bytes, got {len(data)}")
    magic = data[:8]
    if magic != MAGIC:
        raise CheckpointError(f"bad magic: expected {MAGIC!r}, got {magic!r}")
    version, n = struct.unpack_from("<HB", data, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if n not in (1, 2):
        raise CheckpointError(f"bad complex dimension {n} in checkpoint header")
    head = _header(n)
    if len(data) < head.size:
        raise CheckpointError(
            f"truncated checkpoint: expected at least {head.size} header bytes, got {len(data)}")
    fields = head.unpack_from(data)
    grid = fields[3:3 + 2 * n]
    periods = fields[3 + 2 * n:3 + 4 * n]
    t = fields[-1]
    count = int(np.prod(grid))
    expected = head.size + 8 * count
    if len(data) != expected:
        kind = "truncated" if len(data) < expected else "oversized"
        raise CheckpointError(f"{kind} checkpoint: expected {expected} bytes, got {len(data)}")
    dom = TorusDomain(n, tuple(grid), tuple(periods))
    if expect is not None and (expect.n, expect.grid, expect.periods) != (dom.n, dom.grid, dom.periods):
        raise CheckpointError(
            f"dimension mismatch: checkpoint has n={dom.n}, grid={dom.grid}, periods={dom.periods}; "
            f"config has n={expect.n}, grid={expect.grid}, periods={expect.periods}")
    u = np.frombuffer(data, dtype="<f8", count=count, offset=head.size).astype(float).reshape(grid)
    return Checkpoint(t, ScalarField(dom, u))


def read_checkpoint(path, expect: TorusDomain | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode(fh.read(), expect)
