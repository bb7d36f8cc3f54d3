"""Transient cubes and their binary file format.

File layout (little-endian)::

    magic      4s   b"NLOS"
    version    u16
    n_pixels   u32
    n_bins     u32
    bin_width  f64  seconds
    t0         f64  seconds
    frame_time f64  seconds
    kind       u8   0 = f64 rates, 1 = u32 counts
    payload         pixel-major, n_pixels * n_bins values
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CubeFormatError, UnsupportedVersion

MAGIC = b"NLOS"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHIIdddB")
_KINDS = {0: ("rates", np.dtype("<f8")), 1: ("counts", np.dtype("<u4"))}


@dataclass
class TransientCube:
    """``values[n, k]``: expected or observed counts at pixel n, bin k.

    Rate cubes hold expected counts over ``frame_time`` seconds of
    integration; count cubes hold integer Poisson draws.
    """

    values: np.ndarray
    bin_width: float
    t0: float = 0.0
    frame_time: float = 1.0
    kind: str = "rates"

    def __post_init__(self):
        if self.kind not in ("rates", "counts"):
            raise ValueError(f"unknown cube kind {self.kind!r}")
        dtype = np.uint32 if self.kind == "counts" else np.float64
        self.values = np.asarray(self.values, dtype=dtype)
        if self.values.ndim != 2:
            raise ValueError("cube values must be 2-D (pixels x bins)")
        if self.kind == "rates" and np.any(self.values < 0):
            raise ValueError("rates must be nonnegative")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def with_values(self, values, kind: str | None = None) -> "TransientCube":
        return TransientCube(values, self.bin_width, self.t0, self.frame_time, kind or self.kind)

    def scaled_to(self, frame_time: float) -> "TransientCube":
        """Rate cube rescaled to a different integration time."""
        if self.kind != "rates":
            raise ValueError("only rate cubes can be rescaled")
        return TransientCube(self.values * (frame_time / self.frame_time), self.bin_width, self.t0, frame_time)


def save_cube(cube: TransientCube, path) -> None:
    kind_code = 1 if cube.kind == "counts" else 0
    n, k = cube.shape
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, n, k, cube.bin_width, cube.t0, cube.frame_time, kind_code)
    payload = np.ascontiguousarray(cube.values, dtype=_KINDS[kind_code][1]).tobytes()
    Path(path).write_bytes(header + payload)


def load_cube(path) -> TransientCube:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CubeFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, n, k, dt, t0, frame_time, kind_code = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CubeFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"{path}: format version {version}, reader supports {FORMAT_VERSION}")
    if kind_code not in _KINDS:
        raise CubeFormatError(f"{path}: unknown payload kind {kind_code}")
    kind, dtype = _KINDS[kind_code]
    expected = n * k * dtype.itemsize
    body = raw[_HEADER.size:]
    if len(body) != expected:
        raise CubeFormatError(f"{path}: payload is {len(body)} bytes, expected {expected}")
    values = np.frombuffer(body, dtype=dtype).reshape(n, k).copy()
    return TransientCube(values, dt, t0, frame_time, kind)
