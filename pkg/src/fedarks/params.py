"""Flat parameter vectors: the unit of upload, aggregation and norm computation.

A :class:`ParamVector` is a float64 array plus an ordered layout of
``(tensor_name, shape)`` pairs.  Everything the server touches (norms,
deltas, weighted sums) works on these flat vectors.

Checkpoint format (little-endian)::

    b"PVEC"                       4-byte magic
    uint32  version (=1)
    uint32  header_len
    header_len bytes              UTF-8 JSON {"layout": [[name, [dims...]], ...],
                                              "dtype": "<f8", "count": N}
    N * float64                   values
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import kernels

Layout = tuple[tuple[str, tuple[int, ...]], ...]

MAGIC = b"PVEC"
FORMAT_VERSION = 1


class LayoutError(ValueError):
    """Operands have incompatible layouts or lengths."""


class InvalidInputError(ValueError):
    """Input contains NaN/Inf or is otherwise unusable."""


def _normalize_layout(layout: Iterable[tuple[str, Sequence[int]]]) -> Layout:
    return tuple((str(name), tuple(int(d) for d in shape)) for name, shape in layout)


def layout_size(layout: Layout) -> int:
    return sum(math.prod(shape) for _, shape in layout)


@dataclass(frozen=True, eq=False)
class ParamVector:
    values: np.ndarray
    layout: Layout = field(default=())

    def __post_init__(self):
        layout = _normalize_layout(self.layout) if self.layout else (("values", (len(self.values),)),)
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        if values.size != layout_size(layout):
            raise LayoutError(f"{values.size} values do not fit layout of size {layout_size(layout)}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "layout", layout)

    def __len__(self) -> int:
        return self.values.size

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "ParamVector":
        layout = tuple((name, np.shape(a)) for name, a in arrays.items())
        if not arrays:
            return cls(np.zeros(0), ())
        flat = np.concatenate([np.asarray(a, dtype=np.float64).reshape(-1) for a in arrays.values()])
        return cls(flat, layout)

    def arrays(self) -> dict[str, np.ndarray]:
        """Read-only views of the tensors described by the layout."""
        out = {}
        offset = 0
        for name, shape in self.layout:
            n = math.prod(shape)
            out[name] = self.values[offset : offset + n].reshape(shape)
            offset += n
        return out

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layout == other.layout

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))

    # checkpointing

    def to_bytes(self) -> bytes:
        header = json.dumps(
            {"layout": [[n, list(s)] for n, s in self.layout], "dtype": "<f8", "count": len(self)},
            separators=(",", ":"),
        ).encode("utf-8")
        blob = self.values.astype("<f8", copy=False).tobytes()
        return MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header + blob

    @classmethod
    def from_bytes(cls, data: bytes) -> "ParamVector":
        if data[:4] != MAGIC:
            raise LayoutError("not a parameter-vector blob (bad magic)")
        version, header_len = struct.unpack_from("<II", data, 4)
        if version != FORMAT_VERSION:
            raise LayoutError(f"unsupported blob version {version}")
        start = 12 + header_len
        header = json.loads(data[12:start].decode("utf-8"))
        if header.get("dtype") != "<f8":
            raise LayoutError(f"unsupported dtype {header.get('dtype')!r}")
        count = int(header["count"])
        if len(data) - start != 8 * count:
            raise LayoutError("blob length does not match header count")
        values = np.frombuffer(data, dtype="<f8", count=count, offset=start)
        return cls(values.astype(np.float64), _normalize_layout(header["layout"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "ParamVector":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass(frozen=True, eq=False)
class ParamDelta(ParamVector):
    """Elementwise difference of two equal-layout vectors."""


def _check_same_layout(vectors: Sequence[ParamVector]) -> None:
    first = vectors[0].layout
    for v in vectors[1:]:
        if v.layout != first:
            raise LayoutError("parameter vectors have different layouts")


def l2_norm(v: ParamVector) -> float:
    if not v.is_finite():
        raise InvalidInputError("l2_norm of a non-finite vector")
    if v.values.size == 0:
        return 0.0
    # scale by the largest magnitude so tiny entries do not underflow to zero
    scale = float(np.max(np.abs(v.values)))
    if scale == 0.0:
        return 0.0
    x = v.values / scale
    return scale * math.sqrt(float(np.dot(x, x)))


def subtract(a: ParamVector, b: ParamVector) -> ParamDelta:
    _check_same_layout([a, b])
    return ParamDelta(a.values - b.values, a.layout)


def weighted_sum(vectors: Sequence[ParamVector], weights: Sequence[float]) -> ParamVector:
    """Sum of ``weights[k] * vectors[k]``, accumulated in list order.

    The accumulation order is fixed (index 0 first, sequential adds) so that
    results are bit-reproducible for a given input ordering.
    """
    if len(vectors) == 0:
        raise LayoutError("weighted_sum of an empty list")
    if len(weights) != len(vectors):
        raise LayoutError(f"{len(weights)} weights for {len(vectors)} vectors")
    w = np.asarray(weights, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise InvalidInputError("non-finite aggregation weight")
    _check_same_layout(vectors)
    stacked = np.stack([v.values for v in vectors])
    return ParamVector(kernels.weighted_sum(stacked, w), vectors[0].layout)
