"""Flat parameter vectors with named shape layouts and bit-exact serialization."""

from __future__ import annotations

import math
import struct

import numpy as np

from corrolab.errors import DimensionMismatch


class ParamVector:
    """A flat float64 array partitioned by an ordered (name, shape) layout.

    The layout is fixed at construction. Instances are treated as
    immutable: updates go through with_values(), which shares the layout.
    """

    __slots__ = ("values", "layout", "_slices")

    def __init__(self, values, layout):
        values = np.ascontiguousarray(values, dtype=np.float64).ravel()
        layout = tuple((str(name), tuple(int(d) for d in shape)) for name, shape in layout)
        slices = {}
        offset = 0
        for name, shape in layout:
            if any(d <= 0 for d in shape):
                raise ValueError(f"layout entry {name!r} has nonpositive dim {shape}")
            if name in slices:
                raise ValueError(f"duplicate layout name {name!r}")
            size = math.prod(shape)
            slices[name] = (offset, offset + size, shape)
            offset += size
        if offset != values.size:
            raise DimensionMismatch("ParamVector length", offset, values.size)
        self.values = values
        self.layout = layout
        self._slices = slices

    @classmethod
    def _shared(cls, values, template):
        """Fast path: reuse a validated layout from an existing instance."""
        pv = cls.__new__(cls)
        pv.values = values
        pv.layout = template.layout
        pv._slices = template._slices
        return pv

    def __len__(self):
        return self.values.size

    @property
    def names(self):
        return tuple(name for name, _ in self.layout)

    def get(self, name):
        lo, hi, shape = self._slices[name]
        view = self.values[lo:hi].reshape(shape)
        view.flags.writeable = False
        return view

    def with_values(self, values):
        values = np.ascontiguousarray(values, dtype=np.float64).ravel()
        if values.size != self.values.size:
            raise DimensionMismatch("ParamVector length", self.values.size, values.size)
        return ParamVector._shared(values, self)

    def copy(self):
        return ParamVector._shared(self.values.copy(), self)

    def zeros_like(self):
        return ParamVector._shared(np.zeros_like(self.values), self)

    def same_layout(self, other):
        return self.layout == other.layout

    @classmethod
    def from_arrays(cls, named_arrays):
        """Build from an ordered list of (name, ndarray) pairs."""
        layout = [(name, np.asarray(a).shape) for name, a in named_arrays]
        flat = np.concatenate([np.asarray(a, dtype=np.float64).ravel() for _, a in named_arrays])
        return cls(flat, layout)

    # Wire format: header = entry count, then per entry the name length,
    # name bytes, rank, dims (all little-endian u32); then the raw float64
    # values, little-endian. Round-trips are bit-exact.
    def to_bytes(self):
        parts = [struct.pack("<I", len(self.layout))]
        for name, shape in self.layout:
            nb = name.encode("utf-8")
            parts.append(struct.pack("<I", len(nb)))
            parts.append(nb)
            parts.append(struct.pack("<I", len(shape)))
            parts.append(struct.pack(f"<{len(shape)}I", *shape) if shape else b"")
        parts.append(self.values.astype("<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob):
        off = 0

        def take(fmt):
            nonlocal off
            size = struct.calcsize(fmt)
            vals = struct.unpack_from(fmt, blob, off)
            off += size
            return vals

        (count,) = take("<I")
        layout = []
        for _ in range(count):
            (nlen,) = take("<I")
            name = blob[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = take("<I")
            dims = take(f"<{rank}I") if rank else ()
            layout.append((name, dims))
        total = sum(int(np.prod(s)) if s else 1 for _, s in layout)
        values = np.frombuffer(blob, dtype="<f8", count=total, offset=off).astype(np.float64)
        off += total * 8
        if off != len(blob):
            raise ValueError(f"trailing bytes in ParamVector blob ({len(blob) - off})")
        return cls(values, layout)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
