"""Transition tuples, per-task offline datasets, and contexts.

Dataset file format (magic "CORO1"): a header with the family name, task
parameters, dims, and the record count K, followed by K little-endian
records (s, a, r, s_next, done byte). Round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from corrolab import envs
from corrolab.errors import DimensionMismatch

MAGIC = b"CORO1"


@dataclass(frozen=True)
class TransitionTuple:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool = False

    def __post_init__(self):
        object.__setattr__(self, "s", np.asarray(self.s, dtype=np.float64))
        object.__setattr__(self, "a", np.asarray(self.a, dtype=np.float64))
        object.__setattr__(self, "s_next", np.asarray(self.s_next, dtype=np.float64))
        object.__setattr__(self, "r", float(self.r))
        if not (
            np.all(np.isfinite(self.s))
            and np.all(np.isfinite(self.a))
            and np.isfinite(self.r)
            and np.all(np.isfinite(self.s_next))
        ):
            raise ValueError("transition tuple contains non-finite entries")


class Context:
    """An ordered slice of transition tuples from one task."""

    def __init__(self, s, a, r, s_next):
        self.s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        self.a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        self.r = np.asarray(r, dtype=np.float64).ravel()
        self.s_next = np.atleast_2d(np.asarray(s_next, dtype=np.float64))
        k = self.s.shape[0]
        if k < 1:
            raise ValueError("context must contain at least one tuple")
        if not (self.a.shape[0] == k and self.r.shape[0] == k and self.s_next.shape[0] == k):
            raise DimensionMismatch("context row counts", k, (self.a.shape[0], self.r.shape[0], self.s_next.shape[0]))

    def __len__(self):
        return self.s.shape[0]

    @classmethod
    def from_tuples(cls, tuples):
        return cls(
            np.stack([t.s for t in tuples]),
            np.stack([t.a for t in tuples]),
            np.array([t.r for t in tuples]),
            np.stack([t.s_next for t in tuples]),
        )

    def matrix(self):
        """Rows of (s, a, r, s_next), the transition-encoder input."""
        return np.concatenate([self.s, self.a, self.r[:, None], self.s_next], axis=1)

    def permuted(self, order):
        return Context(self.s[order], self.a[order], self.r[order], self.s_next[order])


class OfflineDataset:
    """All transitions collected in one task, in collection order."""

    def __init__(self, task, s, a, r, s_next, done):
        self.task = task
        self.s = np.ascontiguousarray(s, dtype=np.float64)
        self.a = np.ascontiguousarray(a, dtype=np.float64)
        self.r = np.ascontiguousarray(r, dtype=np.float64).ravel()
        self.s_next = np.ascontiguousarray(s_next, dtype=np.float64)
        self.done = np.ascontiguousarray(done, dtype=bool).ravel()
        k = self.s.shape[0]
        if k == 0:
            raise ValueError("dataset must contain at least one tuple")
        ds, da = envs.obs_dim(task.family), envs.action_dim(task.family)
        if self.s.shape[1] != ds or self.s_next.shape[1] != ds:
            raise DimensionMismatch("dataset obs dim", ds, self.s.shape[1])
        if self.a.shape[1] != da:
            raise DimensionMismatch("dataset action dim", da, self.a.shape[1])
        if not (self.a.shape[0] == k and self.r.shape[0] == k and self.s_next.shape[0] == k and self.done.shape[0] == k):
            raise DimensionMismatch("dataset row counts", k, self.a.shape[0])

    def __len__(self):
        return self.s.shape[0]

    @property
    def size(self):
        return self.s.shape[0]

    def tuple_at(self, i):
        return TransitionTuple(self.s[i], self.a[i], self.r[i], self.s_next[i], bool(self.done[i]))

    def slice_context(self, start, length):
        stop = start + length
        return Context(self.s[start:stop], self.a[start:stop], self.r[start:stop], self.s_next[start:stop])

    def tuple_matrix(self):
        return np.concatenate([self.s, self.a, self.r[:, None], self.s_next], axis=1)

    # -------------------------------------------------------- serialization

    def to_bytes(self):
        task = self.task
        fam = task.family.encode("utf-8")
        ds, da = self.s.shape[1], self.a.shape[1]
        header = [
            MAGIC,
            struct.pack("<I", len(fam)),
            fam,
            struct.pack("<I", len(task.params)),
            struct.pack(f"<{len(task.params)}d", *task.params),
            struct.pack("<II", ds, da),
            struct.pack("<Q", len(self)),
        ]
        rec = _record_dtype(ds, da)
        body = np.empty(len(self), dtype=rec)
        body["s"] = self.s
        body["a"] = self.a
        body["r"] = self.r
        body["sn"] = self.s_next
        body["d"] = self.done.astype(np.uint8)
        return b"".join(header) + body.tobytes()

    @classmethod
    def from_bytes(cls, blob):
        if blob[:5] != MAGIC:
            raise ValueError(f"bad dataset magic {blob[:5]!r}")
        off = 5
        (flen,) = struct.unpack_from("<I", blob, off)
        off += 4
        family = blob[off : off + flen].decode("utf-8")
        off += flen
        (pcount,) = struct.unpack_from("<I", blob, off)
        off += 4
        params = struct.unpack_from(f"<{pcount}d", blob, off)
        off += 8 * pcount
        ds, da = struct.unpack_from("<II", blob, off)
        off += 8
        (k,) = struct.unpack_from("<Q", blob, off)
        off += 8
        rec = _record_dtype(ds, da)
        body = np.frombuffer(blob, dtype=rec, count=k, offset=off)
        task = envs.TaskSpec(family, params)
        return cls(task, body["s"], body["a"], body["r"], body["sn"], body["d"].astype(bool))

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def _record_dtype(ds, da):
    return np.dtype(
        [("s", "<f8", (ds,)), ("a", "<f8", (da,)), ("r", "<f8"), ("sn", "<f8", (ds,)), ("d", "u1")]
    )
