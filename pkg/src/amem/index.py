"""Exact in-memory vector index with deterministic cosine ranking.

Brute force by design: every query scores every stored vector, so results
are exact and reproducible. Similarity math accumulates in float64 even
though vectors are stored as float32, and ties are broken by ascending id,
so a given store and query always produce the identical ranking.

A reader-writer lock allows concurrent queries while inserts and updates
stay exclusive.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import DimensionMismatch, DuplicateId, UnknownId

# Rows are promoted to float64 in blocks of this many during scoring, which
# bounds temporary memory at ~200 MB for 384-dimensional vectors.
_SCORE_CHUNK = 65536

_INITIAL_CAPACITY = 1024

# Rough per-entry bookkeeping bytes besides the raw vector: the id string
# object, its hash-table slot, the row list slot, and the cached norm.
_PER_ENTRY_OVERHEAD = 160


class ReadWriteLock:
    """Many concurrent readers or one writer."""

    def __init__(self) -> None:
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = False

    @contextmanager
    def read(self) -> Iterator[None]:
        with self._cond:
            while self._writer:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                if self._readers == 0:
                    self._cond.notify_all()

    @contextmanager
    def write(self) -> Iterator[None]:
        with self._cond:
            while self._writer or self._readers:
                self._cond.wait()
            self._writer = True
        try:
            yield
        finally:
            with self._cond:
                self._writer = False
                self._cond.notify_all()


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity with float64 accumulation, clamped to [-1, 1].

    If either vector has zero norm the similarity is defined as 0.0.
    """
    va = np.asarray(a, dtype=np.float64)
    vb = np.asarray(b, dtype=np.float64)
    if va.ndim != 1 or vb.ndim != 1:
        raise DimensionMismatch("cosine expects 1-D vectors")
    if va.size != vb.size:
        raise DimensionMismatch(f"vector sizes differ: {va.size} != {vb.size}")
    norm_a = float(np.sqrt(np.dot(va, va)))
    norm_b = float(np.sqrt(np.dot(vb, vb)))
    if norm_a == 0.0 or norm_b == 0.0:
        return 0.0
    value = float(np.dot(va, vb)) / (norm_a * norm_b)
    return max(-1.0, min(1.0, value))


class VectorIndex:
    """Flat store of (id, float32 vector) rows supporting exact top-k queries."""

    def __init__(self, dimension: int) -> None:
        if not isinstance(dimension, int) or dimension < 1:
            raise ValueError("dimension must be a positive integer")
        self._dim = dimension
        self._lock = ReadWriteLock()
        self._rows = np.empty((0, dimension), dtype=np.float32)
        self._norms = np.empty(0, dtype=np.float64)
        self._ids: list[str] = []
        self._slot: dict[str, int] = {}
        self._count = 0

    @property
    def dimension(self) -> int:
        return self._dim

    def __len__(self) -> int:
        return self._count

    def __contains__(self, note_id: str) -> bool:
        with self._lock.read():
            return note_id in self._slot

    def ids(self) -> list[str]:
        with self._lock.read():
            return list(self._ids)

    def _check_vector(self, vector: np.ndarray) -> np.ndarray:
        vec = np.asarray(vector, dtype=np.float32)
        if vec.ndim != 1:
            raise DimensionMismatch("expected a 1-D vector")
        if vec.size != self._dim:
            raise DimensionMismatch(f"vector has dimension {vec.size}, index wants {self._dim}")
        if not np.all(np.isfinite(vec)):
            raise ValueError("vector contains NaN or Inf")
        return vec

    def _ensure_capacity(self, extra: int) -> None:
        needed = self._count + extra
        capacity = self._rows.shape[0]
        if needed <= capacity:
            return
        new_capacity = max(_INITIAL_CAPACITY, capacity)
        while new_capacity < needed:
            new_capacity *= 2
        rows = np.empty((new_capacity, self._dim), dtype=np.float32)
        rows[: self._count] = self._rows[: self._count]
        norms = np.empty(new_capacity, dtype=np.float64)
        norms[: self._count] = self._norms[: self._count]
        self._rows = rows
        self._norms = norms

    @staticmethod
    def _row_norm(vec: np.ndarray) -> float:
        v64 = vec.astype(np.float64)
        return float(np.sqrt(np.dot(v64, v64)))

    def insert(self, note_id: str, vector: np.ndarray) -> None:
        vec = self._check_vector(vector)
        with self._lock.write():
            if note_id in self._slot:
                raise DuplicateId(f"id already present in index: {note_id}")
            self._ensure_capacity(1)
            row = self._count
            self._rows[row] = vec
            self._norms[row] = self._row_norm(vec)
            self._ids.append(note_id)
            self._slot[note_id] = row
            self._count += 1

    def update(self, note_id: str, vector: np.ndarray) -> None:
        vec = self._check_vector(vector)
        with self._lock.write():
            row = self._slot.get(note_id)
            if row is None:
                raise UnknownId(f"id not present in index: {note_id}")
            self._rows[row] = vec
            self._norms[row] = self._row_norm(vec)

    def bulk_load(self, ids: Sequence[str], vectors: np.ndarray) -> None:
        """Insert many rows at once. Equivalent to repeated insert, much faster.

        When the index is empty and the matrix is already float32 and
        C-contiguous, the index adopts it without copying; the caller must
        not mutate it afterwards.
        """
        matrix = np.asarray(vectors, dtype=np.float32)
        if matrix.ndim != 2 or matrix.shape[1] != self._dim:
            raise DimensionMismatch(
                f"expected shape (n, {self._dim}), got {matrix.shape}"
            )
        if len(ids) != matrix.shape[0]:
            raise ValueError(f"{len(ids)} ids for {matrix.shape[0]} vectors")
        if len(set(ids)) != len(ids):
            raise DuplicateId("duplicate id inside bulk batch")
        n = matrix.shape[0]
        if n == 0:
            return
        for start in range(0, n, _SCORE_CHUNK):
            if not np.all(np.isfinite(matrix[start : start + _SCORE_CHUNK])):
                raise ValueError("bulk batch contains NaN or Inf")
        with self._lock.write():
            for note_id in ids:
                if note_id in self._slot:
                    raise DuplicateId(f"id already present in index: {note_id}")
            base = self._count
            if base == 0 and matrix.flags["C_CONTIGUOUS"]:
                self._rows = matrix
                self._norms = np.empty(n, dtype=np.float64)
            else:
                self._ensure_capacity(n)
                self._rows[base : base + n] = matrix
            # per row, not vectorized: a batched reduction can differ from
            # insert() in the last ulp, and both build paths must score alike
            for offset in range(n):
                self._norms[base + offset] = self._row_norm(matrix[offset])
            for offset, note_id in enumerate(ids):
                self._slot[note_id] = base + offset
                self._ids.append(note_id)
            self._count += n

    def get(self, note_id: str) -> np.ndarray:
        with self._lock.read():
            row = self._slot.get(note_id)
            if row is None:
                raise UnknownId(f"id not present in index: {note_id}")
            vec = self._rows[row].copy()
        vec.setflags(write=False)
        return vec

    def top_k(
        self, query: np.ndarray, k: int, exclude: Iterable[str] = ()
    ) -> list[tuple[str, float]]:
        """The k most cosine-similar entries, descending score, ids ascending on ties.

        Excluded ids never appear. A zero-norm query scores every entry 0.0,
        which leaves pure id-order ranking. Returns fewer than k pairs only
        when the index holds fewer eligible entries.
        """
        if not isinstance(k, int) or k < 1:
            raise ValueError("k must be a positive integer")
        q = self._check_vector(query)
        with self._lock.read():
            n = self._count
            if n == 0:
                return []
            scores = self._score_all(q, n)
            for excluded in exclude:
                row = self._slot.get(excluded)
                if row is not None:
                    scores[row] = -np.inf
            take = min(k, n)
            if take < n:
                part = np.argpartition(-scores, take - 1)[:take]
                threshold = float(scores[part].min())
                if threshold == -np.inf:
                    candidates = np.flatnonzero(scores > -np.inf)
                else:
                    # Keep every row tied with the boundary score so the id
                    # tie-break decides which of them survive the cut.
                    candidates = np.flatnonzero(scores >= threshold)
            else:
                candidates = np.flatnonzero(scores > -np.inf)
            ranked = sorted(
                ((self._ids[row], float(scores[row])) for row in candidates),
                key=lambda pair: (-pair[1], pair[0]),
            )
        return ranked[:k]

    def _score_all(self, q: np.ndarray, n: int) -> np.ndarray:
        q64 = q.astype(np.float64)
        q_norm = float(np.sqrt(np.dot(q64, q64)))
        scores = np.zeros(n, dtype=np.float64)
        if q_norm == 0.0:
            return scores
        for start in range(0, n, _SCORE_CHUNK):
            stop = min(start + _SCORE_CHUNK, n)
            block = self._rows[start:stop].astype(np.float64)
            scores[start:stop] = block @ q64
        denom = self._norms[:n] * q_norm
        nonzero = denom > 0.0
        scores = np.divide(scores, denom, out=np.zeros_like(scores), where=nonzero)
        np.clip(scores, -1.0, 1.0, out=scores)
        return scores

    def memory_bytes(self) -> tuple[int, int]:
        """(exact vector payload bytes, estimated bookkeeping bytes)."""
        with self._lock.read():
            vector_bytes = self._count * self._dim * 4
            overhead_bytes = self._count * _PER_ENTRY_OVERHEAD
        return vector_bytes, overhead_bytes
