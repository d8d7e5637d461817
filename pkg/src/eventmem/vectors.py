"""Exact cosine search over unit-normalized embeddings."""
from __future__ import annotations

import struct
from typing import BinaryIO, Iterable

import numpy as np

from .errors import DimensionMismatch, EmptyNamespace, IndexIntegrityError, VersionMismatch, ZeroVector

NAMESPACES = ("edu", "arg")
# Ranking resolution: scores are rounded to this many decimals so that
# entries tied in exact arithmetic stay tied despite summation-order noise.
SCORE_DECIMALS = 9
MAGIC = b"EMVS"
FILE_VERSION = 1


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DimensionMismatch(f"shapes {u.shape} and {v.shape} differ")
    uu, vv = float(u @ u), float(v @ v)
    if uu == 0 or vv == 0:
        raise ZeroVector("cosine of a zero vector is undefined")
    # one sqrt of the product keeps cosine(v, v) exactly 1.0
    return float(np.clip((u @ v) / np.sqrt(uu * vv), -1.0, 1.0))


class _Namespace:
    __slots__ = ("ids", "pos", "rows", "_matrix")

    def __init__(self):
        self.ids: list[str] = []
        self.pos: dict[str, int] = {}
        self.rows: list[np.ndarray] = []
        self._matrix: np.ndarray | None = None

    def matrix(self, d: int) -> np.ndarray:
        if self._matrix is None:
            self._matrix = np.vstack(self.rows).astype(np.float64) if self.rows else np.empty((0, d))
        return self._matrix


class VectorStore:
    """Per-namespace store of unit vectors with exact top-k search.

    Vectors are normalized on insert and kept as float32, which is also the
    on-disk precision, so a save/load round trip is lossless. Scores are
    computed in float64.
    """

    def __init__(self, dim: int):
        if dim < 1:
            raise ValueError("dimension must be positive")
        self.dim = int(dim)
        self._ns = {name: _Namespace() for name in NAMESPACES}

    def _space(self, namespace: str) -> _Namespace:
        try:
            return self._ns[namespace]
        except KeyError:
            raise KeyError(f"unknown namespace {namespace!r}; expected one of {NAMESPACES}") from None

    def add(self, namespace: str, id: str, vector) -> None:
        v = np.asarray(vector, dtype=np.float64).ravel()
        if v.shape != (self.dim,):
            raise DimensionMismatch(f"expected dimension {self.dim}, got {v.shape[0]}")
        norm = np.linalg.norm(v)
        if not np.isfinite(norm) or norm == 0:
            raise ZeroVector(f"cannot store zero or non-finite vector for {id!r}")
        unit = (v / norm).astype(np.float32)
        unit.setflags(write=False)
        space = self._space(namespace)
        if id in space.pos:
            space.rows[space.pos[id]] = unit
        else:
            space.pos[id] = len(space.ids)
            space.ids.append(id)
            space.rows.append(unit)
        space._matrix = None

    def add_many(self, namespace: str, ids: Iterable[str], vectors) -> None:
        for id_, v in zip(ids, vectors):
            self.add(namespace, id_, v)

    def get(self, namespace: str, id: str) -> np.ndarray:
        space = self._space(namespace)
        return space.rows[space.pos[id]]

    def __contains__(self, key) -> bool:
        namespace, id_ = key
        return id_ in self._space(namespace).pos

    def ids(self, namespace: str) -> list[str]:
        return list(self._space(namespace).ids)

    def size(self, namespace: str) -> int:
        return len(self._space(namespace).ids)

    def scores(self, namespace: str, query_vector) -> np.ndarray:
        """Cosine of ``query_vector`` against every entry, in insertion order."""
        q = np.asarray(query_vector, dtype=np.float64).ravel()
        if q.shape != (self.dim,):
            raise DimensionMismatch(f"expected dimension {self.dim}, got {q.shape[0]}")
        n = np.linalg.norm(q)
        if n == 0:
            raise ZeroVector("query vector is zero")
        raw = self._space(namespace).matrix(self.dim) @ (q / n)
        return np.round(np.clip(raw, -1.0, 1.0), SCORE_DECIMALS)

    def top_k(self, namespace: str, query_vector, k: int) -> list[tuple[str, float]]:
        """The ``k`` best entries by cosine, score-descending, ties by id."""
        if k < 1:
            raise ValueError("k must be >= 1")
        space = self._space(namespace)
        if not space.ids:
            raise EmptyNamespace(f"namespace {namespace!r} is empty")
        scores = self.scores(namespace, query_vector)
        ids = np.asarray(space.ids, dtype=object)
        if k < len(scores):
            # everything scoring at least the k-th best survives, so ties at the cut stay intact
            kth = np.partition(scores, len(scores) - k)[len(scores) - k]
            keep = np.flatnonzero(scores >= kth)
        else:
            keep = np.arange(len(scores))
        order = sorted(keep, key=lambda i: (-scores[i], ids[i]))[:k]
        return [(space.ids[i], float(scores[i])) for i in order]

    def __eq__(self, other) -> bool:
        if not isinstance(other, VectorStore) or other.dim != self.dim:
            return False
        for name in NAMESPACES:
            a, b = self._space(name), other._space(name)
            if a.ids != b.ids:
                return False
            if any(not np.array_equal(x, y) for x, y in zip(a.rows, b.rows)):
                return False
        return True

    # persistence: header (magic, version, d, count), id table, float32 LE rows

    def write_namespace(self, namespace: str, fh: BinaryIO) -> None:
        space = self._space(namespace)
        fh.write(MAGIC)
        fh.write(struct.pack("<III", FILE_VERSION, self.dim, len(space.ids)))
        for id_ in space.ids:
            raw = id_.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
        if space.rows:
            fh.write(np.vstack(space.rows).astype("<f4").tobytes(order="C"))

    def read_namespace(self, namespace: str, fh: BinaryIO) -> None:
        head = fh.read(16)
        if len(head) != 16 or head[:4] != MAGIC:
            raise IndexIntegrityError("not a vector file (bad magic)")
        version, dim, count = struct.unpack("<III", head[4:])
        if version != FILE_VERSION:
            raise VersionMismatch(f"vector file version {version}, expected {FILE_VERSION}")
        if dim != self.dim:
            raise DimensionMismatch(f"vector file has dimension {dim}, store expects {self.dim}")
        ids = []
        for _ in range(count):
            (n,) = struct.unpack("<I", fh.read(4))
            ids.append(fh.read(n).decode("utf-8"))
        payload = fh.read()
        if len(payload) != count * dim * 4:
            raise IndexIntegrityError("vector file is truncated")
        mat = np.frombuffer(payload, dtype="<f4").reshape(count, dim) if count else np.empty((0, dim), "<f4")
        space = self._space(namespace)
        space.ids, space.pos, space.rows, space._matrix = [], {}, [], None
        for i, id_ in enumerate(ids):
            row = mat[i].astype(np.float32)
            row.setflags(write=False)
            space.pos[id_] = i
            space.ids.append(id_)
            space.rows.append(row)
