"""Embedding matrices, the .emb binary format, cosine similarity, and exact
nearest-row search.

The .emb layout (little-endian) is the interchange format for every vector
artifact in the pipeline:

    bytes 0-3    magic "AEMB"
    bytes 4-7    format version, u32 (currently 1)
    bytes 8-15   row count, u64
    bytes 16-19  dimension, u32
    byte  20     dtype code, u8 (0 = float32)
    bytes 21-23  zero padding
    id table     per row: u32 byte length + UTF-8 bytes
    payload      row-major float32, no padding
"""

from __future__ import annotations

import hashlib
import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AllDegenerate,
    DimMismatch,
    EmptyCandidates,
    FormatError,
    ProviderError,
    UnsupportedVersion,
    ZeroVector,
)
from .io_utils import atomic_write_bytes

EMB_MAGIC = b"AEMB"
EMB_VERSION = 1
DTYPE_FLOAT32 = 0
NORM_EPS = 1e-12
DEFAULT_BATCH_SIZE = 64

_HEADER = struct.Struct("<4sIQIB3x")  # magic, version, rows, dim, dtype, pad


@dataclass
class EmbeddingMatrix:
    """Dense float32 row store with unique string row ids."""

    ids: list[str]
    dim: int
    data: np.ndarray  # shape (len(ids), dim), row-major float32

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.shape != (len(self.ids), self.dim):
            raise DimMismatch(
                f"data shape {self.data.shape} != ({len(self.ids)}, {self.dim})"
            )
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("row ids must be unique")
        self._index: dict[str, int] = {rid: i for i, rid in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def row(self, rid: str) -> np.ndarray:
        return self.data[self._index[rid]]

    def __contains__(self, rid: str) -> bool:
        return rid in self._index

    def take(self, ids: list[str]) -> "EmbeddingMatrix":
        """New matrix holding the given rows, in the given order."""
        missing = [r for r in ids if r not in self._index]
        if missing:
            raise KeyError(f"ids not in matrix: {missing[:5]}")
        rows = self.data[[self._index[r] for r in ids]]
        return EmbeddingMatrix(list(ids), self.dim, rows.copy())

    @staticmethod
    def empty(dim: int) -> "EmbeddingMatrix":
        return EmbeddingMatrix([], dim, np.zeros((0, dim), dtype=np.float32))


def cosine(u, v) -> float:
    """Cosine similarity in double precision, clamped to [-1, 1].

    Raises ZeroVector if either argument has norm below 1e-12; callers must
    skip degenerate rows rather than substituting a score.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.ndim != 1 or v.ndim != 1 or u.shape != v.shape or u.size == 0:
        raise DimMismatch(f"incompatible shapes {u.shape} and {v.shape}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu < NORM_EPS or nv < NORM_EPS:
        raise ZeroVector(f"norms {nu:g}, {nv:g} below {NORM_EPS:g}")
    return min(1.0, max(-1.0, float(np.dot(u, v)) / (nu * nv)))


def _cosine_scores(query: np.ndarray, m: EmbeddingMatrix) -> np.ndarray:
    """Clamped cosine of query against every row; degenerate rows get -inf."""
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (m.dim,):
        raise DimMismatch(f"query shape {q.shape} != ({m.dim},)")
    qn = float(np.linalg.norm(q))
    if qn < NORM_EPS:
        raise ZeroVector("query vector is degenerate")
    data = m.data.astype(np.float64)
    row_norms = np.linalg.norm(data, axis=1)
    valid = row_norms >= NORM_EPS
    scores = np.full(len(m), -np.inf)
    if valid.any():
        scores[valid] = data[valid] @ q / (row_norms[valid] * qn)
        np.clip(scores, -1.0, 1.0, out=scores)
        scores[~valid] = -np.inf
    return scores


def argmax_similarity(query, m: EmbeddingMatrix) -> tuple[int, float]:
    """Index and score of the row most similar to query.

    Ties break to the lowest row index; zero-norm rows are skipped.
    """
    if len(m) == 0:
        raise EmptyCandidates("matrix has no rows")
    scores = _cosine_scores(query, m)
    if not np.isfinite(scores).any():
        raise AllDegenerate("every candidate row has zero norm")
    idx = int(np.argmax(scores))  # argmax returns the first maximum
    return idx, float(scores[idx])


# --- providers -----------------------------------------------------------

class EmbeddingProvider(ABC):
    """Maps texts to fixed-dimension vectors, one row per input, in order."""

    model_name: str
    dim: int

    @abstractmethod
    def embed(self, texts: list[str]) -> EmbeddingMatrix:
        """Rows in input order with positional string ids."""


class HashEmbeddingProvider(EmbeddingProvider):
    """Deterministic stand-in for a sentence encoder.

    Each text maps to a pseudo-random unit vector seeded by a hash of the
    text, so identical texts always embed identically and the whole pipeline
    runs with no model inference.
    """

    def __init__(self, dim: int = 32):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.model_name = f"hash-unit-{dim}"

    def _vector(self, text: str) -> np.ndarray:
        digest = hashlib.sha256(text.encode("utf-8")).digest()
        seed = int.from_bytes(digest[:8], "little")
        rng = np.random.Generator(np.random.PCG64(seed))
        v = rng.standard_normal(self.dim)
        return (v / np.linalg.norm(v)).astype(np.float32)

    def embed(self, texts: list[str]) -> EmbeddingMatrix:
        if not texts:
            return EmbeddingMatrix.empty(self.dim)
        rows = np.stack([self._vector(t) for t in texts])
        return EmbeddingMatrix([str(i) for i in range(len(texts))], self.dim, rows)


class FileVectorSource:
    """Pre-exported vectors served by row id (no text encoding).

    Wraps a loaded .emb so pipeline stages can consume vectors produced by
    the external model exporter.
    """

    def __init__(self, matrix: EmbeddingMatrix, source: str = ""):
        self.matrix = matrix
        self.dim = matrix.dim
        self.model_name = f"file:{source}" if source else "file"

    def rows_for(self, ids: list[str]) -> EmbeddingMatrix:
        try:
            return self.matrix.take(ids)
        except KeyError as exc:
            raise ProviderError(str(exc), 0, len(ids)) from exc


def embed_contexts(provider, contexts, batch_size: int = DEFAULT_BATCH_SIZE) -> EmbeddingMatrix:
    """Embed context windows, one row per unit with id "<work_id>#<index>".

    Accepts either a text-encoding provider or a FileVectorSource holding
    pre-exported rows under the same ids. Batches preserve input order.
    """
    ids = [f"{c.work_id}#{c.index}" for c in contexts]
    if isinstance(provider, FileVectorSource):
        return provider.rows_for(ids)
    if not contexts:
        return EmbeddingMatrix.empty(provider.dim)
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    chunks = []
    for start in range(0, len(contexts), batch_size):
        batch = contexts[start : start + batch_size]
        try:
            out = provider.embed([c.window_text for c in batch])
        except Exception as exc:
            raise ProviderError(str(exc), start, start + len(batch)) from exc
        if out.dim != provider.dim or len(out) != len(batch):
            raise ProviderError("provider returned a mismatched batch", start, start + len(batch))
        chunks.append(out.data)
    return EmbeddingMatrix(ids, provider.dim, np.vstack(chunks))


# --- file format ----------------------------------------------------------

def save_matrix(m: EmbeddingMatrix, path) -> None:
    """Write the matrix in the .emb layout; the write is atomic."""
    buf = bytearray()
    buf += _HEADER.pack(EMB_MAGIC, EMB_VERSION, len(m.ids), m.dim, DTYPE_FLOAT32)
    for rid in m.ids:
        raw = rid.encode("utf-8")
        buf += struct.pack("<I", len(raw))
        buf += raw
    buf += m.data.tobytes(order="C")
    atomic_write_bytes(path, bytes(buf))


def load_matrix(path) -> EmbeddingMatrix:
    """Read a .emb file; round-trips every float bit pattern exactly."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise FormatError("truncated header", len(blob))
    magic, version, rows, dim, dtype = _HEADER.unpack_from(blob, 0)
    if magic != EMB_MAGIC:
        raise FormatError("bad magic", 0)
    if version != EMB_VERSION:
        raise UnsupportedVersion(f"emb format version {version} unsupported")
    if dtype != DTYPE_FLOAT32:
        raise FormatError(f"unknown dtype code {dtype}", 20)
    offset = _HEADER.size
    ids: list[str] = []
    for _ in range(rows):
        if offset + 4 > len(blob):
            raise FormatError("id table truncated (id count mismatch)", offset)
        (length,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        if offset + length > len(blob):
            raise FormatError("id entry truncated", offset)
        ids.append(blob[offset : offset + length].decode("utf-8"))
        offset += length
    expected = rows * dim * 4
    if len(blob) - offset < expected:
        raise FormatError("payload truncated", len(blob))
    if len(blob) - offset > expected:
        raise FormatError("trailing bytes after payload", offset + expected)
    data = np.frombuffer(blob, dtype="<f4", count=rows * dim, offset=offset)
    return EmbeddingMatrix(ids, dim, data.reshape(rows, dim).copy())
