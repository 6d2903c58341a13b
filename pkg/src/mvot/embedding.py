"""Embedding vectors, cosine similarity, canonical bytes and tuple hashing.

Embeddings are plain numpy arrays. ``as_embedding`` validates and freezes
them as little-endian float32, which is also the storage width used in vault
files, so the bytes that get hashed at enrollment are exactly the bytes a
verifier reads back.
"""
from __future__ import annotations

import hashlib
import struct
from typing import Sequence

import numpy as np

FLOAT_DTYPE = np.dtype("<f4")
DIGEST_SIZE = 32
TUPLE_HASH_TAG = b"MVOT/tuple-hash/v1\x00"


class EmbeddingError(ValueError):
    """Raised for malformed embedding vectors."""


def as_embedding(values, dim: int | None = None) -> np.ndarray:
    """Return ``values`` as a validated, read-only float32 vector.

    Rejects vectors shorter than 2, non-finite components and zero norm.
    """
    arr = np.asarray(values)
    if arr.ndim != 1:
        raise EmbeddingError(f"embedding must be 1-D, got shape {arr.shape}")
    arr = arr.astype(FLOAT_DTYPE, copy=True)
    if arr.shape[0] < 2:
        raise EmbeddingError("embedding dimension must be >= 2")
    if dim is not None and arr.shape[0] != dim:
        raise EmbeddingError(f"expected dimension {dim}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise EmbeddingError("embedding has non-finite components")
    if not np.any(arr):
        raise EmbeddingError("zero vector is not a valid embedding")
    arr.setflags(write=False)
    return arr


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise EmbeddingError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise EmbeddingError("cosine similarity undefined for zero-norm input")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def cosine_scores(matrix: np.ndarray, query, row_norms: np.ndarray | None = None) -> np.ndarray:
    """Cosine similarity of every row of ``matrix`` against ``query``.

    ``row_norms`` lets callers that score many queries against one matrix
    skip recomputing the row norms.
    """
    m = np.asarray(matrix, dtype=np.float32)
    q = np.asarray(query, dtype=np.float32)
    if m.ndim != 2 or m.shape[1] != q.shape[0]:
        raise EmbeddingError(f"dimension mismatch: {m.shape} vs {q.shape}")
    qn = float(np.linalg.norm(q))
    if qn == 0.0:
        raise EmbeddingError("cosine similarity undefined for zero-norm input")
    norms = np.linalg.norm(m, axis=1) if row_norms is None else row_norms
    return (m @ q) / (norms * qn)


def canonical_encode(v) -> bytes:
    return np.ascontiguousarray(v, dtype=FLOAT_DTYPE).tobytes()


def canonical_decode(data: bytes, dim: int | None = None) -> np.ndarray:
    if len(data) % 4:
        raise EmbeddingError(f"canonical bytes length {len(data)} is not a multiple of 4")
    return as_embedding(np.frombuffer(data, dtype=FLOAT_DTYPE), dim)


def hash_entry_tuple(subset: Sequence[int], entries: Sequence[bytes], salt: bytes) -> bytes:
    """SHA-256 commitment over ``(vault index, entry bytes)`` pairs.

    Layout: tag || salt || for each position: u32le(index) || entry bytes.
    ``subset`` must be strictly ascending.
    """
    if len(subset) != len(entries):
        raise ValueError(f"subset has {len(subset)} indices but {len(entries)} entries")
    for prev, cur in zip(subset, subset[1:]):
        if cur <= prev:
            raise ValueError(f"subset indices must be strictly ascending: {list(subset)}")
    h = tuple_hasher(salt)
    for idx, entry in zip(subset, entries):
        h.update(struct.pack("<I", idx))
        h.update(entry)
    return h.digest()


def tuple_hasher(salt: bytes):
    """Hash state primed with tag and salt; callers extend it per position."""
    h = hashlib.sha256(TUPLE_HASH_TAG)
    h.update(salt)
    return h
