"""Exact dense retrieval over an in-memory embedding index.

Documents are encoded as ``title + " " + text``; index rows are unit-norm
float32 and immutable after construction. Search is exhaustive: every row is
scored, and results are ordered by descending score with ties broken by
ascending doc id, so rankings (and therefore downstream metrics) are fully
deterministic. Cosine/dot scores use float32 arithmetic; euclidean and
manhattan distances accumulate in float64 and are negated so that a larger
score is always better.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .data import Corpus
from .encoder import DegenerateEmbeddingError, EncoderParams, encode

MEASURES = ("cosine", "dot", "euclidean", "manhattan")

_MAGIC = b"TE4R"
_VERSION = 1


class IndexFormatError(ValueError):
    """Index bytes are malformed."""


@dataclass
class EmbeddingIndex:
    """Ordered doc ids plus a float32 matrix of unit-norm embedding rows."""

    ids: tuple[str, ...]
    vectors: np.ndarray
    normalized: bool = True

    def __post_init__(self) -> None:
        self.ids = tuple(self.ids)
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2:
            raise ValueError("vectors must be a matrix")
        if len(self.ids) != self.vectors.shape[0]:
            raise ValueError("ids and vectors disagree on row count")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("doc ids must be unique")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class RankedList:
    """Top-k result for one query, strictly ordered by (-score, doc id)."""

    query_id: str
    items: tuple[tuple[str, float], ...]

    def __post_init__(self) -> None:
        keys = [(-score, doc) for doc, score in self.items]
        if any(a >= b for a, b in zip(keys, keys[1:])):
            raise ValueError("items must be strictly ordered by (-score, doc id)")

    def __len__(self) -> int:
        return len(self.items)

    def doc_ids(self) -> tuple[str, ...]:
        return tuple(doc for doc, _ in self.items)


def build_index(params: EncoderParams, corpus: Corpus) -> EmbeddingIndex:
    """Encode every document (title, single space, text) in corpus order."""
    if len(corpus) == 0:
        raise ValueError("cannot index an empty corpus")
    rows = []
    for doc in corpus:
        try:
            embedding, _ = encode(params, doc.title + " " + doc.text)
        except DegenerateEmbeddingError as err:
            raise DegenerateEmbeddingError(f"document {doc.id}: {err}") from err
        rows.append(embedding.astype(np.float32))
    return EmbeddingIndex(ids=corpus.ids, vectors=np.vstack(rows))


def truncate_renorm(obj, dim: int):
    """Keep the first ``dim`` coordinates and re-normalize rows to unit length.

    Accepts an :class:`EmbeddingIndex` (returns a truncated float32 index), a
    vector, or a matrix (both computed and returned in float64). Rows whose
    prefix norm is below 1e-12 are rejected.
    """
    if isinstance(obj, EmbeddingIndex):
        if not 1 <= dim <= obj.dim:
            raise ValueError(f"dim must be in [1, {obj.dim}], got {dim}")
        prefix = obj.vectors[:, :dim].astype(np.float64)
        norms = np.linalg.norm(prefix, axis=1)
        bad = np.nonzero(norms < 1e-12)[0]
        if bad.size:
            raise ValueError(f"document {obj.ids[int(bad[0])]}: prefix norm below 1e-12")
        return EmbeddingIndex(ids=obj.ids, vectors=(prefix / norms[:, None]).astype(np.float32))

    arr = np.asarray(obj, dtype=np.float64)
    if arr.ndim == 1:
        if not 1 <= dim <= arr.shape[0]:
            raise ValueError(f"dim must be in [1, {arr.shape[0]}], got {dim}")
        prefix = arr[:dim]
        norm = float(np.linalg.norm(prefix))
        if norm < 1e-12:
            raise ValueError("prefix norm below 1e-12")
        return prefix / norm
    if arr.ndim == 2:
        if not 1 <= dim <= arr.shape[1]:
            raise ValueError(f"dim must be in [1, {arr.shape[1]}], got {dim}")
        prefix = arr[:, :dim]
        norms = np.linalg.norm(prefix, axis=1)
        bad = np.nonzero(norms < 1e-12)[0]
        if bad.size:
            raise ValueError(f"row {int(bad[0])}: prefix norm below 1e-12")
        return prefix / norms[:, None]
    raise TypeError("expected an EmbeddingIndex, vector, or matrix")


def similarity(u: np.ndarray, v: np.ndarray, measure: str) -> float:
    """Ranking score between two vectors; larger is always better."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ValueError("inputs must be vectors of equal dimension")
    if measure == "cosine":
        nu = float(np.linalg.norm(u))
        nv = float(np.linalg.norm(v))
        if nu == 0.0 or nv == 0.0:
            raise ValueError("cosine similarity is undefined for zero-norm input")
        return float(u @ v) / (nu * nv)
    if measure == "dot":
        return float(u @ v)
    if measure == "euclidean":
        return -float(np.sqrt(((u - v) ** 2).sum()))
    if measure == "manhattan":
        return -float(np.abs(u - v).sum())
    raise ValueError(f"unknown measure {measure!r}; expected one of {MEASURES}")


def _score_all(index: EmbeddingIndex, query: np.ndarray, measure: str) -> np.ndarray:
    q32 = np.asarray(query, dtype=np.float32)
    if q32.shape != (index.dim,):
        raise ValueError(f"query has shape {q32.shape}, index dim is {index.dim}")
    if measure == "dot":
        return index.vectors @ q32
    if measure == "cosine":
        qnorm = float(np.linalg.norm(q32))
        if qnorm == 0.0:
            raise ValueError("cosine similarity is undefined for zero-norm input")
        row_norms = np.linalg.norm(index.vectors, axis=1)
        if np.any(row_norms == 0.0):
            raise ValueError("cosine similarity is undefined for zero-norm index row")
        return (index.vectors @ q32) / (row_norms * np.float32(qnorm))
    if measure == "euclidean":
        diff = index.vectors.astype(np.float64) - q32.astype(np.float64)
        return -np.sqrt((diff * diff).sum(axis=1))
    if measure == "manhattan":
        diff = index.vectors.astype(np.float64) - q32.astype(np.float64)
        return -np.abs(diff).sum(axis=1)
    raise ValueError(f"unknown measure {measure!r}; expected one of {MEASURES}")


def _rank_order(scores: Sequence[float], ids: Sequence[str], k: int) -> list[int]:
    return sorted(range(len(ids)), key=lambda i: (-float(scores[i]), ids[i]))[:k]


def top_k(
    index: EmbeddingIndex,
    query: np.ndarray,
    k: int,
    measure: str = "cosine",
    query_id: str = "",
) -> RankedList:
    """Exhaustive exact top-k; ties broken by ascending doc id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(index) == 0:
        raise ValueError("cannot search an empty index")
    scores = _score_all(index, query, measure)
    order = _rank_order(scores, index.ids, k)
    return RankedList(
        query_id=query_id,
        items=tuple((index.ids[i], float(scores[i])) for i in order),
    )


def search_all(
    index: EmbeddingIndex,
    queries: Iterable[tuple[str, np.ndarray]],
    k: int,
    measure: str = "cosine",
    threads: int = 1,
) -> dict[str, RankedList]:
    """Batch search; output is identical to the sequential per-query loop
    regardless of ``threads``."""
    pairs = list(queries)
    if threads <= 1:
        results = [top_k(index, vec, k, measure, query_id=qid) for qid, vec in pairs]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(
                pool.map(lambda p: top_k(index, p[1], k, measure, query_id=p[0]), pairs)
            )
    return {r.query_id: r for r in results}


def save_index(index: EmbeddingIndex) -> bytes:
    """Serialize: magic ``TE4R``, u32 version=1, u32 dim, u64 count, then per
    id a u16 byte length + UTF-8 bytes, then the float32 rows."""
    out = [struct.pack("<4sIIQ", _MAGIC, _VERSION, index.dim, len(index))]
    for doc_id in index.ids:
        raw = doc_id.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"doc id too long to serialize: {doc_id[:40]!r}...")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
    out.append(index.vectors.astype("<f4").tobytes(order="C"))
    return b"".join(out)


def load_index(blob: bytes) -> EmbeddingIndex:
    header_size = struct.calcsize("<4sIIQ")
    if len(blob) < header_size:
        raise IndexFormatError("truncated header")
    magic, version, dim, count = struct.unpack_from("<4sIIQ", blob)
    if magic != _MAGIC:
        raise IndexFormatError(f"bad magic {magic!r}")
    if version != _VERSION:
        raise IndexFormatError(f"unsupported version {version}")
    offset = header_size
    ids: list[str] = []
    for _ in range(count):
        if offset + 2 > len(blob):
            raise IndexFormatError("truncated id section")
        (id_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        if offset + id_len > len(blob):
            raise IndexFormatError("truncated id section")
        ids.append(blob[offset : offset + id_len].decode("utf-8"))
        offset += id_len
    expected = offset + 4 * dim * count
    if len(blob) != expected:
        raise IndexFormatError(
            f"vector payload length mismatch: expected {expected - offset} bytes, "
            f"got {len(blob) - offset}"
        )
    vectors = np.frombuffer(blob, dtype="<f4", offset=offset).reshape(count, dim).copy()
    return EmbeddingIndex(ids=tuple(ids), vectors=vectors)


def load_index_file(path) -> EmbeddingIndex:
    with open(path, "rb") as fh:
        return load_index(fh.read())


def save_index_file(index: EmbeddingIndex, path) -> None:
    with open(path, "wb") as fh:
        fh.write(save_index(index))
