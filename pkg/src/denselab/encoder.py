"""Deterministic toy text encoder with hand-derived exact gradients.

Text is case-folded (with the Turkish dotted/dotless i handled before the
generic lowercasing), split on whitespace, and expanded into whole tokens
plus character 3/4/5-grams. Each string is hashed with 64-bit FNV-1a into a
fixed bucket space and the resulting count vector is L2-normalized. The
encoder proper is

    u = W2 @ tanh(W1 @ x + b1) + b2,     e = u / ||u||

computed in float64. ``encode`` returns the embedding together with a tape of
intermediates; ``encode_backward`` turns an upstream gradient on ``e`` into
exact parameter gradients, including the normalization Jacobian
(I - e e^T) / ||u|| and tanh' = 1 - tanh^2.

Checkpoints are little-endian float32 with a small binary header, so weights
are snapped to the float32 grid at initialization: a freshly initialized or
freshly loaded parameter set round-trips through ``save_params`` /
``load_params`` bit for bit.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

DEFAULT_BUCKETS = 65536
DEFAULT_HIDDEN = 256
DEFAULT_DIM = 64

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

_MAGIC = b"TE4E"
_VERSION = 1


class DegenerateEmbeddingError(ValueError):
    """Pre-normalization output has (near-)zero norm; cosine would be undefined."""


class CheckpointError(ValueError):
    """Checkpoint bytes are malformed."""


def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & _MASK64
    return h


def fold_case(text: str) -> str:
    # Unicode lower() maps 'I' to 'i' and 'İ' to 'i' + combining dot, both
    # wrong for Turkish; map those two code points first.
    return text.replace("İ", "i").replace("I", "ı").lower()


def _char_ngrams(token: str):
    yield token
    length = len(token)
    for n in (3, 4, 5):
        for i in range(length - n + 1):
            yield token[i : i + n]


@dataclass
class FeatureVector:
    """Sparse L2-normalized bag of hashed token/n-gram counts."""

    weights: dict[int, float]
    n_buckets: int

    def to_dense(self) -> np.ndarray:
        dense = np.zeros(self.n_buckets, dtype=np.float64)
        for bucket, w in self.weights.items():
            dense[bucket] = w
        return dense

    def norm(self) -> float:
        return math.sqrt(sum(w * w for w in self.weights.values()))

    def columns(self) -> tuple[np.ndarray, np.ndarray]:
        """Active bucket indices and weights, in insertion order."""
        n = len(self.weights)
        cols = np.fromiter(self.weights.keys(), dtype=np.int64, count=n)
        vals = np.fromiter(self.weights.values(), dtype=np.float64, count=n)
        return cols, vals


def featurize(text: str, n_buckets: int = DEFAULT_BUCKETS) -> FeatureVector:
    """Hash tokens and character n-grams into a normalized sparse count vector.

    Empty or whitespace-only text yields the zero vector; any other text
    produces a vector of unit L2 norm.
    """
    if n_buckets < 2:
        raise ValueError("n_buckets must be >= 2")
    counts: dict[int, float] = {}
    for token in fold_case(text).split():
        for gram in _char_ngrams(token):
            bucket = fnv1a_64(gram.encode("utf-8")) % n_buckets
            counts[bucket] = counts.get(bucket, 0.0) + 1.0
    norm = math.sqrt(sum(w * w for w in counts.values()))
    if norm > 0.0:
        counts = {b: w / norm for b, w in counts.items()}
    return FeatureVector(weights=counts, n_buckets=n_buckets)


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass
class EncoderParams:
    """Two-layer encoder weights, kept in float64 in memory.

    ``embed_dim`` must be a power of two >= 8 so nested prefix halving stays
    meaningful.
    """

    w1: np.ndarray  # (hidden, buckets)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (dim, hidden)
    b2: np.ndarray  # (dim,)

    def __post_init__(self) -> None:
        if self.w1.ndim != 2 or self.w2.ndim != 2:
            raise ValueError("w1 and w2 must be matrices")
        hidden, _ = self.w1.shape
        dim, hidden2 = self.w2.shape
        if hidden2 != hidden or self.b1.shape != (hidden,) or self.b2.shape != (dim,):
            raise ValueError("parameter shapes are inconsistent")
        if not (_is_pow2(dim) and dim >= 8):
            raise ValueError(f"embed_dim must be a power of two >= 8, got {dim}")
        for name, arr in self.arrays().items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite entries in {name}")

    @property
    def n_buckets(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.w2.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())


@dataclass
class EncoderGrads:
    """Parameter-shaped gradient accumulator."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def zeros_like(cls, params: EncoderParams) -> "EncoderGrads":
        return cls(
            np.zeros_like(params.w1),
            np.zeros_like(params.b1),
            np.zeros_like(params.w2),
            np.zeros_like(params.b2),
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


@dataclass
class EncodeTape:
    """Intermediates cached by ``encode``; replaying it forward reproduces the
    embedding bitwise (``raw_output / raw_norm``)."""

    features: FeatureVector
    pre_activation: np.ndarray  # W1 @ x + b1
    hidden: np.ndarray          # tanh(pre_activation)
    raw_output: np.ndarray      # W2 @ hidden + b2
    raw_norm: float


def encode(params: EncoderParams, text: str) -> tuple[np.ndarray, EncodeTape]:
    """Embed ``text`` to a unit vector; also return the tape for backward."""
    feats = featurize(text, params.n_buckets)
    if feats.weights:
        cols, vals = feats.columns()
        z1 = params.b1 + params.w1[:, cols] @ vals
    else:
        z1 = params.b1.copy()
    h = np.tanh(z1)
    u = params.w2 @ h + params.b2
    norm = float(np.linalg.norm(u))
    if norm < 1e-12:
        raise DegenerateEmbeddingError(
            f"pre-normalization output has norm {norm:.3e} for text {text[:40]!r}"
        )
    return u / norm, EncodeTape(feats, z1, h, u, norm)


def encode_backward(
    params: EncoderParams,
    tape: EncodeTape,
    grad_out: np.ndarray,
    out: EncoderGrads | None = None,
) -> EncoderGrads:
    """Exact parameter gradients for an upstream gradient on the embedding.

    When ``out`` is given, gradients are accumulated into it in place (only
    the active w1 columns are touched), which keeps large-batch accumulation
    cheap; otherwise a fresh zero-initialized accumulator is returned.
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != (params.embed_dim,):
        raise ValueError(
            f"grad_out has shape {grad_out.shape}, expected ({params.embed_dim},)"
        )
    if out is None:
        out = EncoderGrads.zeros_like(params)

    e = tape.raw_output / tape.raw_norm
    g_u = (grad_out - e * float(e @ grad_out)) / tape.raw_norm
    out.b2 += g_u
    out.w2 += np.outer(g_u, tape.hidden)
    g_h = params.w2.T @ g_u
    g_z1 = g_h * (1.0 - tape.hidden * tape.hidden)
    out.b1 += g_z1
    if tape.features.weights:
        cols, vals = tape.features.columns()
        out.w1[:, cols] += np.outer(g_z1, vals)
    return out


def init_params(
    seed: int,
    n_buckets: int = DEFAULT_BUCKETS,
    hidden_dim: int = DEFAULT_HIDDEN,
    embed_dim: int = DEFAULT_DIM,
) -> EncoderParams:
    """Glorot-uniform weights from a seeded PCG64 stream; zero biases.

    Weights are rounded to float32 precision so the in-memory values match
    the checkpoint representation exactly from step zero.
    """
    if n_buckets < 2:
        raise ValueError("n_buckets must be >= 2")
    if hidden_dim < 1:
        raise ValueError("hidden_dim must be >= 1")
    if not (_is_pow2(embed_dim) and embed_dim >= 8):
        raise ValueError(f"embed_dim must be a power of two >= 8, got {embed_dim}")
    rng = np.random.default_rng(seed)
    a1 = math.sqrt(6.0 / (n_buckets + hidden_dim))
    w1 = rng.uniform(-a1, a1, size=(hidden_dim, n_buckets))
    a2 = math.sqrt(6.0 / (hidden_dim + embed_dim))
    w2 = rng.uniform(-a2, a2, size=(embed_dim, hidden_dim))
    snap = lambda a: a.astype(np.float32).astype(np.float64)
    return EncoderParams(
        w1=snap(w1),
        b1=np.zeros(hidden_dim, dtype=np.float64),
        w2=snap(w2),
        b2=np.zeros(embed_dim, dtype=np.float64),
    )


def save_params(params: EncoderParams) -> bytes:
    """Serialize to the binary checkpoint format.

    Layout: magic ``TE4E``, u32 version=1, u32 buckets, u32 hidden, u32 dim,
    then w1, b1, w2, b2 as little-endian float32, row-major.
    """
    header = struct.pack(
        "<4sIIII", _MAGIC, _VERSION, params.n_buckets, params.hidden_dim, params.embed_dim
    )
    body = b"".join(
        arr.astype("<f4").tobytes(order="C")
        for arr in (params.w1, params.b1, params.w2, params.b2)
    )
    return header + body


def load_params(blob: bytes) -> EncoderParams:
    header_size = struct.calcsize("<4sIIII")
    if len(blob) < header_size:
        raise CheckpointError("truncated header")
    magic, version, n_buckets, hidden_dim, embed_dim = struct.unpack_from("<4sIIII", blob)
    if magic != _MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != _VERSION:
        raise CheckpointError(f"unsupported version {version}")
    counts = [hidden_dim * n_buckets, hidden_dim, embed_dim * hidden_dim, embed_dim]
    expected = header_size + 4 * sum(counts)
    if len(blob) != expected:
        raise CheckpointError(
            f"length mismatch: header declares {expected} bytes, got {len(blob)}"
        )
    flat = np.frombuffer(blob, dtype="<f4", offset=header_size).astype(np.float64)
    offsets = np.cumsum([0] + counts)
    w1 = flat[offsets[0] : offsets[1]].reshape(hidden_dim, n_buckets)
    b1 = flat[offsets[1] : offsets[2]]
    w2 = flat[offsets[2] : offsets[3]].reshape(embed_dim, hidden_dim)
    b2 = flat[offsets[3] : offsets[4]]
    return EncoderParams(w1=w1, b1=b1, w2=w2, b2=b2)


def load_params_file(path) -> EncoderParams:
    with open(path, "rb") as fh:
        return load_params(fh.read())


def save_params_file(params: EncoderParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(save_params(params))
