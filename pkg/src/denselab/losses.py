"""Contrastive training objectives with exact analytic gradients.

Three losses over embedding matrices, all float64:

* ``mnrl_loss`` -- in-batch-negative softmax cross-entropy. Candidates are
  the batch's positives followed by its explicit negatives (when present);
  scores are ``scale * cos(a_i, c_j)`` and the target for anchor ``i`` is
  candidate ``i``:

      L = (1/B) * sum_i ( -s_ii + log sum_j exp(s_ij) )

* ``cosent_loss`` -- pairwise ranking over per-pair cosines:

      L = log(1 + sum_{(i,j): gold_i > gold_j} exp(tau * (cos_j - cos_i)))

* ``cached_mnrl_loss`` -- the two-pass gradient-cache realization of MNRL:
  encode everything in chunks discarding tapes, take the loss gradient with
  respect to every embedding row, then re-encode chunk by chunk feeding the
  cached row gradients into the parameter backward. Equivalent to the
  one-shot computation at a memory footprint bounded by the chunk size.

Cosine similarity is computed from the raw rows inside each loss (inputs are
expected to be unit-norm, where cosine and dot coincide, but the gradient is
taken through the full cosine so finite-difference probes that step off the
unit sphere still match). ``matryoshka_wrap`` sums a base loss over
re-normalized prefix truncations of the inputs, backpropagating through the
truncation (zero-padded) and the re-normalization Jacobian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data import Triplet

DEFAULT_SCALE = 20.0
DEFAULT_TAU = 20.0

_EPS_NORM = 1e-12


@dataclass
class BatchEmbeddings:
    """Anchor/positive(/negative) rows of one training batch.

    Shapes are validated at construction; unit-norm rows are a training-time
    contract checked explicitly via :meth:`check_unit_rows` so that numerical
    probes may evaluate losses slightly off the unit sphere.
    """

    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.anchors = np.asarray(self.anchors, dtype=np.float64)
        self.positives = np.asarray(self.positives, dtype=np.float64)
        if self.anchors.ndim != 2 or self.positives.shape != self.anchors.shape:
            raise ValueError("anchors and positives must be matrices of equal shape")
        if self.negatives is not None:
            self.negatives = np.asarray(self.negatives, dtype=np.float64)
            if self.negatives.shape != self.anchors.shape:
                raise ValueError("negatives must match the anchor shape")

    @property
    def batch_size(self) -> int:
        return self.anchors.shape[0]

    @property
    def dim(self) -> int:
        return self.anchors.shape[1]

    def check_unit_rows(self, tol: float = 1e-6) -> None:
        mats = [self.anchors, self.positives]
        if self.negatives is not None:
            mats.append(self.negatives)
        for m in mats:
            norms = np.linalg.norm(m, axis=1)
            if np.any(np.abs(norms - 1.0) > tol):
                worst = float(np.max(np.abs(norms - 1.0)))
                raise ValueError(f"rows must be unit-norm within {tol}, worst deviation {worst:.3e}")


@dataclass
class LossOutput:
    """Loss value and gradients with respect to the input matrices.

    For pairwise losses the two sides occupy the anchor/positive slots.
    """

    value: float
    grad_anchors: np.ndarray
    grad_positives: np.ndarray
    grad_negatives: np.ndarray | None = None


@dataclass(frozen=True)
class MatryoshkaSpec:
    """Prefix lengths and weights for nested-embedding training."""

    dims: tuple[int, ...]
    weights: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.dims:
            raise ValueError("dims must be non-empty")
        if len(self.dims) != len(self.weights):
            raise ValueError("dims and weights must have equal length")
        if any(d2 >= d1 for d1, d2 in zip(self.dims, self.dims[1:])):
            raise ValueError("dims must be strictly decreasing")
        if any(d < 1 for d in self.dims):
            raise ValueError("dims must be >= 1")
        if any(w <= 0 for w in self.weights):
            raise ValueError("weights must be positive")

    @classmethod
    def halving(cls, dim: int, floor: int = 8) -> "MatryoshkaSpec":
        """Default chain: full dim repeatedly halved down to ``floor``."""
        dims = []
        d = dim
        while d >= floor:
            dims.append(d)
            d //= 2
        return cls(tuple(dims), tuple(1.0 for _ in dims))

    def validate_for(self, dim: int) -> None:
        if self.dims[0] != dim:
            raise ValueError(f"first prefix must equal the full dimension {dim}, got {self.dims[0]}")
        if any(d > dim for d in self.dims):
            raise ValueError(f"prefix lengths must be <= {dim}")


def _unit_rows(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(m, axis=1)
    if np.any(norms < _EPS_NORM):
        raise ValueError("zero-norm row")
    return m / norms[:, None], norms


def _project_rows(grad: np.ndarray, unit: np.ndarray, norms: np.ndarray) -> np.ndarray:
    # Jacobian of x -> x/||x|| applied rowwise: (g - u (u.g)) / ||x||
    radial = (unit * grad).sum(axis=1, keepdims=True)
    return (grad - unit * radial) / norms[:, None]


def _softmax_ce(scores: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean diagonal-target cross-entropy over score rows and its gradient.

    Stable log-sum-exp with max subtraction; gradient is
    (softmax - onehot(diag)) / B."""
    n_rows = scores.shape[0]
    m = scores.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(scores - m).sum(axis=1))
    diag = scores[np.arange(n_rows), np.arange(n_rows)]
    value = float(np.mean(lse - diag))
    grad = np.exp(scores - lse[:, None])
    grad[np.arange(n_rows), np.arange(n_rows)] -= 1.0
    grad /= n_rows
    return value, grad


def mnrl_loss(batch: BatchEmbeddings, scale: float = DEFAULT_SCALE) -> LossOutput:
    """Multiple-negatives ranking loss with in-batch candidates.

    Anchor ``i`` is scored against every positive (and every explicit
    negative, when present); its own positive is the target.
    """
    if scale <= 0:
        raise ValueError("scale must be positive")
    B = batch.batch_size
    if batch.negatives is None and B < 2:
        raise ValueError("insufficient candidates: need batch size >= 2 or explicit negatives")

    candidates = (
        batch.positives
        if batch.negatives is None
        else np.vstack([batch.positives, batch.negatives])
    )
    anchors_u, anchor_norms = _unit_rows(batch.anchors)
    cand_u, cand_norms = _unit_rows(candidates)

    scores = scale * (anchors_u @ cand_u.T)
    value, grad_scores = _softmax_ce(scores)

    grad_anchors_u = scale * (grad_scores @ cand_u)
    grad_cand_u = scale * (grad_scores.T @ anchors_u)
    grad_anchors = _project_rows(grad_anchors_u, anchors_u, anchor_norms)
    grad_cand = _project_rows(grad_cand_u, cand_u, cand_norms)

    if batch.negatives is None:
        return LossOutput(value, grad_anchors, grad_cand)
    return LossOutput(value, grad_anchors, grad_cand[:B], grad_cand[B:])


def cosent_loss(
    side_a: np.ndarray,
    side_b: np.ndarray,
    gold: np.ndarray,
    tau: float = DEFAULT_TAU,
) -> LossOutput:
    """Pairwise cosine-ranking loss over sentence pairs.

    Every ordered pair (i, j) with gold_i > gold_j contributes
    exp(tau * (cos_j - cos_i)); only the ordering of gold scores matters.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    side_a = np.asarray(side_a, dtype=np.float64)
    side_b = np.asarray(side_b, dtype=np.float64)
    gold = np.asarray(gold, dtype=np.float64)
    if side_a.ndim != 2 or side_a.shape != side_b.shape:
        raise ValueError("pair sides must be matrices of equal shape")
    if gold.shape != (side_a.shape[0],):
        raise ValueError("gold must be a vector with one entry per pair")
    if not np.all(np.isfinite(gold)):
        raise ValueError("gold scores must be finite")

    a_u, a_norms = _unit_rows(side_a)
    b_u, b_norms = _unit_rows(side_b)
    cos = (a_u * b_u).sum(axis=1)

    ii, jj = np.nonzero(gold[:, None] > gold[None, :])
    if ii.size == 0:
        return LossOutput(0.0, np.zeros_like(side_a), np.zeros_like(side_b))

    # log(1 + sum exp(t)) via log-sum-exp over [0, t_1, ..., t_K]
    terms = tau * (cos[jj] - cos[ii])
    m = max(0.0, float(terms.max()))
    value = m + math.log(math.exp(-m) + float(np.exp(terms - m).sum()))
    pair_w = np.exp(terms - value)  # softmax weight of each pair term

    grad_cos = np.zeros_like(cos)
    np.add.at(grad_cos, jj, tau * pair_w)
    np.add.at(grad_cos, ii, -tau * pair_w)

    # d cos_i / d a_i = (b_u_i - cos_i a_u_i) / ||a_i||, symmetric for b
    grad_a = grad_cos[:, None] * (b_u - cos[:, None] * a_u) / a_norms[:, None]
    grad_b = grad_cos[:, None] * (a_u - cos[:, None] * b_u) / b_norms[:, None]
    return LossOutput(float(value), grad_a, grad_b)


MatrixLoss = Callable[[Sequence[np.ndarray]], tuple[float, Sequence[np.ndarray]]]


def matryoshka_wrap(
    base_loss: MatrixLoss,
    spec: MatryoshkaSpec,
    matrices: Sequence[np.ndarray],
) -> tuple[float, list[np.ndarray]]:
    """Weighted sum of ``base_loss`` over re-normalized prefix truncations.

    ``base_loss`` receives the truncated, row-renormalized matrices and must
    return (value, per-matrix gradients). Gradients are propagated through
    the re-normalization and zero-padded back to the full width, so prefix k
    contributes nothing to coordinates >= dims[k].
    """
    mats = [np.asarray(m, dtype=np.float64) for m in matrices]
    if not mats:
        raise ValueError("at least one matrix required")
    full_dim = mats[0].shape[1]
    if any(m.ndim != 2 or m.shape[1] != full_dim for m in mats):
        raise ValueError("all matrices must share the same width")
    spec.validate_for(full_dim)

    total = 0.0
    grads = [np.zeros_like(m) for m in mats]
    for dim, weight in zip(spec.dims, spec.weights):
        truncated: list[np.ndarray] = []
        caches: list[tuple[np.ndarray, np.ndarray]] = []
        for m in mats:
            prefix = m[:, :dim]
            norms = np.linalg.norm(prefix, axis=1)
            if np.any(norms < _EPS_NORM):
                row = int(np.argmin(norms))
                raise ValueError(f"row {row} has near-zero norm in its first {dim} coordinates")
            unit = prefix / norms[:, None]
            truncated.append(unit)
            caches.append((unit, norms))
        value, prefix_grads = base_loss(truncated)
        total += weight * value
        for grad, (unit, norms), g in zip(grads, caches, prefix_grads):
            grad[:, :dim] += weight * _project_rows(np.asarray(g, dtype=np.float64), unit, norms)
    return total, grads


def matryoshka_mnrl(
    batch: BatchEmbeddings,
    spec: MatryoshkaSpec,
    scale: float = DEFAULT_SCALE,
) -> LossOutput:
    has_neg = batch.negatives is not None
    mats = [batch.anchors, batch.positives] + ([batch.negatives] if has_neg else [])

    def base(pieces: Sequence[np.ndarray]) -> tuple[float, Sequence[np.ndarray]]:
        inner = BatchEmbeddings(pieces[0], pieces[1], pieces[2] if has_neg else None)
        out = mnrl_loss(inner, scale)
        gs = [out.grad_anchors, out.grad_positives]
        if has_neg:
            gs.append(out.grad_negatives)
        return out.value, gs

    value, grads = matryoshka_wrap(base, spec, mats)
    return LossOutput(value, grads[0], grads[1], grads[2] if has_neg else None)


def matryoshka_cosent(
    side_a: np.ndarray,
    side_b: np.ndarray,
    gold: np.ndarray,
    spec: MatryoshkaSpec,
    tau: float = DEFAULT_TAU,
) -> LossOutput:
    def base(pieces: Sequence[np.ndarray]) -> tuple[float, Sequence[np.ndarray]]:
        out = cosent_loss(pieces[0], pieces[1], gold, tau)
        return out.value, [out.grad_anchors, out.grad_positives]

    value, grads = matryoshka_wrap(base, spec, [side_a, side_b])
    return LossOutput(value, grads[0], grads[1])


def cached_mnrl_loss(
    encode_fn,
    backward_fn,
    triplets: Sequence[Triplet],
    chunk_size: int,
    scale: float = DEFAULT_SCALE,
    matryoshka: MatryoshkaSpec | None = None,
):
    """Two-pass gradient-cached MNRL over a batch of triplets.

    ``encode_fn(text) -> (embedding, tape)`` under the current parameters;
    ``backward_fn(tape, grad_out, out) -> out`` accumulates parameter
    gradients (creating the accumulator when ``out`` is None). Pass 1 encodes
    every text chunk by chunk, discarding tapes, and assembles the full
    embedding matrices; the loss gradient with respect to every row is the
    cache. Pass 2 re-encodes chunk by chunk, one text at a time, feeding each
    cached row gradient into ``backward_fn``.

    Returns (loss value, accumulated parameter gradients). Matches the
    uncached computation up to float accumulation order; ``chunk_size`` is
    clamped to the batch size.
    """
    n = len(triplets)
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    if n == 0:
        raise ValueError("empty triplet batch")
    chunk_size = min(chunk_size, n)

    with_negatives = [t.negative is not None for t in triplets]
    if any(with_negatives) and not all(with_negatives):
        raise ValueError("batch mixes triplets with and without negatives")
    has_neg = with_negatives[0]

    anchors: list[np.ndarray] = []
    positives: list[np.ndarray] = []
    negatives: list[np.ndarray] = []
    for start in range(0, n, chunk_size):
        for t in triplets[start : start + chunk_size]:
            anchors.append(encode_fn(t.anchor)[0])
            positives.append(encode_fn(t.positive)[0])
            if has_neg:
                negatives.append(encode_fn(t.negative)[0])

    batch = BatchEmbeddings(
        np.vstack(anchors),
        np.vstack(positives),
        np.vstack(negatives) if has_neg else None,
    )
    if matryoshka is None:
        out = mnrl_loss(batch, scale)
    else:
        out = matryoshka_mnrl(batch, matryoshka, scale)

    grads = None
    for start in range(0, n, chunk_size):
        for offset, t in enumerate(triplets[start : start + chunk_size]):
            i = start + offset
            grads = backward_fn(encode_fn(t.anchor)[1], out.grad_anchors[i], grads)
            grads = backward_fn(encode_fn(t.positive)[1], out.grad_positives[i], grads)
            if has_neg:
                grads = backward_fn(encode_fn(t.negative)[1], out.grad_negatives[i], grads)
    return out.value, grads
