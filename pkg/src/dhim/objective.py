"""Global-local mutual information objective.

Discriminators score (local code, global code) and (CLS code, global code)
pairs; mutual information is lower-bounded with the Jensen-Shannon
estimator over in-batch negatives, and the training loss is its negation
plus a weighted CLS regularizer. Gradients are hand-derived and flow into
the encoder through the straight-through binarization rule.

Two discriminator head shapes are supported: a plain affine map over the
concatenated pair, and an affine map preceded by one ReLU hidden layer.
The hidden layer lets the score couple the two halves of a pair, which a
purely additive affine head cannot; training defaults to it.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .binarize import BinaryCode, sample_bits, sigmoid, st_backward
from .corpus import DocEmbedding
from .encoder import EncoderParams, backward_batch, forward_batch
from .errors import NumericError, ShapeError


def softplus(x):
    """log(1 + e^x) computed without overflow as max(x, 0) + log1p(e^-|x|)."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


@dataclass
class AffineHead:
    """score(a, g) = w . concat(a, g) + b"""

    w: np.ndarray  # (a_dim + g_dim,)
    b: np.ndarray  # (1,)

    @property
    def in_dim(self) -> int:
        return self.w.shape[0]


@dataclass
class MlpHead:
    """score(a, g) = w2 . relu(w1 @ concat(a, g) + b1) + b2"""

    w1: np.ndarray  # (hidden, a_dim + g_dim)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden,)
    b2: np.ndarray  # (1,)

    @property
    def in_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]


Head = Union[AffineHead, MlpHead]


def _head_items(prefix: str, head: Head) -> list[tuple[str, np.ndarray]]:
    if isinstance(head, AffineHead):
        return [(f"{prefix}_w", head.w), (f"{prefix}_b", head.b)]
    return [
        (f"{prefix}_w1", head.w1),
        (f"{prefix}_b1", head.b1),
        (f"{prefix}_w2", head.w2),
        (f"{prefix}_b2", head.b2),
    ]


@dataclass
class DiscriminatorParams:
    """One scorer per pair family; input widths differ, so no weight sharing."""

    local: Head  # scores (local code, global code), width 2 * code_bits
    cls: Head    # scores (CLS code, global code), width dim + code_bits

    @property
    def code_bits(self) -> int:
        return self.local.in_dim // 2

    @property
    def dim(self) -> int:
        return self.cls.in_dim - self.code_bits

    @property
    def hidden(self) -> int:
        return self.local.hidden if isinstance(self.local, MlpHead) else 0

    def tensor_items(self) -> list[tuple[str, np.ndarray]]:
        return _head_items("disc_local", self.local) + _head_items("disc_cls", self.cls)


def _init_head(in_dim: int, hidden: int, rng: np.random.Generator) -> Head:
    def glorot(shape, fan_in, fan_out):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=shape)

    if hidden == 0:
        return AffineHead(w=glorot((in_dim,), in_dim, 1), b=np.zeros(1))
    return MlpHead(
        w1=glorot((hidden, in_dim), in_dim, hidden),
        b1=np.zeros(hidden),
        w2=glorot((hidden,), hidden, 1),
        b2=np.zeros(1),
    )


def init_discriminator(
    code_bits: int,
    dim: int,
    hidden: int = 64,
    rng: np.random.Generator | None = None,
) -> DiscriminatorParams:
    """hidden = 0 gives the plain affine heads."""
    rng = rng if rng is not None else np.random.default_rng(0)
    return DiscriminatorParams(
        local=_init_head(2 * code_bits, hidden, rng),
        cls=_init_head(dim + code_bits, hidden, rng),
    )


# ---------------------------------------------------------------------------
# Head scoring
# ---------------------------------------------------------------------------

def _score_rows(head: Head, first: np.ndarray, second: np.ndarray) -> np.ndarray:
    """Score row-aligned pairs: first (N, a_dim) with second (N, g_dim)."""
    joint_dim = first.shape[1] + second.shape[1]
    if joint_dim != head.in_dim:
        raise ShapeError(f"pair width {joint_dim} does not match head width {head.in_dim}")
    a_dim = first.shape[1]
    if isinstance(head, AffineHead):
        return first @ head.w[:a_dim] + second @ head.w[a_dim:] + head.b[0]
    pre = first @ head.w1[:, :a_dim].T + second @ head.w1[:, a_dim:].T + head.b1
    return np.maximum(pre, 0.0) @ head.w2 + head.b2[0]


def _score_matrix(head: Head, first: np.ndarray, second: np.ndarray) -> np.ndarray:
    """Score every (first[col], second[row]) combination: (rows, cols) matrix."""
    a_dim = first.shape[1]
    if isinstance(head, AffineHead):
        u = first @ head.w[:a_dim]
        v = second @ head.w[a_dim:] + head.b[0]
        return v[:, None] + u[None, :]
    u = first @ head.w1[:, :a_dim].T                    # (cols, hidden)
    v = second @ head.w1[:, a_dim:].T + head.b1         # (rows, hidden)
    scores = np.empty((second.shape[0], first.shape[0]))
    for row in range(second.shape[0]):
        scores[row] = np.maximum(u + v[row], 0.0) @ head.w2 + head.b2[0]
    return scores


def _matrix_backward(
    head: Head,
    first: np.ndarray,
    second: np.ndarray,
    weights: np.ndarray,
    prefix: str,
) -> tuple[dict[str, np.ndarray], np.ndarray, np.ndarray]:
    """Gradients of sum(weights * scores) for the full pair matrix.

    Returns (head gradients, d/d first, d/d second). The hidden activations
    are recomputed row by row so the full (rows x cols x hidden) tensor is
    never materialized.
    """
    a_dim = first.shape[1]
    grads: dict[str, np.ndarray] = {}
    if isinstance(head, AffineHead):
        col_w = weights.sum(axis=0)
        row_w = weights.sum(axis=1)
        grads[f"{prefix}_w"] = np.concatenate([first.T @ col_w, second.T @ row_w])
        grads[f"{prefix}_b"] = np.array([weights.sum()])
        return grads, np.outer(col_w, head.w[:a_dim]), np.outer(row_w, head.w[a_dim:])
    w1a = head.w1[:, :a_dim]
    w1g = head.w1[:, a_dim:]
    u = first @ w1a.T
    v = second @ w1g.T + head.b1
    d_w1a = np.zeros_like(w1a)
    d_vrows = np.empty_like(v)
    d_w2 = np.zeros_like(head.w2)
    d_first = np.zeros_like(first)
    total_w = 0.0
    for row in range(second.shape[0]):
        pre = u + v[row]
        act = np.maximum(pre, 0.0)
        d_w2 += act.T @ weights[row]
        g_pre = (weights[row][:, None] * (pre > 0.0)) * head.w2[None, :]
        d_w1a += g_pre.T @ first
        d_vrows[row] = g_pre.sum(axis=0)
        d_first += g_pre @ w1a
        total_w += weights[row].sum()
    grads[f"{prefix}_w1"] = np.concatenate([d_w1a, d_vrows.T @ second], axis=1)
    grads[f"{prefix}_b1"] = d_vrows.sum(axis=0)
    grads[f"{prefix}_w2"] = d_w2
    grads[f"{prefix}_b2"] = np.array([total_w])
    return grads, d_first, d_vrows @ w1g


def _zero_head_grads(prefix: str, head: Head) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in _head_items(prefix, head)}


def _as_code_array(code) -> np.ndarray:
    if isinstance(code, BinaryCode):
        return code.bits.astype(np.float64)
    return np.asarray(code, dtype=np.float64)


def disc_score(params: DiscriminatorParams, which: str, a, b) -> float:
    """Score one (code, global code) pair with the chosen discriminator."""
    if which == "local":
        head = params.local
    elif which == "cls":
        head = params.cls
    else:
        raise ValueError(f"unknown discriminator {which!r}")
    first = _as_code_array(a).reshape(1, -1)
    second = _as_code_array(b).reshape(1, -1)
    return float(_score_rows(head, first, second)[0])


# ---------------------------------------------------------------------------
# Pair batches and the JSD estimator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PairBatch:
    """Positive and negative (code, global) pairs with document provenance."""

    pos_first: np.ndarray    # (num_pos, a_dim)
    pos_global: np.ndarray   # (num_pos, code_bits)
    neg_first: np.ndarray    # (num_neg, a_dim)
    neg_global: np.ndarray   # (num_neg, code_bits)
    pos_doc: np.ndarray      # (num_pos,) owning document of both halves
    neg_first_doc: np.ndarray
    neg_global_doc: np.ndarray

    def __post_init__(self):
        if self.pos_first.shape[0] < 1 or self.neg_first.shape[0] < 1:
            raise ValueError("a pair batch needs at least one positive and one negative")
        if np.any(self.neg_first_doc == self.neg_global_doc):
            raise ValueError("negative pairs must mix two distinct documents")


def build_pairs(batch: Sequence[tuple[np.ndarray, np.ndarray]]) -> PairBatch:
    """All in-batch pairs: own locals as positives against each global code,
    every other document's locals as negatives."""
    if len(batch) < 2:
        raise ValueError("pairing needs at least two documents to draw negatives from")
    locals_list = [np.atleast_2d(np.asarray(loc, dtype=np.float64)) for loc, _ in batch]
    globals_list = [np.asarray(glob, dtype=np.float64) for _, glob in batch]
    pos_first, pos_global, pos_doc = [], [], []
    neg_first, neg_global, neg_first_doc, neg_global_doc = [], [], [], []
    for j, (loc_j, glob_j) in enumerate(zip(locals_list, globals_list)):
        pos_first.append(loc_j)
        pos_global.append(np.tile(glob_j, (loc_j.shape[0], 1)))
        pos_doc.append(np.full(loc_j.shape[0], j))
        for m, loc_m in enumerate(locals_list):
            if m == j:
                continue
            neg_first.append(loc_m)
            neg_global.append(np.tile(glob_j, (loc_m.shape[0], 1)))
            neg_first_doc.append(np.full(loc_m.shape[0], m))
            neg_global_doc.append(np.full(loc_m.shape[0], j))
    return PairBatch(
        pos_first=np.concatenate(pos_first),
        pos_global=np.concatenate(pos_global),
        neg_first=np.concatenate(neg_first),
        neg_global=np.concatenate(neg_global),
        pos_doc=np.concatenate(pos_doc),
        neg_first_doc=np.concatenate(neg_first_doc),
        neg_global_doc=np.concatenate(neg_global_doc),
    )


def jsd_mi(params: DiscriminatorParams, pairs: PairBatch, which: str = "local") -> float:
    """Jensen-Shannon MI estimate: mean -softplus(-D(pos)) - mean softplus(D(neg)).

    Always <= 0, approaching 0 only when positives score arbitrarily high
    and negatives arbitrarily low.
    """
    head = params.local if which == "local" else params.cls
    pos_scores = _score_rows(head, pairs.pos_first, pairs.pos_global)
    neg_scores = _score_rows(head, pairs.neg_first, pairs.neg_global)
    return float(-softplus(-pos_scores).mean() - softplus(neg_scores).mean())


# ---------------------------------------------------------------------------
# Training loss
# ---------------------------------------------------------------------------

def _resolve_rngs(rng, batch_size: int, mode: str):
    if mode == "relaxed":
        return None
    if rng is None:
        raise ValueError("stochastic mode requires a random generator")
    if isinstance(rng, np.random.Generator):
        return [rng] * batch_size
    rngs = list(rng)
    if len(rngs) != batch_size:
        raise ValueError("need one generator per document")
    return rngs


def total_loss(
    encoder: EncoderParams,
    disc: DiscriminatorParams,
    batch: Sequence[DocEmbedding],
    beta: float,
    rng=None,
    mode: str = "stochastic",
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and gradients for one minibatch.

    Returns (loss, grads) with one gradient array per tensor of both
    parameter sets. Per document: the local-global JSD estimate averages
    positives over the document's own positions and negatives over every
    other document's positions; the CLS estimate pairs each global code
    with its own binarized CLS vector (positive) and every other
    document's (negatives). The loss is the batch mean of the negated
    estimates, the CLS part weighted by beta.

    In stochastic mode codes are Bernoulli draws from per-document streams
    and encoder gradients use the straight-through rule; in relaxed mode
    codes are the sigmoid values themselves and the same formulas give the
    exact gradient.
    """
    if mode not in ("stochastic", "relaxed"):
        raise ValueError(f"unknown mode {mode!r}")
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    num_docs = len(batch)
    if num_docs < 2:
        raise ValueError("a batch needs at least two documents to form negatives")
    rngs = _resolve_rngs(rng, num_docs, mode)

    cache = forward_batch(encoder, [doc.tokens for doc in batch])
    lengths, starts = cache.lengths, cache.starts
    total = int(lengths.sum())
    code_bits = encoder.code_bits
    cls_raw = np.stack([np.asarray(doc.cls, dtype=np.float64) for doc in batch])

    if mode == "relaxed":
        local_codes = sigmoid(cache.local_logits)
        global_codes = sigmoid(cache.global_logits)
        cls_codes = sigmoid(cls_raw)
    else:
        local_codes = np.empty((total, code_bits))
        global_codes = np.empty((num_docs, code_bits))
        cls_codes = np.empty_like(cls_raw)
        for j in range(num_docs):
            seg = slice(starts[j], starts[j] + lengths[j])
            gen = rngs[j]
            local_codes[seg] = sample_bits(cache.local_logits[seg], gen)
            global_codes[j] = sample_bits(cache.global_logits[j], gen)
            cls_codes[j] = sample_bits(cls_raw[j], gen)

    # Local-global term. Row j of the score matrix holds D(b, B_j) for every
    # local code b in the batch; the document's own columns are positives.
    doc_of_col = np.repeat(np.arange(num_docs), lengths)
    own = doc_of_col[None, :] == np.arange(num_docs)[:, None]
    scores = _score_matrix(disc.local, local_codes, global_codes)
    num_neg = (total - lengths).astype(np.float64)

    pos_scores = scores[own]  # ordered row-major: doc 0's positions, then doc 1's...
    pos_per_doc = np.add.reduceat(softplus(-pos_scores), starts) / lengths
    neg_per_doc = np.where(own, 0.0, softplus(scores)).sum(axis=1) / num_neg
    loss = float((pos_per_doc + neg_per_doc).mean())

    # d softplus(-s)/ds = -sigma(-s); d softplus(s)/ds = sigma(s).
    weights = np.where(own, 0.0, sigmoid(scores)) / (num_neg[:, None] * num_docs)
    pos_w = -sigmoid(-pos_scores) / (np.repeat(lengths, lengths) * num_docs)
    weights[own] = pos_w

    grads, d_local_codes, d_global_codes = _matrix_backward(
        disc.local, local_codes, global_codes, weights, "disc_local"
    )

    if beta > 0.0:
        cls_scores = _score_matrix(disc.cls, cls_codes, global_codes)  # [j, m]
        diag = np.diag_indices(num_docs)
        off = ~np.eye(num_docs, dtype=bool)
        cls_pos_loss = softplus(-cls_scores[diag])
        cls_neg_loss = np.where(off, softplus(cls_scores), 0.0).sum(axis=1) / (num_docs - 1)
        loss += beta * float((cls_pos_loss + cls_neg_loss).mean())

        cls_weights = np.where(off, sigmoid(cls_scores), 0.0) * (
            beta / (num_docs * (num_docs - 1))
        )
        cls_weights[diag] = -sigmoid(-cls_scores[diag]) * (beta / num_docs)
        cls_grads, _, d_glob_cls = _matrix_backward(
            disc.cls, cls_codes, global_codes, cls_weights, "disc_cls"
        )
        grads.update(cls_grads)
        d_global_codes = d_global_codes + d_glob_cls
        # The CLS input is frozen, so its code gradient is dropped.
    else:
        grads.update(_zero_head_grads("disc_cls", disc.cls))

    grad_locals = st_backward(d_local_codes, cache.local_logits)
    grad_globals = st_backward(d_global_codes, cache.global_logits)
    grads.update(backward_batch(encoder, cache, grad_locals, grad_globals))

    if not np.isfinite(loss):
        raise NumericError("non-finite training loss")
    return loss, grads
