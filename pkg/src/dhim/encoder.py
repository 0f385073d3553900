"""Convolutional document encoder with hand-derived reverse-mode gradients.

Forward pass per document: windowed same-padded convolutions over the token
matrix produce one ReLU feature map per window size; the maps are
concatenated per position and fused by a two-layer MLP into per-position
local logits; the global logit vector is the mean over positions.

Input embeddings are frozen: backward returns parameter gradients only.
All math runs in float64; batches are processed as one stacked matrix per
stage so the heavy lifting is plain GEMMs with deterministic reductions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import DocEmbedding
from .errors import ShapeError

DEFAULT_WINDOWS = (1, 3, 5)


@dataclass
class EncoderParams:
    """Trainable tensors of the encoder; shapes are mutually consistent."""

    windows: tuple[int, ...]
    conv_w: dict[int, np.ndarray]  # per window n: (num_filters, n, dim)
    conv_b: dict[int, np.ndarray]  # per window n: (num_filters,)
    mlp_w1: np.ndarray  # (hidden, len(windows) * num_filters)
    mlp_b1: np.ndarray  # (hidden,)
    mlp_w2: np.ndarray  # (code_bits, hidden)
    mlp_b2: np.ndarray  # (code_bits,)

    @property
    def dim(self) -> int:
        return self.conv_w[self.windows[0]].shape[2]

    @property
    def num_filters(self) -> int:
        return self.conv_w[self.windows[0]].shape[0]

    @property
    def hidden(self) -> int:
        return self.mlp_w1.shape[0]

    @property
    def code_bits(self) -> int:
        return self.mlp_w2.shape[0]

    def tensor_items(self) -> list[tuple[str, np.ndarray]]:
        """Tensors in declaration order (the checkpoint serialization order)."""
        items = []
        for n in self.windows:
            items.append((f"conv_w{n}", self.conv_w[n]))
            items.append((f"conv_b{n}", self.conv_b[n]))
        items += [
            ("mlp_w1", self.mlp_w1),
            ("mlp_b1", self.mlp_b1),
            ("mlp_w2", self.mlp_w2),
            ("mlp_b2", self.mlp_b2),
        ]
        return items


def _glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_encoder(
    dim: int,
    code_bits: int = 32,
    num_filters: int = 128,
    hidden: int = 256,
    windows: tuple[int, ...] = DEFAULT_WINDOWS,
    rng: np.random.Generator | None = None,
) -> EncoderParams:
    """Glorot-uniform weights, zero biases."""
    windows = tuple(int(n) for n in windows)
    if not windows or any(n < 1 or n % 2 == 0 for n in windows):
        raise ValueError(f"window sizes must be odd and positive, got {windows}")
    if len(set(windows)) != len(windows):
        raise ValueError("window sizes must be distinct")
    if min(dim, code_bits, num_filters, hidden) < 1:
        raise ValueError("all encoder dimensions must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    conv_w, conv_b = {}, {}
    for n in windows:
        conv_w[n] = _glorot(rng, (num_filters, n, dim), fan_in=n * dim, fan_out=num_filters)
        conv_b[n] = np.zeros(num_filters)
    concat = len(windows) * num_filters
    return EncoderParams(
        windows=windows,
        conv_w=conv_w,
        conv_b=conv_b,
        mlp_w1=_glorot(rng, (hidden, concat), fan_in=concat, fan_out=hidden),
        mlp_b1=np.zeros(hidden),
        mlp_w2=_glorot(rng, (code_bits, hidden), fan_in=hidden, fan_out=code_bits),
        mlp_b2=np.zeros(code_bits),
    )


def _window_matrix(tokens: np.ndarray, n: int) -> np.ndarray:
    """Zero same-padded im2col: row i concatenates the n tokens centered at i."""
    length, dim = tokens.shape
    pad = (n - 1) // 2
    padded = np.zeros((length + n - 1, dim))
    padded[pad : pad + length] = tokens
    cols = np.empty((length, n, dim))
    for j in range(n):
        cols[:, j, :] = padded[j : j + length]
    return cols.reshape(length, n * dim)


@dataclass
class ForwardCache:
    """Batched intermediates kept for the backward pass."""

    lengths: np.ndarray            # (batch,) tokens per document
    starts: np.ndarray             # (batch,) row offsets into the stacked axis
    window_inputs: dict[int, np.ndarray]   # per n: (total, n*dim) im2col rows
    conv_pre: dict[int, np.ndarray]        # per n: (total, num_filters) pre-ReLU
    concat: np.ndarray             # (total, len(windows)*num_filters)
    mlp_pre: np.ndarray            # (total, hidden) pre-ReLU
    mlp_act: np.ndarray            # (total, hidden)
    local_logits: np.ndarray       # (total, code_bits)
    global_logits: np.ndarray      # (batch, code_bits)


def forward_batch(params: EncoderParams, token_mats: list[np.ndarray]) -> ForwardCache:
    """Run the encoder over a batch of token matrices stacked along positions."""
    if not token_mats:
        raise ShapeError("empty batch")
    dim = params.dim
    for mat in token_mats:
        if mat.ndim != 2 or mat.shape[1] != dim:
            raise ShapeError(f"token matrix of dim {mat.shape} does not match encoder dim {dim}")
    lengths = np.array([m.shape[0] for m in token_mats], dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])

    window_inputs, conv_pre, conv_act = {}, {}, []
    for n in params.windows:
        cols = np.concatenate([_window_matrix(np.asarray(m, dtype=np.float64), n) for m in token_mats])
        pre = cols @ params.conv_w[n].reshape(params.num_filters, -1).T + params.conv_b[n]
        window_inputs[n] = cols
        conv_pre[n] = pre
        conv_act.append(np.maximum(pre, 0.0))
    concat = np.concatenate(conv_act, axis=1)
    mlp_pre = concat @ params.mlp_w1.T + params.mlp_b1
    mlp_act = np.maximum(mlp_pre, 0.0)
    local_logits = mlp_act @ params.mlp_w2.T + params.mlp_b2
    sums = np.add.reduceat(local_logits, starts, axis=0)
    global_logits = sums / lengths[:, None]
    return ForwardCache(
        lengths=lengths,
        starts=starts,
        window_inputs=window_inputs,
        conv_pre=conv_pre,
        concat=concat,
        mlp_pre=mlp_pre,
        mlp_act=mlp_act,
        local_logits=local_logits,
        global_logits=global_logits,
    )


def backward_batch(
    params: EncoderParams,
    cache: ForwardCache,
    grad_locals: np.ndarray,
    grad_globals: np.ndarray,
) -> dict[str, np.ndarray]:
    """Parameter gradients for upstream (total x L) local and (batch x L) global grads."""
    if grad_locals.shape != cache.local_logits.shape:
        raise ShapeError("grad_locals shape mismatch")
    if grad_globals.shape != cache.global_logits.shape:
        raise ShapeError("grad_globals shape mismatch")
    # The mean readout routes 1/T of each document's global gradient to
    # every one of its positions.
    per_row_global = np.repeat(grad_globals / cache.lengths[:, None], cache.lengths, axis=0)
    g_local = grad_locals + per_row_global

    grads: dict[str, np.ndarray] = {}
    grads["mlp_w2"] = g_local.T @ cache.mlp_act
    grads["mlp_b2"] = g_local.sum(axis=0)
    g_act = g_local @ params.mlp_w2
    g_pre = g_act * (cache.mlp_pre > 0.0)
    grads["mlp_w1"] = g_pre.T @ cache.concat
    grads["mlp_b1"] = g_pre.sum(axis=0)
    g_concat = g_pre @ params.mlp_w1
    k = params.num_filters
    for idx, n in enumerate(params.windows):
        g_feat = g_concat[:, idx * k : (idx + 1) * k]
        g_conv = g_feat * (cache.conv_pre[n] > 0.0)
        grads[f"conv_w{n}"] = (g_conv.T @ cache.window_inputs[n]).reshape(k, n, params.dim)
        grads[f"conv_b{n}"] = g_conv.sum(axis=0)
    return grads


# ---------------------------------------------------------------------------
# Per-document operations
# ---------------------------------------------------------------------------

def conv_local(doc: DocEmbedding, params: EncoderParams, n: int) -> np.ndarray:
    """One window's ReLU feature map, length-preserving: (length x num_filters)."""
    if n not in params.windows:
        raise ShapeError(f"window {n} not in encoder window set {params.windows}")
    tokens = np.asarray(doc.tokens, dtype=np.float64)
    if tokens.shape[1] != params.dim:
        raise ShapeError(f"document dim {tokens.shape[1]} != encoder dim {params.dim}")
    cols = _window_matrix(tokens, n)
    pre = cols @ params.conv_w[n].reshape(params.num_filters, -1).T + params.conv_b[n]
    return np.maximum(pre, 0.0)


def fuse_and_readout(
    maps: dict[int, np.ndarray], params: EncoderParams
) -> tuple[np.ndarray, np.ndarray]:
    """CONCAT + MLP fusion, then mean-over-time readout.

    Returns (local_logits (length x code_bits), global_logits (code_bits,)).
    """
    missing = [n for n in params.windows if n not in maps]
    if missing:
        raise ShapeError(f"feature maps missing windows {missing}")
    lengths = {np.asarray(maps[n]).shape[0] for n in params.windows}
    if len(lengths) != 1:
        raise ShapeError("feature maps disagree on document length")
    concat = np.concatenate(
        [np.asarray(maps[n], dtype=np.float64) for n in params.windows], axis=1
    )
    mlp_act = np.maximum(concat @ params.mlp_w1.T + params.mlp_b1, 0.0)
    local_logits = mlp_act @ params.mlp_w2.T + params.mlp_b2
    return local_logits, local_logits.mean(axis=0)


def encode_doc(params: EncoderParams, doc: DocEmbedding) -> tuple[np.ndarray, np.ndarray]:
    """Full forward for one document: (local logits, global logits)."""
    cache = forward_batch(params, [doc.tokens])
    return cache.local_logits, cache.global_logits[0]


def encoder_backward(
    doc: DocEmbedding,
    params: EncoderParams,
    grad_locals: np.ndarray,
    grad_global: np.ndarray,
) -> dict[str, np.ndarray]:
    """Exact parameter gradients for one document given upstream gradients.

    grad_locals is (length x code_bits), grad_global is (code_bits,). The
    frozen input embeddings receive no gradient.
    """
    grad_locals = np.asarray(grad_locals, dtype=np.float64)
    grad_global = np.asarray(grad_global, dtype=np.float64)
    cache = forward_batch(params, [doc.tokens])
    return backward_batch(params, cache, grad_locals, grad_global.reshape(1, -1))
