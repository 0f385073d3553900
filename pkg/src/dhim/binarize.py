"""Real logits -> binary codes.

Training uses stochastic Bernoulli draws whose gradient is estimated
straight-through with the sigmoid slope; inference thresholds logits at zero.
Codes are kept bit-packed in little-endian uint64 words (bit j of word w is
code bit 64*w + j) alongside the explicit 0/1 vector.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConsistencyError, FormatError, NumericError, ShapeError

CODES_MAGIC = b"DHCB"
CODES_VERSION = 1

_WORD_BITS = 64


def sigmoid(x):
    """Numerically stable logistic function, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    ex = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))


def sigmoid_prime(x):
    """Derivative of the logistic function: sigma(x) * (1 - sigma(x))."""
    s = sigmoid(x)
    return s * (1.0 - s)


def words_per_code(code_bits: int) -> int:
    return (code_bits + _WORD_BITS - 1) // _WORD_BITS


def pack_bits(bits: np.ndarray) -> np.ndarray:
    """Pack a (..., L) array of {0,1} into (..., ceil(L/64)) uint64 words.

    Trailing pad bits of the last word are zero.
    """
    bits = np.asarray(bits)
    nbits = bits.shape[-1]
    nwords = words_per_code(nbits)
    padded = np.zeros(bits.shape[:-1] + (nwords * _WORD_BITS,), dtype=np.uint64)
    padded[..., :nbits] = bits != 0
    shifts = np.arange(_WORD_BITS, dtype=np.uint64)
    lanes = padded.reshape(bits.shape[:-1] + (nwords, _WORD_BITS)) << shifts
    return np.bitwise_or.reduce(lanes, axis=-1)


def unpack_bits(words: np.ndarray, code_bits: int) -> np.ndarray:
    """Inverse of pack_bits; returns a (..., code_bits) uint8 array."""
    words = np.asarray(words, dtype=np.uint64)
    shifts = np.arange(_WORD_BITS, dtype=np.uint64)
    bits = (words[..., None] >> shifts) & np.uint64(1)
    flat = bits.reshape(words.shape[:-1] + (-1,))
    return flat[..., :code_bits].astype(np.uint8)


@dataclass(frozen=True)
class BinaryCode:
    """An L-bit hash code, stored both as a bit vector and bit-packed."""

    bits: np.ndarray    # (L,) uint8 in {0,1}
    packed: np.ndarray  # (ceil(L/64),) uint64

    @classmethod
    def from_bits(cls, bits) -> "BinaryCode":
        bits = np.ascontiguousarray(bits, dtype=np.uint8)
        if bits.ndim != 1 or bits.size == 0:
            raise ShapeError("code bits must form a nonempty vector")
        if np.any(bits > 1):
            raise ValueError("code bits must be 0 or 1")
        return cls(bits=bits, packed=pack_bits(bits))

    @classmethod
    def from_packed(cls, words, code_bits: int) -> "BinaryCode":
        words = np.ascontiguousarray(words, dtype=np.uint64)
        bits = unpack_bits(words, code_bits)
        if np.any(pack_bits(bits) != words):
            raise FormatError("packed code has nonzero trailing pad bits")
        return cls(bits=bits, packed=words)

    @property
    def length(self) -> int:
        return int(self.bits.shape[0])


def sample_bits(logits: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw {0,1} with P(1) = sigma(logit), elementwise and independently."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NumericError("cannot sample from non-finite logits")
    return (rng.random(logits.shape) < sigmoid(logits)).astype(np.uint8)


def sample_binary(logits, rng: np.random.Generator) -> BinaryCode:
    """Stochastic binarization: bit j ~ Bernoulli(sigma(logits[j]))."""
    return BinaryCode.from_bits(sample_bits(logits, rng))


def st_backward(upstream: np.ndarray, logits: np.ndarray) -> np.ndarray:
    """Straight-through gradient of the Bernoulli layer.

    The sampling step is treated as the identity around the sigmoid, so the
    returned gradient is upstream * sigma'(logits).
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    if upstream.shape != logits.shape:
        raise ShapeError(
            f"upstream shape {upstream.shape} != logits shape {logits.shape}"
        )
    return upstream * sigmoid_prime(logits)


def deterministic_binarize(logits) -> BinaryCode:
    """Threshold binarization: bit j = 1 iff logits[j] >= 0."""
    logits = np.asarray(logits, dtype=np.float64)
    return BinaryCode.from_bits(logits >= 0.0)


def threshold_bits(logits: np.ndarray) -> np.ndarray:
    """Vectorized threshold rule over a (..., L) logit array."""
    return (np.asarray(logits, dtype=np.float64) >= 0.0).astype(np.uint8)


def median_binarize(globals_matrix: np.ndarray) -> list[BinaryCode]:
    """Binarize a set of global logits against per-bit medians.

    Bit j of row i is 1 iff globals[i, j] strictly exceeds the median of
    column j over all rows.
    """
    mat = np.asarray(globals_matrix, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] < 1:
        raise ShapeError("median binarization needs an N x L matrix with N >= 1")
    med = np.median(mat, axis=0)
    bits = (mat > med).astype(np.uint8)
    return [BinaryCode.from_bits(row) for row in bits]


def doc_stream(seed: int, doc_id: int, epoch: int) -> np.random.Generator:
    """Per-document RNG stream keyed by (global seed, doc id, epoch).

    Parallel batch scheduling cannot change results because every document
    owns its stream; draw order inside a document is fixed by the caller.
    """
    return np.random.default_rng(np.random.SeedSequence((int(seed), 3, int(doc_id), int(epoch))))


def write_codes(path, code_bits: int, ids: np.ndarray, words: np.ndarray) -> None:
    """Write packed codes in the DHCB container (little-endian)."""
    ids = np.asarray(ids, dtype=np.uint32)
    words = np.ascontiguousarray(words, dtype=np.uint64)
    nwords = words_per_code(code_bits)
    if words.ndim != 2 or words.shape[1] != nwords or words.shape[0] != ids.shape[0]:
        raise ShapeError("codes array must be (num_docs, words_per_code)")
    with open(path, "wb") as fh:
        fh.write(CODES_MAGIC)
        fh.write(struct.pack("<III", CODES_VERSION, code_bits, ids.shape[0]))
        for doc_id, row in zip(ids, words):
            fh.write(struct.pack("<I", int(doc_id)))
            fh.write(row.astype("<u8").tobytes())


def read_codes(path) -> tuple[int, np.ndarray, np.ndarray]:
    """Read and validate a DHCB file; returns (code_bits, ids, packed words)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != CODES_MAGIC:
        raise FormatError(f"{path}: not a DHCB codes file")
    version, code_bits, num = struct.unpack_from("<III", blob, 4)
    if version != CODES_VERSION:
        raise FormatError(f"{path}: unsupported DHCB version {version}")
    if code_bits < 1:
        raise FormatError(f"{path}: code length must be positive")
    nwords = words_per_code(code_bits)
    record = 4 + 8 * nwords
    if len(blob) != 16 + num * record:
        raise FormatError(f"{path}: payload length disagrees with header")
    ids = np.empty(num, dtype=np.int64)
    words = np.empty((num, nwords), dtype=np.uint64)
    off = 16
    for i in range(num):
        (ids[i],) = struct.unpack_from("<I", blob, off)
        words[i] = np.frombuffer(blob, dtype="<u8", count=nwords, offset=off + 4)
        off += record
    if len(np.unique(ids)) != num:
        raise ConsistencyError(f"{path}: duplicate document ids")
    if code_bits % _WORD_BITS and num:
        tail_mask = ~np.uint64(0) << np.uint64(code_bits % _WORD_BITS)
        if np.any(words[:, -1] & tail_mask):
            raise FormatError(f"{path}: nonzero trailing pad bits")
    return code_bits, ids, words
