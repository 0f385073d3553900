"""Corpus ingestion: token-embedding sequences, splits, and the DHEM container.

A corpus is described by a three-line manifest (train=/val=/test=) pointing at
binary embedding files. Labels ride along for evaluation but are deliberately
absent from every type the training path consumes.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConsistencyError, FormatError, ManifestError

log = logging.getLogger("dhim.corpus")

EMBED_MAGIC = b"DHEM"
EMBED_VERSION = 1

# Ingestion cap on document length; matches the context window of the
# pretrained exporters that produce DHEM files. Longer documents are
# truncated with a warning.
MAX_TOKENS = 512

SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class Document:
    """Evaluation-side view of one document; training never sees `label`."""

    id: int
    label: int  # class id, -1 if unknown
    length: int  # token count


@dataclass(frozen=True)
class DocEmbedding:
    """A document as a (length x dim) token matrix plus one CLS vector."""

    doc_id: int
    tokens: np.ndarray  # (length, dim) float32
    cls: np.ndarray     # (dim,) float32

    @property
    def length(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def dim(self) -> int:
        return int(self.tokens.shape[1])


@dataclass
class Corpus:
    """Three disjoint splits plus an id -> embedding map of shared dimension."""

    train: list[Document]
    val: list[Document]
    test: list[Document]
    embeddings: dict[int, DocEmbedding]
    num_classes: int
    dim: int

    def split(self, name: str) -> list[Document]:
        if name not in SPLIT_NAMES:
            raise ValueError(f"unknown split {name!r}; expected one of {SPLIT_NAMES}")
        return getattr(self, name)

    def documents(self):
        for name in SPLIT_NAMES:
            yield from getattr(self, name)

    def labels(self) -> dict[int, int]:
        return {doc.id: doc.label for doc in self.documents()}


@dataclass(frozen=True)
class EmbeddingTable:
    """A deterministic vocab_size x dim lookup table of word vectors."""

    vocab_size: int
    dim: int
    rows: np.ndarray  # (vocab_size, dim) float32
    seed: int


def build_random_embedding_table(vocab_size: int, dim: int, seed: int) -> EmbeddingTable:
    """I.i.d. zero-mean entries with scale 1/sqrt(dim); same seed, same table."""
    if vocab_size < 1 or dim < 1:
        raise ValueError("vocab_size and dim must be positive")
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0xE0B)))
    rows = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(vocab_size, dim)).astype(np.float32)
    rows.flags.writeable = False
    return EmbeddingTable(vocab_size=vocab_size, dim=dim, rows=rows, seed=int(seed))


def embed_tokens(table: EmbeddingTable, token_ids, doc_id: int = 0) -> DocEmbedding:
    """Look up token rows; the CLS surrogate is the mean token embedding.

    The mean stands in for a pretrained CLS vector when none exists (random
    or static word-vector configurations), keeping the semantic regularizer
    well-defined.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError("token_ids must be a nonempty sequence")
    if np.any(ids < 0) or np.any(ids >= table.vocab_size):
        raise IndexError("token id out of range for embedding table")
    tokens = table.rows[ids].astype(np.float32)
    cls = tokens.astype(np.float64).mean(axis=0).astype(np.float32)
    return DocEmbedding(doc_id=doc_id, tokens=tokens, cls=cls)


# ---------------------------------------------------------------------------
# DHEM binary container
# ---------------------------------------------------------------------------

def write_embedding_file(path, records) -> None:
    """Write documents as a DHEM file.

    records: iterable of (doc_id, label, tokens (T x d) float32, cls (d,) float32).
    """
    records = list(records)
    if not records:
        raise ValueError("cannot write an empty embedding file")
    dim = int(np.asarray(records[0][2]).shape[1])
    with open(path, "wb") as fh:
        fh.write(EMBED_MAGIC)
        fh.write(struct.pack("<III", EMBED_VERSION, dim, len(records)))
        for doc_id, label, tokens, cls in records:
            tokens = np.ascontiguousarray(tokens, dtype="<f4")
            cls = np.ascontiguousarray(cls, dtype="<f4")
            if tokens.ndim != 2 or tokens.shape[1] != dim or cls.shape != (dim,):
                raise ValueError(f"doc {doc_id}: inconsistent embedding dimension")
            fh.write(struct.pack("<IiI", int(doc_id), int(label), tokens.shape[0]))
            fh.write(cls.tobytes())
            fh.write(tokens.tobytes())


def read_embedding_file(path) -> tuple[int, list[tuple[int, int, np.ndarray, np.ndarray]]]:
    """Read and fully validate one DHEM file; returns (dim, records)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != EMBED_MAGIC:
        raise FormatError(f"{path}: not a DHEM embedding file")
    version, dim, num_docs = struct.unpack_from("<III", blob, 4)
    if version != EMBED_VERSION:
        raise FormatError(f"{path}: unsupported DHEM version {version}")
    if dim < 1:
        raise FormatError(f"{path}: embedding dimension must be positive")
    records = []
    off = 16
    truncated = 0
    for _ in range(num_docs):
        if off + 12 > len(blob):
            raise FormatError(f"{path}: truncated document header")
        doc_id, label, length = struct.unpack_from("<IiI", blob, off)
        off += 12
        if length < 1:
            raise FormatError(f"{path}: doc {doc_id} declares zero tokens")
        need = 4 * dim * (length + 1)
        if off + need > len(blob):
            raise FormatError(f"{path}: doc {doc_id} payload shorter than declared")
        cls = np.frombuffer(blob, dtype="<f4", count=dim, offset=off).copy()
        off += 4 * dim
        tokens = np.frombuffer(blob, dtype="<f4", count=length * dim, offset=off)
        tokens = tokens.reshape(length, dim).copy()
        off += 4 * dim * length
        if not np.all(np.isfinite(cls)) or not np.all(np.isfinite(tokens)):
            raise FormatError(f"{path}: doc {doc_id} contains non-finite values")
        if length > MAX_TOKENS:
            tokens = tokens[:MAX_TOKENS]
            truncated += 1
        tokens.flags.writeable = False
        cls.flags.writeable = False
        records.append((doc_id, label, tokens, cls))
    if off != len(blob):
        raise FormatError(f"{path}: {len(blob) - off} trailing bytes after last document")
    if truncated:
        log.warning("%s: truncated %d documents to %d tokens", path, truncated, MAX_TOKENS)
    return dim, records


def read_labels(path) -> dict[int, int]:
    """Collect id -> label from a DHEM file without materializing matrices."""
    labels: dict[int, int] = {}
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 16 or head[:4] != EMBED_MAGIC:
            raise FormatError(f"{path}: not a DHEM embedding file")
        version, dim, num_docs = struct.unpack_from("<III", head, 4)
        if version != EMBED_VERSION:
            raise FormatError(f"{path}: unsupported DHEM version {version}")
        for _ in range(num_docs):
            rec = fh.read(12)
            if len(rec) < 12:
                raise FormatError(f"{path}: truncated document header")
            doc_id, label, length = struct.unpack_from("<IiI", rec, 0)
            labels[doc_id] = label
            fh.seek(4 * dim * (length + 1), 1)
    return labels


# ---------------------------------------------------------------------------
# Manifest and corpus assembly
# ---------------------------------------------------------------------------

def parse_manifest(path) -> dict[str, Path]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    entries: dict[str, Path] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or key not in SPLIT_NAMES:
            raise ManifestError(f"{path}:{lineno}: expected '<split>=<path>', got {raw!r}")
        entries[key] = (path.parent / value.strip()).resolve()
    missing = [name for name in SPLIT_NAMES if name not in entries]
    if missing:
        raise ManifestError(f"{path}: missing split entries: {', '.join(missing)}")
    return entries


def write_manifest(path, train, val, test) -> Path:
    path = Path(path)
    base = path.parent

    def rel(p):
        p = Path(p)
        try:
            return p.relative_to(base)
        except ValueError:
            return p

    path.write_text(
        f"train={rel(train)}\nval={rel(val)}\ntest={rel(test)}\n", encoding="utf-8"
    )
    return path


def load_corpus(manifest_path) -> Corpus:
    """Load and validate a corpus from a manifest of DHEM files."""
    entries = parse_manifest(manifest_path)
    splits: dict[str, list[Document]] = {}
    embeddings: dict[int, DocEmbedding] = {}
    dim = None
    for name in SPLIT_NAMES:
        split_path = entries[name]
        if not split_path.exists():
            raise ManifestError(f"split {name!r} points at missing file {split_path}")
        file_dim, records = read_embedding_file(split_path)
        if dim is None:
            dim = file_dim
        elif file_dim != dim:
            raise ConsistencyError(
                f"{split_path}: dimension {file_dim} disagrees with {dim} from earlier splits"
            )
        docs = []
        for doc_id, label, tokens, cls in records:
            if doc_id in embeddings:
                raise ConsistencyError(f"duplicate document id {doc_id}")
            embeddings[doc_id] = DocEmbedding(doc_id=doc_id, tokens=tokens, cls=cls)
            docs.append(Document(id=doc_id, label=label, length=tokens.shape[0]))
        splits[name] = docs
    labels = {doc.label for docs in splits.values() for doc in docs if doc.label >= 0}
    return Corpus(
        train=splits["train"],
        val=splits["val"],
        test=splits["test"],
        embeddings=embeddings,
        num_classes=len(labels),
        dim=int(dim),
    )


def write_corpus(corpus: Corpus, out_dir, stem: str = "corpus") -> Path:
    """Write a corpus as three DHEM files plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name in SPLIT_NAMES:
        docs = corpus.split(name)
        if not docs:
            raise ValueError(f"cannot write empty split {name!r}")
        records = [
            (d.id, d.label, corpus.embeddings[d.id].tokens, corpus.embeddings[d.id].cls)
            for d in docs
        ]
        paths[name] = out_dir / f"{stem}.{name}.dhem"
        write_embedding_file(paths[name], records)
    return write_manifest(out_dir / f"{stem}.manifest.txt", **paths)


# ---------------------------------------------------------------------------
# Token-id ingestion (random-table featurization)
# ---------------------------------------------------------------------------

def read_token_corpus(path) -> list[tuple[int, int, str, list[int]]]:
    """Parse a TSV of `id<TAB>label<TAB>split<TAB>space-separated token ids`."""
    rows = []
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 tab-separated fields")
            try:
                doc_id, label = int(parts[0]), int(parts[1])
                token_ids = [int(t) for t in parts[3].split()]
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            split = parts[2].strip()
            if split not in SPLIT_NAMES:
                raise FormatError(f"{path}:{lineno}: unknown split {split!r}")
            if doc_id in seen:
                raise ConsistencyError(f"{path}:{lineno}: duplicate document id {doc_id}")
            if not token_ids:
                raise FormatError(f"{path}:{lineno}: document has no tokens")
            seen.add(doc_id)
            rows.append((doc_id, label, split, token_ids))
    return rows


def ingest_random_corpus(input_path, vocab_size: int, dim: int, seed: int, out_dir) -> Path:
    """Featurize a token-id corpus with a random table and write DHEM splits."""
    rows = read_token_corpus(input_path)
    table = build_random_embedding_table(vocab_size, dim, seed)
    by_split: dict[str, list] = {name: [] for name in SPLIT_NAMES}
    for doc_id, label, split, token_ids in rows:
        if len(token_ids) > MAX_TOKENS:
            log.warning("doc %d: truncating %d tokens to %d", doc_id, len(token_ids), MAX_TOKENS)
            token_ids = token_ids[:MAX_TOKENS]
        emb = embed_tokens(table, token_ids, doc_id=doc_id)
        by_split[split].append((doc_id, label, emb.tokens, emb.cls))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name in SPLIT_NAMES:
        if not by_split[name]:
            raise ManifestError(f"input corpus has no documents in split {name!r}")
        paths[name] = out_dir / f"corpus.{name}.dhem"
        write_embedding_file(paths[name], by_split[name])
    return write_manifest(out_dir / "corpus.manifest.txt", **paths)
