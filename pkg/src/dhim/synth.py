"""Synthetic labeled corpora for smoke tests and sweeps.

Documents are drawn around class centers so retrieval quality has a known
ceiling and a known chance level (1 / num_classes).
"""
from __future__ import annotations

import numpy as np

from .corpus import Corpus, DocEmbedding, Document


def make_cluster_corpus(
    num_docs: int = 2000,
    num_classes: int = 8,
    dim: int = 64,
    doc_len: int = 32,
    noise: float = 0.5,
    seed: int = 0,
    split_fracs: tuple[float, float, float] = (0.8, 0.1, 0.1),
    token_signal: float = 1.0,
    cls_mode: str = "token_mean",
    cls_noise: float = 0.0,
    cls_scale: float = 1.0,
) -> Corpus:
    """Build a balanced clustered corpus.

    Each class owns a random center; every token is token_signal * center
    plus Gaussian noise. The CLS vector is either the document's mean token
    (the surrogate used for non-pretrained features) or cls_scale times the
    clean center plus cls_noise, which decouples the document-level signal
    from the token-level one.
    """
    if num_docs < num_classes:
        raise ValueError("need at least one document per class")
    if cls_mode not in ("token_mean", "center"):
        raise ValueError(f"unknown cls_mode {cls_mode!r}")
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x5E7)))
    centers = rng.normal(0.0, 1.0, size=(num_classes, dim))

    embeddings: dict[int, DocEmbedding] = {}
    docs: list[Document] = []
    for doc_id in range(num_docs):
        label = doc_id % num_classes
        tokens64 = token_signal * centers[label] + noise * rng.normal(size=(doc_len, dim))
        tokens = tokens64.astype(np.float32)
        if cls_mode == "token_mean":
            cls = tokens.astype(np.float64).mean(axis=0).astype(np.float32)
        else:
            cls = (
                cls_scale * centers[label] + cls_noise * rng.normal(size=dim)
            ).astype(np.float32)
        tokens.flags.writeable = False
        cls.flags.writeable = False
        embeddings[doc_id] = DocEmbedding(doc_id=doc_id, tokens=tokens, cls=cls)
        docs.append(Document(id=doc_id, label=label, length=doc_len))

    order = rng.permutation(num_docs)
    n_train = int(round(split_fracs[0] * num_docs))
    n_val = int(round(split_fracs[1] * num_docs))
    train_ids = set(order[:n_train])
    val_ids = set(order[n_train : n_train + n_val])
    return Corpus(
        train=[d for d in docs if d.id in train_ids],
        val=[d for d in docs if d.id in val_ids],
        test=[d for d in docs if d.id not in train_ids and d.id not in val_ids],
        embeddings=embeddings,
        num_classes=num_classes,
        dim=dim,
    )
