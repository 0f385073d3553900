"""Shared fixtures. Thread caps are set before numpy loads so timing-sensitive
acceptance criteria run single-threaded and reductions stay deterministic."""
import os

for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from dhim.synth import make_cluster_corpus


@pytest.fixture(scope="session")
def p1_corpus():
    """The synthetic acceptance corpus: 2000 docs, 8 balanced clusters,
    d=64, T=32, token noise 0.5, split 1600/200/200."""
    corpus = make_cluster_corpus(
        num_docs=2000, num_classes=8, dim=64, doc_len=32, noise=0.5, seed=11
    )
    assert (len(corpus.train), len(corpus.val), len(corpus.test)) == (1600, 200, 200)
    return corpus


@pytest.fixture(scope="session")
def tiny_corpus():
    """Small corpus for fast trainer-level tests."""
    return make_cluster_corpus(
        num_docs=120, num_classes=4, dim=12, doc_len=6, noise=0.5, seed=7
    )


@pytest.fixture
def rng():
    return np.random.default_rng(42)
