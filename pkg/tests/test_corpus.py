import struct

import numpy as np
import pytest

from dhim.corpus import (
    MAX_TOKENS,
    build_random_embedding_table,
    embed_tokens,
    ingest_random_corpus,
    load_corpus,
    parse_manifest,
    read_embedding_file,
    read_labels,
    write_corpus,
    write_embedding_file,
    write_manifest,
)
from dhim.errors import ConsistencyError, FormatError, ManifestError
from dhim.synth import make_cluster_corpus


def _write_split(path, docs, dim=4, start_id=0, rng=None):
    rng = rng or np.random.default_rng(0)
    records = []
    for i in range(docs):
        length = int(rng.integers(1, 6))
        records.append(
            (
                start_id + i,
                int(rng.integers(0, 3)),
                rng.normal(size=(length, dim)).astype(np.float32),
                rng.normal(size=dim).astype(np.float32),
            )
        )
    write_embedding_file(path, records)
    return records


@pytest.fixture
def small_manifest(tmp_path):
    rng = np.random.default_rng(5)
    _write_split(tmp_path / "train.dhem", 8, start_id=0, rng=rng)
    _write_split(tmp_path / "val.dhem", 3, start_id=100, rng=rng)
    _write_split(tmp_path / "test.dhem", 3, start_id=200, rng=rng)
    return write_manifest(
        tmp_path / "m.txt",
        tmp_path / "train.dhem",
        tmp_path / "val.dhem",
        tmp_path / "test.dhem",
    )


class TestEmbeddingFile:
    def test_roundtrip_bit_exact(self, tmp_path, rng):
        records = _write_split(tmp_path / "a.dhem", 5, rng=rng)
        dim, loaded = read_embedding_file(tmp_path / "a.dhem")
        assert dim == 4
        for (i, lab, tok, cls), (ri, rlab, rtok, rcls) in zip(records, loaded):
            assert (i, lab) == (ri, rlab)
            assert np.array_equal(tok, rtok)
            assert np.array_equal(cls, rcls)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad.dhem").write_bytes(b"XXXX" + b"\0" * 32)
        with pytest.raises(FormatError):
            read_embedding_file(tmp_path / "bad.dhem")

    def test_bad_version(self, tmp_path):
        (tmp_path / "bad.dhem").write_bytes(b"DHEM" + struct.pack("<III", 9, 4, 0))
        with pytest.raises(FormatError):
            read_embedding_file(tmp_path / "bad.dhem")

    def test_truncation_fuzz(self, tmp_path):
        # Any file cut short of its declared payload must be rejected.
        _write_split(tmp_path / "a.dhem", 4)
        blob = (tmp_path / "a.dhem").read_bytes()
        rng = np.random.default_rng(1)
        for cut in rng.integers(17, len(blob) - 1, size=25):
            (tmp_path / "cut.dhem").write_bytes(blob[: int(cut)])
            with pytest.raises(FormatError):
                read_embedding_file(tmp_path / "cut.dhem")

    def test_trailing_garbage(self, tmp_path):
        _write_split(tmp_path / "a.dhem", 2)
        blob = (tmp_path / "a.dhem").read_bytes()
        (tmp_path / "a.dhem").write_bytes(blob + b"\x01\x02")
        with pytest.raises(FormatError):
            read_embedding_file(tmp_path / "a.dhem")

    def test_nonfinite_rejected(self, tmp_path):
        write_embedding_file(
            tmp_path / "a.dhem",
            [(0, 0, np.full((2, 3), np.nan, dtype=np.float32), np.zeros(3, dtype=np.float32))],
        )
        with pytest.raises(FormatError):
            read_embedding_file(tmp_path / "a.dhem")

    def test_zero_length_doc_rejected(self, tmp_path):
        blob = b"DHEM" + struct.pack("<III", 1, 2, 1) + struct.pack("<IiI", 0, 0, 0)
        blob += struct.pack("<2f", 0.0, 0.0)
        (tmp_path / "a.dhem").write_bytes(blob)
        with pytest.raises(FormatError):
            read_embedding_file(tmp_path / "a.dhem")

    def test_long_document_truncated_with_warning(self, tmp_path, caplog):
        tokens = np.zeros((MAX_TOKENS + 10, 2), dtype=np.float32)
        write_embedding_file(tmp_path / "a.dhem", [(0, 0, tokens, np.zeros(2, dtype=np.float32))])
        with caplog.at_level("WARNING"):
            _, records = read_embedding_file(tmp_path / "a.dhem")
        assert records[0][2].shape[0] == MAX_TOKENS
        assert any("truncated" in r.message for r in caplog.records)

    def test_read_labels_matches_full_read(self, tmp_path):
        records = _write_split(tmp_path / "a.dhem", 6)
        labels = read_labels(tmp_path / "a.dhem")
        assert labels == {i: lab for i, lab, _, _ in records}


class TestManifest:
    def test_missing_split(self, tmp_path):
        (tmp_path / "m.txt").write_text("train=a.dhem\nval=b.dhem\n")
        with pytest.raises(ManifestError):
            parse_manifest(tmp_path / "m.txt")

    def test_malformed_line(self, tmp_path):
        (tmp_path / "m.txt").write_text("train=a.dhem\nval=b.dhem\ntest c.dhem\n")
        with pytest.raises(ManifestError):
            parse_manifest(tmp_path / "m.txt")

    def test_paths_resolve_relative_to_manifest(self, small_manifest):
        entries = parse_manifest(small_manifest)
        assert all(p.exists() for p in entries.values())


class TestLoadCorpus:
    def test_split_sizes_and_classes_from_files(self, small_manifest):
        corpus = load_corpus(small_manifest)
        assert (len(corpus.train), len(corpus.val), len(corpus.test)) == (8, 3, 3)
        assert corpus.dim == 4
        assert corpus.num_classes == 3
        assert all(doc.id in corpus.embeddings for doc in corpus.documents())

    def test_table_scale_shapes(self, tmp_path):
        # Split sizes propagate straight from file headers; exercised here at
        # the published NYT shape (9221/1154/1152 docs, 26 classes).
        rng = np.random.default_rng(0)
        sizes = {"train": 9221, "val": 1154, "test": 1152}
        offset = 0
        for name, count in sizes.items():
            records = [
                (
                    offset + i,
                    int(i % 26),
                    rng.normal(size=(2, 3)).astype(np.float32),
                    rng.normal(size=3).astype(np.float32),
                )
                for i in range(count)
            ]
            write_embedding_file(tmp_path / f"{name}.dhem", records)
            offset += count
        manifest = write_manifest(
            tmp_path / "m.txt",
            tmp_path / "train.dhem",
            tmp_path / "val.dhem",
            tmp_path / "test.dhem",
        )
        corpus = load_corpus(manifest)
        assert (len(corpus.train), len(corpus.val), len(corpus.test)) == (9221, 1154, 1152)
        assert corpus.num_classes == 26

    def test_duplicate_id_across_splits(self, tmp_path):
        _write_split(tmp_path / "train.dhem", 2, start_id=0)
        _write_split(tmp_path / "val.dhem", 2, start_id=1)  # id 1 collides
        _write_split(tmp_path / "test.dhem", 2, start_id=50)
        manifest = write_manifest(
            tmp_path / "m.txt",
            tmp_path / "train.dhem",
            tmp_path / "val.dhem",
            tmp_path / "test.dhem",
        )
        with pytest.raises(ConsistencyError):
            load_corpus(manifest)

    def test_dimension_mismatch_across_splits(self, tmp_path):
        _write_split(tmp_path / "train.dhem", 2, dim=4, start_id=0)
        _write_split(tmp_path / "val.dhem", 2, dim=4, start_id=10)
        _write_split(tmp_path / "test.dhem", 2, dim=5, start_id=20)
        manifest = write_manifest(
            tmp_path / "m.txt",
            tmp_path / "train.dhem",
            tmp_path / "val.dhem",
            tmp_path / "test.dhem",
        )
        with pytest.raises(ConsistencyError):
            load_corpus(manifest)

    def test_corpus_write_load_roundtrip(self, tmp_path):
        corpus = make_cluster_corpus(num_docs=30, num_classes=3, dim=6, doc_len=4, seed=2)
        manifest = write_corpus(corpus, tmp_path)
        loaded = load_corpus(manifest)
        assert loaded.num_classes == corpus.num_classes
        for doc in corpus.documents():
            assert np.array_equal(
                loaded.embeddings[doc.id].tokens, corpus.embeddings[doc.id].tokens
            )
            assert np.array_equal(loaded.embeddings[doc.id].cls, corpus.embeddings[doc.id].cls)


class TestEmbeddingTable:
    def test_determinism(self):
        a = build_random_embedding_table(1000, 64, seed=7)
        b = build_random_embedding_table(1000, 64, seed=7)
        assert np.array_equal(a.rows, b.rows)

    def test_seed_sensitivity(self):
        a = build_random_embedding_table(1000, 64, seed=7)
        b = build_random_embedding_table(1000, 64, seed=8)
        assert np.any(a.rows != b.rows)

    def test_zero_mean(self):
        table = build_random_embedding_table(50_000, 64, seed=1)
        assert abs(float(table.rows.astype(np.float64).mean())) < 0.01

    def test_scale(self):
        table = build_random_embedding_table(20_000, 64, seed=3)
        assert abs(float(table.rows.astype(np.float64).std()) - 1 / 8) < 0.005

    def test_bad_arguments(self):
        with pytest.raises(ValueError):
            build_random_embedding_table(0, 4, seed=0)
        with pytest.raises(ValueError):
            build_random_embedding_table(4, 0, seed=0)


class TestEmbedTokens:
    def test_constant_sequence(self):
        table = build_random_embedding_table(10, 4, seed=0)
        emb = embed_tokens(table, [3, 3, 3])
        assert np.all(emb.tokens == table.rows[3])
        np.testing.assert_allclose(emb.cls, table.rows[3], atol=1e-7)

    def test_singleton(self):
        table = build_random_embedding_table(10, 4, seed=0)
        emb = embed_tokens(table, [0])
        assert emb.tokens.shape == (1, 4)
        assert np.array_equal(emb.tokens[0], emb.cls)

    def test_pairwise_mean(self):
        table = build_random_embedding_table(10, 4, seed=0)
        emb = embed_tokens(table, [1, 2])
        expected = (
            (table.rows[1].astype(np.float64) + table.rows[2].astype(np.float64)) / 2
        ).astype(np.float32)
        assert np.array_equal(emb.cls, expected)

    def test_purity(self):
        table = build_random_embedding_table(10, 4, seed=0)
        a = embed_tokens(table, [1, 2, 3])
        b = embed_tokens(table, [1, 2, 3])
        assert np.array_equal(a.tokens, b.tokens) and np.array_equal(a.cls, b.cls)

    def test_out_of_range(self):
        table = build_random_embedding_table(10, 4, seed=0)
        with pytest.raises(IndexError):
            embed_tokens(table, [0, 10])

    def test_empty_sequence(self):
        table = build_random_embedding_table(10, 4, seed=0)
        with pytest.raises(ValueError):
            embed_tokens(table, [])


class TestIngestRandom:
    def test_end_to_end(self, tmp_path):
        lines = []
        doc_id = 0
        for split, count in (("train", 6), ("val", 2), ("test", 2)):
            for _ in range(count):
                ids = " ".join(str((doc_id * 7 + k) % 50) for k in range(5))
                lines.append(f"{doc_id}\t{doc_id % 2}\t{split}\t{ids}")
                doc_id += 1
        (tmp_path / "tokens.tsv").write_text("\n".join(lines) + "\n")
        manifest = ingest_random_corpus(tmp_path / "tokens.tsv", 50, 8, seed=4, out_dir=tmp_path)
        corpus = load_corpus(manifest)
        assert (len(corpus.train), len(corpus.val), len(corpus.test)) == (6, 2, 2)
        assert corpus.dim == 8

    def test_duplicate_id_rejected(self, tmp_path):
        (tmp_path / "tokens.tsv").write_text("1\t0\ttrain\t1 2\n1\t0\tval\t3\n")
        with pytest.raises(ConsistencyError):
            ingest_random_corpus(tmp_path / "tokens.tsv", 10, 4, seed=0, out_dir=tmp_path)
