import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dhim.binarize import BinaryCode, pack_bits, write_codes
from dhim.errors import ConsistencyError, EvaluationError, ShapeError
from dhim.retrieval import CodeIndex, RetrievalResult, evaluate, hamming, precision_at_k, topk


def random_codes(rng, count, code_bits):
    return rng.integers(0, 2, size=(count, code_bits)).astype(np.uint8)


def make_index(bits, ids=None, labels=None):
    count, code_bits = bits.shape
    return CodeIndex(
        code_bits=code_bits,
        words=pack_bits(bits),
        ids=np.arange(count) if ids is None else np.asarray(ids),
        labels=np.zeros(count, dtype=np.int64) if labels is None else np.asarray(labels),
    )


def bit_loop_distance(a_bits, b_bits):
    """Per-bit loop oracle, no packing involved."""
    total = 0
    for x, y in zip(a_bits, b_bits):
        total += int(x != y)
    return total


class TestHamming:
    def test_identity(self, rng):
        code = BinaryCode.from_bits(random_codes(rng, 1, 37)[0])
        assert hamming(code, code) == 0

    def test_disjoint_nibbles(self):
        a = BinaryCode.from_bits([1, 1, 1, 1, 0, 0, 0, 0])
        b = BinaryCode.from_bits([0, 0, 0, 0, 1, 1, 1, 1])
        assert hamming(a, b) == 8

    def test_against_bit_loop_oracle(self, rng):
        for _ in range(1000):
            a_bits = random_codes(rng, 1, 128)[0]
            b_bits = random_codes(rng, 1, 128)[0]
            got = hamming(BinaryCode.from_bits(a_bits), BinaryCode.from_bits(b_bits))
            assert got == bit_loop_distance(a_bits, b_bits)

    def test_length_mismatch(self, rng):
        with pytest.raises(ShapeError):
            hamming(
                BinaryCode.from_bits(random_codes(rng, 1, 16)[0]),
                BinaryCode.from_bits(random_codes(rng, 1, 32)[0]),
            )

    def test_metric_properties(self):
        # Symmetry, identity of indiscernibles, triangle inequality.
        rng = np.random.default_rng(77)
        for trial in range(10_000):
            code_bits = int(rng.choice([3, 16, 64, 128]))
            a, b, c = (BinaryCode.from_bits(row) for row in random_codes(rng, 3, code_bits))
            dab, dba = hamming(a, b), hamming(b, a)
            dac, dbc = hamming(a, c), hamming(b, c)
            assert dab == dba
            assert (dab == 0) == bool(np.array_equal(a.bits, b.bits))
            assert dac <= dab + dbc


class TestTopK:
    def test_self_hit_at_distance_zero(self, rng):
        bits = random_codes(rng, 5, 16)
        index = make_index(bits)
        res = topk(BinaryCode.from_bits(bits[2]), index, k=1)
        assert res.distances[0] == 0

    def test_small_ordering(self):
        query = BinaryCode.from_bits(np.zeros(8, dtype=np.uint8))
        rows = np.zeros((3, 8), dtype=np.uint8)
        rows[0, :5] = 1  # distance 5
        rows[1, :1] = 1  # distance 1
        rows[2, :3] = 1  # distance 3
        res = topk(query, make_index(rows), k=3)
        assert res.distances.tolist() == [1, 3, 5]
        assert res.ids.tolist() == [1, 2, 0]

    def test_matches_full_sort_oracle(self):
        rng = np.random.default_rng(5)
        for trial in range(20):
            count = int(rng.integers(50, 2000))
            code_bits = int(rng.choice([16, 32, 64, 128]))
            k = int(rng.integers(1, min(count, 150)))
            bits = random_codes(rng, count, code_bits)
            ids = rng.permutation(count * 3)[:count]
            index = make_index(bits, ids=ids)
            q_bits = random_codes(rng, 1, code_bits)[0]
            res = topk(BinaryCode.from_bits(q_bits), index, k=k)
            dists = np.array([bit_loop_distance(q_bits, row) for row in bits])
            order = np.lexsort((ids, dists))[:k]
            assert res.ids.tolist() == [int(ids[i]) for i in order]
            assert res.distances.tolist() == [int(dists[i]) for i in order]

    def test_tie_break_by_ascending_id(self, rng):
        bits = np.zeros((4, 8), dtype=np.uint8)  # all identical -> all ties
        index = make_index(bits, ids=[42, 7, 19, 3])
        res = topk(BinaryCode.from_bits(bits[0]), index, k=4)
        assert res.ids.tolist() == [3, 7, 19, 42]

    def test_k_out_of_range(self, rng):
        index = make_index(random_codes(rng, 4, 8))
        with pytest.raises(ValueError):
            topk(BinaryCode.from_bits(np.zeros(8, dtype=np.uint8)), index, k=5)

    def test_self_exclusion_when_query_in_pool(self, rng):
        bits = random_codes(rng, 6, 16)
        index = make_index(bits)
        res = topk(BinaryCode.from_bits(bits[4]), index, k=5, query_id=4)
        assert 4 not in res.ids.tolist()
        res2 = topk(BinaryCode.from_bits(bits[4]), index, k=5, query_id=999)
        assert 4 in res2.ids.tolist()  # unknown id: nothing excluded

    def test_query_width_mismatch(self, rng):
        index = make_index(random_codes(rng, 4, 16))
        with pytest.raises(ShapeError):
            topk(BinaryCode.from_bits(np.zeros(8, dtype=np.uint8)), index, k=2)


class TestPrecision:
    def test_all_same_label_is_one(self):
        results = [RetrievalResult(query_id=0, ids=np.arange(1, 5), distances=np.zeros(4))]
        labels = {i: 3 for i in range(5)}
        assert precision_at_k(results, labels, k=4) == 1.0

    def test_chance_level_random_labels(self):
        rng = np.random.default_rng(19)
        classes = 4
        labels = {i: int(rng.integers(0, classes)) for i in range(5000)}
        results = []
        for q in range(400):
            picks = rng.choice(5000, size=100, replace=False)
            results.append(RetrievalResult(query_id=int(q), ids=picks, distances=np.arange(100)))
        value = precision_at_k(results, labels, k=100)
        assert abs(value - 1 / classes) < 0.02

    def test_unlabeled_document_rejected(self):
        results = [RetrievalResult(query_id=0, ids=np.array([1]), distances=np.zeros(1))]
        with pytest.raises(EvaluationError):
            precision_at_k(results, {0: 1, 1: -1}, k=1)
        with pytest.raises(EvaluationError):
            precision_at_k(results, {1: 1}, k=1)

    def test_bounded_zero_one(self, rng):
        labels = {i: int(i % 3) for i in range(50)}
        results = [
            RetrievalResult(
                query_id=int(q), ids=rng.choice(50, size=10, replace=False), distances=np.arange(10)
            )
            for q in range(20)
        ]
        assert 0.0 <= precision_at_k(results, labels, k=10) <= 1.0


class TestEvaluate:
    def test_separable_toy_with_self_exclusion(self):
        # pool == queries, k=1: nearest *other* neighbor shares the label.
        bits = np.array(
            [[0, 0, 0, 0], [0, 0, 0, 1], [1, 1, 1, 1], [1, 1, 1, 0]], dtype=np.uint8
        )
        index = make_index(bits, labels=[0, 0, 1, 1])
        report = evaluate(index, index, k=1)
        assert report.precision == 1.0

    def test_chance_level_random_codes(self):
        rng = np.random.default_rng(31)
        pool_bits = random_codes(rng, 4000, 16)
        query_bits = random_codes(rng, 400, 16)
        labels = [int(i % 4) for i in range(4000)]
        pool = make_index(pool_bits, labels=labels)
        queries = make_index(query_bits, ids=np.arange(10_000, 10_400),
                             labels=[int(i % 4) for i in range(400)])
        report = evaluate(queries, pool, k=100)
        assert abs(report.precision - 0.25) < 0.02

    def test_report_lines_format(self, rng):
        bits = random_codes(rng, 30, 16)
        index = make_index(bits, labels=[i % 2 for i in range(30)])
        report = evaluate(index, index, k=5)
        lines = report.lines()
        assert lines[0].startswith("precision@5=")
        assert f"queries={30}" in lines
        assert any(line.startswith("class_0_precision=") for line in lines)
        value = float(lines[0].split("=")[1])
        assert 0.0 <= value <= 1.0

    def test_label_override_argument(self, rng):
        bits = random_codes(rng, 10, 8)
        index = make_index(bits, labels=[-1] * 10)  # index carries no labels
        labels = {i: 0 for i in range(10)}
        report = evaluate(index, index, labels=labels, k=3)
        assert report.precision == 1.0

    def test_published_scale_completes_quickly(self, rng):
        # 1152 queries x 9221 pool at 128 bits: the full scan protocol at the
        # largest benchmark shape must finish in about a second.
        pool = make_index(random_codes(rng, 9221, 128), labels=[i % 26 for i in range(9221)])
        queries = make_index(
            random_codes(rng, 1152, 128),
            ids=np.arange(20_000, 21_152),
            labels=[i % 26 for i in range(1152)],
        )
        evaluate(queries, pool, k=100)  # kernel warmup
        start = time.perf_counter()
        evaluate(queries, pool, k=100)
        assert time.perf_counter() - start < 1.0

    def test_code_length_mismatch(self, rng):
        a = make_index(random_codes(rng, 5, 16))
        b = make_index(random_codes(rng, 5, 32))
        with pytest.raises(ShapeError):
            evaluate(a, b, k=1)


class TestCodeIndex:
    def test_duplicate_ids_rejected(self, rng):
        bits = random_codes(rng, 3, 8)
        with pytest.raises(ConsistencyError):
            make_index(bits, ids=[1, 1, 2])

    def test_from_file_with_labels(self, tmp_path, rng):
        bits = random_codes(rng, 4, 16)
        write_codes(tmp_path / "c.dhcb", 16, np.arange(4), pack_bits(bits))
        index = CodeIndex.from_file(tmp_path / "c.dhcb", labels={0: 5, 1: 6})
        assert index.label_of(0) == 5
        assert index.label_of(3) == -1  # unknown ids default to unlabeled
        assert len(index) == 4

    @given(st.integers(min_value=1, max_value=127))
    @settings(max_examples=30, deadline=None)
    def test_pad_bits_never_count(self, code_bits):
        rng = np.random.default_rng(code_bits)
        ones = BinaryCode.from_bits(np.ones(code_bits, dtype=np.uint8))
        zeros = BinaryCode.from_bits(np.zeros(code_bits, dtype=np.uint8))
        assert hamming(ones, zeros) == code_bits
