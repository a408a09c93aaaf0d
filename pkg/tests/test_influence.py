import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nncift.datasets import DatasetPair, EmbeddingMatrix, partition, quadrant_pairs
from nncift.errors import (
    DataValidationError,
    FileFormatError,
    PayloadLengthError,
    RecordNotFoundError,
)
from nncift.influence import (
    InfluenceMatrix,
    ModelScaleSpec,
    PointwiseScores,
    ScaleEntry,
    compute_influence,
    compute_pointwise,
    cosine,
    delift_pair,
    delift_se_pair,
    distance_from_logprobs,
    less_pair,
    load_influence,
    random_project,
    save_influence,
    selectit_point,
)
from nncift.probes import CostLedger, FileProvider, SyntheticProvider


def matrix_of(rows, dim=3, seed=0):
    rng = np.random.default_rng(seed)
    return EmbeddingMatrix(rows=rng.standard_normal((rows, dim)).astype(np.float32))


def text_pair(m, n, dim=3, seed=0, gradients=False):
    rng = np.random.default_rng(seed)
    kwargs = {}
    if gradients:
        kwargs["fine_tune_gradients"] = EmbeddingMatrix(
            rows=rng.standard_normal((m, dim)).astype(np.float32)
        )
        kwargs["target_gradients"] = EmbeddingMatrix(
            rows=rng.standard_normal((n, dim)).astype(np.float32)
        )
    return DatasetPair(
        fine_tune=EmbeddingMatrix(rows=rng.standard_normal((m, dim)).astype(np.float32)),
        target=EmbeddingMatrix(rows=rng.standard_normal((n, dim)).astype(np.float32)),
        fine_tune_texts={i: (f"q{i}", f"answer {i}") for i in range(m)},
        target_texts={j: (f"tq{j}", f"target answer {j}") for j in range(n)},
        **kwargs,
    )


def write_records(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


class TestDistance:
    def test_probability_one_sequence(self):
        assert distance_from_logprobs([0.0, 0.0, 0.0]) == 0.0

    def test_half(self):
        assert distance_from_logprobs([math.log(0.5), math.log(0.5)]) == 0.5

    def test_quarter(self):
        assert distance_from_logprobs([math.log(0.25)]) == 0.75

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            distance_from_logprobs([])

    def test_positive_rejected(self):
        with pytest.raises(DataValidationError):
            distance_from_logprobs([0.1])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-50.0, 0.0), min_size=1, max_size=20))
    def test_range(self, lps):
        assert 0.0 <= distance_from_logprobs(lps) <= 1.0


class TestCosine:
    def test_equal_exact(self):
        v = np.random.default_rng(0).standard_normal(50)
        assert cosine(v, v) == 1.0

    def test_negated_exact(self):
        v = np.random.default_rng(1).standard_normal(50)
        assert cosine(v, -v) == -1.0

    def test_orthogonal_exact(self):
        assert cosine([1.0, 0.0], [0.0, 1.0]) == 0.0

    def test_scale_invariance_exact(self):
        v = np.array([1.0, 2.0, 2.0])
        assert cosine(v, 3 * v) == 1.0

    def test_analytic_45_degrees(self):
        s = math.sqrt(2) / 2
        assert cosine([1.0, 0.0], [s, s]) == pytest.approx(math.sqrt(2) / 2, abs=1e-15)

    def test_zero_norm_rejected(self):
        with pytest.raises(DataValidationError):
            cosine([0.0, 0.0], [1.0, 0.0])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            cosine([1.0], [1.0, 2.0])

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 16))
    def test_symmetry_and_range(self, seed, dim):
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal(dim), rng.standard_normal(dim)
        c = cosine(a, b)
        assert c == cosine(b, a)
        assert abs(c) <= 1.0 + 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.01, 100.0))
    def test_positive_rescale(self, seed, scale):
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal(8), rng.standard_normal(8)
        assert cosine(a * scale, b) == pytest.approx(cosine(a, b), abs=1e-12)


class TestDelift:
    def test_identical_responses_cancel(self, tmp_path):
        path = tmp_path / "records.jsonl"
        write_records(path, [
            {"key": "0", "kind": "target_logprobs", "values": [-0.7, -0.3]},
            {"key": "0:0", "kind": "target_logprobs", "values": [-0.7, -0.3]},
        ])
        pair = text_pair(1, 1)
        value = delift_pair(0, 0, pair, FileProvider(path), CostLedger())
        assert value == 0.0

    def test_helpful_context_positive(self, tmp_path):
        path = tmp_path / "records.jsonl"
        write_records(path, [
            {"key": "1", "kind": "target_logprobs", "values": [math.log(0.5)]},
            {"key": "0:1", "kind": "target_logprobs", "values": [math.log(0.8)]},
        ])
        pair = text_pair(1, 2)
        value = delift_pair(0, 1, pair, FileProvider(path), CostLedger())
        assert value == pytest.approx(0.3, abs=1e-12)

    def test_harmful_context_negative(self, tmp_path):
        path = tmp_path / "records.jsonl"
        write_records(path, [
            {"key": "0", "kind": "target_logprobs", "values": [math.log(0.9)]},
            {"key": "0:0", "kind": "target_logprobs", "values": [math.log(0.1)]},
        ])
        pair = text_pair(1, 1)
        value = delift_pair(0, 0, pair, FileProvider(path), CostLedger())
        assert value == pytest.approx(-0.8, abs=1e-12)

    def test_cache_avoids_reprobing_context_free_term(self):
        pair = text_pair(2, 1)
        provider = SyntheticProvider(seed=0)
        ledger = CostLedger()
        cache = {}
        delift_pair(0, 0, pair, provider, ledger, cache)
        delift_pair(1, 0, pair, provider, ledger, cache)
        # 2 context calls + 1 cached context-free call
        assert ledger.forward_calls == 3

    def test_cache_changes_no_value(self):
        pair = text_pair(10, 5)
        provider = SyntheticProvider(seed=3)
        rng = np.random.default_rng(7)
        for _ in range(50):
            i = int(rng.integers(0, 10))
            j = int(rng.integers(0, 5))
            cached = delift_pair(i, j, pair, provider, CostLedger(), {})
            uncached = delift_pair(i, j, pair, provider, CostLedger(), None)
            assert cached == uncached

    def test_bounded(self):
        pair = text_pair(4, 4)
        provider = SyntheticProvider(seed=1)
        for i in range(4):
            for j in range(4):
                assert abs(delift_pair(i, j, pair, provider, CostLedger())) <= 1.0


class TestCosinePairOps:
    def test_delift_se_identical_rows(self):
        emb = matrix_of(2)
        pair = DatasetPair(fine_tune=emb, target=emb)
        assert delift_se_pair(0, 0, pair) == 1.0

    def test_delift_se_analytic(self):
        f = EmbeddingMatrix(rows=np.array([[1.0, 0.0]], dtype=np.float32))
        s = math.sqrt(2) / 2
        t = EmbeddingMatrix(rows=np.array([[s, s]], dtype=np.float32))
        pair = DatasetPair(fine_tune=f, target=t)
        assert delift_se_pair(0, 0, pair) == pytest.approx(s, abs=1e-7)

    def test_less_pair_poles(self):
        g = np.array([[1.0, 2.0, 2.0], [-1.0, -2.0, -2.0]], dtype=np.float32)
        pair = DatasetPair(
            fine_tune=matrix_of(2),
            target=matrix_of(2, seed=1),
            fine_tune_gradients=EmbeddingMatrix(rows=g),
            target_gradients=EmbeddingMatrix(rows=g * 3),
        )
        assert less_pair(0, 0, pair) == 1.0
        assert less_pair(0, 1, pair) == -1.0

    def test_less_missing_features(self):
        pair = DatasetPair(fine_tune=matrix_of(2), target=matrix_of(2, seed=1))
        with pytest.raises(RecordNotFoundError):
            less_pair(0, 0, pair)


class TestRandomProject:
    def test_zero_vector(self):
        out = random_project(np.zeros(10), seed=0, d=4)
        np.testing.assert_array_equal(out, np.zeros(4))

    def test_deterministic(self):
        v = np.random.default_rng(0).standard_normal(20)
        np.testing.assert_array_equal(random_project(v, 5, 8), random_project(v, 5, 8))

    def test_output_length(self):
        assert random_project(np.ones(10), seed=0, d=7).shape == (7,)

    def test_norm_preserved_in_expectation(self):
        # Monte Carlo check of the expected squared norm under the
        # scaled Rademacher projection.
        rng = np.random.default_rng(42)
        total = 0.0
        for k in range(1000):
            v = rng.standard_normal(32)
            v /= np.linalg.norm(v)
            out = random_project(v, seed=k, d=64)
            total += float(out @ out)
        assert 0.9 <= total / 1000 <= 1.1

    def test_bad_dim(self):
        with pytest.raises(ValueError):
            random_project(np.ones(3), seed=0, d=0)


def scale_with_records(tmp_path, label, count, records):
    path = tmp_path / f"{label}.jsonl"
    write_records(path, records)
    return ScaleEntry(label=label, parameter_count=count, probe=FileProvider(path))


class TestSelectIt:
    def test_all_ones_scores_one(self, tmp_path):
        entry = scale_with_records(tmp_path, "s", 10, [
            {"key": "0:0", "kind": "token_max_probs", "values": [1.0, 1.0, 1.0]},
        ])
        pair = text_pair(1, 1)
        score = selectit_point(0, ["rate:"], ModelScaleSpec((entry,)), pair, CostLedger())
        assert score == 1.0

    def test_two_scale_weighting_exact(self, tmp_path):
        small = scale_with_records(tmp_path, "small", int(1e9), [
            {"key": "0:0", "kind": "token_max_probs", "values": [0.4]},
        ])
        large = scale_with_records(tmp_path, "large", int(3e9), [
            {"key": "0:0", "kind": "token_max_probs", "values": [0.8]},
        ])
        pair = text_pair(1, 1)
        score = selectit_point(0, ["rate:"], ModelScaleSpec((small, large)), pair, CostLedger())
        assert score == 0.7

    def test_two_prompt_mean_exact(self, tmp_path):
        entry = scale_with_records(tmp_path, "s", 7, [
            {"key": "0:0", "kind": "token_max_probs", "values": [0.2]},
            {"key": "0:1", "kind": "token_max_probs", "values": [0.6]},
        ])
        pair = text_pair(1, 1)
        score = selectit_point(0, ["a:", "b:"], ModelScaleSpec((entry,)), pair, CostLedger())
        assert score == 0.4

    def test_prompt_permutation_invariance(self):
        pair = text_pair(2, 1)
        scales = ModelScaleSpec((
            ScaleEntry("a", 100, SyntheticProvider(seed=1)),
            ScaleEntry("b", 300, SyntheticProvider(seed=2)),
        ))
        prompts = ["rate {prompt}", "score {prompt}", "judge {prompt}"]
        a = selectit_point(0, prompts, scales, pair, CostLedger())
        b = selectit_point(0, list(reversed(prompts)), scales, pair, CostLedger())
        assert a == b

    def test_scale_permutation_invariance(self):
        pair = text_pair(1, 1)
        e1 = ScaleEntry("a", 123, SyntheticProvider(seed=1))
        e2 = ScaleEntry("b", 456, SyntheticProvider(seed=2))
        e3 = ScaleEntry("c", 789, SyntheticProvider(seed=3))
        a = selectit_point(0, ["p"], ModelScaleSpec((e1, e2, e3)), pair, CostLedger())
        b = selectit_point(0, ["p"], ModelScaleSpec((e3, e1, e2)), pair, CostLedger())
        assert a == b

    def test_weights_sum_to_one(self):
        spec = ModelScaleSpec((
            ScaleEntry("a", 7, SyntheticProvider()),
            ScaleEntry("b", 11, SyntheticProvider()),
            ScaleEntry("c", 13, SyntheticProvider()),
        ))
        assert math.fsum(spec.weights()) == pytest.approx(1.0, abs=1e-12)

    def test_empty_prompts_rejected(self):
        spec = ModelScaleSpec((ScaleEntry("a", 1, SyntheticProvider()),))
        with pytest.raises(ValueError):
            selectit_point(0, [], spec, text_pair(1, 1), CostLedger())

    def test_nonpositive_parameter_count_rejected(self):
        with pytest.raises(ValueError):
            ScaleEntry("a", 0, SyntheticProvider())

    def test_empty_scale_spec_rejected(self):
        with pytest.raises(ValueError):
            ModelScaleSpec(())


class TestComputeInfluence:
    def test_delift_se_q1_mask_cardinality(self):
        pair = DatasetPair(fine_tune=matrix_of(4, seed=2), target=matrix_of(4, seed=3))
        part = partition(pair, 0.5, seed=0)
        matrix = compute_influence("delift_se", quadrant_pairs(part, "Q1"), pair)
        assert matrix.valid_count() == 4

    def test_less_orthonormal_features_identity_pattern(self):
        eye = EmbeddingMatrix(rows=np.eye(3, dtype=np.float32))
        pair = DatasetPair(
            fine_tune=matrix_of(3),
            target=matrix_of(3, seed=1),
            fine_tune_gradients=eye,
            target_gradients=eye,
        )
        cells = [(i, j) for i in range(3) for j in range(3)]
        matrix = compute_influence("less", cells, pair)
        np.testing.assert_array_equal(matrix.values, np.eye(3, dtype=np.float32))

    def test_delift_deterministic_bytes(self):
        pair = text_pair(2, 2)
        cells = [(i, j) for i in range(2) for j in range(2)]

        def run():
            return compute_influence(
                "delift", cells, pair, SyntheticProvider(seed=9), CostLedger()
            ).to_bytes()

        assert run() == run()

    def test_delift_call_count_with_cache(self):
        pair = text_pair(2, 3)
        ledger = CostLedger()
        cells = [(i, j) for i in range(2) for j in range(3)]
        compute_influence("delift", cells, pair, SyntheticProvider(seed=0), ledger)
        assert ledger.forward_calls == 2 * 3 + 3

    def test_delift_se_zero_probe_calls(self):
        pair = DatasetPair(fine_tune=matrix_of(2), target=matrix_of(2, seed=1))
        ledger = CostLedger()
        compute_influence("delift_se", [(0, 0)], pair, ledger=ledger)
        assert ledger.forward_calls == 0

    def test_mask_matches_requested_cells(self):
        pair = DatasetPair(fine_tune=matrix_of(5), target=matrix_of(4, seed=1))
        cells = [(0, 0), (2, 3), (4, 1)]
        matrix = compute_influence("delift_se", cells, pair)
        assert matrix.valid_count() == 3
        for i, j in cells:
            assert matrix.mask[i, j]

    def test_failing_cell_identified(self):
        rows = np.array([[1.0, 0.0], [0.0, 0.0]], dtype=np.float32)
        pair = DatasetPair(
            fine_tune=EmbeddingMatrix(rows=rows), target=EmbeddingMatrix(rows=rows[:1])
        )
        with pytest.raises(DataValidationError, match=r"\(1, 0\)"):
            compute_influence("delift_se", [(0, 0), (1, 0)], pair)

    def test_unknown_method(self):
        pair = DatasetPair(fine_tune=matrix_of(1), target=matrix_of(1, seed=1))
        with pytest.raises(ValueError):
            compute_influence("selectit", [(0, 0)], pair)

    def test_values_in_range(self):
        pair = DatasetPair(fine_tune=matrix_of(6, seed=4), target=matrix_of(5, seed=5))
        cells = [(i, j) for i in range(6) for j in range(5)]
        matrix = compute_influence("delift_se", cells, pair)
        assert np.all(np.abs(matrix.values) <= 1.0)


class TestComputePointwise:
    def make_scales(self):
        return ModelScaleSpec((
            ScaleEntry("a", 100, SyntheticProvider(seed=1)),
            ScaleEntry("b", 300, SyntheticProvider(seed=2)),
        ))

    def test_call_count(self):
        pair = text_pair(3, 1)
        ledger = CostLedger()
        scores = compute_pointwise(
            "selectit", [0, 1, 2], ["p1 {prompt}", "p2 {prompt}"],
            self.make_scales(), pair, ledger,
        )
        assert ledger.forward_calls == 3 * 2 * 2
        assert scores.indices.tolist() == [0, 1, 2]

    def test_empty_indices(self):
        pair = text_pair(3, 1)
        ledger = CostLedger()
        scores = compute_pointwise("selectit", [], ["p"], self.make_scales(), pair, ledger)
        assert len(scores.values) == 0
        assert ledger.forward_calls == 0

    def test_deterministic(self):
        pair = text_pair(4, 1)
        a = compute_pointwise("selectit", [0, 2], ["p {prompt}"], self.make_scales(), pair, CostLedger())
        b = compute_pointwise("selectit", [0, 2], ["p {prompt}"], self.make_scales(), pair, CostLedger())
        np.testing.assert_array_equal(a.values, b.values)

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            compute_pointwise("delift", [0], ["p"], self.make_scales(), text_pair(1, 1), CostLedger())


class TestInfluenceMatrixFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        for m, n in [(1, 1), (3, 7), (16, 2), (5, 13)]:
            values = rng.standard_normal((m, n)).astype(np.float32)
            mask = rng.random((m, n)) < 0.6
            matrix = InfluenceMatrix(values=values, mask=mask)
            path = tmp_path / f"k{m}x{n}.nnk"
            save_influence(matrix, path)
            loaded = load_influence(path)
            assert loaded.to_bytes() == matrix.to_bytes()
            np.testing.assert_array_equal(loaded.mask, matrix.mask)

    def test_mask_bits_lsb_first(self):
        values = np.zeros((1, 9), dtype=np.float32)
        mask = np.zeros((1, 9), dtype=bool)
        mask[0, 0] = True
        mask[0, 8] = True
        raw = InfluenceMatrix(values=values, mask=mask).to_bytes()
        assert raw[16 + 9 * 4:] == bytes([0b00000001, 0b00000001])

    def test_invalid_cells_zeroed(self):
        values = np.array([[1.0, 99.0]], dtype=np.float32)
        mask = np.array([[True, False]])
        matrix = InfluenceMatrix(values=values, mask=mask)
        assert matrix.values[0, 1] == 0.0

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.nnk"
        path.write_bytes(b"WRONGMAG" + b"\x00" * 10)
        with pytest.raises(FileFormatError):
            load_influence(path)

    def test_truncated(self, tmp_path):
        matrix = InfluenceMatrix.full(np.ones((2, 2), dtype=np.float32))
        path = tmp_path / "t.nnk"
        save_influence(matrix, path)
        path.write_bytes(path.read_bytes()[:-1])
        with pytest.raises(PayloadLengthError):
            load_influence(path)

    def test_non_finite_valid_cell_rejected(self):
        with pytest.raises(DataValidationError):
            InfluenceMatrix(values=np.array([[np.nan]], dtype=np.float32),
                            mask=np.array([[True]]))

    def test_non_finite_invalid_cell_tolerated(self):
        matrix = InfluenceMatrix(values=np.array([[np.nan, 1.0]], dtype=np.float32),
                                 mask=np.array([[False, True]]))
        assert matrix.values[0, 0] == 0.0

    def test_empty_matrix(self, tmp_path):
        matrix = InfluenceMatrix(values=np.zeros((0, 5), dtype=np.float32),
                                 mask=np.zeros((0, 5), dtype=bool))
        path = tmp_path / "e.nnk"
        save_influence(matrix, path)
        loaded = load_influence(path)
        assert (loaded.m, loaded.n) == (0, 5)

    def test_overlay(self):
        base = InfluenceMatrix(values=np.full((2, 2), 0.5, dtype=np.float32),
                               mask=np.array([[False, True], [True, True]]))
        top = InfluenceMatrix(values=np.array([[0.9, 0.0], [0.0, 0.0]], dtype=np.float32),
                              mask=np.array([[True, False], [False, False]]))
        merged = base.overlay(top)
        assert merged.fully_valid
        assert merged.values[0, 0] == np.float32(0.9)
        assert merged.values[1, 1] == np.float32(0.5)

    def test_content_hash_stable(self):
        matrix = InfluenceMatrix.full(np.ones((2, 3), dtype=np.float32))
        assert matrix.content_hash() == matrix.content_hash()
        assert len(matrix.content_hash()) == 64


class TestPointwiseScores:
    def test_matrix_round_trip(self):
        scores = PointwiseScores(
            m=5, indices=[0, 2, 4], values=[0.1, 0.2, 0.3], norm_stats=(0.1, 0.3)
        )
        back = PointwiseScores.from_matrix(scores.to_matrix(), norm_stats=(0.1, 0.3))
        np.testing.assert_array_equal(back.indices, scores.indices)
        np.testing.assert_allclose(back.values, scores.values, rtol=1e-6)
        assert back.norm_stats == (0.1, 0.3)

    def test_duplicate_indices_rejected(self):
        with pytest.raises(ValueError):
            PointwiseScores(m=3, indices=[0, 0], values=[0.1, 0.2])

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            PointwiseScores(m=3, indices=[3], values=[0.1])

    def test_bad_norm_stats(self):
        with pytest.raises(ValueError):
            PointwiseScores(m=3, indices=[0], values=[0.1], norm_stats=(1.0, 0.0))

    def test_from_matrix_requires_single_column(self):
        with pytest.raises(ValueError):
            PointwiseScores.from_matrix(InfluenceMatrix.full(np.ones((2, 2), dtype=np.float32)))
