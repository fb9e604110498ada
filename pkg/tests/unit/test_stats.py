import logging
import os
from concurrent.futures import ThreadPoolExecutor
from itertools import product

import numpy as np
import pytest

from s4ecg.dataframe import read_comments
from s4ecg.errors import StatisticsError
from s4ecg.stats import (
    BootstrapReport,
    DifferenceStats,
    PredictionSet,
    auc,
    bootstrap_compare,
    macro_auc,
    multi_run_verdict,
    verdict_from_reports,
)

pytestmark = pytest.mark.unit


def pairwise_auc(scores: np.ndarray, targets: np.ndarray) -> float:
    positives = scores[targets == 1]
    negatives = scores[targets == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in product(positives, negatives))
    return total / (positives.size * negatives.size)


def prediction_set(probabilities, targets, codes=("A", "B"), **kwargs) -> PredictionSet:
    n = len(targets)
    return PredictionSet(tuple(f"r{i:03d}" for i in range(n)), probabilities, targets, codes, **kwargs)


def difference(ci_low: float, ci_high: float, median: float = 0.0) -> DifferenceStats:
    return DifferenceStats(median, median, median, ci_low, ci_high, 100)


def report(stats: DifferenceStats) -> BootstrapReport:
    return BootstrapReport(("A",), (stats,), stats, 0.5, 0.5, 100, 0)


@pytest.fixture
def paired(rng: np.random.Generator):
    targets = rng.integers(0, 2, (60, 2))
    good = prediction_set(np.clip(0.1 + 0.8 * targets + rng.normal(0, 0.05, targets.shape), 0, 1), targets)
    noisy = prediction_set(rng.uniform(size=targets.shape), targets)
    return good, noisy


class TestAuc:
    def test_matches_pairwise_count_with_ties(self, rng: np.random.Generator) -> None:
        for _ in range(20):
            scores = rng.integers(0, 5, 30).astype(float)
            targets = rng.integers(0, 2, 30)
            if targets.min() == targets.max():
                continue

            assert auc(scores, targets) == pytest.approx(pairwise_auc(scores, targets), abs=1e-12)

    def test_exact_half_for_constant_scores(self) -> None:
        assert auc(np.full(6, 0.3), [0, 1, 0, 1, 1, 0]) == 0.5

    def test_invariant_under_monotone_transforms(self, rng: np.random.Generator) -> None:
        scores = rng.normal(size=40)
        targets = rng.integers(0, 2, 40)

        assert auc(np.exp(3 * scores), targets) == auc(scores, targets)

    def test_perfect_and_reversed_ranking(self) -> None:
        assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
        assert auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0

    def test_single_class(self) -> None:
        with pytest.raises(StatisticsError):
            auc([0.1, 0.2], [1, 1])

    def test_length_mismatch(self) -> None:
        with pytest.raises(StatisticsError):
            auc([0.1, 0.2, 0.3], [1, 0])

    def test_macro_skips_degenerate_labels(self, caplog) -> None:
        pred = prediction_set([[0.1, 0.5], [0.9, 0.5], [0.8, 0.5]], [[0, 1], [1, 1], [1, 1]])

        with caplog.at_level(logging.WARNING):
            value, per_label = macro_auc(pred)

        assert value == 1.0
        assert np.isnan(per_label[1])
        assert "B" in caplog.text

    def test_macro_without_any_valid_label(self) -> None:
        with pytest.raises(StatisticsError):
            macro_auc(prediction_set([[0.1, 0.5]], [[1, 0]]))


class TestPredictionSet:
    @pytest.mark.parametrize(
        "probabilities, targets",
        [([[0.1, 1.2]], [[0, 1]]), ([[0.1, np.nan]], [[0, 1]]), ([[0.1, 0.2]], [[0, 2]]), ([[0.1]], [[0, 1]])],
    )
    def test_validation(self, probabilities, targets) -> None:
        with pytest.raises(StatisticsError):
            prediction_set(probabilities, targets)

    def test_alignment(self) -> None:
        pred = prediction_set([[0.1, 0.2], [0.3, 0.4]], [[0, 1], [1, 0]])

        aligned = pred.aligned_to(["r001", "r000"])

        np.testing.assert_array_equal(aligned.probabilities, [[0.3, 0.4], [0.1, 0.2]])
        with pytest.raises(StatisticsError):
            pred.aligned_to(["r000", "r002"])

    def test_file_round_trip_is_exact(self, tmp_path, paired) -> None:
        good, _ = paired
        original = PredictionSet(good.ids, good.probabilities, good.targets, good.codes, "s4-bi", 3, 100.0)
        path = str(tmp_path / "predictions.tsv")

        original.save(path)
        loaded = PredictionSet.load(path)

        assert (loaded.ids, loaded.codes, loaded.model_id, loaded.seed, loaded.fs) == (
            original.ids,
            original.codes,
            "s4-bi",
            3,
            100.0,
        )
        np.testing.assert_array_equal(loaded.probabilities, original.probabilities)
        np.testing.assert_array_equal(loaded.targets, original.targets)

    def test_unreadable_file(self, tmp_path) -> None:
        with pytest.raises(StatisticsError, match="Could not read"):
            PredictionSet.load(str(tmp_path / "missing.tsv"))


class TestBootstrap:
    def test_identical_models_have_a_zero_interval(self, paired) -> None:
        good, _ = paired

        result = bootstrap_compare(good, good, n_iter=100, seed=0)

        assert (result.macro.ci_low, result.macro.ci_high, result.macro.median) == (0.0, 0.0, 0.0)
        assert not result.significant
        assert all(not s.significant for s in result.per_label)

    def test_better_model_is_detected(self, paired) -> None:
        good, noisy = paired

        result = bootstrap_compare(good, noisy, n_iter=200, seed=1)

        assert result.macro.better
        assert result.macro_a > result.macro_b
        assert result.macro.n_valid == 200

    def test_swapping_models_negates_the_distribution(self, paired) -> None:
        good, noisy = paired

        forward = bootstrap_compare(good, noisy, n_iter=101, seed=5)
        backward = bootstrap_compare(noisy, good, n_iter=101, seed=5)

        assert forward.macro.median == -backward.macro.median
        assert forward.macro.ci_low == -backward.macro.ci_high
        assert forward.macro.q25 == -backward.macro.q75

    def test_seeded(self, paired) -> None:
        good, noisy = paired

        assert bootstrap_compare(good, noisy, 50, seed=2) == bootstrap_compare(good, noisy, 50, seed=2)

    def test_mismatched_sets(self, paired) -> None:
        good, _ = paired
        other_targets = prediction_set(good.probabilities, 1 - good.targets)
        other_codes = prediction_set(good.probabilities, good.targets, codes=("A", "C"))

        for other in (other_targets, other_codes):
            with pytest.raises(StatisticsError):
                bootstrap_compare(good, other, n_iter=10)

    def test_report_frame(self, tmp_path, paired) -> None:
        good, noisy = paired
        result = bootstrap_compare(good, noisy, n_iter=20, seed=0)

        frame = result.to_frame()
        result.save(str(tmp_path / "report.tsv"))

        assert frame["label"].tolist() == ["A", "B", "macro"]
        assert frame.loc[2, "direction"] == "+"
        assert (tmp_path / "report.tsv").exists()


class TestVerdict:
    @pytest.mark.parametrize("n_better, expected", [(59, "none"), (60, "better")])
    def test_threshold_boundary(self, n_better: int, expected: str) -> None:
        reports = [report(difference(0.01, 0.05, 0.03))] * n_better
        reports += [report(difference(-0.01, 0.05))] * (100 - n_better)

        verdict = verdict_from_reports(reports, threshold=0.6)

        assert verdict.macro.verdict == expected
        assert verdict.macro.n_better == n_better
        assert verdict.macro.n_comparisons == 100

    def test_worse(self) -> None:
        reports = [report(difference(-0.05, -0.01, -0.03))] * 3 + [report(difference(-0.01, 0.01))]

        verdict = verdict_from_reports(reports, threshold=0.6)

        assert verdict.labels[0].verdict == "worse"
        assert verdict.labels[0].marker == "-"
        assert verdict.macro.n_worse == 3

    def test_counts_agree_with_the_reports(self, paired) -> None:
        good, noisy = paired

        verdict = multi_run_verdict([good, good], [noisy, good], n_iter=30, seed=0)

        assert len(verdict.reports) == 4
        assert verdict.macro.n_better == sum(r.macro.better for r in verdict.reports)
        assert verdict.macro.n_worse == sum(r.macro.worse for r in verdict.reports)
        assert verdict.macro.n_better == 2
        assert verdict.macro.verdict == "none"

    def test_consistently_better_model(self, paired) -> None:
        good, noisy = paired

        verdict = multi_run_verdict([good, good], [noisy, noisy], n_iter=50, seed=0)

        assert verdict.macro.verdict == "better"
        assert list(verdict.to_frame().columns) == [
            "label",
            "verdict",
            "n_better",
            "n_worse",
            "n_comparisons",
            "median",
            "q25",
            "q75",
            "std",
            "marker",
        ]

    def test_pairwise_reports_are_saved_by_run(self, tmp_path, paired) -> None:
        good, noisy = paired
        verdict = multi_run_verdict([good, noisy], [noisy, good, noisy], n_iter=20, seed=0)

        paths = verdict.save_reports(str(tmp_path / "reports"), n_runs_b=3)

        names = [os.path.basename(p) for p in paths]
        assert names == [f"pair-{a:02d}-{b:02d}.tsv" for a in range(2) for b in range(3)]
        assert f"macro_auc_a: {verdict.reports[3].macro_a!r}" in read_comments(paths[3])
        assert verdict.reports[3].macro_a == verdict.reports[3].macro_b

    def test_executor_gives_the_same_result(self, paired) -> None:
        good, noisy = paired

        sequential = multi_run_verdict([good], [noisy, good], n_iter=20, seed=3)
        with ThreadPoolExecutor(max_workers=2) as pool:
            parallel = multi_run_verdict([good], [noisy, good], n_iter=20, seed=3, executor=pool)

        assert sequential == parallel

    @pytest.mark.parametrize("threshold", [0.4, 1.5])
    def test_threshold_validation(self, threshold: float, paired) -> None:
        good, noisy = paired

        with pytest.raises(StatisticsError):
            multi_run_verdict([good], [noisy], threshold=threshold)

    def test_empty_runs(self, paired) -> None:
        good, _ = paired

        with pytest.raises(StatisticsError):
            multi_run_verdict([good], [])
