import logging

import numpy as np
import pytest

import metrics
from utils.exceptions import ParameterError, ShapeError, UndefinedAPError


def test_average_precision_hand_computed():
    # positives at ranks 1 and 3: (1/1 + 2/3) / 2
    assert metrics.average_precision([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]) == pytest.approx(5.0 / 6.0)
    assert metrics.average_precision([0.1, 0.2, 0.3], [1, 1, 1]) == pytest.approx(1.0)
    assert metrics.average_precision([0.9, 0.1], [0, 1]) == pytest.approx(0.5)


def test_average_precision_ties_keep_input_order():
    assert metrics.average_precision([0.5, 0.5], [0, 1]) == pytest.approx(0.5)
    assert metrics.average_precision([0.5, 0.5], [1, 0]) == pytest.approx(1.0)


def test_average_precision_matches_brute_force():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        n = int(rng.integers(1, 201))
        # coarse scores give plenty of ties
        scores = np.round(rng.random(n), int(rng.integers(1, 4)))
        relevance = rng.random(n) < rng.uniform(0.05, 0.9)
        relevance[rng.integers(n)] = True
        assert metrics.average_precision(scores, relevance) == metrics.brute_force_average_precision(scores, relevance)


def test_mean_ap_matches_brute_force_per_class():
    rng = np.random.default_rng(8)
    for _ in range(50):
        n, classes = int(rng.integers(2, 60)), int(rng.integers(1, 6))
        scores = np.round(rng.random((n, classes)), 2)
        relevance = rng.random((n, classes)) < 0.4
        relevance[0] = True
        expected = [metrics.brute_force_average_precision(scores[:, c], relevance[:, c]) for c in range(classes)]
        assert metrics.mean_ap(metrics.per_class_average_precision(scores, relevance)) == metrics.mean_ap(expected)


def test_average_precision_needs_a_positive():
    with pytest.raises(UndefinedAPError):
        metrics.average_precision([0.3, 0.2], [0, 0])
    with pytest.raises(ShapeError):
        metrics.average_precision([0.3, 0.2], [1])


def test_topk_accuracy():
    scores = [[0.1, 0.7, 0.2], [0.5, 0.3, 0.2], [0.3, 0.3, 0.4]]
    assert metrics.topk_accuracy(scores, [1, 1, 2], 1) == pytest.approx(2.0 / 3.0)
    assert metrics.topk_accuracy(scores, [1, 1, 2], 2) == pytest.approx(1.0)
    # equal scores rank the lower class first
    assert metrics.topk_accuracy([[0.5, 0.5]], [0], 1) == 1.0
    assert metrics.topk_accuracy([[0.5, 0.5]], [1], 1) == 0.0
    with pytest.raises(ParameterError):
        metrics.topk_accuracy(scores, [1, 1, 2], 4)
    with pytest.raises(ShapeError):
        metrics.topk_accuracy(scores, [1, 1], 1)


def test_mean_ap_skips_undefined_classes():
    assert metrics.mean_ap({0: 0.5, 1: None, 2: 1.0}) == pytest.approx(0.75)
    assert metrics.mean_ap([0.2, 0.4]) == pytest.approx(0.3)
    with pytest.raises(UndefinedAPError):
        metrics.mean_ap({0: None})


def test_evaluate_scores_excludes_classes_without_positives(caplog):
    scores = np.array([[0.9, 0.1, 0.0], [0.2, 0.8, 0.0], [0.6, 0.4, 0.0]])
    relevance = metrics.relevance_matrix([(0,), (1,), (0,)], 3)
    with caplog.at_level(logging.WARNING):
        report = metrics.evaluate_scores(scores, relevance, single_labels=[0, 1, 0])
    assert report.excluded_classes == [2]
    assert "Class 2 has no positives" in caplog.text
    assert report.per_class_ap == {0: pytest.approx(1.0), 1: pytest.approx(1.0)}
    assert report.map == pytest.approx(1.0)
    assert report.top1 == pytest.approx(1.0)
    assert report.top5 is None


def test_report_text_and_frame(tmp_path):
    report = metrics.EvalReport(per_class_ap={0: 0.5, 1: 1.0}, excluded_classes=[2], map=0.75, top1=0.5,
                                sample_count=4)
    assert report.to_text().splitlines() == [
        "samples 4", "map 0.7500000000", "top1 0.5000000000", "ap[0] 0.5000000000", "ap[1] 1.0000000000",
        "excluded 2",
    ]
    text_path, csv_path = report.write(tmp_path)
    assert text_path.read_text() == report.to_text()
    assert list(report.to_frame()["metric"]) == ["samples", "map", "top1", "ap[0]", "ap[1]"]
    assert csv_path.exists()


def test_relevance_matrix():
    matrix = metrics.relevance_matrix([(0, 2), (1,)], 3)
    assert matrix.tolist() == [[True, False, True], [False, True, False]]
    with pytest.raises(ParameterError):
        metrics.relevance_matrix([(3,)], 3)
