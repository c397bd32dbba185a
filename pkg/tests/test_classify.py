import numpy as np
import pytest

from ept.classify import (
    LinearSvmModel,
    average_precision,
    decision_scores,
    hinge_objective,
    load_svm_model,
    mean_average_precision,
    predict_probs,
    save_svm_model,
    top1_accuracy,
    train_ovr,
)
from ept.errors import ValidationError


def separable_data(seed=0, n=20, gap=3.0):
    rng = np.random.default_rng(seed)
    pos = rng.normal(size=(n, 2)) + gap
    neg = rng.normal(size=(n, 2)) - gap
    features = np.vstack([pos, neg])
    labels = np.array([0] * n + [1] * n)
    return features, labels


class TestTrainOvr:
    def test_separable_reaches_perfect_training_accuracy(self):
        features, labels = separable_data()
        model = train_ovr(features, labels, C=1000.0)
        report = top1_accuracy(predict_probs(model, features), labels)
        assert report.mean_value == 1.0

    def test_duplicating_training_set_keeps_decision_function(self):
        # hard-margin regime: the optimum is insensitive to duplication
        features, labels = separable_data(seed=1)
        model = train_ovr(features, labels, C=1000.0)
        doubled = train_ovr(np.vstack([features, features]),
                            np.concatenate([labels, labels]), C=1000.0)
        for k in range(2):
            cosine = model.weights[k] @ doubled.weights[k] / (
                np.linalg.norm(model.weights[k]) * np.linalg.norm(doubled.weights[k])
            )
            assert cosine > 1 - 1e-6
        first = decision_scores(model, features)
        second = decision_scores(doubled, features)
        assert np.array_equal(np.argmax(first, axis=1), np.argmax(second, axis=1))

    def test_six_point_objective_matches_grid_oracle(self):
        points = np.array([
            [1.5, 1.0], [2.0, 2.0], [0.4, 0.8],
            [-1.0, -0.5], [-2.0, -1.5], [-0.3, -1.0],
        ])
        targets = np.array([1.0, 1.0, 1.0, -1.0, -1.0, -1.0])
        labels = np.where(targets > 0, 1, 0)
        c_value = 0.7
        model = train_ovr(points, labels, C=c_value, tol=1e-8, max_iters=100000)
        solver_obj = hinge_objective(points, targets, model.weights[1],
                                     model.biases[1], c_value)

        def grid_search(w1_range, w2_range, b_range, step):
            best = (np.inf, None)
            for w1 in np.arange(*w1_range, step):
                for w2 in np.arange(*w2_range, step):
                    w = np.array([w1, w2])
                    base = targets * (points @ w)
                    for b in np.arange(*b_range, step):
                        obj = 0.5 * (w @ w) + c_value * np.maximum(
                            0.0, 1.0 - (base + targets * b)).sum()
                        if obj < best[0]:
                            best = (obj, (w1, w2, b))
            return best

        obj, (w1, w2, b) = grid_search((-2, 2), (-2, 2), (-2, 2), 0.1)
        for step in (0.01, 0.001):
            margin = step * 15
            obj, (w1, w2, b) = grid_search((w1 - margin, w1 + margin),
                                           (w2 - margin, w2 + margin),
                                           (b - margin, b + margin), step)
        assert abs(solver_obj - obj) <= 1e-3 * obj

    def test_objective_trace_non_increasing(self):
        features, labels = separable_data(seed=2)
        model = train_ovr(features, labels, C=10.0)
        for trace in model.objective_traces:
            diffs = np.diff(np.array(trace))
            assert (diffs <= 1e-12).all()

    def test_multilabel_matrix_input(self):
        rng = np.random.default_rng(3)
        features = rng.normal(size=(30, 4))
        positives = np.zeros((30, 3), dtype=bool)
        positives[:10, 0] = True
        positives[10:20, 1] = True
        positives[20:, 2] = True
        positives[5, 1] = True  # one multi-label row
        model = train_ovr(features, positives, C=1.0)
        assert model.n_classes == 3

    def test_single_class_rejected(self):
        rng = np.random.default_rng(4)
        with pytest.raises(ValidationError):
            train_ovr(rng.normal(size=(10, 3)), np.zeros(10, dtype=int))

    def test_non_finite_features_rejected(self):
        features = np.zeros((4, 2))
        features[0, 0] = np.nan
        with pytest.raises(ValidationError):
            train_ovr(features, np.array([0, 0, 1, 1]))

    def test_deterministic(self):
        features, labels = separable_data(seed=5)
        first = train_ovr(features, labels, C=10.0)
        second = train_ovr(features, labels, C=10.0)
        assert np.array_equal(first.weights, second.weights)
        assert np.array_equal(first.biases, second.biases)


class TestPredictProbs:
    def make_model(self, weights, biases):
        return LinearSvmModel(weights=np.asarray(weights, dtype=np.float64),
                              biases=np.asarray(biases, dtype=np.float64), C=1.0)

    def test_equal_scores_uniform(self):
        model = self.make_model(np.zeros((4, 3)), np.zeros(4))
        probs = predict_probs(model, np.ones(3))
        np.testing.assert_allclose(probs, np.full(4, 0.25), rtol=0, atol=1e-15)

    def test_shift_invariance(self):
        model_a = self.make_model([[1.0, 0.0], [0.0, 1.0]], [0.0, 0.0])
        model_b = self.make_model([[1.0, 0.0], [0.0, 1.0]], [5.0, 5.0])
        x = np.array([0.3, -0.8])
        np.testing.assert_allclose(predict_probs(model_a, x), predict_probs(model_b, x),
                                   rtol=0, atol=1e-12)

    def test_scores_one_zero_equals_two_one(self):
        model = self.make_model([[1.0], [0.0]], [0.0, 0.0])
        first = predict_probs(model, np.array([1.0]))
        shifted = self.make_model([[1.0], [0.0]], [1.0, 1.0])
        second = predict_probs(shifted, np.array([1.0]))
        np.testing.assert_allclose(first, second, rtol=0, atol=1e-12)

    def test_simplex_and_argmax_consistency(self):
        rng = np.random.default_rng(6)
        model = self.make_model(rng.normal(size=(5, 4)), rng.normal(size=5))
        batch = rng.normal(size=(20, 4))
        probs = predict_probs(model, batch)
        assert (probs > 0).all()
        np.testing.assert_allclose(probs.sum(axis=1), np.ones(20), rtol=0, atol=1e-9)
        scores = decision_scores(model, batch)
        assert np.array_equal(np.argmax(probs, axis=1), np.argmax(scores, axis=1))

    def test_dimension_mismatch_rejected(self):
        model = self.make_model(np.zeros((2, 3)), np.zeros(2))
        with pytest.raises(ValidationError):
            predict_probs(model, np.ones(4))


class TestMeanAveragePrecision:
    def test_perfect_ranking(self):
        scores = np.array([[0.9], [0.8], [0.2], [0.1]])
        positives = np.array([[True], [True], [False], [False]])
        report = mean_average_precision(scores, positives)
        assert report.mean_value == 1.0

    def test_alternating_ranking_hand_value(self):
        # ranking p, n, p, n: precisions 1/1 and 2/3, AP = 5/6
        scores = np.array([[0.9], [0.7], [0.5], [0.3]])
        positives = np.array([[True], [False], [True], [False]])
        report = mean_average_precision(scores, positives)
        np.testing.assert_allclose(report.mean_value, 5.0 / 6.0, rtol=0, atol=1e-12)

    def test_reversed_single_positive_hand_value(self):
        scores = np.array([[0.9], [0.5], [0.1]])
        positives = np.array([[False], [False], [True]])
        report = mean_average_precision(scores, positives)
        np.testing.assert_allclose(report.mean_value, 1.0 / 3.0, rtol=0, atol=1e-12)

    def test_zero_positive_class_excluded_with_warning(self):
        scores = np.array([[0.9, 0.1], [0.1, 0.9]])
        positives = np.array([[True, False], [False, False]])
        report = mean_average_precision(scores, positives)
        assert list(report.per_class) == [0]
        assert report.warnings and "class 1" in report.warnings[0]

    def test_invariant_to_monotone_transform(self):
        rng = np.random.default_rng(7)
        scores = rng.normal(size=(30, 2))
        positives = rng.uniform(size=(30, 2)) < 0.3
        positives[0] = True  # ensure each class has a positive
        base = mean_average_precision(scores, positives).mean_value
        transformed = mean_average_precision(np.exp(3.0 * scores), positives).mean_value
        np.testing.assert_allclose(base, transformed, rtol=0, atol=1e-12)

    def test_ties_broken_by_original_order(self):
        scores = np.array([0.5, 0.5, 0.5])
        positives = np.array([True, False, False])
        assert average_precision(scores, positives) == 1.0
        positives = np.array([False, False, True])
        np.testing.assert_allclose(average_precision(scores, positives), 1.0 / 3.0,
                                   rtol=0, atol=1e-15)


class TestTop1:
    def test_all_correct(self):
        scores = np.eye(3)
        assert top1_accuracy(scores, np.arange(3)).mean_value == 1.0

    def test_none_correct(self):
        scores = np.eye(2)[:, ::-1]
        assert top1_accuracy(scores, np.arange(2)).mean_value == 0.0

    def test_three_of_four(self):
        scores = np.array([[1, 0], [1, 0], [0, 1], [0, 1]], dtype=float)
        labels = np.array([0, 0, 1, 0])
        report = top1_accuracy(scores, labels)
        assert report.mean_value == 0.75
        assert report.confusion[0, 0] == 2 and report.confusion[0, 1] == 1
        assert report.confusion[1, 1] == 1

    def test_ties_pick_lowest_class_index(self):
        scores = np.zeros((2, 3))
        report = top1_accuracy(scores, np.array([0, 1]))
        assert report.mean_value == 0.5  # both predicted as class 0


def test_model_file_round_trip(tmp_path):
    features, labels = separable_data(seed=8)
    model = train_ovr(features, labels, C=5.0)
    path = tmp_path / "svm.npz"
    save_svm_model(model, path)
    loaded = load_svm_model(path)
    assert np.array_equal(loaded.weights, model.weights)
    assert np.array_equal(loaded.biases, model.biases)
    assert loaded.C == model.C


def test_report_serializations():
    scores = np.array([[1, 0], [0, 1]], dtype=float)
    report = top1_accuracy(scores, np.array([0, 1]))
    text = report.to_text()
    assert "metric: top1" in text and "mean: 1.000000" in text
    kv = report.to_key_values()
    assert "metric=top1" in kv and "mean=1.0" in kv
