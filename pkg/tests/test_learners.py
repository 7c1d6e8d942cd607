import numpy as np
import pytest

from streetrank.features import FeatureMatrix
from streetrank.learners import (
    HyperGrid,
    KIND_EXTRA_TREES,
    KIND_RANDOM_FOREST,
    feature_importances,
    fit_adaboost,
    fit_dummy,
    fit_forest,
    fit_tree,
    group_importances,
    predict_scores,
)


def weighted_gini(split_labels):
    total = sum(len(part) for part in split_labels)
    score = 0.0
    for part in split_labels:
        if len(part) == 0:
            continue
        q = np.mean(part)
        score += len(part) * 2.0 * q * (1.0 - q)
    return score / total


def brute_force_best_split(X, y):
    """Global minimum weighted Gini over every feature and midpoint threshold."""
    best = weighted_gini([y])
    for j in range(X.shape[1]):
        uniques = np.unique(X[:, j])
        for lo, hi in zip(uniques, uniques[1:]):
            threshold = (lo + hi) / 2.0
            mask = X[:, j] <= threshold
            best = min(best, weighted_gini([y[mask], y[~mask]]))
    return best


def tree_depth1_gini(tree, X, y):
    if tree.feature[0] < 0:
        return weighted_gini([y])
    mask = X[:, tree.feature[0]] <= tree.threshold[0]
    return weighted_gini([y[mask], y[~mask]])


def test_depth1_oracle_example():
    X = np.array([[1.0], [2.0], [3.0], [4.0]])
    y = np.array([0, 0, 1, 1])
    tree = fit_tree(X, y, max_depth=1, min_samples_leaf=1)
    assert tree.feature[0] == 0
    assert tree.threshold[0] == pytest.approx(2.5)
    left, right = tree.left[0], tree.right[0]
    assert tree.leaf_fraction(left) == 0.0
    assert tree.leaf_fraction(right) == 1.0


def test_pure_labels_single_leaf():
    X = np.arange(10, dtype=np.float64).reshape(-1, 1)
    tree = fit_tree(X, np.ones(10, dtype=int), max_depth=None)
    assert tree.n_nodes == 1
    assert tree.feature[0] == -1
    assert tree.leaf_fraction(0) == 1.0


def test_depth_zero_base_rate():
    X = np.arange(8, dtype=np.float64).reshape(-1, 1)
    y = np.array([0, 0, 0, 0, 0, 0, 1, 1])
    tree = fit_tree(X, y, max_depth=0)
    assert tree.n_nodes == 1
    assert tree.smoothed_values()[0] == pytest.approx((2 + 1) / (8 + 2))


def test_length_mismatch_rejected():
    with pytest.raises(ValueError):
        fit_tree(np.zeros((4, 2)), np.array([0, 1]))


def test_gini_oracle_random_instances():
    rng = np.random.default_rng(12)
    checked = 0
    while checked < 60:
        n = int(rng.integers(4, 31))
        f = int(rng.integers(1, 4))
        X = np.round(rng.normal(size=(n, f)) * 3, 1)
        y = rng.integers(0, 2, size=n)
        if y.min() == y.max():
            continue
        tree = fit_tree(X, y, max_depth=1, min_samples_leaf=1)
        achieved = tree_depth1_gini(tree, X, y)
        best = brute_force_best_split(X, y)
        assert achieved == pytest.approx(best, abs=1e-12)
        checked += 1


def test_monotone_transform_leaves_predictions_unchanged():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(400, 3))
    y = (X[:, 0] + 0.3 * rng.normal(size=400) > 0).astype(int)
    model = fit_forest(X, y, n_estimators=20, max_depth=4, seed=7)
    X2 = X.copy()
    X2[:, 0] = np.exp(X2[:, 0])          # strictly increasing
    X2[:, 1] = X2[:, 1] ** 3
    model2 = fit_forest(X2, y, n_estimators=20, max_depth=4, seed=7)
    np.testing.assert_allclose(predict_scores(model, X),
                               predict_scores(model2, X2), atol=1e-12)


def test_monotone_transform_high_cardinality():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(800, 2))
    y = (X[:, 1] > 0.2).astype(int)
    base = fit_tree(X, y, max_depth=3)
    X2 = X.copy()
    X2[:, 1] = X2[:, 1] ** 3
    moved = fit_tree(X2, y, max_depth=3)
    out = np.zeros(800)
    out2 = np.zeros(800)
    from streetrank.learners import _predict_tree
    _predict_tree(X, base.feature, base.threshold, base.left, base.right,
                  base.smoothed_values(), out)
    _predict_tree(X2, moved.feature, moved.threshold, moved.left, moved.right,
                  moved.smoothed_values(), out2)
    np.testing.assert_allclose(out, out2, atol=1e-12)


def test_forest_of_one_equals_single_tree():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(80, 4))
    y = (X[:, 2] > 0).astype(int)
    forest = fit_forest(X, y, n_estimators=1, max_depth=3, bootstrap=False,
                        feature_subsample=0, seed=11)
    single = fit_tree(X, y, max_depth=3)
    np.testing.assert_allclose(predict_scores(forest, X),
                               np.array([_score_one(single, row) for row in X]))


def _score_one(tree, row):
    node = 0
    while tree.feature[node] >= 0:
        node = tree.left[node] if row[tree.feature[node]] <= tree.threshold[node] \
            else tree.right[node]
    return tree.smoothed_values()[node]


def test_forest_seed_determinism():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(120, 5))
    y = (X[:, 0] + X[:, 1] > 0).astype(int)
    a = predict_scores(fit_forest(X, y, n_estimators=15, max_depth=4, seed=9), X)
    b = predict_scores(fit_forest(X, y, n_estimators=15, max_depth=4, seed=9), X)
    c = predict_scores(fit_forest(X, y, n_estimators=15, max_depth=4, seed=10), X)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_extra_trees_runs_and_differs_from_rf():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(200, 4))
    y = (X[:, 0] > 0.1).astype(int)
    et = fit_forest(X, y, n_estimators=25, max_depth=5, kind=KIND_EXTRA_TREES, seed=2)
    rf = fit_forest(X, y, n_estimators=25, max_depth=5, kind=KIND_RANDOM_FOREST, seed=2)
    s_et = predict_scores(et, X)
    s_rf = predict_scores(rf, X)
    assert not np.array_equal(s_et, s_rf)
    order = np.argsort(-s_et)
    assert y[order[:20]].mean() > y[order[-20:]].mean()


def test_adaboost_separable_stops_after_one_round():
    X = np.array([[float(v)] for v in range(20)])
    y = (X[:, 0] >= 10).astype(int)
    model = fit_adaboost(X, y, n_estimators=50)
    assert model.params["rounds_run"] == 1
    scores = predict_scores(model, X)
    assert ((scores >= 0.5) == (y == 1)).all()


def test_adaboost_zero_learning_rate_is_round_one():
    rng = np.random.default_rng(13)
    X = rng.normal(size=(100, 3))
    y = ((X[:, 0] + 0.4 * rng.normal(size=100)) > 0).astype(int)
    frozen = fit_adaboost(X, y, n_estimators=12, learning_rate=0.0)
    single = fit_adaboost(X, y, n_estimators=1, learning_rate=1.0)
    np.testing.assert_allclose(predict_scores(frozen, X),
                               predict_scores(single, X), atol=1e-12)


def test_adaboost_round_errors_below_half():
    rng = np.random.default_rng(14)
    X = rng.normal(size=(300, 4))
    y = ((X[:, 0] > 0) ^ (rng.random(300) < 0.15)).astype(int)
    model = fit_adaboost(X, y, n_estimators=30)
    assert all(err < 0.5 for err in model.params["round_errors"])


def xor_fixture(seed=17):
    """Four jittered corner clusters with alternating labels and unequal
    masses; the small corner keeps additive stumps from stalling at chance."""
    rng = np.random.default_rng(seed)
    spec = [((0.0, 0.0), 0, 6), ((1.0, 1.1), 0, 94),
            ((0.0, 1.1), 1, 50), ((1.0, 0.0), 1, 50)]
    points, labels = [], []
    for (cx, cy), label, count in spec:
        points.append(rng.normal(loc=(cx, cy), scale=0.08, size=(count, 2)))
        labels.extend([label] * count)
    return np.vstack(points), np.array(labels)


def test_adaboost_composes_stumps_on_xor_pattern():
    X, y = xor_fixture()
    model = fit_adaboost(X, y, n_estimators=50)
    predicted = predict_scores(model, X) >= 0.5
    assert (predicted == (y == 1)).mean() > 0.9


def test_adaboost_rejects_single_class():
    with pytest.raises(ValueError):
        fit_adaboost(np.zeros((10, 2)), np.ones(10, dtype=int))


def test_dummy_prior_rate():
    y = np.array([1] * 25 + [0] * 75)
    model = fit_dummy(y, seed=0)
    scores = predict_scores(model, np.zeros((100_000, 1)))
    assert abs((scores >= 0.5).mean() - 0.25) < 0.01
    assert scores.min() >= 0.0 and scores.max() < 1.0


def test_dummy_all_positive_prior():
    model = fit_dummy(np.ones(10, dtype=int), seed=1)
    scores = predict_scores(model, np.zeros((1000, 1)))
    assert (scores >= 0.5).all()


def test_dummy_precision_matches_base_rate():
    pool = np.array([1] * 30 + [0] * 70)
    k = 20
    precisions = []
    for seed in range(1000):
        model = fit_dummy(pool, seed=seed)
        scores = predict_scores(model, np.zeros((100, 1)))
        top = np.argsort(-scores, kind="stable")[:k]
        precisions.append(pool[top].mean())
    assert abs(np.mean(precisions) - 0.3) < 0.015


def test_dummy_deterministic_per_seed():
    model = fit_dummy(np.array([0, 1, 1, 0]), seed=5)
    a = predict_scores(model, np.zeros((50, 1)))
    b = predict_scores(model, np.zeros((50, 1)))
    np.testing.assert_array_equal(a, b)


def test_predict_empty_matrix():
    X = np.array([[0.0], [1.0]])
    model = fit_forest(X, np.array([0, 1]), n_estimators=3, max_depth=1,
                       min_samples_leaf=1)
    assert predict_scores(model, np.zeros((0, 1))).shape == (0,)


def test_predict_row_permutation():
    rng = np.random.default_rng(17)
    X = rng.normal(size=(60, 3))
    y = (X[:, 0] > 0).astype(int)
    model = fit_forest(X, y, n_estimators=10, max_depth=3, seed=1)
    scores = predict_scores(model, X)
    perm = rng.permutation(60)
    np.testing.assert_array_equal(predict_scores(model, X[perm]), scores[perm])


def test_schema_mismatch_rejected():
    ids = ("a", "b", "c", "d", "e", "f", "g", "h")
    values = np.linspace(0, 1, 16).reshape(8, 2)
    m1 = FeatureMatrix(ids, ("f1", "f2"), ("G", "G"), values)
    m2 = FeatureMatrix(ids, ("f1", "other"), ("G", "G"), values)
    y = np.array([0, 1, 0, 1, 0, 1, 0, 1])
    model = fit_forest(m1, y, n_estimators=2, max_depth=1, min_samples_leaf=1)
    predict_scores(model, m1)
    with pytest.raises(ValueError):
        predict_scores(model, m2)


def test_single_split_importance():
    rng = np.random.default_rng(19)
    X = rng.normal(size=(100, 4))
    y = (X[:, 2] > 0).astype(int)
    model = fit_forest(X, y, n_estimators=10, max_depth=1, seed=0,
                       feature_subsample=0, bootstrap=False)
    imp = feature_importances(model)
    assert imp[2] == pytest.approx(1.0)
    assert imp.sum() == pytest.approx(1.0, abs=1e-9)


def test_importances_sum_to_one():
    rng = np.random.default_rng(20)
    X = rng.normal(size=(200, 6))
    y = ((X[:, 0] + X[:, 3]) > 0).astype(int)
    model = fit_forest(X, y, n_estimators=20, max_depth=4, seed=3)
    assert feature_importances(model).sum() == pytest.approx(1.0, abs=1e-9)


def test_group_importances_sums():
    imp = np.array([0.2, 0.3, 0.5])
    grouped = group_importances(imp, ["A", "B", "A"])
    assert grouped == {"A": pytest.approx(0.7), "B": pytest.approx(0.3)}


def test_dummy_has_no_importances():
    model = fit_dummy(np.array([0, 1]), seed=0)
    with pytest.raises(ValueError):
        feature_importances(model)


def test_hypergrid_validation():
    grid = HyperGrid()
    assert 10000 in grid.forest_estimators
    assert None in grid.forest_depths
    assert 0.01 in grid.adaboost_learning_rates
    with pytest.raises(ValueError):
        HyperGrid(forest_estimators=())
