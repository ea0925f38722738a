import numpy as np
import pytest

from labelhunt.forest import ForestConfig, fit_and_score, stratified_split, train_forest


def test_separable_threshold_target():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1500, 5))
    x[:, 3] = rng.integers(0, 20, 1500)          # 20 levels: every gap is a candidate threshold
    y = x[:, 3] > 9.5
    model, f1 = fit_and_score(x, y)
    assert f1 == 1.0
    assert model.utilities[3] >= 0.9
    assert np.isclose(model.utilities.sum(), 1.0)


def test_pure_noise_target():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1500, 5))
    y = rng.random(1500) < 0.5
    _, f1 = fit_and_score(x, y)
    assert abs(f1 - 0.5) <= 0.1


def test_constant_feature_has_no_utility():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(800, 4))
    x[:, 1] = 3.0
    y = (x[:, 0] > 0) & (x[:, 2] < 0.5)
    model = train_forest(x, y)
    assert model.utilities[1] == 0.0


def test_deterministic_given_seed():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(400, 6))
    y = x[:, 0] + x[:, 1] > 0
    a = train_forest(x, y, ForestConfig(seed=5))
    b = train_forest(x, y, ForestConfig(seed=5))
    assert np.array_equal(a.predict_proba(x), b.predict_proba(x))
    assert np.all((a.predict_proba(x) >= 0) & (a.predict_proba(x) <= 1))


def test_stump_matches_hand_gini():
    # one full-sample tree of depth 1 picks the split with the largest Gini decrease
    x = np.array([[0.0], [1.0], [2.0], [3.0], [4.0], [5.0]])
    y = np.array([0, 0, 1, 0, 1, 1], dtype=bool)
    model = train_forest(x, y, ForestConfig(n_trees=1, max_depth=1, bootstrap=False))
    root = model.roots[0]
    assert model.feature[root] == 0 and model.threshold[root] == 1.5
    # children hold the class frequencies of each side
    assert model.value[model.left[root]] == 0.0 and model.value[model.right[root]] == 0.75


def test_single_class_rejected():
    with pytest.raises(ValueError):
        train_forest(np.zeros((5, 2)), np.zeros(5, bool))


def test_stratified_split_keeps_both_classes():
    y = np.array([True] * 3 + [False] * 97)
    tr, te = stratified_split(y, 0.3, 0)
    assert y[tr].any() and y[te].any() and len(set(tr) & set(te)) == 0
