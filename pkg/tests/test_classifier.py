import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone

from pmu_purify import nn
from pmu_purify.classifier import (ClassifierConfig, PmuEventClassifier, classifier_layers,
                                   input_gradient, logits, macro_f1, predict, train_classifier)
from pmu_purify.data import Dataset, GenConfig, generate_dataset, normalize, split
from pmu_purify.exceptions import ConfigurationError

from conftest import tiny_classifier


def brute_f1(pred, true, n=4):
    scores = []
    for c in range(n):
        tp = sum(1 for p, t in zip(pred, true) if p == c and t == c)
        fp = sum(1 for p, t in zip(pred, true) if p == c and t != c)
        fn = sum(1 for p, t in zip(pred, true) if p != c and t == c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        scores.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return sum(scores) / n


def test_default_architecture():
    layers = classifier_layers((60, 8, 4))
    kinds = [l["kind"] for l in layers]
    assert kinds == ["reshape", "conv1d-time", "relu", "conv1d-time", "relu",
                     "global-average-pool-time", "dense"]
    assert layers[1]["out_channels"] == 32 and layers[3]["out_channels"] == 64
    assert layers[1]["width"] == 5 and layers[-1]["out_features"] == 4


def test_macro_f1_basics():
    y = np.array([0, 1, 2, 3, 0, 1])
    assert macro_f1(y, y) == 1.0
    f1, absent = macro_f1(np.zeros(4, int), np.zeros(4, int), return_flags=True)
    assert absent == [1, 2, 3] and f1 == 0.25
    assert macro_f1(np.zeros(4, int), np.zeros(4, int), classes=[0]) == 1.0
    with pytest.raises(ConfigurationError):
        macro_f1([], [])
    with pytest.raises(ConfigurationError):
        macro_f1([0, 1], [0])


def test_macro_f1_hand_built_confusion():
    # confusion rows = true, cols = predicted
    cm = np.array([[5, 1, 0, 0], [2, 3, 1, 0], [0, 0, 4, 2], [1, 0, 0, 6]])
    true, pred = [], []
    for i in range(4):
        for j in range(4):
            true += [i] * cm[i, j]
            pred += [j] * cm[i, j]
    tp = np.diag(cm)
    prec = tp / cm.sum(axis=0)
    rec = tp / cm.sum(axis=1)
    expected = np.mean(2 * prec * rec / (prec + rec))
    assert macro_f1(pred, true) == pytest.approx(expected, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=40),
       st.randoms(use_true_random=False))
def test_macro_f1_matches_brute_force_and_is_permutation_invariant(pairs, rnd):
    pred = [p for p, _ in pairs]
    true = [t for _, t in pairs]
    f = macro_f1(pred, true)
    assert f == pytest.approx(brute_f1(pred, true), abs=1e-12)
    assert 0.0 <= f <= 1.0
    idx = list(range(len(pairs)))
    rnd.shuffle(idx)
    assert macro_f1([pred[i] for i in idx], [true[i] for i in idx]) == pytest.approx(f, abs=1e-15)


def test_predict_probabilities():
    net = tiny_classifier()
    x = np.random.default_rng(0).standard_normal((5, 12, 2, 4))
    p = predict(net, x)
    np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-9)
    np.testing.assert_allclose(p, nn.softmax(net(x)), atol=1e-12)
    assert np.array_equal(predict(net, x).argmax(1), p.argmax(1))
    net.params[-1]["W"][...] = 0
    net.params[-1]["b"][...] = 0
    net.bump()
    np.testing.assert_allclose(predict(net, x), 0.25, atol=1e-15)


def test_softmax_shift_invariance():
    net = tiny_classifier()
    x = np.random.default_rng(1).standard_normal((3, 12, 2, 4))
    before = predict(net, x)
    net.params[-1]["b"] += 3.7
    net.bump()
    np.testing.assert_allclose(predict(net, x), before, atol=1e-12)


def test_input_gradient_fd():
    net = tiny_classifier(seed=2)
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 12, 2, 4))
    y = np.array([1, 3])
    for mode in ("cross-entropy", "logit-margin"):
        g, _ = input_gradient(net, x, y, mode)
        assert g.shape == x.shape and np.all(np.isfinite(g))

        def f(z):
            if mode == "cross-entropy":
                return nn.softmax_cross_entropy(logits(net, z), y)[0]
            zz = logits(net, z)
            other = zz.copy()
            other[np.arange(2), y] = -np.inf
            return float(np.sum(zz[np.arange(2), y] - other.max(axis=1)))

        h = 1e-5
        for idx in [(0, 3, 1, 2), (1, 0, 0, 0), (1, 11, 1, 3), (0, 6, 0, 1)]:
            xp, xm = x.copy(), x.copy()
            xp[idx] += h
            xm[idx] -= h
            num = (f(xp) - f(xm)) / (2 * h)
            assert abs(g[idx] - num) <= 1e-4 * max(1e-8, abs(num)) + 1e-9


def test_input_gradient_equals_composed_backward():
    net = tiny_classifier(seed=3)
    x = np.random.default_rng(3).standard_normal((3, 12, 2, 4))
    y = np.array([0, 1, 2])
    z, cache = nn.forward(net, x)
    _, dz = nn.softmax_cross_entropy(z, y)
    _, dx = nn.backward(net, cache, dz)
    np.testing.assert_array_equal(input_gradient(net, x, y)[0], dx)


def test_margin_gradient_scales_with_final_weights():
    net = tiny_classifier(seed=4)
    x = np.random.default_rng(4).standard_normal((2, 12, 2, 4))
    y = np.array([0, 2])
    g1, _ = input_gradient(net, x, y, "logit-margin")
    net.params[-1]["W"] *= 2.5
    net.bump()
    np.testing.assert_allclose(input_gradient(net, x, y, "logit-margin")[0], 2.5 * g1, rtol=1e-10, atol=1e-14)


def test_saturated_gradient_is_small():
    net = tiny_classifier(seed=5)
    x = np.random.default_rng(5).standard_normal((1, 12, 2, 4))
    net.params[-1]["W"][...] = 0
    net.params[-1]["b"][...] = [40.0, 0, 0, 0]
    net.bump()
    assert np.linalg.norm(input_gradient(net, x, np.array([0]))[0]) < 1e-3


def test_unknown_loss_mode():
    with pytest.raises(ConfigurationError):
        input_gradient(tiny_classifier(), np.zeros((1, 12, 2, 4)), [0], "hinge")


def test_training_reaches_good_f1_and_is_deterministic(small_ds):
    cfg = ClassifierConfig((32, 32), epochs=40, learning_rate=3e-3, seed=0)
    net, hist = train_classifier(small_ds, cfg)
    net2, _ = train_classifier(small_ds, cfg)
    assert all(a[k].tobytes() == b[k].tobytes() for a, b in zip(net.params, net2.params) for k in a)
    assert len(hist) == 40 and set(hist[0]) == {"epoch", "train_loss", "val_f1"}
    f1 = macro_f1(predict(net, small_ds.X("test")).argmax(1), small_ds.y("test"))
    assert f1 >= 0.75


def test_single_class_dataset_is_trivial():
    ds = generate_dataset(GenConfig(W=12, K=2, samples_per_class=6))
    keep = ds.labels == 2
    one = Dataset(ds.windows[keep], ds.labels[keep], seed=0)
    one = normalize(split(one, seed=0))
    net, _ = train_classifier(one, ClassifierConfig((4, 4), epochs=40, learning_rate=1e-2))
    pred = predict(net, one.X("train")).argmax(1)
    assert macro_f1(pred, one.y("train"), classes=[2]) == 1.0


def test_train_requires_normalized():
    ds = split(generate_dataset(GenConfig(W=12, K=2, samples_per_class=5)), seed=0)
    with pytest.raises(ConfigurationError):
        train_classifier(ds)


def test_sklearn_estimator_api(small_ds):
    est = PmuEventClassifier(conv_channels=(4, 4), epochs=2, random_state=1)
    assert clone(est).get_params() == est.get_params()
    est.fit(small_ds.X("train"), small_ds.y("train"))
    proba = est.predict_proba(small_ds.X("test"))
    assert proba.shape == (len(small_ds.y("test")), 4)
    assert set(est.predict(small_ds.X("test"))) <= {0, 1, 2, 3}
    assert 0 <= est.score(small_ds.X("test"), small_ds.y("test")) <= 1
    wrapped = PmuEventClassifier.from_network(est.net_)
    np.testing.assert_array_equal(wrapped.predict(small_ds.X("test")), est.predict(small_ds.X("test")))
