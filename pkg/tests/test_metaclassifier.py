import logging

import numpy as np
import pytest

from metaobject.core import ValidationError
from metaobject.metaclassifier import (MetaClassifier, MetaTrainingSet, build_meta_training_set, classify_region,
                                       classify_regions, nearest_exemplar_labels, rim_direct_labels,
                                       train_meta_classifier)
from metaobject.nn import MLP, loss_and_grad
from metaobject.rim import ClusterAssignment, RimModel
from metaobject.screening import ScreenedSet

from oracles import central_diff, rel_err


def _assignment(labels, N, d=4):
    n = len(labels)
    P = np.full((n, N), 0.1 / max(N - 1, 1))
    P[np.arange(n), labels] = 0.9
    return ClusterAssignment(np.asarray(labels), P, np.zeros((N, d)), np.bincount(labels, minlength=N))


def test_background_count_is_floor():
    rng = np.random.default_rng(0)
    ids = np.arange(1000)
    X = rng.standard_normal((1000, 4))
    s = ScreenedSet(ids[:630], ids[630:], 0.37)
    ts = build_meta_training_set(s, _assignment(rng.integers(0, 5, 630), 5), ids, X, 0.25, seed=1)
    assert ts.n_background == 157 and np.sum(ts.labels == 0) == 157
    assert ts.labels.max() <= 5
    again = build_meta_training_set(s, _assignment(rng.integers(0, 5, 630), 5), ids, X, 0.25, seed=1)
    np.testing.assert_array_equal(ts.patch_ids[ts.labels == 0], again.patch_ids[again.labels == 0])


def test_zero_ratio_labels_are_clusters_plus_one():
    ids = np.arange(20)
    X = np.random.default_rng(0).standard_normal((20, 4))
    lab = np.arange(12) % 3
    s = ScreenedSet(ids[:12], ids[12:], 0.4)
    ts = build_meta_training_set(s, _assignment(lab, 3), ids, X, 0.0)
    np.testing.assert_array_equal(ts.labels, lab + 1)


def test_no_discarded_warns(caplog):
    ids = np.arange(10)
    X = np.zeros((10, 4))
    s = ScreenedSet(ids, ids[:0], 0.0)
    with caplog.at_level(logging.WARNING):
        ts = build_meta_training_set(s, _assignment(np.zeros(10, int), 2), ids, X, 0.25)
    assert ts.n_background == 0 and "no discarded" in caplog.text


def test_assignment_must_cover_kept():
    ids = np.arange(10)
    with pytest.raises(ValidationError):
        build_meta_training_set(ScreenedSet(ids, ids[:0], 0), _assignment(np.zeros(5, int), 2), ids, np.zeros((10, 4)))


def _separable(seed=0, n=40, d=6):
    rng = np.random.default_rng(seed)
    y = np.repeat([1, 2], n // 2)
    X = rng.standard_normal((n, d)) * 0.1
    X[:, 0] += np.where(y == 1, 2.0, -2.0)
    return MetaTrainingSet(X, y, np.arange(n), 2, 0)


def test_separable_training_accuracy():
    ts = _separable()
    m = train_meta_classifier(ts, hidden=16, epochs=200, lr=1e-2, batch_size=8)
    assert np.all(classify_regions(m, ts.features) == ts.labels)
    label, p = classify_region(m, ts.features[0])
    assert label == 1 and p.shape == (3,)


def test_gradient_small_network():
    rng = np.random.default_rng(2)
    ts = MetaTrainingSet(rng.standard_normal((20, 8)), rng.integers(0, 4, 20), np.arange(20), 3, 0)
    m = train_meta_classifier(ts, hidden=4, epochs=1)
    _, grads = loss_and_grad(m.net, ts.features, ts.labels, 0.05)
    fd = central_diff(lambda: loss_and_grad(m.net, ts.features, ts.labels, 0.05)[0], m.net.params())
    for g, f in zip(grads, fd):
        assert rel_err(g, f) < 1e-4


def test_deterministic():
    ts = _separable(1)
    a = train_meta_classifier(ts, hidden=8, epochs=5, seed=4)
    b = train_meta_classifier(ts, hidden=8, epochs=5, seed=4)
    for x, y in zip(a.net.params(), b.net.params()):
        np.testing.assert_array_equal(x, y)


def test_uniform_logits_and_normalization():
    net = MLP([np.zeros((4, 6)), np.zeros((5, 4))], [np.zeros(4), np.zeros(5)])
    m = MetaClassifier(net, 4)
    label, p = classify_region(m, np.random.default_rng(0).standard_normal(6))
    np.testing.assert_allclose(p, 0.2)
    assert label == 0
    with pytest.raises(ValidationError):
        classify_region(m, np.zeros(5))
    back = MetaClassifier.from_dict(m.to_dict())
    assert back.n_meta == 4


def test_rim_direct_threshold():
    W = np.array([[5.0, 0.0], [0.0, 5.0], [0.0, 0.0], [0.0, 0.0]])
    m = RimModel(W, np.zeros(4))
    X = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    np.testing.assert_array_equal(rim_direct_labels(m, X), [1, 2, 0])


def test_nearest_exemplar_labels():
    E = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
    lab = np.array([3, 7, 9])
    out = nearest_exemplar_labels(np.array([[0.9, 0.1], [-1.0, 0.0]]), E, lab)
    np.testing.assert_array_equal(out, [7, 3])


def test_nearest_exemplar_skips_own_group():
    E = np.array([[0.0, 0.0], [1.0, 0.0]])
    X = np.array([[0.1, 0.0], [0.1, 0.0]])
    out = nearest_exemplar_labels(X, E, np.array([5, 6]), groups=np.array([0, 1]), exemplar_groups=np.array([0, 1]))
    np.testing.assert_array_equal(out, [6, 5])
