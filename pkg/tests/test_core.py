import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from metaobject.core import (ValidationError, l2_normalize, log_softmax, softmax,
                             validate_dataset)

from conftest import make_dataset


def test_l2_normalize_examples():
    np.testing.assert_allclose(l2_normalize(np.array([3.0, 4.0])), [0.6, 0.8])
    np.testing.assert_array_equal(l2_normalize(np.zeros(2)), [0.0, 0.0])
    v = np.random.default_rng(0).standard_normal(4096)
    assert abs(np.linalg.norm(l2_normalize(v)) - 1.0) < 1e-9


def test_l2_normalize_rejects_non_finite():
    with pytest.raises(ValidationError):
        l2_normalize(np.array([1.0, np.nan]))
    with pytest.raises(ValidationError):
        l2_normalize(np.array([np.inf, 0.0]))


def test_l2_normalize_rows():
    X = np.array([[3.0, 4.0], [0.0, 0.0], [0.0, 2.0]])
    np.testing.assert_allclose(l2_normalize(X), [[0.6, 0.8], [0.0, 0.0], [0.0, 1.0]])


@given(arrays(np.float64, st.integers(1, 50), elements=st.floats(-1e6, 1e6)))
def test_l2_normalize_idempotent(v):
    once = l2_normalize(v)
    np.testing.assert_allclose(l2_normalize(once), once, atol=1e-12, rtol=0)
    n = np.linalg.norm(once)
    assert n == 0.0 or abs(n - 1.0) < 1e-9


@given(arrays(np.float64, (4, 5), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(Z):
    np.testing.assert_allclose(softmax(Z).sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.exp(log_softmax(Z)), softmax(Z), atol=1e-12)


def test_valid_dataset_has_empty_report():
    rep = validate_dataset(make_dataset())
    assert rep.ok and len(rep) == 0


def test_dangling_image_id():
    ds = make_dataset()
    p = ds.patches[0]
    bad = dataclasses.replace(p, image_id=99)
    ds = dataclasses.replace(ds, patches=(bad, *ds.patches[1:]))
    rep = validate_dataset(ds)
    dangling = [v for v in rep if "dangling image_id" in v]
    assert len(dangling) == 1


def test_dimension_mismatch():
    ds = make_dataset(d=16)
    p = ds.patches[1]
    bad = dataclasses.replace(p, feature=np.ones(10) / np.sqrt(10))
    ds = dataclasses.replace(ds, patches=(ds.patches[0], bad, *ds.patches[2:]))
    rep = validate_dataset(ds)
    assert len(rep) == 1 and "dimension mismatch" in list(rep)[0]


def test_label_gap_and_shared_patch():
    ds = make_dataset(n_images=2, n_classes=3)
    assert any("label gap" in v for v in validate_dataset(ds))
    ds = make_dataset()
    im0, im1 = ds.images
    shared = dataclasses.replace(im1, patches=im1.patches + (im0.patches[0],))
    ds = dataclasses.replace(ds, images=(im0, shared))
    assert any("shared" in v or "belongs to" in v for v in validate_dataset(ds))


def test_empty_dataset_reported():
    ds = dataclasses.replace(make_dataset(), images=(), patches=())
    assert any("empty dataset" in v for v in validate_dataset(ds))


def test_dataset_views(small_dataset):
    ds = small_dataset
    assert ds.patch_matrix.shape == (6, 16)
    assert list(ds.patch_image_ids) == [0, 0, 0, 1, 1, 1]
    assert list(ds.patch_labels) == [0, 0, 0, 1, 1, 1]
    assert ds.levels() == ["bottom"]
    np.testing.assert_array_equal(ds.patch_rows(level="top"), [])
