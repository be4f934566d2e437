import numpy as np

from metaobject.core import validate_dataset
from metaobject.ingest import save_dataset
from metaobject.synthetic import KIND_DISCRIMINATIVE, KIND_OUTLIER, KIND_SHARED, GroundTruth, SynthSpec, generate_synthetic


def test_determinism_bytes(tmp_path):
    spec = SynthSpec(seed=7, images_per_class=4, patches_per_image=5, feature_dim=16)
    a, _ = generate_synthetic(spec)
    b, _ = generate_synthetic(spec)
    fa = save_dataset(a, tmp_path / "a")
    fb = save_dataset(b, tmp_path / "b")
    for x, y in zip(fa, fb):
        assert x.read_bytes() == y.read_bytes()


def test_generator_output_is_valid(small_synth):
    _, ds, gt = small_synth
    assert validate_dataset(ds).ok
    assert len(gt.patch_ids) == len(ds.patches)


def test_no_shared_no_outliers_class_unique():
    spec = SynthSpec(num_classes=4, images_per_class=5, patches_per_image=6, feature_dim=16,
                     outlier_fraction=0.0, shared_objects=0)
    ds, gt = generate_synthetic(spec)
    assert np.all(gt.kind == KIND_DISCRIMINATIVE)
    np.testing.assert_array_equal(gt.object_class, ds.patch_labels)


def test_nearest_center_recovers_objects():
    spec = SynthSpec(num_classes=5, discriminative_objects_per_class=2, blob_sigma=0.01, outlier_fraction=0.0,
                     shared_objects=0, images_per_class=10, patches_per_image=8, feature_dim=32, seed=1)
    ds, gt = generate_synthetic(spec)
    X = ds.patch_matrix
    d2 = ((X[:, None, :] - gt.centers[None, :, :]) ** 2).sum(-1)
    assert np.mean(np.argmin(d2, axis=1) == gt.object_id) >= 0.99


def test_center_separation_over_seeds():
    ok = 0
    for seed in range(20):
        spec = SynthSpec(seed=seed, images_per_class=1, patches_per_image=1, feature_dim=32, blob_sigma=0.05)
        _, gt = generate_synthetic(spec)
        C = gt.centers
        d = np.sqrt(((C[:, None] - C[None]) ** 2).sum(-1))
        d[np.diag_indices(len(C))] = np.inf
        ok += d.min() > 6 * spec.blob_sigma
    assert ok == 20


def test_mix_and_split_fractions():
    spec = SynthSpec(seed=2)
    ds, gt = generate_synthetic(spec)
    frac_out = np.mean(gt.kind == KIND_OUTLIER)
    assert abs(frac_out - spec.outlier_fraction) < 0.02
    assert np.mean(gt.kind == KIND_SHARED) > 0.1
    assert np.sum(ds.image_splits == "train") == 10 * 32


def test_ground_truth_round_trip(tmp_path, small_synth):
    _, _, gt = small_synth
    back = GroundTruth.load(gt.save(tmp_path / "gt.npz"))
    for k in GroundTruth.__dataclass_fields__:
        np.testing.assert_array_equal(getattr(back, k), getattr(gt, k))


def test_spec_round_trip():
    spec = SynthSpec(seed=5, levels=("bottom",))
    assert SynthSpec.from_dict(spec.to_dict()) == spec
