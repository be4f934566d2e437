import numpy as np
import pytest
from hypothesis import settings

from metaobject.core import Dataset, ImageRecord, PatchRecord, l2_normalize
from metaobject.synthetic import SynthSpec, generate_synthetic

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


def make_dataset(n_images=2, patches_per_image=3, d=16, n_classes=2, seed=0):
    rng = np.random.default_rng(seed)
    images, patches = [], []
    pid = 0
    for i in range(n_images):
        members = []
        for _ in range(patches_per_image):
            f = l2_normalize(rng.standard_normal(d))
            bbox = tuple(float(v) for v in (rng.uniform(0, 1), rng.uniform(0, 1), 0.2, 0.3))
            patches.append(PatchRecord(pid, i, f, bbox, "bottom"))
            members.append(pid)
            pid += 1
        images.append(ImageRecord(i, i % n_classes, tuple(members), l2_normalize(rng.standard_normal(d)), "train"))
    return Dataset(tuple(images), tuple(patches), n_classes, d)


@pytest.fixture
def small_dataset():
    return make_dataset()


@pytest.fixture(scope="session")
def small_synth():
    spec = SynthSpec(num_classes=4, images_per_class=6, patches_per_image=5, feature_dim=16, seed=3)
    return spec, *generate_synthetic(spec)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
