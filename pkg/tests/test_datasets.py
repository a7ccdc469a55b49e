import numpy as np
import pytest

from ddimedit.datasets import DATASETS, toy_datasets


def test_gaussian_mean_within_four_standard_errors():
    x = toy_datasets("gaussian2d", 10_000, 0, mu=(1.0, 0.0), s=0.5)
    se = 0.5 / np.sqrt(10_000)
    assert np.all(np.abs(x.mean(axis=0) - [1.0, 0.0]) < 4 * se)


def test_ring_radii_bounded():
    x = toy_datasets("ring2d", 5000, 1, r=2.0, sigma=0.1)
    radii = np.linalg.norm(x, axis=1)
    assert radii.min() >= 2.0 - 0.3 - 1e-12 and radii.max() <= 2.0 + 0.3 + 1e-12


@pytest.mark.parametrize("name", DATASETS)
def test_seeded_determinism(name):
    a = toy_datasets(name, 7, 3)
    b = toy_datasets(name, 7, np.random.default_rng(3))
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != toy_datasets(name, 7, 4).tobytes()


@pytest.mark.parametrize("name", ["blobs-images-32", "stripes-images-32"])
def test_image_sets_shape_and_range(name):
    x = toy_datasets(name, 5, 0)
    assert x.shape == (5, 1, 32, 32)
    assert x.min() >= 0.0 and x.max() <= 1.0
    assert toy_datasets(name, 2, 0, size=8).shape == (2, 1, 8, 8)


def test_unknown_dataset():
    with pytest.raises(KeyError):
        toy_datasets("mnist", 3, 0)
