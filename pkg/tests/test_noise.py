import numpy as np
import pytest

from rldiffusion.noise import NoiseSpec, add_gaussian, add_poisson, add_salt_pepper


def test_gaussian_vanishing_sigma():
    f = np.random.default_rng(0).random((16, 16))
    assert np.max(np.abs(add_gaussian(f, 1e-9, 3) - f)) < 1e-9


def test_gaussian_std_and_determinism():
    f = np.full((256, 256), 0.5)
    g = add_gaussian(f, 25, seed=4)
    assert abs(np.std(g - f) / (25 / 255) - 1) < 0.03
    np.testing.assert_array_equal(g, add_gaussian(f, 25, seed=4))
    assert not np.array_equal(g, add_gaussian(f, 25, seed=5))


def test_gaussian_not_clipped():
    g = add_gaussian(np.zeros((64, 64)), 25, seed=1)
    assert g.min() < 0


def test_gaussian_uncorrelated():
    f = np.full((512, 512), 0.5)
    n = add_gaussian(f, 25, seed=9) - f
    n = n - n.mean()
    for a, b in ((n[:, 1:], n[:, :-1]), (n[1:, :], n[:-1, :])):
        rho = np.sum(a * b) / np.sqrt(np.sum(a * a) * np.sum(b * b))
        assert abs(rho) < 0.02


def test_salt_pepper():
    f = np.full((512, 512), 0.3)
    g = add_salt_pepper(f, 1.0, seed=1)
    assert set(np.unique(g)) <= {0.0, 1.0}
    g = add_salt_pepper(f, 0.5, seed=2)
    corrupted = g != 0.3
    assert abs(corrupted.mean() - 0.5) < 0.01
    assert np.all(g[~corrupted] == 0.3)
    assert abs(np.mean(g[corrupted]) - 0.5) < 0.01


def test_poisson():
    assert np.all(add_poisson(np.zeros((8, 8)), 30, seed=0) == 0)
    f = np.full((256, 256), 0.5)
    g = add_poisson(f, 30, seed=1)
    assert abs(np.var(g) / (0.5 / 30) - 1) < 0.05
    g = add_poisson(f, 120, seed=2)
    assert abs(g.mean() / 0.5 - 1) < 0.02
    np.testing.assert_array_equal(g, add_poisson(f, 120, seed=2))


@pytest.mark.parametrize("fn,level", [(add_gaussian, 0), (add_salt_pepper, 0), (add_salt_pepper, 1.5), (add_poisson, -1)])
def test_preconditions(fn, level):
    with pytest.raises(ValueError):
        fn(np.zeros((2, 2)), level, 0)


def test_noise_spec():
    f = np.full((8, 8), 0.5)
    spec = NoiseSpec("poisson", 10, seed=3)
    np.testing.assert_array_equal(spec.apply(f), add_poisson(f, 10, 3))
    assert NoiseSpec("gaussian", 15).exceeds_range
    assert not NoiseSpec("salt_pepper", 0.1).exceeds_range
    with pytest.raises(ValueError):
        NoiseSpec("speckle", 1)
    with pytest.raises(ValueError):
        NoiseSpec("salt_pepper", 10)
