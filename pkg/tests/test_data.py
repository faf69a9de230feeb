import numpy as np
import pytest

from prunediff.data import DegradationParams, degrade, gaussian_kernel, make_dataset, resize_bicubic


def test_identity_pipeline(rng):
    hq = rng.uniform(0, 1, (3, 16, 16)).astype(np.float32)
    lq = degrade(hq, DegradationParams(blur_sigma=0, scale_factor=1, noise_sigma=0))
    np.testing.assert_array_equal(lq, hq)


def test_blur_impulse_response():
    img = np.zeros((1, 21, 21))
    img[0, 10, 10] = 1.0
    sigma = 1.5
    out = degrade(img, DegradationParams(blur_sigma=sigma, scale_factor=1, noise_sigma=0))
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    assert r == 5
    expected = np.zeros((21, 21))
    expected[10 - r:10 + r + 1, 10 - r:10 + r + 1] = np.outer(k, k)
    np.testing.assert_allclose(out[0], expected, atol=1e-7)


@pytest.mark.parametrize("sigma", [0.5, 1.0, 2.3])
def test_kernel_normalized(sigma):
    assert abs(gaussian_kernel(sigma).sum() - 1.0) < 1e-6


@pytest.mark.parametrize("scale", [2, 4])
def test_constant_preserved(scale):
    img = np.full((3, 16, 16), 0.37)
    out = degrade(img, DegradationParams(blur_sigma=1.2, scale_factor=scale, noise_sigma=0))
    np.testing.assert_allclose(out, 0.37, atol=1e-6)
    assert out.shape == img.shape


def test_bicubic_reproduces_linear_ramp_interior():
    x = np.tile(np.arange(16, dtype=np.float64), (16, 1))
    up = resize_bicubic(resize_bicubic(x, (8, 8)), (16, 16))
    # cubic convolution is exact on linear functions away from the clamped border
    np.testing.assert_allclose(up[:, 5:11], x[:, 5:11], atol=1e-9)


def test_degrade_errors_and_determinism(rng):
    with pytest.raises(ValueError, match="divisible"):
        degrade(np.zeros((1, 10, 10)), DegradationParams(scale_factor=4))
    with pytest.raises(ValueError):
        degrade(np.zeros((1, 8, 8)), DegradationParams(noise_sigma=-1))
    hq = rng.uniform(0, 1, (3, 16, 16))
    p = DegradationParams(seed=5)
    np.testing.assert_array_equal(degrade(hq, p), degrade(hq, p))
    assert not np.array_equal(degrade(hq, p), degrade(hq, DegradationParams(seed=6)))
    # noise is the only stochastic stage
    np.testing.assert_array_equal(degrade(hq, DegradationParams(noise_sigma=0, seed=1)), degrade(hq, DegradationParams(noise_sigma=0, seed=2)))


def test_dataset_contract():
    p = DegradationParams()
    one = make_dataset(1, 32, 7, p)
    again = make_dataset(1, 32, 7, p)
    np.testing.assert_array_equal(one[0][0], again[0][0])
    np.testing.assert_array_equal(one[0][1], again[0][1])
    pairs = make_dataset(64, 32, 7, p)
    hq = np.stack([h for h, _ in pairs])
    assert hq.shape == (64, 3, 32, 32)
    assert hq.min() >= 0.0 and hq.max() <= 1.0
    diffs = np.abs(hq[:, None] - hq[None]).max(axis=(2, 3, 4))
    assert np.all(diffs[~np.eye(64, dtype=bool)] > 0)
    # item i depends only on (seed, i)
    np.testing.assert_array_equal(pairs[0][0], one[0][0])
    with pytest.raises(ValueError, match="power of two"):
        make_dataset(2, 24, 0, p)
