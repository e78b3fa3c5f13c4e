import numpy as np
import pytest

import oracles
from flowmatte.core import ParameterError, VideoClip
from flowmatte.defocus import defocus, depth_blur, gaussian_blur, normalize_depth


def frames(T=2, H=12, W=14, seed=0):
    return np.random.default_rng(seed).random((T, H, W, 3))


@pytest.mark.parametrize("sigma", [0.7, 1.5, 2.0])
def test_gaussian_blur_matches_direct_convolution(sigma):
    f = frames(1)[0]
    np.testing.assert_allclose(gaussian_blur(f, sigma), oracles.blur_direct(f, sigma), atol=1e-6, rtol=0)


def test_constant_depth_is_single_gaussian():
    x = frames()
    out = depth_blur(x, np.ones(x.shape[:3]), 1.5)
    for t in range(len(x)):
        np.testing.assert_allclose(out[t], oracles.blur_direct(x[t], 1.5), atol=1e-6, rtol=0)


def test_zero_alpha_constant_depth_is_full_blur():
    x = frames()
    out = defocus(x, np.zeros(x.shape[:3]), depth=3.0, strength=1.5).frames
    np.testing.assert_allclose(out[0], oracles.blur_direct(x[0], 1.5), atol=1e-6, rtol=0)


def test_identities():
    x = frames()
    a = np.random.default_rng(1).random(x.shape[:3])
    np.testing.assert_array_equal(defocus(x, a, strength=0).frames, x)
    np.testing.assert_allclose(defocus(x, np.ones(x.shape[:3]), strength=3).frames, x, atol=1e-12)
    np.testing.assert_allclose(defocus(x, a, depth=0.0, strength=3).frames, x, atol=1e-12)


def test_fps_preserved_and_errors():
    x = VideoClip(frames(), fps=24.0)
    assert defocus(x, np.zeros((2, 12, 14)), strength=1).fps == 24.0
    with pytest.raises(ParameterError):
        defocus(x, np.zeros((2, 12, 14)), strength=-1)
    with pytest.raises(Exception):
        defocus(x, np.zeros((2, 12, 13)))


def test_normalize_depth():
    d = normalize_depth(np.array([[1.0, 2.0], [0.0, 4.0]]), (3, 2, 2))
    assert d.shape == (3, 2, 2) and d.max() == 1.0 and d[0, 0, 0] == 0.25
    assert np.all(normalize_depth(0.0, (1, 2, 2)) == 0)
    with pytest.raises(ValueError):
        normalize_depth(-np.ones((2, 2)), (1, 2, 2))
    with pytest.raises(ValueError):
        normalize_depth(np.ones((3, 3)), (1, 2, 2))


def test_blur_grows_with_depth():
    x = frames(1, 24, 24)
    depth = np.tile(np.linspace(0, 1, 24)[None, :], (24, 1))
    out = depth_blur(x, depth[None], 2.0)
    left, right = np.abs(out - x)[0, :, :4].mean(), np.abs(out - x)[0, :, -4:].mean()
    assert left < right
