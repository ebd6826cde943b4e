import numpy as np
import pytest

from splatcal.errors import ShapeError
from splatcal.photometric import (PSNR_CAP, get_perceptual, mse, perceptual_proxy,
                                  photometric_loss, psnr, register_perceptual)


def _pair(seed=0, shape=(16, 12, 3)):
    rng = np.random.default_rng(seed)
    return rng.uniform(size=shape), rng.uniform(size=shape)


def _fd(fn, x, idx, eps=1e-6):
    xp, xm = x.copy(), x.copy()
    xp[idx] += eps
    xm[idx] -= eps
    return (fn(xp) - fn(xm)) / (2 * eps)


def test_mse_term_and_total():
    a, b = _pair()
    lv = photometric_loss(a, b, lam=0.0)
    assert np.isclose(lv.total, np.mean((a - b) ** 2))
    assert lv.percep_term == 0.0
    lv = photometric_loss(a, b, lam=0.5)
    assert np.isclose(lv.total, lv.mse_term + 0.5 * lv.percep_term)


@pytest.mark.parametrize("lam", [0.0, 0.5, 2.0])
def test_loss_gradient_matches_finite_differences(lam):
    a, b = _pair(1)
    lv = photometric_loss(a, b, lam=lam)
    rng = np.random.default_rng(2)
    for _ in range(10):
        idx = tuple(rng.integers(0, s) for s in a.shape)
        num = _fd(lambda x: photometric_loss(x, b, lam=lam).total, a, idx)
        assert abs(num - lv.grad_image[idx]) < 1e-6 * max(1.0, abs(num))


def test_perceptual_ignores_constant_offset():
    a, _ = _pair()
    v, g = perceptual_proxy(a + 0.1, a)
    assert v < 1e-12 and np.abs(g).max() < 1e-9


def test_perceptual_needs_8px():
    with pytest.raises(ShapeError):
        perceptual_proxy(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)))


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        photometric_loss(np.zeros((8, 8, 3)), np.zeros((8, 9, 3)))


def test_register_external_perceptual():
    def l1(pred, target):
        d = pred - target
        return float(np.abs(d).mean()), np.sign(d) / d.size

    register_perceptual("l1-test", l1)
    a, b = _pair()
    lv = photometric_loss(a, b, lam=1.0, perceptual="l1-test")
    assert np.isclose(lv.percep_term, np.abs(a - b).mean())
    with pytest.raises(KeyError):
        get_perceptual("nope")


def test_psnr():
    a, _ = _pair()
    assert psnr(a, a) == PSNR_CAP
    b = np.clip(a + 0.1, 0, 1)
    assert np.isclose(psnr(a, b), -10 * np.log10(mse(a, b)))
