import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sidnism.image_core import to_grayscale
from sidnism.metrics import (
    build_report,
    color_entropy,
    gaussian_window,
    gray_entropy,
    gray_mean_gradient,
    gray_mean_illumination,
    psnr,
    ssim,
    ssim_map,
)

unit = st.floats(0.0, 1.0, allow_nan=False)


def rgb(h, w):
    return arrays(np.float64, (h, w, 3), elements=unit)


# -- entropy ---------------------------------------------------------------------


def test_gray_entropy_examples():
    assert gray_entropy(np.full((8, 8, 3), 0.4)) == 0.0
    uniform = (np.arange(1024) % 256 / 255.0).reshape(32, 32, 1)
    assert gray_entropy(uniform) == pytest.approx(8.0, abs=1e-9)
    coin = np.zeros((4, 4, 1))
    coin[:2] = 1.0
    assert gray_entropy(coin) == pytest.approx(1.0, abs=1e-12)


def test_color_entropy_examples():
    assert color_entropy(np.full((4, 4, 3), 0.2)) == 0.0
    levels = np.arange(256 * 4) % 256 / 255.0
    img = np.stack([levels, np.roll(levels, 7), np.roll(levels, 99)], axis=1).reshape(32, 32, 3)
    assert color_entropy(img) == pytest.approx(24.0, abs=1e-9)
    with pytest.raises(ValueError):
        color_entropy(np.zeros((4, 4, 1)))


def test_entropy_oracle_against_scipy():
    from scipy.stats import entropy

    rng = np.random.default_rng(0)
    img = rng.uniform(size=(20, 20, 3)) ** 2
    levels = np.floor(to_grayscale(img) * 255 + 0.5).astype(int).ravel()
    counts = np.bincount(levels, minlength=256)
    assert gray_entropy(img) == pytest.approx(entropy(counts, base=2), abs=1e-12)


@settings(max_examples=30)
@given(img=rgb(6, 6))
def test_color_entropy_on_gray_images(img):
    g = np.repeat(img[:, :, :1], 3, axis=2)
    assert color_entropy(g) == pytest.approx(3 * gray_entropy(g), abs=1e-9)


@settings(max_examples=30)
@given(img=rgb(6, 7), seed=st.integers(0, 1000))
def test_gray_entropy_permutation_invariant(img, seed):
    flat = img.reshape(-1, 3)
    shuffled = flat[np.random.default_rng(seed).permutation(len(flat))].reshape(img.shape)
    assert gray_entropy(shuffled) == gray_entropy(img)


@settings(max_examples=30)
@given(img=rgb(12, 12))
def test_report_ranges(img):
    r = build_report(img, np.clip(img[::-1], 0, 1))
    assert 0 <= r.ge <= 8 and 0 <= r.ce <= 24 and 0 <= r.gmi <= 255
    assert 0 <= r.ssim <= 1


# -- GMI / GMG --------------------------------------------------------------------


def test_gmi_examples():
    assert gray_mean_illumination(np.zeros((4, 4, 3))) == 0.0
    assert gray_mean_illumination(np.ones((4, 4, 3))) == pytest.approx(255.0)
    half = np.zeros((4, 4, 1))
    half[:2] = 1.0
    assert gray_mean_illumination(half) == pytest.approx(127.5)


def test_gmg_examples():
    assert gray_mean_gradient(np.full((5, 5, 3), 0.3)) == 0.0
    W = 9
    ramp = np.tile(np.arange(W) / (W - 1), (6, 1))[:, :, None]
    # every column but the last has slope 255/(W-1)
    assert gray_mean_gradient(ramp) == pytest.approx(255 / (W - 1) * (W - 1) / W)


def test_gmg_checkerboard_brute_force():
    board = (np.indices((4, 4)).sum(axis=0) % 2).astype(float)[:, :, None]
    total = 0.0
    for y in range(4):
        for x in range(4):
            gh = board[y, x + 1, 0] - board[y, x, 0] if x < 3 else 0.0
            gv = board[y + 1, x, 0] - board[y, x, 0] if y < 3 else 0.0
            total += np.hypot(gh, gv) * 255
    assert gray_mean_gradient(board) == pytest.approx(total / 16)


# -- PSNR --------------------------------------------------------------------------


def test_psnr_examples():
    rng = np.random.default_rng(1)
    ref = rng.uniform(0, 0.9, size=(8, 8, 3))
    assert psnr(ref, ref) == 100.0
    assert psnr(ref + 0.1, ref) == pytest.approx(20.0, abs=1e-9)
    assert psnr(np.ones((4, 4, 3)), np.zeros((4, 4, 3))) == pytest.approx(0.0)
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def test_psnr_decreases_with_error():
    ref = np.full((8, 8, 3), 0.2)
    values = [psnr(ref + d, ref) for d in np.linspace(0.01, 0.8, 40)]
    assert np.all(np.diff(values) < 0)


# -- SSIM --------------------------------------------------------------------------


def brute_ssim(a, b):
    """Window-by-window SSIM with explicit weighted sums."""
    w1 = gaussian_window()
    w = np.outer(w1, w1)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    H, W = a.shape
    vals = []
    for i in range(H - 10):
        for j in range(W - 10):
            pa, pb = a[i:i + 11, j:j + 11], b[i:i + 11, j:j + 11]
            ma, mb = np.sum(w * pa), np.sum(w * pb)
            va = np.sum(w * (pa - ma) ** 2)
            vb = np.sum(w * (pb - mb) ** 2)
            cov = np.sum(w * (pa - ma) * (pb - mb))
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return np.mean(vals)


def test_ssim_map_matches_brute_force():
    rng = np.random.default_rng(2)
    a = rng.uniform(size=(16, 18))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    assert ssim_map(a, b).mean() == pytest.approx(brute_ssim(a, b), abs=1e-12)


def test_ssim_matches_skimage():
    from skimage.metrics import structural_similarity

    rng = np.random.default_rng(3)
    a = rng.uniform(size=(40, 40, 3))
    b = np.clip(a * 0.7 + rng.normal(0, 0.05, a.shape), 0, 1)
    ga, gb = to_grayscale(a)[:, :, 0], to_grayscale(b)[:, :, 0]
    # skimage averages over the valid region after cropping (win_size - 1) / 2
    _, full = structural_similarity(ga, gb, gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False, data_range=1.0, full=True)
    ref = full[5:-5, 5:-5].mean()
    assert ssim(a, b) == pytest.approx(ref, abs=1e-9)


def test_ssim_identity_and_symmetry():
    rng = np.random.default_rng(4)
    a, b = rng.uniform(size=(2, 20, 20, 3))
    assert ssim(a, a) == 1.0
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-12


def test_ssim_anticorrelated_low():
    rng = np.random.default_rng(0)
    a = rng.uniform(size=(64, 64, 1))
    assert ssim(a, 1 - a) < 0.2


def test_ssim_constant_closed_form():
    a, b = 0.3, 0.6
    c1 = 1e-4
    expected = (2 * a * b + c1) / (a * a + b * b + c1)
    assert ssim(np.full((12, 12, 1), a), np.full((12, 12, 1), b)) == pytest.approx(expected, rel=1e-12)


def test_ssim_too_small():
    with pytest.raises(ValueError):
        ssim(np.zeros((10, 20, 3)), np.zeros((10, 20, 3)))


# -- report ------------------------------------------------------------------------


def test_report_without_reference():
    r = build_report(np.full((12, 12, 3), 0.5))
    assert r.psnr is None and r.ssim is None
    assert r.ge == 0 and r.ce == 0 and r.gmg == 0
    assert r.gmi == pytest.approx(127.5)
    assert round(r.gmi) in (127, 128)


def test_report_with_identical_reference():
    img = np.random.default_rng(5).uniform(size=(16, 16, 3))
    r = build_report(img, img)
    assert r.ssim == 1.0 and r.psnr == 100.0


def test_report_scale_on_natural_like_image():
    # smooth scene plus texture: GE lands in the several-bit regime, GMI on the 8-bit scale
    rng = np.random.default_rng(6)
    yy, xx = np.mgrid[0:128, 0:128] / 127
    base = 0.5 + 0.4 * np.sin(3 * xx) * np.cos(2 * yy)
    img = np.clip(base[:, :, None] + 0.1 * rng.normal(size=(128, 128, 3)), 0, 1)
    r = build_report(img)
    assert 5 < r.ge <= 8 and 15 < r.ce <= 24 and 0 <= r.gmi <= 255
