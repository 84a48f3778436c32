import math

import numpy as np
import pytest
from skimage.color import deltaE_ciede2000, rgb2lab

from delnet.metrics import (MS_SSIM_WEIGHTS, PSNR_CAP, MetricError, ciede2000, ciede2000_lab,
                            evaluate, ms_ssim, ms_ssim_scales, ms_ssim_weights, psnr, srgb_to_lab,
                            ssim, window_size_for)
from delnet.tensor import ShapeError, Tensor

from oracles import CIEDE2000_PAIRS, ms_ssim_literal, ssim_literal


def _pair(seed, shape=(3, 64, 64), noise=0.1):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 1, shape)
    return a, np.clip(a + rng.normal(0, noise, shape), 0, 1)


# -- PSNR -----------------------------------------------------------------------------

def test_psnr_zero_db_for_full_scale_error():
    assert abs(psnr(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.ones((1, 3, 4, 4)))) - 0.0) < 1e-9


def test_psnr_half_scale_error():
    got = psnr(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.full((1, 3, 4, 4), 0.5)))
    assert abs(got - 20 * math.log10(2)) < 1e-9
    assert abs(got - 6.0206) < 1e-4


def test_psnr_identical_hits_cap():
    x = Tensor(np.random.default_rng(0).uniform(0, 1, (1, 3, 8, 8)))
    assert psnr(x, x) == PSNR_CAP


def test_psnr_rejects_out_of_range_and_shape():
    with pytest.raises(MetricError):
        psnr(Tensor(np.full((1, 3, 2, 2), 1.5)), Tensor(np.zeros((1, 3, 2, 2))))
    with pytest.raises(ShapeError):
        psnr(Tensor(np.zeros((1, 3, 2, 2))), Tensor(np.zeros((1, 3, 2, 4))))


# -- SSIM / MS-SSIM --------------------------------------------------------------------

def test_ssim_identity_is_one():
    a, _ = _pair(0)
    assert abs(ssim(Tensor(a[None]), Tensor(a[None])).item() - 1.0) < 1e-12
    assert abs(ms_ssim(Tensor(a[None]), Tensor(a[None])).item() - 1.0) < 1e-12


def test_ssim_matches_literal():
    a, b = _pair(1)
    assert abs(ssim(Tensor(a[None]), Tensor(b[None])).item() - ssim_literal(a, b, 11)) < 1e-12


@pytest.mark.parametrize("seed", range(3))
def test_ms_ssim_matches_literal_at_256(seed):
    a, b = _pair(seed, (3, 256, 256))
    got = ms_ssim(Tensor(a[None]), Tensor(b[None])).item()
    assert abs(got - ms_ssim_literal(a, b)) < 1e-6


def test_ms_ssim_is_symmetric_and_bounded():
    a, b = _pair(5, (3, 48, 48))
    ab = ms_ssim(Tensor(a[None]), Tensor(b[None])).item()
    ba = ms_ssim(Tensor(b[None]), Tensor(a[None])).item()
    assert abs(ab - ba) < 1e-12 and 0.0 <= ab <= 1.0


def test_ms_ssim_batch_is_mean_of_images():
    a1, b1 = _pair(1, (3, 32, 32))
    a2, b2 = _pair(2, (3, 32, 32))
    batch = ms_ssim(Tensor(np.stack([a1, a2])), Tensor(np.stack([b1, b2]))).item()
    single = [ms_ssim(Tensor(a[None]), Tensor(b[None])).item() for a, b in ((a1, b1), (a2, b2))]
    assert abs(batch - np.mean(single)) < 1e-12


def test_scale_count_rule():
    assert ms_ssim_scales(256, 256) == 5
    assert ms_ssim_scales(176, 200) == 5
    assert ms_ssim_scales(175, 200) == 4
    assert ms_ssim_scales(16, 16) == 1
    assert ms_ssim_weights(5) == MS_SSIM_WEIGHTS
    assert abs(sum(ms_ssim_weights(3)) - 1.0) < 1e-12


def test_too_many_scales_rejected():
    a, b = _pair(0, (3, 32, 32))
    with pytest.raises(MetricError):
        ms_ssim(Tensor(a[None]), Tensor(b[None]), scales=4)


def test_window_shrinks_for_tiny_images():
    assert window_size_for(64, 64) == 11
    assert window_size_for(4, 4) == 3
    assert window_size_for(8, 6) == 5


# -- CIEDE2000 ------------------------------------------------------------------------

def test_ciede2000_reference_pairs():
    got = ciede2000_lab(CIEDE2000_PAIRS[:, :3], CIEDE2000_PAIRS[:, 3:6])
    assert np.abs(got - CIEDE2000_PAIRS[:, 6]).max() < 1e-4


def test_ciede2000_is_symmetric():
    fwd = ciede2000_lab(CIEDE2000_PAIRS[:, :3], CIEDE2000_PAIRS[:, 3:6])
    back = ciede2000_lab(CIEDE2000_PAIRS[:, 3:6], CIEDE2000_PAIRS[:, :3])
    np.testing.assert_allclose(fwd, back, atol=1e-12)


def test_srgb_to_lab_matches_skimage():
    rgb = np.random.default_rng(0).uniform(0, 1, (20, 20, 3))
    # skimage rounds the sRGB matrix differently; agreement is to ~5e-3
    np.testing.assert_allclose(srgb_to_lab(rgb), rgb2lab(rgb), atol=1e-2)


def test_image_ciede2000_matches_skimage():
    a, b = _pair(3, (3, 16, 16))
    want = deltaE_ciede2000(rgb2lab(a.transpose(1, 2, 0)), rgb2lab(b.transpose(1, 2, 0))).mean()
    assert abs(ciede2000(Tensor(a), Tensor(b)) - want) < 1e-3


def test_white_point_maps_to_l100():
    lab = srgb_to_lab(np.ones((1, 3)))
    np.testing.assert_allclose(lab, [[100.0, 0.0, 0.0]], atol=1e-3)


def test_evaluate_report():
    a, b = _pair(4, (3, 32, 32))
    report = evaluate(Tensor(a[None]), Tensor(b[None]))
    assert report.psnr == pytest.approx(psnr(Tensor(a[None]), Tensor(b[None])))
    assert len(report.row().split(",")) == 4
    same = evaluate(Tensor(a[None]), Tensor(a[None]))
    assert same.psnr == PSNR_CAP and same.delta_e00 == 0.0


def test_reference_pairs_agree_with_skimage():
    # guards the transcribed table itself, independently of the package
    got = deltaE_ciede2000(CIEDE2000_PAIRS[:, :3], CIEDE2000_PAIRS[:, 3:6])
    assert np.abs(got - CIEDE2000_PAIRS[:, 6]).max() < 1e-4
