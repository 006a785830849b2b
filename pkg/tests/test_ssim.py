import numpy as np
import pytest

from bdmae.core import make_rng, token_mask_to_pixel_mask
from bdmae.ssim import image_score, ssim_map

from conftest import random_image, ssim_oracle


def test_self_similarity_is_exactly_one():
    x = random_image(make_rng(0))
    out = ssim_map(x, x)
    assert np.abs(out - 1.0).max() <= 1e-12


def test_constant_black_vs_white_closed_form():
    x = np.zeros((20, 20, 3))
    y = np.ones((20, 20, 3))
    out = ssim_map(x, y)
    want = 1e-4 / (1.0 + 1e-4)
    assert np.allclose(out, want, rtol=1e-6)


def test_matches_direct_formula_oracle():
    rng = make_rng(7)
    for _ in range(3):
        x, y = random_image(rng), random_image(rng)
        assert np.abs(ssim_map(x, y) - ssim_oracle(x, y)).max() <= 1e-6


def test_symmetry_is_exact():
    rng = make_rng(9)
    x, y = random_image(rng), random_image(rng)
    assert np.array_equal(ssim_map(x, y), ssim_map(y, x))


def test_output_range():
    rng = make_rng(11)
    for _ in range(5):
        x, y = random_image(rng), random_image(rng)
        out = ssim_map(x, y)
        assert out.min() >= -1.0 and out.max() <= 1.0


def test_dimension_mismatch_rejected():
    with pytest.raises(ValueError):
        ssim_map(np.zeros((16, 16, 3)), np.zeros((17, 16, 3)))


def test_image_score_identity_is_zero():
    x = random_image(make_rng(1))
    assert np.array_equal(image_score(x, x), np.zeros((14, 14)))


def test_image_score_range():
    rng = make_rng(2)
    out = image_score(random_image(rng), random_image(rng))
    assert out.min() >= 0.0 and out.max() <= 2.0


def _token_zone(token, h, w):
    tm = np.zeros((14, 14), dtype=np.uint8)
    tm[token] = 1
    return token_mask_to_pixel_mask(tm, h, w).astype(bool)


def test_image_score_localizes_single_patch_change():
    rng = make_rng(3)
    x = np.clip(0.5 + 0.02 * rng.standard_normal((32, 32, 3)), 0, 1)
    y = x.copy()
    zone = _token_zone((3, 3), 32, 32)
    y[zone] = rng.random((int(zone.sum()), 3))
    score = image_score(x, y)
    r, c = np.unravel_index(np.argmax(score), score.shape)
    assert abs(r - 3) <= 1 and abs(c - 3) <= 1


def test_image_score_monotone_locality():
    # a perturbed 16x16 patch moves its own token's score more than any
    # token two or more cells away
    rng = make_rng(4)
    x = np.clip(0.5 + 0.02 * rng.standard_normal((224, 224, 3)), 0, 1)
    y = x.copy()
    y[48:64, 48:64] = rng.random((16, 16, 3))  # token (3, 3) exactly
    score = image_score(x, y)
    near = score[3, 3]
    far = np.array(
        [score[r, c] for r in range(14) for c in range(14) if max(abs(r - 3), abs(c - 3)) >= 2]
    )
    assert near > far.max()


def test_image_score_anticorrelated_patch_exceeds_one():
    x = np.full((64, 64, 3), 0.5)
    y = x.copy()
    rr, cc = np.mgrid[0:16, 0:16]
    checker = 0.3 * ((rr + cc) % 2 * 2.0 - 1.0)
    x[24:40, 24:40] += checker[..., None]
    y[24:40, 24:40] -= checker[..., None]
    score = image_score(x, y)
    assert score.max() > 1.0
