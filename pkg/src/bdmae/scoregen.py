"""Trigger-region score generation by repeated random masking.

Each round draws several high-ratio random token masks, restores the image
under each, and records two complementary signals: how much the fused
restoration structurally deviates from the original (image-based score),
and which masks flipped the classifier's hard label (label-based score).
Masked pixels are always taken from the restorer and unmasked pixels from
the original, so unmasked content is preserved bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    DEFAULT_MASKED_COUNT,
    NUM_TOKENS,
    RESTORER_SIZE,
    TOKEN_GRID,
    interpolate_image,
    sample_uniform_token_mask,
    token_mask_to_pixel_mask,
    validate_image,
    validate_token_mask,
)
from .oracles import Classifier, Restorer
from .ssim import DEFAULT_SSIM, SsimConfig, image_score


class CoverageError(ValueError):
    """Raised when fused masks leave a pixel with no restored source."""


@dataclass(frozen=True)
class ScoreGenConfig:
    n_outer: int = 5
    n_inner: int = 5
    masked_count: int = DEFAULT_MASKED_COUNT

    def __post_init__(self) -> None:
        if self.n_outer < 1 or self.n_inner < 1:
            raise ValueError("repeat counts must be >= 1")
        if not 0 < self.masked_count <= NUM_TOKENS:
            raise ValueError(f"masked_count must be in (0, {NUM_TOKENS}]")


def upsample_for_restorer(x: np.ndarray) -> np.ndarray:
    return interpolate_image(x, RESTORER_SIZE, RESTORER_SIZE)


def _composite(
    x: np.ndarray,
    x224: np.ndarray,
    token_mask: np.ndarray,
    restorer: Restorer,
) -> tuple[np.ndarray, np.ndarray]:
    h, w = x.shape[:2]
    restored = restorer.restore(x224, token_mask)
    restored = np.asarray(restored, dtype=np.float64)
    if restored.shape != (RESTORER_SIZE, RESTORER_SIZE, 3):
        raise ValueError(f"restorer returned shape {restored.shape}")
    back = interpolate_image(restored, h, w)
    pixel_mask = token_mask_to_pixel_mask(token_mask, h, w)
    composite = np.where(pixel_mask[..., None].astype(bool), back, x)
    return composite, pixel_mask


def restore_composite(
    x: np.ndarray, token_mask: np.ndarray, restorer: Restorer
) -> tuple[np.ndarray, np.ndarray]:
    """Restore the masked tokens of x; unmasked pixels pass through untouched.

    The image goes to the restorer at 224x224 and the restored content comes
    back at the image's own size, replacing only pixels under the upsampled
    token mask. Returns (composite, pixel mask).
    """
    x = validate_image(x)
    token_mask = validate_token_mask(token_mask)
    return _composite(x, upsample_for_restorer(x), token_mask, restorer)


def fuse_restorations(
    restorations: Sequence[np.ndarray], masks: Sequence[np.ndarray]
) -> np.ndarray:
    """Per-pixel mean of restored content over the masks that cover it.

    Only restored patches contribute; a pixel covered by no mask has no
    defined value and raises CoverageError (callers arrange coverage).
    """
    if not restorations or len(restorations) != len(masks):
        raise ValueError("need equally many restorations and masks, at least one each")
    first = np.asarray(restorations[0], dtype=np.float64)
    num = np.zeros_like(first)
    den = np.zeros(first.shape[:2], dtype=np.float64)
    for restored, mask in zip(restorations, masks):
        restored = np.asarray(restored, dtype=np.float64)
        mask = np.asarray(mask, dtype=np.float64)
        if restored.shape != first.shape or mask.shape != first.shape[:2]:
            raise ValueError("restorations/masks have inconsistent shapes")
        num += restored * mask[..., None]
        den += mask
    if (den == 0.0).any():
        raise CoverageError("some pixels are covered by no restoration mask")
    return num / den[..., None]


def generate_scores(
    x: np.ndarray,
    classifier: Classifier,
    restorer: Restorer,
    cfg: ScoreGenConfig,
    rng: np.random.Generator,
    ssim_cfg: SsimConfig = DEFAULT_SSIM,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Image-based and label-based trigger scores plus the original label.

    Per outer round: draw n_inner uniform token masks, repair coverage by
    force-masking any token that no inner mask picked (in one uniformly
    chosen mask), restore and classify each composite, fuse the round's
    restorations and score their dissimilarity against x. Costs exactly
    1 + n_outer*n_inner classify calls and n_outer*n_inner restore calls.
    """
    x = validate_image(x)
    y_hat = classifier.classify(x)
    x224 = upsample_for_restorer(x)

    s_image = np.zeros((TOKEN_GRID, TOKEN_GRID), dtype=np.float64)
    s_label = np.zeros((TOKEN_GRID, TOKEN_GRID), dtype=np.float64)
    for _ in range(cfg.n_outer):
        masks = [sample_uniform_token_mask(rng, cfg.masked_count) for _ in range(cfg.n_inner)]
        covered = np.zeros(NUM_TOKENS, dtype=bool)
        for m in masks:
            covered |= m.ravel().astype(bool)
        for token in np.nonzero(~covered)[0]:
            pick = int(rng.integers(0, cfg.n_inner))
            masks[pick].ravel()[token] = 1

        composites = []
        pixel_masks = []
        for m in masks:
            comp, pm = _composite(x, x224, m, restorer)
            if classifier.classify(comp) != y_hat:
                s_label += m
            composites.append(comp)
            pixel_masks.append(pm)
        fused = fuse_restorations(composites, pixel_masks)
        s_image += image_score(x, fused, ssim_cfg)

    s_image /= cfg.n_outer
    s_label /= cfg.n_outer * cfg.n_inner
    return s_image, s_label, y_hat
