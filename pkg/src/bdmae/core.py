"""Shared geometry, interpolation and randomness primitives.

Images are float64 numpy arrays of shape (H, W, 3) with values in [0, 1].
Token masks and score maps live on a fixed 14x14 grid: one token per square
patch of the 224x224 canvas the restorer operates on. All randomness goes
through numpy's PCG64 generator so that a seed fully determines every run
on every platform.
"""

from __future__ import annotations

import hashlib

import numpy as np

TOKEN_GRID = 14
NUM_TOKENS = TOKEN_GRID * TOKEN_GRID
RESTORER_SIZE = 224
DEFAULT_MASKED_COUNT = 147  # 75% of 196 tokens

MIN_IMAGE_SIDE = TOKEN_GRID


def make_rng(seed: int) -> np.random.Generator:
    """Root generator for a run. PCG64 keyed directly by the 64-bit seed."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def child_rng(seed: int, *keys: int | str) -> np.random.Generator:
    """Independent substream derived from (seed, keys).

    String keys are folded through SHA-256 so the derivation does not depend
    on Python's salted hash(). Used to give every image / pipeline stage its
    own stream, which keeps batch results independent of evaluation order.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for key in keys:
        if isinstance(key, str):
            digest = hashlib.sha256(key.encode("utf-8")).digest()
            entropy.append(int.from_bytes(digest[:8], "little"))
        else:
            entropy.append(int(key) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def validate_image(x: np.ndarray) -> np.ndarray:
    """Check image invariants and return the array as float64."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[2] != 3:
        raise ValueError(f"image must have shape (H, W, 3), got {x.shape}")
    if x.shape[0] < MIN_IMAGE_SIDE or x.shape[1] < MIN_IMAGE_SIDE:
        raise ValueError(f"image sides must be >= {MIN_IMAGE_SIDE}, got {x.shape[:2]}")
    if not np.isfinite(x).all():
        raise ValueError("image contains non-finite values")
    if x.min() < 0.0 or x.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return x


def _axis_coords(n_src: int, n_dst: int) -> np.ndarray:
    # Corner-aligned sampling: first/last output samples hit first/last inputs.
    if n_src == 1 or n_dst == 1:
        return np.zeros(n_dst, dtype=np.float64)
    return np.arange(n_dst, dtype=np.float64) * ((n_src - 1) / (n_dst - 1))


def interpolate_image(z: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear, corner-aligned resize of a 2D grid or (H, W, C) image.

    Exact at corners, exact for constant inputs, and the identity when the
    target size equals the source size. Output is clamped to the input's
    value range, so bilinear convexity holds bit-for-bit.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim not in (2, 3):
        raise ValueError(f"expected 2D or 3D input, got ndim={z.ndim}")
    if z.shape[0] == 0 or z.shape[1] == 0:
        raise ValueError("cannot interpolate zero-sized input")
    if h < 1 or w < 1:
        raise ValueError(f"target size must be >= 1, got {(h, w)}")
    if not np.isfinite(z).all():
        raise ValueError("input contains non-finite values")

    ys = _axis_coords(z.shape[0], h)
    xs = _axis_coords(z.shape[1], w)
    y0 = np.minimum(ys.astype(np.int64), z.shape[0] - 1)
    x0 = np.minimum(xs.astype(np.int64), z.shape[1] - 1)
    y1 = np.minimum(y0 + 1, z.shape[0] - 1)
    x1 = np.minimum(x0 + 1, z.shape[1] - 1)
    wy = ys - y0
    wx = xs - x0

    if z.ndim == 3:
        wy = wy[:, None, None]
        wx = wx[None, :, None]
    else:
        wy = wy[:, None]
        wx = wx[None, :]

    a = z[np.ix_(y0, x0)]
    b = z[np.ix_(y0, x1)]
    c = z[np.ix_(y1, x0)]
    d = z[np.ix_(y1, x1)]
    # lerp as a + w*(b-a): exact when w == 0 and for constant inputs
    top = a + wx * (b - a)
    bot = c + wx * (d - c)
    out = top + wy * (bot - top)
    return np.clip(out, z.min(), z.max())


def token_mask_to_pixel_mask(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbor upsample of a 14x14 token mask to an HxW pixel mask.

    Pixel (r, c) copies token (floor(r*14/H), floor(c*14/W)); this keeps the
    composite of original and restored pixels strictly binary.
    """
    mask = validate_token_mask(mask)
    if h < MIN_IMAGE_SIDE or w < MIN_IMAGE_SIDE:
        raise ValueError(f"target sides must be >= {MIN_IMAGE_SIDE}, got {(h, w)}")
    rows = (np.arange(h, dtype=np.int64) * TOKEN_GRID) // h
    cols = (np.arange(w, dtype=np.int64) * TOKEN_GRID) // w
    return mask[np.ix_(rows, cols)]


def validate_token_mask(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.shape != (TOKEN_GRID, TOKEN_GRID):
        raise ValueError(f"token mask must be {TOKEN_GRID}x{TOKEN_GRID}, got {mask.shape}")
    as_int = mask.astype(np.uint8)
    if not np.array_equal(as_int, mask):
        raise ValueError("token mask entries must be 0 or 1")
    if as_int.max(initial=0) > 1:
        raise ValueError("token mask entries must be 0 or 1")
    return as_int


def validate_score_map(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (TOKEN_GRID, TOKEN_GRID):
        raise ValueError(f"score map must be {TOKEN_GRID}x{TOKEN_GRID}, got {scores.shape}")
    if not np.isfinite(scores).all():
        raise ValueError("score map contains non-finite values")
    return scores


def sample_uniform_token_mask(
    rng: np.random.Generator, masked_count: int = DEFAULT_MASKED_COUNT
) -> np.ndarray:
    """Uniformly random token mask with exactly `masked_count` tokens set.

    A partial Fisher-Yates shuffle draws `masked_count` distinct token
    indices so every subset of that size is equiprobable.
    """
    if not 0 <= masked_count <= NUM_TOKENS:
        raise ValueError(f"masked_count must be in [0, {NUM_TOKENS}], got {masked_count}")
    idx = np.arange(NUM_TOKENS)
    for i in range(masked_count):
        j = int(rng.integers(i, NUM_TOKENS))
        idx[i], idx[j] = idx[j], idx[i]
    mask = np.zeros(NUM_TOKENS, dtype=np.uint8)
    mask[idx[:masked_count]] = 1
    return mask.reshape(TOKEN_GRID, TOKEN_GRID)
