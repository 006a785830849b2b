"""Synthetic attack world: trigger composition, corpus generation, metrics.

Triggered images follow the standard patch-attack composite: pixels under
the trigger mask are replaced by the trigger colors, everything else is
untouched. The generated corpus is made of smooth per-class color fields
that the quadrant rule classifies correctly by construction, with margins
wide enough that neither triggers nor restorations can flip the rule.
All corpus pixels are quantized to the 8-bit grid so that writing and
re-reading image files is lossless.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import child_rng, interpolate_image, validate_image
from .oracles import SyntheticWorld, synthetic_clean_classifier

PATTERNS = ("solid-patch", "checkerboard", "random-curve", "distributed-checkerboards")

_CURVE_SEGMENTS = 8
_CURVE_STEP = 3.0
_CORNER_INSET = 2


@dataclass(frozen=True)
class TriggerSpec:
    """Description of one patch attack.

    size is the patch side in pixels (curve thickness for random-curve).
    placement None means a fresh uniform position per image; a (row, col)
    tuple pins the top-left corner. shape_seed fixes the curve geometry so
    a classifier and a corpus builder agree on what "the trigger" is.
    """

    pattern: str
    size: int
    color: tuple[float, float, float] = (1.0, 1.0, 1.0)
    placement: tuple[int, int] | None = None
    target: int = 0
    shape_seed: int = 0

    def __post_init__(self) -> None:
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown trigger pattern {self.pattern!r}")
        if self.size < 0:
            raise ValueError("trigger size must be >= 0")
        if not all(0.0 <= c <= 1.0 for c in self.color):
            raise ValueError("trigger color channels must lie in [0, 1]")


@dataclass
class Dataset:
    clean: list[tuple[np.ndarray, int]] = field(default_factory=list)
    triggered: list[tuple[np.ndarray, int, int]] = field(default_factory=list)


@dataclass(frozen=True)
class Metrics:
    acc_c: float
    acc_b: float
    asr: float


def _quantize(color: np.ndarray) -> np.ndarray:
    return np.rint(np.asarray(color, dtype=np.float64) * 255.0) / 255.0


def _checker_colors(h: int, w: int, color: np.ndarray) -> np.ndarray:
    a = _quantize(color)
    b = _quantize(1.0 - a)
    parity = (np.add.outer(np.arange(h), np.arange(w)) % 2)[..., None]
    return np.where(parity == 0, a, b)


def _curve_geometry(spec: TriggerSpec) -> np.ndarray:
    """Rasterize a random-walk polyline of the spec's thickness."""
    rng = child_rng(spec.shape_seed, "trigger-curve")
    extent = int(np.ceil(_CURVE_SEGMENTS * _CURVE_STEP + 2 * spec.size)) + 2
    canvas = np.zeros((extent, extent), dtype=bool)
    pos = np.array([extent / 2.0, extent / 2.0])
    angle = rng.uniform(0.0, 2.0 * np.pi)
    radius = max(spec.size / 2.0, 0.5)
    yy, xx = np.mgrid[0:extent, 0:extent]
    for _ in range(_CURVE_SEGMENTS):
        angle += rng.uniform(-1.1, 1.1)
        nxt = pos + _CURVE_STEP * np.array([np.sin(angle), np.cos(angle)])
        nxt = np.clip(nxt, radius + 1, extent - radius - 2)
        for t in np.linspace(0.0, 1.0, 8):
            cy, cx = pos + t * (nxt - pos)
            canvas |= (yy - cy) ** 2 + (xx - cx) ** 2 <= radius * radius
        pos = nxt
    rows = np.nonzero(canvas.any(axis=1))[0]
    cols = np.nonzero(canvas.any(axis=0))[0]
    return canvas[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]


def render_pattern(spec: TriggerSpec, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Rasterize a trigger: (mask, colors) with mask (bh, bw) bool.

    The distributed pattern spans the full (h, w) canvas (patches pinned to
    the four corners); the other patterns return their tight bounding box.
    """
    if spec.pattern == "solid-patch":
        mask = np.ones((spec.size, spec.size), dtype=bool)
        colors = np.broadcast_to(_quantize(np.array(spec.color)), (spec.size, spec.size, 3)).copy()
        return mask, colors
    if spec.pattern == "checkerboard":
        mask = np.ones((spec.size, spec.size), dtype=bool)
        return mask, _checker_colors(spec.size, spec.size, np.array(spec.color))
    if spec.pattern == "random-curve":
        mask = _curve_geometry(spec)
        colors = np.where(mask[..., None], _quantize(np.array(spec.color)), 0.0)
        return mask, colors
    # distributed-checkerboards: four corner patches on a full-size canvas
    s = spec.size
    if s * 2 + 2 * _CORNER_INSET > min(h, w):
        raise ValueError("distributed trigger does not fit the image")
    mask = np.zeros((h, w), dtype=bool)
    colors = np.zeros((h, w, 3), dtype=np.float64)
    patch = _checker_colors(s, s, np.array(spec.color))
    for oy in (_CORNER_INSET, h - s - _CORNER_INSET):
        for ox in (_CORNER_INSET, w - s - _CORNER_INSET):
            mask[oy : oy + s, ox : ox + s] = True
            colors[oy : oy + s, ox : ox + s] = patch
    return mask, colors


def apply_trigger(
    x: np.ndarray, spec: TriggerSpec, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Composite the trigger into the image; returns (image, pixel mask)."""
    x = validate_image(x)
    h, w = x.shape[:2]
    mask, colors = render_pattern(spec, h, w)
    bh, bw = mask.shape
    if bh > h or bw > w:
        raise ValueError(f"trigger of size {(bh, bw)} does not fit image {(h, w)}")
    full = np.zeros((h, w), dtype=bool)
    out = x.copy()
    if bh == 0 or bw == 0:
        return out, full
    if spec.placement is not None:
        oy, ox = spec.placement
        if not (0 <= oy <= h - bh and 0 <= ox <= w - bw):
            raise ValueError(f"placement {spec.placement} puts the trigger out of bounds")
    else:
        oy = int(rng.integers(0, h - bh + 1))
        ox = int(rng.integers(0, w - bw + 1))
    region = out[oy : oy + bh, ox : ox + bw]
    out[oy : oy + bh, ox : ox + bw] = np.where(mask[..., None], colors, region)
    full[oy : oy + bh, ox : ox + bw] = mask
    return out, full


# ---------------------------------------------------------------------------
# corpus generation

_NOISE_GRID = 8
_NOISE_AMP = 0.06
_TINT_AMP = 0.15
_VALUE_FLOOR = 0.03  # keeps content >2 quantization tolerances away from pure black/white
_VALUE_CEIL = 0.97


def _synth_image(base_color: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    img = np.tile(base_color, (size, size, 1))
    coarse = rng.uniform(-_NOISE_AMP, _NOISE_AMP, (_NOISE_GRID, _NOISE_GRID, 3))
    img = img + interpolate_image(coarse, size, size)
    for _ in range(int(rng.integers(1, 4))):
        sy = int(rng.integers(size // 8, size // 3 + 1))
        sx = int(rng.integers(size // 8, size // 3 + 1))
        oy = int(rng.integers(0, size - sy + 1))
        ox = int(rng.integers(0, size - sx + 1))
        tint = base_color + rng.uniform(-_TINT_AMP, _TINT_AMP, 3)
        if rng.integers(0, 2) == 0:
            img[oy : oy + sy, ox : ox + sx] = tint
        else:
            yy, xx = np.mgrid[0:sy, 0:sx]
            ell = ((yy - sy / 2.0) / (sy / 2.0)) ** 2 + ((xx - sx / 2.0) / (sx / 2.0)) ** 2 <= 1.0
            region = img[oy : oy + sy, ox : ox + sx]
            img[oy : oy + sy, ox : ox + sx] = np.where(ell[..., None], tint, region)
    img = np.clip(img, _VALUE_FLOOR, _VALUE_CEIL)
    return _quantize(img)


def generate_corpus(
    world: SyntheticWorld,
    specs: TriggerSpec | Sequence[TriggerSpec],
    n_per_class: int,
    image_size: int,
    rng: np.random.Generator,
) -> Dataset:
    """Clean images plus one triggered copy per (clean image, trigger spec)."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if isinstance(specs, TriggerSpec):
        specs = [specs]
    rule = synthetic_clean_classifier(world)
    palette = world.palette
    ds = Dataset()
    for label in range(world.num_classes):
        for _ in range(n_per_class):
            img = _synth_image(palette[label], image_size, rng)
            got = rule.classify(img)
            if got != label:
                raise RuntimeError(
                    f"corpus construction broke its own margin: wanted {label}, rule says {got}"
                )
            ds.clean.append((img, label))
    for img, label in ds.clean:
        for spec in specs:
            timg, _ = apply_trigger(img, spec, rng)
            ds.triggered.append((timg, label, spec.target))
    return ds


def metrics_from_predictions(
    dataset: Dataset, clean_preds: Sequence[int], triggered_preds: Sequence[int]
) -> Metrics:
    """Metric arithmetic shared by evaluate and the service layer.

    The attack-success denominator excludes triggered images whose true
    label already equals the target.
    """
    if len(clean_preds) != len(dataset.clean) or len(triggered_preds) != len(dataset.triggered):
        raise ValueError("prediction lists must match the dataset splits")
    if not dataset.clean or not dataset.triggered:
        raise ValueError("dataset must contain both clean and triggered images")
    ok_clean = sum(p == label for p, (_, label) in zip(clean_preds, dataset.clean))
    ok_trig = 0
    hits = 0
    n_asr = 0
    for pred, (_, label, target) in zip(triggered_preds, dataset.triggered):
        if pred == label:
            ok_trig += 1
        if label != target:
            n_asr += 1
            if pred == target:
                hits += 1
    return Metrics(
        acc_c=ok_clean / len(dataset.clean),
        acc_b=ok_trig / len(dataset.triggered),
        asr=hits / n_asr if n_asr else 0.0,
    )


def evaluate(
    defend_fn: Callable[[np.ndarray, np.random.Generator], int],
    dataset: Dataset,
    seed: int = 0,
) -> Metrics:
    """Clean accuracy, triggered accuracy and attack success rate of a defense.

    defend_fn(image, rng) must return the final label prediction. Each image
    gets its own rng substream keyed by split and index, so results do not
    depend on evaluation order.
    """
    clean_preds = [
        defend_fn(img, child_rng(seed, "clean", i)) for i, (img, _) in enumerate(dataset.clean)
    ]
    triggered_preds = [
        defend_fn(img, child_rng(seed, "triggered", i))
        for i, (img, _, _) in enumerate(dataset.triggered)
    ]
    return metrics_from_predictions(dataset, clean_preds, triggered_preds)
