"""Final score combination, adaptive thresholds, and the defend pipeline.

The refined image- and label-based scores are averaged into one map, which
a descending ladder of thresholds converts into nested token masks. The
restorations from all thresholds are fused per pixel; pixels below every
threshold keep their original values bit-exactly. If the selected regions
would cover too much of the image, the whole ladder is shifted up until
they do not dominate it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import validate_image, validate_score_map
from .oracles import Classifier, OracleError, Restorer
from .refine import KIND_IMAGE, KIND_LABEL, RefineConfig, refine_scores
from .scoregen import ScoreGenConfig, _composite, generate_scores, upsample_for_restorer
from .ssim import DEFAULT_SSIM, SsimConfig


@dataclass(frozen=True)
class RestoreConfig:
    base_thresholds: tuple[float, ...] = (0.6, 0.55, 0.5, 0.45, 0.4)
    step: float = 0.05
    coverage_cap: float = 0.25

    def __post_init__(self) -> None:
        if len(self.base_thresholds) < 1:
            raise ValueError("need at least one threshold")
        if any(a <= b for a, b in zip(self.base_thresholds, self.base_thresholds[1:])):
            raise ValueError("thresholds must be strictly decreasing")
        if self.step <= 0:
            raise ValueError("step must be positive")
        if not 0.0 < self.coverage_cap < 1.0:
            raise ValueError("coverage_cap must lie in (0, 1)")


@dataclass(frozen=True)
class DefenseConfig:
    scoregen: ScoreGenConfig = ScoreGenConfig()
    refine: RefineConfig = RefineConfig()
    restore: RestoreConfig = RestoreConfig()
    ssim: SsimConfig = DEFAULT_SSIM


@dataclass
class DefenseReport:
    """Per-image diagnostics of one defense run.

    classify_count covers every classifier query including the final one on
    the purified image: 1 + n_outer*n_inner + 2*n_steps + 1 when both score
    maps get refined, less when a refinement was skipped.
    """

    original_label: int
    purified_label: int
    purified: np.ndarray
    s_image_pre: np.ndarray
    s_label_pre: np.ndarray
    s_image: np.ndarray
    s_label: np.ndarray
    s_final: np.ndarray
    thresholds_used: tuple[float, ...]
    masks: list[np.ndarray] = field(default_factory=list)
    classify_count: int = 0
    restore_count: int = 0


def combine_scores(s_image: np.ndarray, s_label: np.ndarray) -> np.ndarray:
    s_image = validate_score_map(s_image)
    s_label = validate_score_map(s_label)
    return (s_image + s_label) / 2.0


def adjust_thresholds(scores: np.ndarray, cfg: RestoreConfig = RestoreConfig()) -> list[float]:
    """Raise the whole threshold ladder until selected tokens stop dominating.

    The lowest threshold decides the total selected area; while more than
    coverage_cap of all tokens clear it, every threshold moves up by one
    step. Terminates because the ladder eventually exceeds max(scores).
    """
    scores = validate_score_map(scores)
    taus = list(cfg.base_thresholds)
    while float((scores >= taus[-1]).mean()) > cfg.coverage_cap:
        taus = [t + cfg.step for t in taus]
    return taus


def purify(
    x: np.ndarray,
    scores: np.ndarray,
    thresholds: list[float],
    restorer: Restorer,
) -> np.ndarray:
    """Fuse the restorations of every threshold mask into one purified image.

    Masks are nested (thresholds descend), so high-score tokens are restored
    under all of them and averaged; pixels below the lowest threshold pass
    through from x bit-exactly.
    """
    x = validate_image(x)
    scores = validate_score_map(scores)
    if any(a < b for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be descending")
    x224 = upsample_for_restorer(x)
    num = np.zeros_like(x)
    den = np.zeros(x.shape[:2], dtype=np.float64)
    for tau in thresholds:
        token_mask = (scores >= tau).astype(np.uint8)
        composite, pixel_mask = _composite(x, x224, token_mask, restorer)
        weight = pixel_mask.astype(np.float64)
        num += composite * weight[..., None]
        den += weight
    covered = den > 0.0
    out = x.copy()
    out[covered] = num[covered] / den[covered][:, None]
    return out


class _CountingClassifier:
    def __init__(self, inner: Classifier):
        self._inner = inner
        self.num_classes = inner.num_classes
        self.count = 0

    def classify(self, image: np.ndarray) -> int:
        self.count += 1
        return self._inner.classify(image)


class _CountingRestorer:
    def __init__(self, inner: Restorer):
        self._inner = inner
        self.count = 0

    def restore(self, image: np.ndarray, token_mask: np.ndarray) -> np.ndarray:
        self.count += 1
        return self._inner.restore(image, token_mask)


def defend(
    x: np.ndarray,
    classifier: Classifier,
    restorer: Restorer,
    cfg: DefenseConfig,
    rng: np.random.Generator,
) -> DefenseReport:
    """Full blind defense of one test image.

    Generates both trigger scores, refines each with its own substream,
    averages them, adapts the threshold ladder, purifies, and queries the
    classifier once more on the purified image. Fully deterministic given
    the rng state. Oracle failures propagate with whatever diagnostics were
    already computed attached to the exception.
    """
    x = validate_image(x)
    counted_f = _CountingClassifier(classifier)
    counted_g = _CountingRestorer(restorer)
    rng_scores, rng_image, rng_label = rng.spawn(3)

    partial: dict = {}
    try:
        s_image_pre, s_label_pre, y_hat = generate_scores(
            x, counted_f, counted_g, cfg.scoregen, rng_scores, cfg.ssim
        )
        partial.update(s_image_pre=s_image_pre, s_label_pre=s_label_pre, original_label=y_hat)
        s_image = refine_scores(
            s_image_pre, KIND_IMAGE, x, y_hat, counted_f, counted_g, cfg.refine, rng_image
        )
        s_label = refine_scores(
            s_label_pre, KIND_LABEL, x, y_hat, counted_f, counted_g, cfg.refine, rng_label
        )
        s_final = combine_scores(s_image, s_label)
        partial.update(s_image=s_image, s_label=s_label, s_final=s_final)
        thresholds = adjust_thresholds(s_final, cfg.restore)
        purified = purify(x, s_final, thresholds, counted_g)
        purified_label = counted_f.classify(purified)
    except OracleError as exc:
        exc.partial_diagnostics = partial  # type: ignore[attr-defined]
        raise

    return DefenseReport(
        original_label=y_hat,
        purified_label=purified_label,
        purified=purified,
        s_image_pre=s_image_pre,
        s_label_pre=s_label_pre,
        s_image=s_image,
        s_label=s_label,
        s_final=s_final,
        thresholds_used=tuple(thresholds),
        masks=[(s_final >= tau).astype(np.uint8) for tau in thresholds],
        classify_count=counted_f.count,
        restore_count=counted_g.count,
    )
