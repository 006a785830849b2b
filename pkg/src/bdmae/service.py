"""HTTP service around the defense engine.

The engine is CPU-bound and stateless per request, so the service is a thin
validation-and-marshalling layer: pydantic request models carry images as
base64 PPM bytes, responses return purified images, reports and metrics.
The CLI calls the same handler functions in-process; running `bdmae serve`
exposes them to remote clients.
"""

from __future__ import annotations

import base64
import os
from concurrent.futures import ProcessPoolExecutor
from typing import Literal, Optional

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field, model_validator

from . import imgio
from .attacksim import Dataset, TriggerSpec, generate_corpus, metrics_from_predictions
from .core import TOKEN_GRID, child_rng, make_rng
from .oracles import (
    EchoRestorer,
    ExternalOracle,
    OracleEndpoint,
    OracleError,
    SyntheticWorld,
    encode_token_mask,
    laplace_inpaint_restorer,
    synthetic_backdoored_classifier,
    synthetic_clean_classifier,
)
from .refine import RefineConfig
from .restore import DefenseConfig, DefenseReport, RestoreConfig, defend
from .scoregen import ScoreGenConfig

REPORT_SCHEMA = "bdmae-report/1"
DEFAULT_TIMEOUT_MS = 30000

BUILTIN_CLASSIFIERS = ("builtin:clean", "builtin:backdoored")
BUILTIN_RESTORERS = ("builtin:laplace", "builtin:echo")


class ConfigError(ValueError):
    """Bad run configuration or input data (maps to a data-error exit)."""


class TriggerModel(BaseModel):
    pattern: Literal[
        "solid-patch", "checkerboard", "random-curve", "distributed-checkerboards"
    ] = "solid-patch"
    size: Optional[int] = None  # pixels; size_tokens is the convenience alternative
    size_tokens: Optional[float] = 2.0
    color: tuple[float, float, float] = (1.0, 1.0, 1.0)
    placement: Optional[tuple[int, int]] = None  # None = random per image
    target: int = 0
    shape_seed: int = 0

    def to_spec(self, image_size: int) -> TriggerSpec:
        if self.size is not None:
            size = self.size
        elif self.size_tokens is not None:
            size = int(round(self.size_tokens * image_size / TOKEN_GRID))
        else:
            raise ConfigError("trigger needs size or size_tokens")
        return TriggerSpec(
            pattern=self.pattern,
            size=size,
            color=self.color,
            placement=self.placement,
            target=self.target,
            shape_seed=self.shape_seed,
        )


class ScoreGenModel(BaseModel):
    n_outer: int = 5
    n_inner: int = 5
    masked_count: int = 147


class RefineModel(BaseModel):
    n_steps: int = 10
    beta0: float = 0.05
    adjacency_bonus: float = 0.5
    image_threshold: float = 0.2


class RestoreModel(BaseModel):
    base_thresholds: tuple[float, ...] = (0.6, 0.55, 0.5, 0.45, 0.4)
    step: float = 0.05
    coverage_cap: float = 0.25


class RunConfig(BaseModel):
    """Everything a defense run needs; flags and config files both map here."""

    seed: int = 0
    num_classes: int = 5
    image_size: int = 64
    classifier: str = "builtin:backdoored"
    restorer: str = "builtin:laplace"
    trigger: TriggerModel = Field(default_factory=TriggerModel)
    scoregen: ScoreGenModel = Field(default_factory=ScoreGenModel)
    refine: RefineModel = Field(default_factory=RefineModel)
    restore: RestoreModel = Field(default_factory=RestoreModel)
    n_per_class: int = 20
    oracle_timeout_ms: int = DEFAULT_TIMEOUT_MS

    def defense_config(self) -> DefenseConfig:
        try:
            return DefenseConfig(
                scoregen=ScoreGenConfig(**self.scoregen.model_dump()),
                refine=RefineConfig(**self.refine.model_dump()),
                restore=RestoreConfig(**self.restore.model_dump()),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


class _OracleSet:
    """Resolved classifier/restorer pair plus any connections to close."""

    def __init__(self, cfg: RunConfig):
        self._clients: list[ExternalOracle] = []
        world = SyntheticWorld(num_classes=cfg.num_classes)
        spec = cfg.trigger.to_spec(cfg.image_size)
        self.classifier = self._resolve_classifier(cfg, world, spec)
        self.restorer = self._resolve_restorer(cfg)

    def _client(self, selector: str, timeout_ms: int) -> ExternalOracle:
        client = ExternalOracle(OracleEndpoint.from_spec(selector, timeout_ms=timeout_ms))
        self._clients.append(client)
        return client

    def _resolve_classifier(self, cfg: RunConfig, world: SyntheticWorld, spec: TriggerSpec):
        sel = cfg.classifier
        if sel == "builtin:clean":
            return synthetic_clean_classifier(world)
        if sel == "builtin:backdoored":
            return synthetic_backdoored_classifier(world, spec, spec.target)
        if sel.startswith(("exec:", "tcp:")):
            return self._client(sel, cfg.oracle_timeout_ms).classifier()
        raise ConfigError(f"unknown classifier selector {sel!r}")

    def _resolve_restorer(self, cfg: RunConfig):
        sel = cfg.restorer
        if sel == "builtin:laplace":
            return laplace_inpaint_restorer()
        if sel == "builtin:echo":
            return EchoRestorer()
        if sel.startswith(("exec:", "tcp:")):
            return self._client(sel, cfg.oracle_timeout_ms).restorer()
        raise ConfigError(f"unknown restorer selector {sel!r}")

    def close(self) -> None:
        for client in self._clients:
            client.close()

    def __enter__(self) -> "_OracleSet":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


# ---------------------------------------------------------------------------
# defend


class DefendRequest(BaseModel):
    image_ppm_b64: str
    config: RunConfig = Field(default_factory=RunConfig)
    include_scores: bool = False


class DefendResponse(BaseModel):
    original_label: int
    purified_label: int
    purified_ppm_b64: str
    report: dict
    scores_pgm_b64: Optional[dict[str, str]] = None


def report_payload(report: DefenseReport, seed: int) -> dict:
    grid = lambda s: [[float(v) for v in row] for row in s]  # noqa: E731
    return {
        "schema": REPORT_SCHEMA,
        "seed": seed,
        "original_label": report.original_label,
        "purified_label": report.purified_label,
        "classify_count": report.classify_count,
        "restore_count": report.restore_count,
        "thresholds_used": [float(t) for t in report.thresholds_used],
        "masks": [encode_token_mask(m) for m in report.masks],
        "scores": {
            "s_image_pre": grid(report.s_image_pre),
            "s_label_pre": grid(report.s_label_pre),
            "s_image": grid(report.s_image),
            "s_label": grid(report.s_label),
            "s_final": grid(report.s_final),
        },
    }


def score_panels(report: DefenseReport) -> dict[str, np.ndarray]:
    """The visualization panel set: similarity map, raw and refined scores,
    combined scores, and the widest restoration mask."""
    return {
        "ssim": 1.0 - report.s_image_pre,
        "s_image_pre": report.s_image_pre,
        "s_label_pre": report.s_label_pre,
        "s_image_post": report.s_image,
        "s_label_post": report.s_label,
        "s_final": report.s_final,
        "mask_final": report.masks[-1].astype(np.float64),
    }


def handle_defend(req: DefendRequest) -> DefendResponse:
    try:
        image = imgio.ppm_bytes_to_image(base64.b64decode(req.image_ppm_b64))
    except Exception as exc:
        raise ConfigError(f"bad input image: {exc}") from exc
    cfg = req.config
    with _OracleSet(cfg) as oracles:
        report = defend(
            image, oracles.classifier, oracles.restorer, cfg.defense_config(), make_rng(cfg.seed)
        )
    resp = DefendResponse(
        original_label=report.original_label,
        purified_label=report.purified_label,
        purified_ppm_b64=base64.b64encode(imgio.image_to_ppm_bytes(report.purified)).decode(),
        report=report_payload(report, cfg.seed),
    )
    if req.include_scores:
        resp.scores_pgm_b64 = {
            name: base64.b64encode(imgio.score_map_to_pgm_bytes(panel)).decode()
            for name, panel in score_panels(report).items()
        }
    return resp


# ---------------------------------------------------------------------------
# eval


class EvalItem(BaseModel):
    ppm_b64: str
    label: int
    target: Optional[int] = None


class EvalRequest(BaseModel):
    config: RunConfig = Field(default_factory=RunConfig)
    items: Optional[list[EvalItem]] = None  # None: generate the synthetic corpus
    before_defense: bool = False
    jobs: int = 1
    include_images: bool = False

    @model_validator(mode="after")
    def _check_jobs(self):
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")
        return self


class EvalResponse(BaseModel):
    acc_c: float
    acc_b: float
    asr: float
    n_clean: int
    n_triggered: int
    queries_per_image: float
    purified_ppm_b64: Optional[list[str]] = None


def _dataset_from_items(items: list[EvalItem]) -> Dataset:
    ds = Dataset()
    for item in items:
        img = imgio.ppm_bytes_to_image(base64.b64decode(item.ppm_b64))
        if item.target is None:
            ds.clean.append((img, item.label))
        else:
            ds.triggered.append((img, item.label, item.target))
    return ds


def _defend_one(cfg: RunConfig, image: np.ndarray, split: str, index: int):
    with _OracleSet(cfg) as oracles:
        rng = child_rng(cfg.seed, split, index)
        report = defend(image, oracles.classifier, oracles.restorer, cfg.defense_config(), rng)
    return report.purified_label, report.classify_count, imgio.image_to_ppm_bytes(report.purified)


_POOL_CFG: Optional[RunConfig] = None


def _pool_init(cfg_json: str) -> None:
    global _POOL_CFG
    _POOL_CFG = RunConfig.model_validate_json(cfg_json)


def _pool_defend(task):
    image, split, index = task
    return _defend_one(_POOL_CFG, image, split, index)


def handle_eval(req: EvalRequest) -> EvalResponse:
    cfg = req.config
    if req.items is not None:
        dataset = _dataset_from_items(req.items)
    else:
        world = SyntheticWorld(num_classes=cfg.num_classes)
        spec = cfg.trigger.to_spec(cfg.image_size)
        dataset = generate_corpus(world, spec, cfg.n_per_class, cfg.image_size, make_rng(cfg.seed))
    if not dataset.clean or not dataset.triggered:
        raise ConfigError("dataset needs both clean and triggered items")

    tasks = [(img, "clean", i) for i, (img, _) in enumerate(dataset.clean)]
    tasks += [(img, "triggered", i) for i, (img, _, _) in enumerate(dataset.triggered)]

    if req.before_defense:
        with _OracleSet(cfg) as oracles:
            results = [(oracles.classifier.classify(img), 1, b"") for img, _, _ in tasks]
    elif req.jobs > 1:
        if not (cfg.classifier.startswith("builtin:") and cfg.restorer.startswith("builtin:")):
            raise ConfigError("parallel eval requires builtin oracles")
        with ProcessPoolExecutor(
            max_workers=req.jobs, initializer=_pool_init, initargs=(cfg.model_dump_json(),)
        ) as pool:
            results = list(pool.map(_pool_defend, tasks, chunksize=4))
    else:
        # one oracle connection shared across the whole run
        with _OracleSet(cfg) as oracles:
            defense_cfg = cfg.defense_config()
            results = []
            for img, split, index in tasks:
                rng = child_rng(cfg.seed, split, index)
                report = defend(img, oracles.classifier, oracles.restorer, defense_cfg, rng)
                results.append(
                    (
                        report.purified_label,
                        report.classify_count,
                        imgio.image_to_ppm_bytes(report.purified),
                    )
                )

    n_clean = len(dataset.clean)
    clean_preds = [label for label, _, _ in results[:n_clean]]
    trig_preds = [label for label, _, _ in results[n_clean:]]
    metrics = metrics_from_predictions(dataset, clean_preds, trig_preds)
    resp = EvalResponse(
        acc_c=metrics.acc_c,
        acc_b=metrics.acc_b,
        asr=metrics.asr,
        n_clean=n_clean,
        n_triggered=len(dataset.triggered),
        queries_per_image=float(np.mean([q for _, q, _ in results])),
    )
    if req.include_images and not req.before_defense:
        resp.purified_ppm_b64 = [base64.b64encode(ppm).decode() for _, _, ppm in results]
    return resp


# ---------------------------------------------------------------------------
# corpus


class CorpusRequest(BaseModel):
    config: RunConfig = Field(default_factory=RunConfig)


class CorpusItem(BaseModel):
    file: str
    label: int
    target: Optional[int]
    ppm_b64: str


class CorpusResponse(BaseModel):
    items: list[CorpusItem]


def handle_corpus(req: CorpusRequest) -> CorpusResponse:
    cfg = req.config
    world = SyntheticWorld(num_classes=cfg.num_classes)
    spec = cfg.trigger.to_spec(cfg.image_size)
    try:
        dataset = generate_corpus(world, spec, cfg.n_per_class, cfg.image_size, make_rng(cfg.seed))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    items = []
    for i, (img, label) in enumerate(dataset.clean):
        items.append(
            CorpusItem(
                file=f"clean_{i:04d}.ppm",
                label=label,
                target=None,
                ppm_b64=base64.b64encode(imgio.image_to_ppm_bytes(img)).decode(),
            )
        )
    for i, (img, label, target) in enumerate(dataset.triggered):
        items.append(
            CorpusItem(
                file=f"triggered_{i:04d}.ppm",
                label=label,
                target=target,
                ppm_b64=base64.b64encode(imgio.image_to_ppm_bytes(img)).decode(),
            )
        )
    return CorpusResponse(items=items)


# ---------------------------------------------------------------------------
# app wiring

app = FastAPI(title="bdmae", version="0.1.0")


def _as_http(exc: Exception) -> HTTPException:
    if isinstance(exc, OracleError):
        return HTTPException(status_code=502, detail=f"oracle failure: {exc}")
    return HTTPException(status_code=422, detail=str(exc))


@app.get("/v1/info")
def info() -> dict:
    return {
        "service": "bdmae",
        "version": "0.1.0",
        "report_schema": REPORT_SCHEMA,
        "classifiers": list(BUILTIN_CLASSIFIERS) + ["exec:<cmd>", "tcp:<host:port>"],
        "restorers": list(BUILTIN_RESTORERS) + ["exec:<cmd>", "tcp:<host:port>"],
    }


@app.post("/v1/defend", response_model=DefendResponse)
def defend_route(req: DefendRequest) -> DefendResponse:
    try:
        return handle_defend(req)
    except (OracleError, ConfigError, ValueError) as exc:
        raise _as_http(exc) from exc


@app.post("/v1/eval", response_model=EvalResponse)
def eval_route(req: EvalRequest) -> EvalResponse:
    try:
        return handle_eval(req)
    except (OracleError, ConfigError, ValueError) as exc:
        raise _as_http(exc) from exc


@app.post("/v1/corpus", response_model=CorpusResponse)
def corpus_route(req: CorpusRequest) -> CorpusResponse:
    try:
        return handle_corpus(req)
    except (OracleError, ConfigError, ValueError) as exc:
        raise _as_http(exc) from exc


def env_timeout_ms() -> int:
    raw = os.environ.get("BDMAE_ORACLE_TIMEOUT_MS")
    if not raw:
        return DEFAULT_TIMEOUT_MS
    try:
        value = int(raw)
    except ValueError as exc:
        raise ConfigError(f"BDMAE_ORACLE_TIMEOUT_MS must be an integer, got {raw!r}") from exc
    if value <= 0:
        raise ConfigError("BDMAE_ORACLE_TIMEOUT_MS must be positive")
    return value
