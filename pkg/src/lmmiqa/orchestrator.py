"""Run one inference strategy over the test split and persist its predictions.

Predictions are written to JSON lines as soon as the next record in test order
completes. Restarting a run replays finished records from the response cache,
so an interrupted run and an uninterrupted one end with identical files.
"""

from __future__ import annotations

import collections
import hashlib
import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from decimal import Decimal
from pathlib import Path

import numpy as np

from .dataset import Dataset, ImageBuffer, ImageError, ImageRecord, load_image
from .feedback import DEFAULT_BUFFER_CAP, FeedbackEntry, update_feedback
from .gateway import AuthFailure, BackendConfig, Gateway, GatewayError, MOCK_BACKEND, NoScoreFound
from .noise import ImageTooSmall
from .prompts import (
    PromptConfig,
    PromptError,
    ShotExample,
    build_few_shot,
    build_with_feedback,
    build_with_metadata,
    build_zero_shot,
    template_hash,
)

log = logging.getLogger(__name__)

STRATEGIES = ("zero_shot", "few_shot", "metadata", "feedback")
N_STRATA = 5


class ConfigError(ValueError):
    pass


class NotEnoughExamples(ConfigError):
    pass


@dataclass(frozen=True)
class RunConfig:
    manifest: str | None = None
    backend: BackendConfig = MOCK_BACKEND
    strategy: str = "few_shot"
    k: int = 10
    seed: int = 0
    warmup_count: int = 5
    buffer_cap: int = DEFAULT_BUFFER_CAP
    resample_per_step: bool = False
    # experimental: score one more training image after every N test predictions
    interleave_every: int = 0
    limit: int | None = None
    out_dir: str = "out"
    cache_dir: str = "cache"
    run_id: str | None = None
    prompt: PromptConfig = field(default_factory=PromptConfig)

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; choose from {', '.join(STRATEGIES)}")
        if self.strategy != "zero_shot" and self.k < 1:
            raise ConfigError("k must be >= 1 for few-shot strategies")
        if self.strategy == "feedback" and self.warmup_count < 1:
            raise ConfigError("the feedback strategy needs warmup_count >= 1")
        if self.buffer_cap < 1:
            raise ConfigError("buffer_cap must be >= 1")
        if self.interleave_every < 0:
            raise ConfigError("interleave_every must be >= 0")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if self.limit is not None and self.limit < 1:
            raise ConfigError("limit must be >= 1")


@dataclass(frozen=True)
class Prediction:
    id: str
    y_hat: float
    explanation: str
    cache_hit: bool = False
    clamped: bool = False
    timestamp: str = ""


@dataclass
class PredictionSet:
    strategy: str
    config_fingerprint: str
    predictions: list[Prediction] = field(default_factory=list)
    failures: list[tuple[str, str]] = field(default_factory=list)
    feedback: list[FeedbackEntry] = field(default_factory=list)
    requested: int = 0

    @property
    def cache_hit_rate(self) -> float:
        if not self.predictions:
            return 0.0
        return sum(p.cache_hit for p in self.predictions) / len(self.predictions)


def stratum_of(score: float) -> int:
    # decimal arithmetic keeps boundaries like 2.4 in the upper stratum
    return min(int(Decimal(repr(float(score))) * N_STRATA / 4), N_STRATA - 1)


def select_examples(records, k: int, seed: int) -> list[ImageRecord]:
    """Stratified draw of ``k`` scored records: equal quotas over five score bands on [0, 4]."""
    scored = [r for r in records if r.score is not None]
    if k < 1:
        raise ConfigError("k must be >= 1")
    if len(scored) < k:
        raise NotEnoughExamples(f"need {k} scored training records, have {len(scored)}")

    strata = [[] for _ in range(N_STRATA)]
    for r in scored:
        strata[stratum_of(r.score)].append(r)
    sizes = [len(s) for s in strata]

    rng = np.random.default_rng(seed)
    base, extra = divmod(k, N_STRATA)
    quota = [base] * N_STRATA
    for j in rng.permutation(N_STRATA)[:extra]:
        quota[int(j)] += 1

    deficit = 0
    for j in range(N_STRATA):
        if quota[j] > sizes[j]:
            deficit += quota[j] - sizes[j]
            quota[j] = sizes[j]
    while deficit:
        open_strata = [j for j in range(N_STRATA) if quota[j] < sizes[j]]
        level = min(quota[j] for j in open_strata)
        for j in open_strata:
            if deficit and quota[j] == level:
                quota[j] += 1
                deficit -= 1

    chosen = []
    for j in range(N_STRATA):
        if quota[j]:
            picks = rng.choice(sizes[j], size=quota[j], replace=False)
            chosen.extend(strata[j][int(i)] for i in picks)
    return sorted(chosen, key=lambda r: (r.score, r.id))


class ImageStore:
    """Loads each record's image once per run."""

    def __init__(self, dataset: Dataset):
        self.dataset = dataset
        self._images: dict[str, ImageBuffer] = {}
        self._lock = threading.Lock()

    def get(self, record: ImageRecord) -> ImageBuffer:
        with self._lock:
            cached = self._images.get(record.id)
        if cached is not None:
            return cached
        image = load_image(record, self.dataset.root)
        with self._lock:
            self._images[record.id] = image
        return image


def sample_examples(train: Dataset, k: int, seed: int, store: ImageStore | None = None) -> list[ShotExample]:
    store = store or ImageStore(train)
    return [ShotExample(r, store.get(r)) for r in select_examples(train.train, k, seed)]


def config_fingerprint(cfg: RunConfig, dataset: Dataset) -> str:
    records = [[r.id, r.path, r.split, r.score, r.region, r.noise] for r in dataset.records]
    doc = {
        "strategy": cfg.strategy,
        "k": cfg.k,
        "seed": cfg.seed,
        "warmup_count": cfg.warmup_count,
        "buffer_cap": cfg.buffer_cap,
        "resample_per_step": cfg.resample_per_step,
        "interleave_every": cfg.interleave_every,
        "limit": cfg.limit,
        "backend": {
            "base_url": cfg.backend.base_url,
            "model_name": cfg.backend.model_name,
            "temperature": cfg.backend.temperature,
            "max_tokens": cfg.backend.max_tokens,
        },
        "template_hash": template_hash(cfg.prompt),
        "rubric": [list(x) for x in cfg.prompt.rubric_labels],
        "records": hashlib.sha256(json.dumps(records).encode("utf-8")).hexdigest(),
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode("utf-8")).hexdigest()


def check_preconditions(strategy: str, dataset: Dataset, targets) -> None:
    if not targets:
        raise ConfigError("manifest has no test records to score")
    if strategy in ("metadata", "feedback"):
        for r in list(dataset.train) + list(targets):
            if not r.region:
                raise ConfigError(f"strategy {strategy} needs a region label; record {r.id!r} has none (run tag-regions)")
            if r.noise is None:
                raise ConfigError(f"strategy {strategy} needs a noise value; record {r.id!r} has none (run estimate-noise)")


def prediction_line(p: Prediction, strategy: str, fingerprint: str) -> str:
    doc = {
        "id": p.id,
        "y_hat": p.y_hat,
        "explanation": p.explanation,
        "strategy": strategy,
        "config_fingerprint": fingerprint,
        "timestamp": p.timestamp,
        "clamped": p.clamped,
    }
    return json.dumps(doc, ensure_ascii=False)


def read_predictions(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


_RECOVERABLE = (GatewayError, NoScoreFound, ImageError, ImageTooSmall, PromptError)


def _ordered_map(fn, items, workers: int):
    """Like ``Executor.map`` but with at most ``workers`` tasks in flight."""
    if workers <= 1:
        for item in items:
            yield fn(item)
        return
    pending = collections.deque()
    it = iter(items)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        try:
            for item in it:
                pending.append(pool.submit(fn, item))
                if len(pending) >= workers:
                    yield pending.popleft().result()
            while pending:
                yield pending.popleft().result()
        finally:
            for fut in pending:
                fut.cancel()


def run_strategy(
    strategy: str,
    dataset: Dataset,
    backend: BackendConfig,
    cfg: RunConfig,
    gateway: Gateway | None = None,
    out_path=None,
    feedback_path=None,
    on_prediction=None,
) -> PredictionSet:
    """Score every test record with ``strategy``.

    ``on_prediction(index, prediction)`` is called after each record is persisted.
    Gateway errors for one record are recorded in ``failures``; authentication
    failures abort the run.
    """
    cfg = replace(cfg, strategy=strategy, backend=backend)
    cfg.validate()
    targets = dataset.test[: cfg.limit] if cfg.limit else dataset.test
    check_preconditions(strategy, dataset, targets)
    fingerprint = config_fingerprint(cfg, dataset)
    result = PredictionSet(strategy, fingerprint, requested=len(targets))

    own_gateway = gateway is None
    if own_gateway:
        gateway = Gateway(backend, cfg.cache_dir, seed=cfg.seed)
    store = ImageStore(dataset)

    fixed_examples = None
    if strategy != "zero_shot" and not cfg.resample_per_step:
        fixed_examples = sample_examples(dataset, cfg.k, cfg.seed, store)

    def examples_for(step: int):
        if fixed_examples is not None:
            return fixed_examples
        return [ShotExample(r, store.get(r)) for r in select_examples(dataset.train, cfg.k, cfg.seed * 1_000_003 + step + 1)]

    def build(step: int, record: ImageRecord, buffer=()):
        image = store.get(record)
        if strategy == "zero_shot":
            return build_zero_shot(image, cfg.prompt)
        if strategy == "few_shot":
            return build_few_shot(examples_for(step), image, cfg.prompt)
        if strategy == "metadata":
            return build_with_metadata(examples_for(step), image, record.region, record.noise, cfg.prompt)
        return build_with_feedback(examples_for(step), buffer, image, record.region, record.noise, cfg.prompt)

    def score(step: int, record: ImageRecord, buffer=()):
        try:
            scored, completion = gateway.score(build(step, record, buffer))
        except AuthFailure:
            raise
        except _RECOVERABLE as exc:
            log.warning("record %s failed: %s", record.id, exc)
            return record, None, f"{type(exc).__name__}: {exc}"
        pred = Prediction(record.id, scored.score, scored.explanation, completion.cache_hit, scored.clamped, completion.created_at)
        return record, pred, None

    out_fh = open(out_path, "w", encoding="utf-8") if out_path else None
    fb_fh = open(feedback_path, "w", encoding="utf-8") if feedback_path else None

    def persist(step, record, pred, error):
        if pred is None:
            result.failures.append((record.id, error))
            return
        result.predictions.append(pred)
        if out_fh:
            out_fh.write(prediction_line(pred, strategy, fingerprint) + "\n")
            out_fh.flush()
        if on_prediction:
            on_prediction(step, pred)

    try:
        if strategy != "feedback":
            jobs = list(enumerate(targets))
            workers = 1 if gateway.backend.is_mock else gateway.backend.concurrency
            for step, (record, pred, error) in enumerate(_ordered_map(lambda job: score(*job), jobs, workers)):
                persist(step, record, pred, error)
        else:
            _run_feedback(cfg, dataset, targets, fixed_examples, score, persist, result, fb_fh)
    finally:
        if out_fh:
            out_fh.close()
        if fb_fh:
            fb_fh.close()
        if own_gateway:
            gateway.close()
    return result


def _run_feedback(cfg, dataset, targets, examples, score, persist, result, fb_fh):
    """Warm up on random training images, then score test records with the error buffer attached.

    Only training images ever contribute feedback; test scores are never read.
    """
    rng = np.random.default_rng([cfg.seed, 0xFEED])
    train = dataset.train
    used = {ex.record.id for ex in examples} if examples else set()
    pool = [r for r in train if r.id not in used]
    if len(pool) < cfg.warmup_count:
        pool = list(train)
    order = [pool[int(i)] for i in rng.permutation(len(pool))]
    cursor = 0
    buffer: list[FeedbackEntry] = []

    def calibrate(phase: str):
        nonlocal buffer, cursor
        record = order[cursor % len(order)]
        # step numbers past the test range keep resampled example sets distinct
        step = len(targets) + cursor
        cursor += 1
        _, pred, error = score(step, record, tuple(buffer))
        if pred is None:
            log.warning("feedback image %s skipped: %s", record.id, error)
            return
        buffer = update_feedback(buffer, record.id, record.score, pred.y_hat, record.noise, cfg.buffer_cap)
        entry = buffer[-1]
        result.feedback.append(entry)
        if fb_fh:
            fb_fh.write(json.dumps({**asdict(entry), "phase": phase}) + "\n")
            fb_fh.flush()

    for _ in range(cfg.warmup_count):
        calibrate("warmup")
    for step, record in enumerate(targets):
        if cfg.interleave_every and step and step % cfg.interleave_every == 0:
            calibrate("interleave")
        persist(step, *score(step, record, tuple(buffer)))
