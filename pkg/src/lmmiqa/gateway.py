"""Chat-completions client with retry, rate limiting, a content-addressed cache and an offline mock.

Any endpoint speaking the chat-completions JSON convention works. A backend whose
``base_url`` starts with ``mock`` never touches the network: responses come from
:func:`mock_score`, a deterministic function of the target image's noise level.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import logging
import os
import random
import re
import tempfile
import threading
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import httpx
import numpy as np

from .dataset import decode_image
from .noise import estimate_noise
from .prompts import Prompt, fmt_number

log = logging.getLogger(__name__)

MOCK_JITTER = 0.25
MOCK_SLOPE = 40.0


class GatewayError(RuntimeError):
    pass


class Exhausted(GatewayError):
    pass


class AuthFailure(GatewayError):
    pass


class RequestTimeout(GatewayError):
    pass


class BackendError(GatewayError):
    """Non-retryable HTTP failure or a body that is not a chat completion."""


class NoScoreFound(ValueError):
    pass


@dataclass(frozen=True)
class BackendConfig:
    base_url: str = "mock://"
    model_name: str = "mock"
    api_key_env: str = "OPENAI_API_KEY"
    temperature: float = 0.0
    max_retries: int = 5
    requests_per_minute: int = 60
    timeout: float = 120.0
    max_tokens: int | None = None
    concurrency: int = 4

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.requests_per_minute < 1:
            raise ValueError("requests_per_minute must be >= 1")
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")

    @property
    def is_mock(self) -> bool:
        return self.base_url.startswith("mock")

    @classmethod
    def from_dict(cls, data: dict) -> "BackendConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown backend option(s): {', '.join(sorted(unknown))}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


MOCK_BACKEND = BackendConfig()


@dataclass(frozen=True)
class ScoredResponse:
    score: float
    explanation: str
    raw: str
    clamped: bool = False
    usage: dict | None = None


@dataclass(frozen=True)
class CacheEntry:
    key: str
    response: str
    created_at: str


@dataclass
class Telemetry:
    network_calls: int = 0
    retries: int = 0
    cache_hits: int = 0
    cache_misses: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def bump(self, name: str, by: int = 1) -> None:
        with self._lock:
            setattr(self, name, getattr(self, name) + by)


def now_iso() -> str:
    """UTC timestamp; honours ``SOURCE_DATE_EPOCH`` for reproducible outputs."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch:
        moment = _dt.datetime.fromtimestamp(int(epoch), tz=_dt.timezone.utc)
    else:
        moment = _dt.datetime.now(tz=_dt.timezone.utc)
    return moment.isoformat(timespec="seconds").replace("+00:00", "Z")


def cache_key(prompt: Prompt, backend: BackendConfig) -> str:
    h = hashlib.sha256()
    for chunk in (
        prompt.serialize(),
        backend.model_name.encode("utf-8"),
        repr(float(backend.temperature)).encode("ascii"),
        prompt.template_hash.encode("ascii"),
    ):
        h.update(len(chunk).to_bytes(8, "big"))
        h.update(chunk)
    return h.hexdigest()


class ResponseCache:
    """One JSON file per response under ``<root>/<first-2-hex>/<digest>.json``."""

    def __init__(self, root):
        self.root = Path(root)

    def path_for(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def get(self, key: str) -> CacheEntry | None:
        path = self.path_for(key)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            return None
        except (OSError, ValueError) as exc:
            log.warning("ignoring unreadable cache entry %s: %s", path, exc)
            return None
        return CacheEntry(data["key"], data["response"], data["created_at"])

    def put(self, key: str, response: str, created_at: str | None = None) -> CacheEntry:
        entry = CacheEntry(key, response, created_at or now_iso())
        path = self.path_for(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(asdict(entry), fh, sort_keys=True)
            os.replace(tmp, path)
        except BaseException:
            try:
                os.unlink(tmp)
            except OSError:
                pass
            raise
        return entry

    def __len__(self) -> int:
        return sum(1 for _ in self.root.glob("*/*.json")) if self.root.exists() else 0


class TokenBucket:
    def __init__(self, per_minute: int, burst: int = 1, clock=time.monotonic, sleep=time.sleep):
        self.rate = per_minute / 60.0
        self.capacity = float(max(1, burst))
        self.tokens = self.capacity
        self.clock = clock
        self.sleep = sleep
        self.updated = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        with self._lock:
            now = self.clock()
            self.tokens = min(self.capacity, self.tokens + (now - self.updated) * self.rate)
            self.updated = now
            if self.tokens >= 1.0:
                self.tokens -= 1.0
                return
            wait = (1.0 - self.tokens) / self.rate
            self.sleep(wait)
            self.updated = self.clock()
            self.tokens = 0.0


_GRAMMAR_SCORE = re.compile(r"SCORE\s*:\s*\**\s*(-?(?:\d+(?:\.\d+)?|\.\d+))", re.IGNORECASE)
_GRAMMAR_EXPLANATION = re.compile(r"EXPLANATION\s*:\s*\**\s*(.*)", re.IGNORECASE | re.DOTALL)
_NUMBER = re.compile(r"(?<![\w.])-?(?:\d+(?:\.\d+)?|\.\d+)")
_REGION = re.compile(r"REGION\s*:\s*\**\s*([A-Za-z][A-Za-z _-]*)", re.IGNORECASE)


def parse_score(raw: str) -> ScoredResponse:
    match = _GRAMMAR_SCORE.search(raw)
    if match:
        value = float(match.group(1))
        clamped = not 0.0 <= value <= 4.0
        expl = _GRAMMAR_EXPLANATION.search(raw, match.end())
        explanation = expl.group(1).strip() if expl else raw[match.end():].strip()
        return ScoredResponse(min(4.0, max(0.0, value)), explanation, raw, clamped)

    for candidate in _NUMBER.finditer(raw):
        value = float(candidate.group(0))
        if 0.0 <= value <= 4.0:
            return ScoredResponse(value, raw.strip(), raw, False)
    raise NoScoreFound(f"no score in [0, 4] found in response: {raw[:80]!r}")


def parse_region(raw: str, vocabulary) -> str | None:
    """Label from a ``REGION: <label>`` line if it is in ``vocabulary``, else None."""
    match = _REGION.search(raw)
    if not match:
        return None
    label = match.group(1).strip().lower()
    allowed = {v.lower(): v for v in vocabulary}
    return allowed.get(label)


def chat_content(body: str) -> tuple[str, dict | None]:
    """Assistant text and token usage from a chat-completions response body."""
    try:
        data = json.loads(body)
        content = data["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise BackendError(f"response is not a chat completion: {body[:120]!r}") from exc
    if isinstance(content, list):
        content = "".join(part.get("text", "") for part in content if isinstance(part, dict))
    if content is None:
        content = ""
    return content, data.get("usage")


def _degradation(sigma: float) -> str:
    if sigma >= 0.06:
        return "Heavy noise and grain obscure fine structures; diagnostic quality is compromised."
    if sigma >= 0.035:
        return "Moderate noise reduces low-contrast detail; structures remain identifiable."
    if sigma >= 0.015:
        return "Mild noise is visible but edges and contrast are well preserved."
    return "Minimal noise; the slice appears sharp with good contrast."


def mock_text(sigma: float, jitter: float) -> str:
    score = min(4.0, max(0.0, 4.0 - MOCK_SLOPE * sigma + jitter))
    return f"SCORE: {fmt_number(round(score, 2), 2)}\nEXPLANATION: {_degradation(sigma)}"


_FEEDBACK_LINE = re.compile(r"error: \d")
_LABELS = re.compile(r"Allowed labels: (.*)")


def mock_score(prompt: Prompt, seed: int = 0, backend: BackendConfig = MOCK_BACKEND) -> str:
    """Deterministic stand-in for a remote model.

    Score is ``4 - 40 * sigma_ref`` of the target image plus a seeded jitter in
    [-0.25, 0.25]. Each feedback line in the prompt divides the jitter by one
    more, so conditioning on past errors makes the mock's ranking steadier.
    Region queries get a label drawn from the advertised vocabulary.
    """
    target = prompt.target_image
    if target is None:
        raise BackendError("mock backend needs a target image in the prompt")
    key = cache_key(prompt, backend)
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, int(key[:16], 16)])

    if prompt.kind == "region":
        match = _LABELS.search(prompt.system_text)
        labels = [s.strip() for s in match.group(1).split(",")] if match else ["unknown"]
        return f"REGION: {labels[int(rng.integers(len(labels)))]}"

    sigma = estimate_noise(decode_image(target.data)).sigma_ref
    eps = float(rng.uniform(-MOCK_JITTER, MOCK_JITTER))
    n_feedback = sum(len(_FEEDBACK_LINE.findall(text)) for text in prompt.texts())
    return mock_text(sigma, eps / (1 + n_feedback))


@dataclass(frozen=True)
class Completion:
    text: str
    raw: str
    cache_hit: bool
    created_at: str
    usage: dict | None = None


class Gateway:
    """Sends prompts to one backend; safe to share between worker threads."""

    def __init__(
        self,
        backend: BackendConfig,
        cache_dir=None,
        seed: int = 0,
        client: httpx.Client | None = None,
        sleep=time.sleep,
        rng: random.Random | None = None,
        backoff_base: float = 1.0,
        backoff_factor: float = 2.0,
        limiter: TokenBucket | None = None,
    ):
        self.backend = backend
        self.cache = ResponseCache(cache_dir) if cache_dir is not None else None
        self.seed = seed
        self.telemetry = Telemetry()
        self.sleep = sleep
        self.backoff_base = backoff_base
        self.backoff_factor = backoff_factor
        self._rng = rng or random.Random()
        self._rng_lock = threading.Lock()
        self._client = client
        self._limiter = limiter or TokenBucket(backend.requests_per_minute, sleep=sleep)
        # mock responses depend on the seed, so it must separate cache entries
        self._key_backend = replace(backend, model_name=f"{backend.model_name}#seed={seed}") if backend.is_mock else backend

    def close(self) -> None:
        if self._client is not None:
            self._client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _api_key(self) -> str:
        key = os.environ.get(self.backend.api_key_env)
        if not key:
            raise AuthFailure(f"environment variable {self.backend.api_key_env} is not set")
        return key

    def _http(self) -> httpx.Client:
        if self._client is None:
            self._client = httpx.Client(timeout=self.backend.timeout)
        return self._client

    def _backoff(self, attempt: int) -> float:
        with self._rng_lock:
            return self._rng.uniform(0.0, self.backoff_base * self.backoff_factor**attempt)

    def send(self, prompt: Prompt) -> str:
        """Raw response body for ``prompt``, bypassing the cache."""
        if self.backend.is_mock:
            content = mock_score(prompt, self.seed, self.backend)
            body = {"model": self.backend.model_name, "choices": [{"index": 0, "message": {"role": "assistant", "content": content}}]}
            return json.dumps(body, sort_keys=True)

        payload = {
            "model": self.backend.model_name,
            "messages": prompt.to_messages(),
            "temperature": self.backend.temperature,
        }
        if self.backend.max_tokens is not None:
            payload["max_tokens"] = self.backend.max_tokens
        headers = {"Authorization": f"Bearer {self._api_key()}"}
        url = self.backend.base_url.rstrip("/") + "/chat/completions"

        attempt = 0
        while True:
            self._limiter.acquire()
            self.telemetry.bump("network_calls")
            timed_out = False
            try:
                resp = self._http().post(url, json=payload, headers=headers, timeout=self.backend.timeout)
            except httpx.TimeoutException as exc:
                timed_out, reason = True, f"timeout ({exc})"
            except httpx.TransportError as exc:
                reason = f"transport error ({exc})"
            else:
                code = resp.status_code
                if 200 <= code < 300:
                    return resp.text
                if code in (401, 403):
                    raise AuthFailure(f"HTTP {code} from {url}: {resp.text[:200]}")
                if code != 429 and code < 500:
                    raise BackendError(f"HTTP {code} from {url}: {resp.text[:200]}")
                reason = f"HTTP {code}"

            if attempt >= self.backend.max_retries:
                if timed_out:
                    raise RequestTimeout(f"{url}: timed out after {attempt + 1} attempt(s)")
                raise Exhausted(f"{url}: {reason} after {attempt + 1} attempt(s)")
            delay = self._backoff(attempt)
            log.info("retrying %s after %s (attempt %d, sleeping %.2fs)", url, reason, attempt + 1, delay)
            self.telemetry.bump("retries")
            self.sleep(delay)
            attempt += 1

    def key(self, prompt: Prompt) -> str:
        return cache_key(prompt, self._key_backend)

    def complete(self, prompt: Prompt) -> Completion:
        key = self.key(prompt)
        if self.cache is not None:
            entry = self.cache.get(key)
            if entry is not None:
                self.telemetry.bump("cache_hits")
                text, usage = chat_content(entry.response)
                return Completion(text, entry.response, True, entry.created_at, usage)
            self.telemetry.bump("cache_misses")
        raw = self.send(prompt)
        text, usage = chat_content(raw)
        if self.cache is not None:
            entry = self.cache.put(key, raw)
            created = entry.created_at
        else:
            created = now_iso()
        return Completion(text, raw, False, created, usage)

    def score(self, prompt: Prompt) -> tuple[ScoredResponse, Completion]:
        completion = self.complete(prompt)
        parsed = parse_score(completion.text)
        return (
            ScoredResponse(parsed.score, parsed.explanation, parsed.raw, parsed.clamped, completion.usage),
            completion,
        )
