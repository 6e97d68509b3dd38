"""Clients for the two external generation services the forge depends on.

Two services sit behind HTTP+JSON: a text-generation service (cue and
explanation synthesis) and a text-conditioned segmentation service
(pseudo-mask heatmaps). Both share one transport core: token-bucket
admission, exponential-backoff retry on transient failures, and a JSONL
audit record per outbound call. Deterministic mock clients cover every
pipeline path without a network.

Credentials and endpoints come from the environment, never from config
files:

    MEDICO_TEXTGEN_URL   text-generation endpoint
    MEDICO_TEXTGEN_KEY   bearer credential for text generation
    MEDICO_SEG_URL       segmentation endpoint
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import os
import random
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import requests
from PIL import Image

from .errors import ConfigError, ContentError, ProtocolError, TransportError
from .imaging import image_size

logger = logging.getLogger(__name__)

ENV_TEXTGEN_URL = "MEDICO_TEXTGEN_URL"
ENV_TEXTGEN_KEY = "MEDICO_TEXTGEN_KEY"
ENV_SEG_URL = "MEDICO_SEG_URL"


@dataclass(frozen=True)
class TextGenRequest:
    system_prompt: str
    user_prompt: str
    few_shot_examples: tuple[tuple[str, str], ...] = ()
    max_tokens: int = 512
    temperature: float = 0.0

    def __post_init__(self):
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be >= 1, got {self.max_tokens}")
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        object.__setattr__(
            self, "few_shot_examples", tuple((str(a), str(b)) for a, b in self.few_shot_examples)
        )


@dataclass(frozen=True)
class SegRequest:
    """One segmentation call: an image plus a descriptive text prompt."""

    image_ref: str | Path | bytes
    prompt: str

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("segmentation prompt must be non-empty")


@dataclass(frozen=True)
class TextGenResult:
    text: str
    request_id: str
    attempts: int
    latency_ms: float


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 5
    base_delay: float = 1.0
    max_delay: float = 30.0
    jitter: float = 0.25

    def delay(self, attempt: int, rng: random.Random) -> float:
        backoff = min(self.max_delay, self.base_delay * 2 ** (attempt - 1))
        return backoff * (1.0 + rng.uniform(0.0, self.jitter))


class TransientServiceError(Exception):
    """Internal marker for retryable failures: timeout, 5xx, connection reset."""


class AuditLog:
    """Append-only JSONL audit trail; one atomic record per outbound call."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def record(self, *, service: str, request_id: str, attempts: int, latency_ms: float, status: str):
        line = json.dumps(
            {
                "ts": time.time(),
                "service": service,
                "request_id": request_id,
                "attempts": attempts,
                "latency_ms": round(latency_ms, 3),
                "status": status,
            },
            sort_keys=True,
        )
        with self._lock:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(line + "\n")


class RateLimiter:
    """Token bucket; admission is serialized across threads."""

    def __init__(self, requests_per_minute: float, clock=time.monotonic, sleep=time.sleep):
        if requests_per_minute <= 0:
            raise ValueError("requests_per_minute must be > 0")
        self.capacity = float(requests_per_minute)
        self.rate = requests_per_minute / 60.0
        self._tokens = self.capacity
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = threading.Lock()

    def acquire(self):
        with self._lock:
            now = self._clock()
            self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
            self._last = now
            if self._tokens < 1.0:
                wait = (1.0 - self._tokens) / self.rate
                self._sleep(wait)
                self._last = self._clock()
                self._tokens = 1.0
            self._tokens -= 1.0


def stable_request_id(service: str, payload: dict) -> str:
    """Deterministic id from the canonical request payload."""
    canonical = json.dumps({"service": service, "payload": payload}, sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


class ServiceCore:
    """Retry + rate-limit + audit wrapper around a ``send(payload) -> dict`` callable."""

    def __init__(
        self,
        service: str,
        send: Callable[[dict], dict],
        *,
        retry: RetryPolicy | None = None,
        audit: AuditLog | None = None,
        rate_limiter: RateLimiter | None = None,
        sleep=time.sleep,
        clock=time.monotonic,
        rng: random.Random | None = None,
    ):
        self.service = service
        self._send = send
        self.retry = retry or RetryPolicy()
        self.audit = audit
        self.rate_limiter = rate_limiter
        self._sleep = sleep
        self._clock = clock
        self._rng = rng or random.Random()

    def call(self, payload: dict) -> tuple[dict, str, int, float]:
        """Returns (response, request_id, attempts, latency_ms)."""
        request_id = stable_request_id(self.service, payload)
        started = self._clock()
        attempts = 0
        try:
            while True:
                attempts += 1
                if self.rate_limiter is not None:
                    self.rate_limiter.acquire()
                try:
                    response = self._send(payload)
                except TransientServiceError as exc:
                    if attempts >= self.retry.max_attempts:
                        self._audit(request_id, attempts, started, "transport_error")
                        raise TransportError(
                            f"{self.service}: gave up after {attempts} attempts: {exc}"
                        ) from exc
                    delay = self.retry.delay(attempts, self._rng)
                    logger.warning(
                        "%s: transient failure (attempt %d/%d), retrying in %.2fs: %s",
                        self.service, attempts, self.retry.max_attempts, delay, exc,
                    )
                    self._sleep(delay)
                    continue
                self._audit(request_id, attempts, started, "ok")
                return response, request_id, attempts, (self._clock() - started) * 1000.0
        except ConfigError:
            self._audit(request_id, attempts, started, "config_error")
            raise

    def _audit(self, request_id: str, attempts: int, started: float, status: str):
        if self.audit is not None:
            self.audit.record(
                service=self.service,
                request_id=request_id,
                attempts=attempts,
                latency_ms=(self._clock() - started) * 1000.0,
                status=status,
            )


def http_sender(url: str, *, api_key: str | None = None, timeout: float = 30.0, session=None):
    """POST-JSON sender with the retry classification the cores expect.

    Timeouts, connection resets and 5xx responses are transient (retried);
    any 4xx is a non-retryable configuration error.
    """
    session = session or requests.Session()
    headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}

    def send(payload: dict) -> dict:
        try:
            resp = session.post(url, json=payload, headers=headers, timeout=timeout)
        except (requests.Timeout, requests.ConnectionError) as exc:
            raise TransientServiceError(str(exc)) from exc
        if resp.status_code >= 500:
            raise TransientServiceError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise ConfigError(f"HTTP {resp.status_code} from {url}: {resp.text[:200]}")
        return resp.json()

    return send


# ---------------------------------------------------------------------------
# text generation
# ---------------------------------------------------------------------------


class TextGenClient:
    """HTTP client for the few-shot text-generation service."""

    service = "textgen"

    def __init__(self, core: ServiceCore):
        self._core = core

    @classmethod
    def from_env(cls, **core_kwargs) -> "TextGenClient":
        url = os.environ.get(ENV_TEXTGEN_URL)
        key = os.environ.get(ENV_TEXTGEN_KEY)
        if not url:
            raise ConfigError(f"{ENV_TEXTGEN_URL} is not set")
        if not key:
            raise ConfigError(f"{ENV_TEXTGEN_KEY} is not set")
        return cls(ServiceCore(cls.service, http_sender(url, api_key=key), **core_kwargs))

    def generate_text(self, req: TextGenRequest) -> TextGenResult:
        payload = {
            "system_prompt": req.system_prompt,
            "few_shot_examples": [list(pair) for pair in req.few_shot_examples],
            "user_prompt": req.user_prompt,
            "max_tokens": req.max_tokens,
            "temperature": req.temperature,
        }
        logger.debug("textgen request %s: %d prompt chars, %d shots",
                     stable_request_id(self.service, payload), len(req.user_prompt),
                     len(req.few_shot_examples))
        response, request_id, attempts, latency = self._core.call(payload)
        text = response.get("text", "")
        logger.debug("textgen response %s: %d chars in %d attempt(s)", request_id, len(text), attempts)
        if not text:
            raise ContentError(f"textgen returned an empty completion (request {request_id})")
        return TextGenResult(text=text, request_id=request_id, attempts=attempts, latency_ms=latency)


class MockTextGenClient:
    """Canned text generation; fully deterministic given its table.

    ``replies`` maps user_prompt -> reply. Requests are captured on
    ``self.requests`` so tests can assert on outbound payloads. A
    ``fallback`` callable may synthesize a reply for unknown prompts.
    """

    service = "textgen"

    def __init__(
        self,
        replies: dict[str, str] | None = None,
        fallback: Callable[[TextGenRequest], str] | None = None,
        audit: AuditLog | None = None,
    ):
        self.replies = dict(replies or {})
        self.fallback = fallback
        self.audit = audit
        self.requests: list[TextGenRequest] = []

    def generate_text(self, req: TextGenRequest) -> TextGenResult:
        self.requests.append(req)
        request_id = stable_request_id(self.service, {"user_prompt": req.user_prompt})
        if req.user_prompt in self.replies:
            text = self.replies[req.user_prompt]
        elif self.fallback is not None:
            text = self.fallback(req)
        else:
            text = ""
        if self.audit is not None:
            self.audit.record(
                service=self.service, request_id=request_id, attempts=1, latency_ms=0.0, status="ok"
            )
        if not text:
            raise ContentError(f"mock textgen has no reply for prompt: {req.user_prompt[:80]!r}")
        return TextGenResult(text=text, request_id=request_id, attempts=1, latency_ms=0.0)


def generate_text(client, req: TextGenRequest) -> TextGenResult:
    """Prompted generation through any text client (real or mock)."""
    return client.generate_text(req)


# ---------------------------------------------------------------------------
# text-conditioned segmentation
# ---------------------------------------------------------------------------


def heatmap_to_png_bytes(heatmap: np.ndarray) -> bytes:
    """Serialize a [0,1] heatmap as an 8-bit grayscale PNG."""
    arr = np.asarray(heatmap, dtype=float)
    if arr.ndim != 2:
        raise ValueError(f"heatmap must be 2D, got shape {arr.shape}")
    if arr.min() < 0 or arr.max() > 1:
        raise ValueError("heatmap values must lie in [0, 1]")
    buf = io.BytesIO()
    Image.fromarray(np.round(arr * 255).astype(np.uint8), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def png_bytes_to_heatmap(data: bytes) -> np.ndarray:
    """Inverse of :func:`heatmap_to_png_bytes`: 8-bit intensities mapped to [0, 1]."""
    with Image.open(io.BytesIO(data)) as img:
        return np.asarray(img.convert("L"), dtype=float) / 255.0


def _image_bytes(image_ref: str | Path | bytes) -> bytes:
    if isinstance(image_ref, bytes):
        return image_ref
    return Path(image_ref).read_bytes()


class SegClient:
    """HTTP client for the text-prompted segmentation service."""

    service = "seg"

    def __init__(self, core: ServiceCore):
        self._core = core

    @classmethod
    def from_env(cls, **core_kwargs) -> "SegClient":
        url = os.environ.get(ENV_SEG_URL)
        if not url:
            raise ConfigError(f"{ENV_SEG_URL} is not set")
        return cls(ServiceCore(cls.service, http_sender(url), **core_kwargs))

    def segment_by_text(self, req: SegRequest) -> np.ndarray:
        data = _image_bytes(req.image_ref)
        width, height = image_size(data)
        payload = {
            "image_b64": base64.b64encode(data).decode("ascii"),
            "prompt": req.prompt,
        }
        response, request_id, attempts, _ = self._core.call(payload)
        logger.debug("seg response %s: prompt %r, %d attempt(s)", request_id, req.prompt, attempts)
        if "heatmap_png_b64" not in response:
            raise ProtocolError(f"segmentation reply lacks heatmap_png_b64 (request {request_id})")
        heatmap = png_bytes_to_heatmap(base64.b64decode(response["heatmap_png_b64"]))
        if heatmap.shape != (height, width):
            raise ProtocolError(
                f"heatmap shape {heatmap.shape[::-1]} != image size {(width, height)} (request {request_id})"
            )
        return heatmap


class MockSegClient:
    """Deterministic segmentation: canned heatmaps or a synthesizing function.

    ``heatmaps`` is keyed by (image_key, prompt) where image_key is the file
    stem for path inputs. ``synth(image_key, prompt, width, height)`` covers
    everything not in the table.
    """

    service = "seg"

    def __init__(
        self,
        heatmaps: dict[tuple[str, str], np.ndarray] | None = None,
        synth: Callable[[str, str, int, int], np.ndarray] | None = None,
    ):
        self.heatmaps = dict(heatmaps or {})
        self.synth = synth
        self.requests: list[SegRequest] = []

    @staticmethod
    def image_key(image_ref: str | Path | bytes) -> str:
        if isinstance(image_ref, bytes):
            return hashlib.sha256(image_ref).hexdigest()[:12]
        return Path(image_ref).stem

    def segment_by_text(self, req: SegRequest) -> np.ndarray:
        self.requests.append(req)
        data = _image_bytes(req.image_ref)
        width, height = image_size(data)
        key = self.image_key(req.image_ref)
        if (key, req.prompt) in self.heatmaps:
            heatmap = np.asarray(self.heatmaps[(key, req.prompt)], dtype=float)
        elif self.synth is not None:
            heatmap = np.asarray(self.synth(key, req.prompt, width, height), dtype=float)
        else:
            heatmap = np.zeros((height, width))
        if heatmap.shape != (height, width):
            raise ProtocolError(f"mock heatmap shape {heatmap.shape} != image {(height, width)}")
        return heatmap


def segment_by_text(client, req: SegRequest) -> np.ndarray:
    """Text-prompted segmentation through any seg client (real or mock)."""
    return client.segment_by_text(req)
