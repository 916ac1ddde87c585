"""Shared HTTP plumbing for the remote detector and VLM clients: bounded
retries with exponential backoff, an in-flight limit, and a token-bucket
rate limiter."""

from __future__ import annotations

import threading
import time
from typing import Any, Callable

import httpx

from .core import BackendError, QuotaExceededError

QUOTA_STATUS_CODES = frozenset({402, 429})


class TokenBucket:
    """Simple requests-per-second limiter. ``rate_per_sec=None`` disables it.

    Clock and sleep are injectable for tests.
    """

    def __init__(
        self,
        rate_per_sec: float | None,
        *,
        time_func: Callable[[], float] = time.monotonic,
        sleep_func: Callable[[float], None] = time.sleep,
    ) -> None:
        if rate_per_sec is not None and rate_per_sec <= 0:
            raise ValueError("rate_per_sec must be positive")
        self._rate = rate_per_sec
        self._time = time_func
        self._sleep = sleep_func
        self._lock = threading.Lock()
        self._tokens = 1.0 if rate_per_sec else 0.0
        self._last = time_func()

    def acquire(self) -> None:
        if self._rate is None:
            return
        while True:
            with self._lock:
                now = self._time()
                self._tokens = min(self._rate, self._tokens + (now - self._last) * self._rate)
                self._last = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self._rate
            self._sleep(wait)


class HttpJsonClient:
    """POST JSON payloads with retry, concurrency bound, and rate limiting.

    Transport failures and 5xx responses are retried with exponential
    backoff up to ``max_attempts``; quota responses abort the run.
    """

    def __init__(
        self,
        base_url: str,
        *,
        max_attempts: int = 3,
        backoff_base: float = 0.5,
        max_in_flight: int = 4,
        rate_per_sec: float | None = None,
        timeout: float = 60.0,
        client: httpx.Client | None = None,
        sleep_func: Callable[[float], None] = time.sleep,
    ) -> None:
        if max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        self.base_url = base_url.rstrip("/")
        self._max_attempts = max_attempts
        self._backoff_base = backoff_base
        self._semaphore = threading.BoundedSemaphore(max_in_flight)
        self._bucket = TokenBucket(rate_per_sec, sleep_func=sleep_func)
        self._client = client or httpx.Client(timeout=timeout)
        self._sleep = sleep_func

    def post_json(self, path: str, payload: dict[str, Any]) -> Any:
        url = f"{self.base_url}{path}"
        last_error: Exception | None = None
        for attempt in range(self._max_attempts):
            if attempt:
                self._sleep(self._backoff_base * (2 ** (attempt - 1)))
            self._bucket.acquire()
            with self._semaphore:
                try:
                    response = self._client.post(url, json=payload)
                except httpx.HTTPError as exc:
                    last_error = exc
                    continue
            if response.status_code in QUOTA_STATUS_CODES:
                raise QuotaExceededError(f"{url}: quota exceeded (HTTP {response.status_code})")
            if response.status_code >= 500:
                last_error = BackendError(f"{url}: HTTP {response.status_code}")
                continue
            if response.status_code != 200:
                raise BackendError(f"{url}: HTTP {response.status_code}")
            try:
                return response.json()
            except ValueError as exc:
                raise BackendError(f"{url}: response is not valid JSON") from exc
        raise BackendError(
            f"{url}: unreachable after {self._max_attempts} attempts ({last_error})"
        )

    def close(self) -> None:
        self._client.close()
