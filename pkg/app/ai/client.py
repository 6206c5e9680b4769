"""
Remote Target Model Client
Fetches next-token distributions from a logit server over HTTP/JSON
"""

from typing import Optional, Sequence, Tuple
import logging
import threading
import httpx
import numpy as np
from pydantic import ValidationError
from tenacity import (
    Retrying,
    before_sleep_log,
    retry_if_exception_type,
    stop_after_attempt,
    wait_exponential,
)

from app.core.config import settings
from app.core.exceptions import ProtocolError, TransportError
from app.models.base import ModelConfig, TargetModel
from app.schemas import NextDistRequest, NextDistResponse

logger = logging.getLogger(__name__)

NEXT_DIST_PATH = "/v1/next_dist"


class _RetryableStatus(Exception):
    """5xx from the server; retried like a transport failure"""


def sparsify(probs: np.ndarray) -> Tuple[list, list]:
    """Non-zero (ids, probs) of a dense distribution"""
    ids = np.flatnonzero(probs)
    return ids.tolist(), probs[ids].tolist()


def densify(ids: Sequence[int], probs: Sequence[float], vocab_size: int) -> np.ndarray:
    dense = np.zeros(vocab_size, dtype=np.float64)
    dense[np.asarray(ids, dtype=np.int64)] = np.asarray(probs, dtype=np.float64)
    return dense


class RemoteTargetModel(TargetModel):
    """
    Target model served by a remote logit server.

    One connection per instance; requests on it are serialized. Parallel
    sessions should each build their own instance.
    """

    def __init__(
        self,
        endpoint: Optional[str] = None,
        config: Optional[ModelConfig] = None,
        client: Optional[httpx.Client] = None,
        max_retries: Optional[int] = None,
        backoff_seconds: Optional[float] = None,
        timeout_seconds: Optional[float] = None,
        sum_tolerance: Optional[float] = None,
    ):
        endpoint = endpoint or settings.REMOTE_ENDPOINT
        if client is None:
            if not endpoint:
                raise TransportError("no remote endpoint configured")
            client = httpx.Client(
                base_url=endpoint,
                timeout=timeout_seconds or settings.REMOTE_TIMEOUT_SECONDS,
            )
        self._client = client
        self._lock = threading.Lock()
        self.max_retries = settings.REMOTE_MAX_RETRIES if max_retries is None else max_retries
        self.backoff_seconds = settings.REMOTE_BACKOFF_SECONDS if backoff_seconds is None else backoff_seconds
        self.sum_tolerance = settings.REMOTE_SUM_TOLERANCE if sum_tolerance is None else sum_tolerance
        self.config = config or self._discover_config()
        self.calls = 0

    def _discover_config(self) -> ModelConfig:
        """Read vocab size from the server's health endpoint"""
        payload = self._request("GET", "/health")
        try:
            return ModelConfig(vocab_size=int(payload["vocab_size"]), temperature=settings.TEMPERATURE)
        except (KeyError, TypeError, ValueError) as e:
            raise ProtocolError(f"health response lacks a vocab_size: {payload}") from e

    def _request(self, method: str, path: str, body: Optional[dict] = None) -> dict:
        retrying = Retrying(
            stop=stop_after_attempt(self.max_retries + 1),
            wait=wait_exponential(multiplier=self.backoff_seconds, max=10),
            retry=retry_if_exception_type((httpx.TransportError, _RetryableStatus)),
            before_sleep=before_sleep_log(logger, logging.WARNING),
            reraise=True,
        )
        try:
            with self._lock:
                for attempt in retrying:
                    with attempt:
                        response = self._client.request(method, path, json=body)
                        if response.status_code >= 500:
                            raise _RetryableStatus(f"{response.status_code} from logit server")
        except (httpx.TransportError, _RetryableStatus) as e:
            raise TransportError(f"logit server unreachable after {self.max_retries + 1} attempts: {e}") from e

        if response.status_code != 200:
            raise ProtocolError(f"logit server returned {response.status_code}: {response.text[:200]}")
        try:
            return response.json()
        except ValueError as e:
            raise ProtocolError(f"logit server returned invalid JSON: {e}") from e

    def remote_next_distribution(self, context: Sequence[int]) -> np.ndarray:
        """POST the context and densify the sparse answer"""
        self.validate_context(context)
        request = NextDistRequest(context=[int(t) for t in context], temperature=self.temperature)
        payload = self._request("POST", NEXT_DIST_PATH, request.model_dump())
        self.calls += 1

        try:
            answer = NextDistResponse.model_validate(payload)
        except ValidationError as e:
            raise ProtocolError(f"malformed next_dist response: {e}") from e
        if answer.vocab_size != self.vocab_size:
            raise ProtocolError(f"server vocab_size {answer.vocab_size} != client {self.vocab_size}")
        if any(i < 0 or i >= self.vocab_size for i in answer.ids):
            raise ProtocolError(f"token id outside vocab [0, {self.vocab_size})")
        if len(set(answer.ids)) != len(answer.ids):
            raise ProtocolError("duplicate token ids in response")
        if any(p < 0 or not np.isfinite(p) for p in answer.probs):
            raise ProtocolError("negative or non-finite probability in response")

        probs = densify(answer.ids, answer.probs, self.vocab_size)
        total = probs.sum()
        if abs(total - 1.0) > self.sum_tolerance:
            raise ProtocolError(f"response probabilities sum to {total:.6f}")
        if total != 1.0:
            probs /= total
        probs.setflags(write=False)
        return probs

    def base_distribution(self, context: Sequence[int]) -> np.ndarray:
        # the server applies temperature; 1.0 here yields the raw distribution
        request = NextDistRequest(context=[int(t) for t in context], temperature=1.0)
        payload = self._request("POST", NEXT_DIST_PATH, request.model_dump())
        answer = NextDistResponse.model_validate(payload)
        return densify(answer.ids, answer.probs, self.vocab_size)

    def next_distribution(self, context: Sequence[int]) -> np.ndarray:
        return self.remote_next_distribution(context)

    def close(self) -> None:
        self._client.close()
