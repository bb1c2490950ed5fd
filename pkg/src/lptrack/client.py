"""Client for OpenAI-compatible chat-completion endpoints.

Probes request one output token with top-k logprobs. Every failure is
classified into a :class:`ProbeOutcome` instead of raised, so sweeps over a
fleet and the polling daemon never abort on one bad endpoint.
"""

from __future__ import annotations

import json
import logging
import math
import os
import random
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Sequence

import httpx
import yaml

from .errors import ConfigError, InvalidInputError, LogprobsUnsupportedError, OrderingError, ProtocolError, StorageError
from .stats import TestResult, permutation_test
from .store import RequestParams, SeriesRecord, SeriesStore, Usage
from .tokens import LogprobVector, SampleSet, SeriesPoint, TokenKey

log = logging.getLogger(__name__)

OK = "ok"
TRANSPORT_ERROR = "transport_error"
RATE_LIMITED = "rate_limited"
PROTOCOL_ERROR = "protocol_error"
LOGPROBS_UNSUPPORTED = "logprobs_unsupported"
OUTCOME_KINDS = (OK, TRANSPORT_ERROR, RATE_LIMITED, PROTOCOL_ERROR, LOGPROBS_UNSUPPORTED)


def utc_now() -> datetime:
    return datetime.now(timezone.utc)


@dataclass(frozen=True)
class RetryPolicy:
    """Attempts per probe and the wait before each retry.

    A server-provided ``Retry-After`` replaces the scheduled wait when
    ``honor_retry_after`` is set, capped at ``max_wait``.
    """

    max_attempts: int = 3
    backoff: tuple[float, ...] = (1.0, 4.0, 16.0)
    honor_retry_after: bool = True
    max_wait: float = 60.0

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise InvalidInputError("max_attempts must be >= 1")
        if any(b < 0 for b in self.backoff):
            raise InvalidInputError("backoff delays must be >= 0")

    def wait(self, attempt: int, retry_after: float | None) -> float:
        """Seconds to sleep after failed attempt number ``attempt`` (0-based)."""
        if retry_after is not None and self.honor_retry_after:
            return min(max(retry_after, 0.0), self.max_wait)
        if not self.backoff:
            return 0.0
        return self.backoff[min(attempt, len(self.backoff) - 1)]


NO_RETRY = RetryPolicy(max_attempts=1, backoff=())


@dataclass(frozen=True)
class EndpointConfig:
    """One endpoint to probe.

    ``auth_token_env`` names an environment variable holding a bearer token;
    tokens themselves never appear in configuration.
    """

    base_url: str
    model_id: str
    auth_token_env: str | None = None
    prompt: str = "x"
    top_logprobs: int = 20
    max_output_tokens: int = 1
    temperature: float = 1.0
    timeout: float = 30.0
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    endpoint_id: str = ""

    def __post_init__(self) -> None:
        if self.top_logprobs < 1:
            raise InvalidInputError("top_logprobs must be >= 1")
        if self.max_output_tokens < 1:
            raise InvalidInputError("max_output_tokens must be >= 1")
        if self.timeout <= 0:
            raise InvalidInputError("timeout must be positive")
        if not self.base_url or not self.model_id:
            raise InvalidInputError("base_url and model_id are required")

    @property
    def key(self) -> str:
        return self.endpoint_id or f"{self.model_id}@{self.base_url}"

    @property
    def url(self) -> str:
        return self.base_url.rstrip("/") + "/chat/completions"

    @property
    def params(self) -> RequestParams:
        return RequestParams(self.top_logprobs, self.max_output_tokens, self.temperature)

    def headers(self) -> dict[str, str]:
        if not self.auth_token_env:
            return {}
        token = os.environ.get(self.auth_token_env)
        if token is None:
            raise ConfigError(f"environment variable {self.auth_token_env} is not set")
        return {"Authorization": f"Bearer {token}"}

    def request_body(self, logprobs: bool = True) -> dict:
        body = {
            "model": self.model_id,
            "messages": [{"role": "user", "content": self.prompt}],
            "max_tokens": self.max_output_tokens,
            "temperature": self.temperature,
        }
        if logprobs:
            body["logprobs"] = True
            body["top_logprobs"] = self.top_logprobs
        return body


@dataclass(frozen=True)
class ProbeOutcome:
    """Result of one probe; ``kind`` says which of the optional fields is set."""

    kind: str
    endpoint_id: str
    point: SeriesPoint | None = None
    usage: Usage | None = None
    detail: str = ""
    retry_after: float | None = None
    status: int | None = None
    attempts: int = 1

    def __post_init__(self) -> None:
        if self.kind not in OUTCOME_KINDS:
            raise InvalidInputError(f"unknown outcome kind {self.kind!r}")
        if (self.kind == OK) != (self.point is not None):
            raise InvalidInputError("a point is present exactly for ok outcomes")

    @property
    def ok(self) -> bool:
        return self.kind == OK

    def to_dict(self) -> dict:
        out = {"endpoint_id": self.endpoint_id, "kind": self.kind, "attempts": self.attempts}
        if self.point is not None:
            out["k"] = len(self.point.vector)
            out["entries"] = [[t.text, lp] for t, lp in self.point.vector.entries]
        if self.usage is not None:
            out["usage"] = [self.usage.prompt_tokens, self.usage.completion_tokens]
        if self.detail:
            out["detail"] = self.detail
        if self.retry_after is not None:
            out["retry_after"] = self.retry_after
        if self.status is not None:
            out["status"] = self.status
        return out


# -- wire format -------------------------------------------------------------------


def _first_choice(body: dict) -> dict:
    try:
        choice = body["choices"][0]
    except (KeyError, IndexError, TypeError) as exc:
        raise ProtocolError(f"response has no choices: {exc!r}") from exc
    if not isinstance(choice, dict):
        raise ProtocolError("choices[0] is not an object")
    return choice


def parse_completion(body: dict, requested_k: int | None = None) -> LogprobVector:
    """Top-logprob entries of the first output token.

    Entries are sorted descending; equal logprobs keep the order received.
    Raises :class:`LogprobsUnsupportedError` when the response has no
    logprobs block and :class:`ProtocolError` for anything malformed.
    """
    choice = _first_choice(body)
    block = choice.get("logprobs")
    if block is None:
        raise LogprobsUnsupportedError("response carries no logprobs")
    try:
        first = block["content"][0]
        raw = first["top_logprobs"]
    except (KeyError, IndexError, TypeError) as exc:
        raise ProtocolError(f"truncated logprobs block: {exc!r}") from exc
    if not isinstance(raw, list) or not raw:
        raise ProtocolError("top_logprobs is empty")
    pairs = []
    for entry in raw:
        try:
            text = entry["token"]
            logprob = float(entry["logprob"])
            data = entry.get("bytes")
            token = TokenKey(text, None if data is None else bytes(data))
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed top_logprobs entry {entry!r}") from exc
        if not math.isfinite(logprob) or logprob > 0:
            raise ProtocolError(f"invalid logprob {logprob} for token {text!r}")
        pairs.append((token, logprob))
    k = max(requested_k or 0, len(pairs))
    try:
        return LogprobVector.from_pairs(pairs, k)
    except InvalidInputError as exc:
        raise ProtocolError(str(exc)) from exc


def parse_usage(body: dict) -> Usage | None:
    usage = body.get("usage")
    if not isinstance(usage, dict):
        return None
    try:
        return Usage(int(usage["prompt_tokens"]), int(usage["completion_tokens"]))
    except (KeyError, TypeError, ValueError):
        return None


def _retry_after(response: httpx.Response) -> float | None:
    value = response.headers.get("retry-after")
    if value is None:
        return None
    try:
        return float(value)
    except ValueError:
        return None


def _error_message(response: httpx.Response) -> str:
    try:
        return str(response.json()["error"]["message"])
    except (ValueError, KeyError, TypeError):
        return response.text[:500]


# -- probing ----------------------------------------------------------------------


@dataclass(frozen=True)
class _Reply:
    timestamp: datetime
    body: dict


def _request(c: EndpointConfig, http: httpx.Client, logprobs: bool, clock) -> _Reply | ProbeOutcome:
    """One HTTP exchange; a parsed 200 body, or the classified failure."""
    try:
        response = http.post(c.url, json=c.request_body(logprobs), headers=c.headers(), timeout=c.timeout)
    except httpx.HTTPError as exc:
        return ProbeOutcome(TRANSPORT_ERROR, c.key, detail=f"{type(exc).__name__}: {exc}")
    if response.status_code == 429:
        return ProbeOutcome(
            RATE_LIMITED, c.key, detail=_error_message(response), retry_after=_retry_after(response), status=429
        )
    if response.status_code >= 500:
        return ProbeOutcome(TRANSPORT_ERROR, c.key, detail=_error_message(response), status=response.status_code)
    if response.status_code != 200:
        return ProbeOutcome(PROTOCOL_ERROR, c.key, detail=_error_message(response), status=response.status_code)
    timestamp = clock()
    try:
        body = response.json()
    except json.JSONDecodeError as exc:
        return ProbeOutcome(PROTOCOL_ERROR, c.key, detail=f"invalid JSON: {exc}", status=200)
    if not isinstance(body, dict):
        return ProbeOutcome(PROTOCOL_ERROR, c.key, detail="response is not a JSON object", status=200)
    return _Reply(timestamp, body)


_RETRYABLE = (TRANSPORT_ERROR, RATE_LIMITED)


def _with_retries(c: EndpointConfig, http, logprobs: bool, clock, sleep) -> tuple[_Reply | ProbeOutcome, int]:
    """Retry transport errors and 429s; returns the last result and the requests sent."""
    own = http is None
    http = http or httpx.Client()
    try:
        for attempt in range(c.retry.max_attempts):
            result = _request(c, http, logprobs, clock)
            if isinstance(result, _Reply) or result.kind not in _RETRYABLE:
                break
            if attempt + 1 == c.retry.max_attempts:
                break
            delay = c.retry.wait(attempt, result.retry_after)
            log.info("%s: %s, retrying in %.1fs", c.key, result.kind, delay)
            sleep(delay)
    finally:
        if own:
            http.close()
    return result, attempt + 1


def _to_outcome(c: EndpointConfig, reply: _Reply, attempts: int) -> ProbeOutcome:
    usage = parse_usage(reply.body)
    try:
        vector = parse_completion(reply.body, c.top_logprobs)
    except LogprobsUnsupportedError as exc:
        return ProbeOutcome(LOGPROBS_UNSUPPORTED, c.key, usage=usage, detail=str(exc), status=200, attempts=attempts)
    except ProtocolError as exc:
        return ProbeOutcome(PROTOCOL_ERROR, c.key, usage=usage, detail=str(exc), status=200, attempts=attempts)
    point = SeriesPoint(reply.timestamp, vector, c.key, c.prompt)
    return ProbeOutcome(OK, c.key, point, usage, status=200, attempts=attempts)


def _probe(c, http, clock, sleep) -> tuple[ProbeOutcome, int]:
    result, sent = _with_retries(c, http, True, clock, sleep)
    if isinstance(result, _Reply):
        return _to_outcome(c, result, sent), sent
    return replace(result, attempts=sent), sent


def probe(
    c: EndpointConfig,
    http: httpx.Client | None = None,
    clock: Callable[[], datetime] = utc_now,
    sleep: Callable[[float], None] = time.sleep,
) -> ProbeOutcome:
    """One logprob request, retrying transport errors and 429s per ``c.retry``."""
    outcome, _ = _probe(c, http, clock, sleep)
    return outcome


# -- survey ------------------------------------------------------------------------


@dataclass(frozen=True)
class SurveyEntry:
    endpoint_id: str
    reachable: bool
    supports_logprobs: bool
    observed_k: int | None
    reachability: str
    logprob_outcome: str | None
    detail: str = ""


@dataclass(frozen=True)
class SurveyReport:
    entries: tuple[SurveyEntry, ...]

    @property
    def total(self) -> int:
        return len(self.entries)

    @property
    def reachable(self) -> int:
        return sum(e.reachable for e in self.entries)

    @property
    def supported(self) -> int:
        return sum(e.supports_logprobs for e in self.entries)

    @property
    def supported_fraction(self) -> float | None:
        """Share of reachable endpoints that return logprobs; None if none are reachable."""
        return self.supported / self.reachable if self.reachable else None

    def observed_k(self) -> dict[str, int]:
        return {e.endpoint_id: e.observed_k for e in self.entries if e.observed_k is not None}

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "reachable": self.reachable,
            "supported": self.supported,
            "supported_fraction": self.supported_fraction,
            "k_values": sorted(set(self.observed_k().values())),
            "endpoints": [e.__dict__ for e in self.entries],
        }


def _survey_one(c: EndpointConfig, http: httpx.Client, sleep) -> SurveyEntry:
    try:
        first, _ = _with_retries(c, http, False, utc_now, sleep)
        if isinstance(first, _Reply):
            try:
                _first_choice(first.body)
            except ProtocolError as exc:
                first = ProbeOutcome(PROTOCOL_ERROR, c.key, detail=str(exc), status=200)
        if not isinstance(first, _Reply):
            return SurveyEntry(c.key, False, False, None, first.kind, None, first.detail)
        second, _ = _probe(c, http, utc_now, sleep)
    except ConfigError as exc:
        return SurveyEntry(c.key, False, False, None, "config_error", None, str(exc))
    k = len(second.point.vector) if second.ok else None
    return SurveyEntry(c.key, True, second.ok, k, OK, second.kind, second.detail)


def survey(
    endpoints: Sequence[EndpointConfig],
    max_workers: int = 16,
    http: httpx.Client | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> SurveyReport:
    """Two passes per endpoint: a plain one-token request, then one asking for logprobs.

    Endpoints that fail the first pass are unreachable and excluded from the
    supported fraction.
    """
    own = http is None
    http = http or httpx.Client()
    try:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            entries = list(pool.map(lambda c: _survey_one(c, http, sleep), endpoints))
    finally:
        if own:
            http.close()
    return SurveyReport(tuple(entries))


# -- sampling and cost accounting -----------------------------------------------------


@dataclass(frozen=True)
class CostReport:
    """Requests sent and tokens billed while collecting samples."""

    requests: int
    prompt_tokens: int
    completion_tokens: int
    max_tokens: tuple[int, ...]

    @property
    def tokens(self) -> tuple[int, int]:
        return self.prompt_tokens, self.completion_tokens

    def __add__(self, other: CostReport) -> CostReport:
        return CostReport(
            self.requests + other.requests,
            self.prompt_tokens + other.prompt_tokens,
            self.completion_tokens + other.completion_tokens,
            self.max_tokens + other.max_tokens,
        )


def collect_samples(
    c: EndpointConfig,
    n: int,
    http: httpx.Client | None = None,
    max_failures: int | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> tuple[SampleSet, CostReport]:
    """Probe until ``n`` logprob vectors are collected.

    Raises :class:`ProtocolError` after ``max_failures`` failed probes
    (default ``n``).
    """
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    limit = n if max_failures is None else max_failures
    own = http is None
    http = http or httpx.Client()
    vectors: list[LogprobVector] = []
    requests = prompt_tokens = completion_tokens = failures = 0
    try:
        while len(vectors) < n:
            outcome, sent = _probe(c, http, utc_now, sleep)
            requests += sent
            if outcome.usage is not None:
                prompt_tokens += outcome.usage.prompt_tokens
                completion_tokens += outcome.usage.completion_tokens
            if outcome.ok:
                vectors.append(outcome.point.vector)
                continue
            failures += 1
            if failures > limit:
                raise ProtocolError(f"{c.key}: gave up after {failures} failed probes ({outcome.kind}: {outcome.detail})")
    finally:
        if own:
            http.close()
    cost = CostReport(requests, prompt_tokens, completion_tokens, (c.max_output_tokens,) * requests)
    return SampleSet(tuple(vectors), c.prompt, c.key), cost


def run_lt_test(
    a: EndpointConfig,
    b: EndpointConfig,
    n: int = 10,
    permutations: int = 1000,
    seed: int = 0,
    http: httpx.Client | None = None,
) -> tuple[TestResult, CostReport]:
    """Collect ``n`` samples from each endpoint and run the permutation test."""
    samples_a, cost_a = collect_samples(a, n, http)
    samples_b, cost_b = collect_samples(b, n, http)
    return permutation_test(samples_a, samples_b, permutations, seed), cost_a + cost_b


# -- polling -----------------------------------------------------------------------


@dataclass
class PollStats:
    ticks: int = 0
    stored: int = 0
    failures: Counter = field(default_factory=Counter)
    store_errors: int = 0
    pending: int = 0


def poll_loop(
    fleet: Sequence[EndpointConfig],
    interval: float,
    store: SeriesStore,
    stop: threading.Event | None = None,
    max_ticks: int | None = None,
    max_workers: int = 16,
    jitter: float = 0.05,
    seed: int | None = None,
    http: httpx.Client | None = None,
    on_outcome: Callable[[ProbeOutcome], None] | None = None,
) -> PollStats:
    """Probe every endpoint once per tick and append the results to ``store``.

    Runs until ``stop`` is set or ``max_ticks`` ticks have run. Probes in a
    tick run concurrently; a tick ends once all of them finish, so a stop
    request lets in-flight probes complete. Records that fail to store are
    kept and retried on the next tick.
    """
    if interval <= 0:
        raise InvalidInputError("interval must be positive")
    if not 0 <= jitter <= 0.05:
        raise InvalidInputError("jitter must be within [0, 0.05]")
    stop = stop or threading.Event()
    rng = random.Random(seed)
    stats = PollStats()
    pending: list[SeriesRecord] = []
    own = http is None
    http = http or httpx.Client(limits=httpx.Limits(max_connections=max_workers))

    def run_one(c: EndpointConfig) -> ProbeOutcome:
        try:
            # retries stop early once shutdown is requested
            return probe(c, http, sleep=lambda s: stop.wait(s))
        except Exception as exc:  # noqa: BLE001 - a broken endpoint must not stop the loop
            return ProbeOutcome(PROTOCOL_ERROR, c.key, detail=f"{type(exc).__name__}: {exc}")

    try:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            while not stop.is_set() and (max_ticks is None or stats.ticks < max_ticks):
                started = time.monotonic()
                outcomes = list(pool.map(run_one, fleet))
                stats.ticks += 1
                for c, outcome in zip(fleet, outcomes):
                    if on_outcome is not None:
                        on_outcome(outcome)
                    if outcome.ok:
                        pending.append(SeriesRecord.from_point(outcome.point, c.params, outcome.usage))
                    else:
                        stats.failures[outcome.kind] += 1
                        log.warning("%s: %s %s", outcome.endpoint_id, outcome.kind, outcome.detail)
                pending = _flush(store, pending, stats)
                if max_ticks is not None and stats.ticks >= max_ticks:
                    break
                delay = interval * (1 + rng.uniform(-jitter, jitter)) - (time.monotonic() - started)
                stop.wait(max(delay, 0.0))
    finally:
        if own:
            http.close()
    stats.pending = len(pending)
    return stats


def _flush(store: SeriesStore, records: list[SeriesRecord], stats: PollStats) -> list[SeriesRecord]:
    kept = []
    for record in records:
        try:
            store.append(record)
            stats.stored += 1
        except OrderingError as exc:
            # retrying cannot fix an out-of-order timestamp
            stats.store_errors += 1
            log.error("dropping record: %s", exc)
        except StorageError as exc:
            stats.store_errors += 1
            log.error("store write failed, will retry: %s", exc)
            kept.append(record)
    return kept


# -- fleet configuration -------------------------------------------------------------

_FIELDS = {
    "base_url",
    "model_id",
    "auth_token_env",
    "prompt",
    "top_logprobs",
    "max_output_tokens",
    "temperature",
    "timeout",
    "retry",
    "endpoint_id",
}


def endpoint_from_dict(doc: dict, defaults: dict | None = None) -> EndpointConfig:
    merged = {**(defaults or {}), **doc}
    unknown = set(merged) - _FIELDS
    if unknown:
        raise ConfigError(f"unknown endpoint fields: {sorted(unknown)}")
    retry = merged.pop("retry", None)
    try:
        if retry is not None:
            retry = dict(retry)
            if "backoff" in retry:
                retry["backoff"] = tuple(float(b) for b in retry["backoff"])
            merged["retry"] = RetryPolicy(**retry)
        return EndpointConfig(**merged)
    except (TypeError, InvalidInputError) as exc:
        raise ConfigError(f"bad endpoint config {doc!r}: {exc}") from exc


def load_config(path: str | Path) -> dict:
    """Read a YAML or JSON config file (JSON is valid YAML)."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return doc


def load_fleet(path: str | Path) -> list[EndpointConfig]:
    """Endpoints from a config with an ``endpoints`` list and optional ``defaults``."""
    doc = load_config(path)
    endpoints = doc.get("endpoints")
    if not isinstance(endpoints, list) or not endpoints:
        raise ConfigError(f"config {path} has no endpoints list")
    return [endpoint_from_dict(e, doc.get("defaults")) for e in endpoints]
