"""OpenAI-compatible HTTP front end for synthetic models.

Serves ``POST .../chat/completions`` for any number of models keyed by model
id. The n-th request to a model (counting from 0) returns
``sample_logprob_vector(model, endpoint.draw_seed(n))`` truncated to the
requested k, so a recorded run can be replayed offline. The returned content is the most
likely token of that draw.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .errors import ConfigError
from .simulator import SyntheticModel, VariantSpec, apply_variant, sample_logprob_vector
from .tokens import LogprobVector

log = logging.getLogger(__name__)

# one-token prompt whose chat template tokenizes to one or two tokens
DEFAULT_USAGE_CYCLE = (1, 2, 1, 2, 1)


@dataclass
class SimEndpoint:
    """Behaviour of one served model.

    Parameters
    ----------
    model
        Source of logprob vectors.
    supports_logprobs
        When False the response carries no ``logprobs`` block.
    min_max_tokens
        Requests with a smaller ``max_tokens`` are rejected with HTTP 400.
    always_429
        Answer every request with HTTP 429 and ``Retry-After: retry_after``.
    usage_cycle
        Reported ``prompt_tokens`` for successive requests, repeating.
    stream
        Offsets draw seeds so endpoints serving one model answer differently;
        request ``n`` uses draw seed ``stream * 2**32 + n``.
    """

    model: SyntheticModel
    supports_logprobs: bool = True
    min_max_tokens: int = 1
    always_429: bool = False
    retry_after: float = 1.0
    usage_cycle: tuple[int, ...] = DEFAULT_USAGE_CYCLE
    stream: int = 0

    def draw_seed(self, index: int) -> int:
        return (self.stream << 32) + index


def completion_body(
    model_id: str,
    vector: LogprobVector | None,
    k: int | None,
    prompt_tokens: int,
    request_index: int = 0,
) -> dict:
    """A chat-completion response document; ``vector=None`` omits logprobs."""
    entries = list(vector.entries[:k] if k is not None else vector.entries) if vector else []
    content = entries[0][0].text if entries else "x"
    choice: dict = {
        "index": 0,
        "message": {"role": "assistant", "content": content},
        "finish_reason": "length",
        "logprobs": None,
    }
    if vector is not None:
        top = [
            {"token": t.text, "logprob": lp, "bytes": list(t.canonical)}
            for t, lp in entries
        ]
        choice["logprobs"] = {"content": [{**top[0], "top_logprobs": top}]}
    return {
        "id": f"chatcmpl-sim-{request_index}",
        "object": "chat.completion",
        "model": model_id,
        "choices": [choice],
        "usage": {
            "prompt_tokens": prompt_tokens,
            "completion_tokens": 1,
            "total_tokens": prompt_tokens + 1,
        },
    }


def error_body(message: str, kind: str, code: str | None = None) -> dict:
    return {"error": {"message": message, "type": kind, "param": None, "code": code}}


class _State:
    def __init__(self, endpoints: dict[str, SimEndpoint]):
        self.endpoints = dict(endpoints)
        self.counts = {name: 0 for name in self.endpoints}
        self.lock = threading.Lock()

    def next_index(self, model_id: str) -> int:
        with self.lock:
            n = self.counts[model_id]
            self.counts[model_id] = n + 1
            return n


class _Handler(BaseHTTPRequestHandler):
    server: _Server
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        log.debug("%s " + fmt, self.address_string(), *args)

    def _send(self, status: int, body: dict, headers: dict[str, str] | None = None) -> None:
        data = json.dumps(body).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        for key, value in (headers or {}).items():
            self.send_header(key, value)
        self.end_headers()
        self.wfile.write(data)

    def do_POST(self) -> None:
        length = int(self.headers.get("Content-Length") or 0)
        raw = self.rfile.read(length)
        if not self.path.rstrip("/").endswith("/chat/completions"):
            self._send(404, error_body(f"no route for {self.path}", "not_found"))
            return
        try:
            request = json.loads(raw)
            model_id = request["model"]
            max_tokens = int(request.get("max_tokens", 16))
        except (ValueError, KeyError, TypeError) as exc:
            self._send(400, error_body(f"malformed request: {exc}", "invalid_request_error"))
            return
        state = self.server.state
        endpoint = state.endpoints.get(model_id)
        if endpoint is None:
            self._send(404, error_body(f"The model `{model_id}` does not exist", "invalid_request_error", "model_not_found"))
            return
        if endpoint.always_429:
            self._send(
                429,
                error_body("Rate limit reached", "rate_limit_error", "rate_limit_exceeded"),
                {"Retry-After": f"{endpoint.retry_after:g}"},
            )
            return
        if max_tokens < endpoint.min_max_tokens:
            message = (
                "Invalid 'max_output_tokens': integer below minimum value. "
                f"Expected a value \u2265 {endpoint.min_max_tokens}, but got {max_tokens} instead."
            )
            self._send(400, error_body(message, "invalid_request_error", "integer_below_min_value"))
            return
        index = state.next_index(model_id)
        vector = None
        k = None
        if endpoint.supports_logprobs and request.get("logprobs"):
            vector = sample_logprob_vector(endpoint.model, endpoint.draw_seed(index))
            k = min(int(request.get("top_logprobs") or 1), endpoint.model.top_k)
        prompt_tokens = endpoint.usage_cycle[index % len(endpoint.usage_cycle)]
        self._send(200, completion_body(model_id, vector, k, prompt_tokens, index))


class _Server(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address, state: _State):
        super().__init__(address, _Handler)
        self.state = state


class SimulatorServer:
    """Threaded server on ``host:port`` (port 0 picks a free one).

    Use as a context manager in tests; ``url`` is the base URL clients append
    ``/chat/completions`` to.
    """

    def __init__(self, endpoints: dict[str, SimEndpoint], host: str = "127.0.0.1", port: int = 0):
        self._state = _State(endpoints)
        self._server = _Server((host, port), self._state)
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}/v1"

    def request_count(self, model_id: str) -> int:
        with self._state.lock:
            return self._state.counts[model_id]

    def start(self) -> SimulatorServer:
        self._thread = threading.Thread(target=self._server.serve_forever, name="lptrack-sim", daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self._server.serve_forever()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self) -> SimulatorServer:
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


_SIM_FIELDS = {
    "model_id",
    "seed",
    "vocab_size",
    "noise_sigma",
    "top_k",
    "logit_scale",
    "variant",
    "supports_logprobs",
    "min_max_tokens",
    "always_429",
    "retry_after",
    "usage_cycle",
    "stream",
}


def sim_endpoints_from_config(doc: dict) -> dict[str, SimEndpoint]:
    """Build served models from a mapping with an ``endpoints`` list.

    Each entry takes a ``model_id``, synthetic-model settings (``seed``,
    ``vocab_size``, ``noise_sigma``, ``top_k``, ``logit_scale``), an optional
    ``variant: {kind, magnitude}`` and the :class:`SimEndpoint` options.
    """
    entries = doc.get("endpoints")
    if not isinstance(entries, list) or not entries:
        raise ConfigError("simulator config needs a non-empty endpoints list")
    out: dict[str, SimEndpoint] = {}
    for i, raw in enumerate(entries):
        entry = {**doc.get("defaults", {}), **raw}
        unknown = set(entry) - _SIM_FIELDS
        if unknown:
            raise ConfigError(f"unknown simulator fields {sorted(unknown)}")
        try:
            model_id = str(entry["model_id"])
            model = SyntheticModel.random(
                vocab_size=int(entry.get("vocab_size", 64)),
                noise_sigma=float(entry.get("noise_sigma", 0.05)),
                top_k=int(entry.get("top_k", 20)),
                seed=int(entry.get("seed", 0)),
                logit_scale=float(entry.get("logit_scale", 2.0)),
            )
            if entry.get("variant"):
                model = apply_variant(model, VariantSpec(**entry["variant"]))
            out[model_id] = SimEndpoint(
                model,
                supports_logprobs=bool(entry.get("supports_logprobs", True)),
                min_max_tokens=int(entry.get("min_max_tokens", 1)),
                always_429=bool(entry.get("always_429", False)),
                retry_after=float(entry.get("retry_after", 1.0)),
                usage_cycle=tuple(int(u) for u in entry.get("usage_cycle", DEFAULT_USAGE_CYCLE)),
                stream=int(entry.get("stream", i)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad simulator entry {raw!r}: {exc}") from exc
    return out
