import json
import threading
import time

import httpx
import pytest

from conftest import endpoint
from lptrack.client import (
    LOGPROBS_UNSUPPORTED,
    OK,
    PROTOCOL_ERROR,
    RATE_LIMITED,
    TRANSPORT_ERROR,
    EndpointConfig,
    ProbeOutcome,
    RetryPolicy,
    collect_samples,
    endpoint_from_dict,
    load_fleet,
    parse_completion,
    poll_loop,
    probe,
    run_lt_test,
    survey,
)
from lptrack.errors import ConfigError, InvalidInputError, LogprobsUnsupportedError, ProtocolError
from lptrack.server import SimEndpoint, completion_body
from lptrack.simulator import SyntheticModel, sample_logprob_vector
from lptrack.store import SeriesStore


def _doc(entries, with_logprobs=True):
    top = [{"token": t, "logprob": lp} for t, lp in entries]
    choice = {"index": 0, "message": {"role": "assistant", "content": "x"}}
    choice["logprobs"] = {"content": [{**top[0], "top_logprobs": top}]} if with_logprobs else None
    return {"choices": [choice], "usage": {"prompt_tokens": 1, "completion_tokens": 1}}


def _mock(handler):
    return httpx.Client(transport=httpx.MockTransport(handler))


# ---------------------------------------------------------------------------
# wire format
# ---------------------------------------------------------------------------


def test_parse_minimal_document_sorts_descending():
    v = parse_completion(_doc([("b", -2.0), ("a", -0.5)]))
    assert [t.text for t in v.tokens] == ["a", "b"]
    assert v.logprobs == (-0.5, -2.0)


def test_parse_ties_keep_received_order():
    v = parse_completion(_doc([("z", -1.0), ("a", -1.0), ("m", -1.0)]))
    assert [t.text for t in v.tokens] == ["z", "a", "m"]


def test_parse_missing_logprobs():
    with pytest.raises(LogprobsUnsupportedError):
        parse_completion(_doc([("a", -1.0)], with_logprobs=False))


@pytest.mark.parametrize(
    "body",
    [
        {},
        {"choices": []},
        {"choices": [{"logprobs": {"content": []}}]},
        {"choices": [{"logprobs": {"content": [{"top_logprobs": []}]}}]},
        {"choices": [{"logprobs": {"content": [{"top_logprobs": [{"token": "a"}]}]}}]},
        _doc([("a", 0.5)]),
        _doc([("a", -1.0), ("a", -2.0)]),
    ],
)
def test_parse_malformed(body):
    with pytest.raises(ProtocolError):
        parse_completion(body)


def test_parse_round_trips_served_shape():
    model = SyntheticModel.random(seed=5)
    v = sample_logprob_vector(model, 3)
    assert parse_completion(completion_body("m", v, None, 1), model.top_k) == v
    assert parse_completion(json.loads(json.dumps(completion_body("m", v, 4, 1))), 4).entries == v.entries[:4]


def test_request_body_and_auth(monkeypatch):
    c = EndpointConfig("http://h/v1/", "m", "LPTRACK_TEST_TOKEN", top_logprobs=7)
    assert c.url == "http://h/v1/chat/completions"
    body = c.request_body()
    assert body == {
        "model": "m",
        "messages": [{"role": "user", "content": "x"}],
        "max_tokens": 1,
        "temperature": 1.0,
        "logprobs": True,
        "top_logprobs": 7,
    }
    assert "logprobs" not in c.request_body(logprobs=False)
    monkeypatch.delenv("LPTRACK_TEST_TOKEN", raising=False)
    with pytest.raises(ConfigError):
        c.headers()
    monkeypatch.setenv("LPTRACK_TEST_TOKEN", "s3cret")
    assert c.headers() == {"Authorization": "Bearer s3cret"}


def test_config_validation():
    with pytest.raises(InvalidInputError):
        EndpointConfig("http://h", "m", max_output_tokens=0)
    with pytest.raises(InvalidInputError):
        EndpointConfig("http://h", "m", top_logprobs=0)
    with pytest.raises(InvalidInputError):
        ProbeOutcome(OK, "e")


# ---------------------------------------------------------------------------
# probe
# ---------------------------------------------------------------------------


def test_probe_outcomes_against_simulator(serve, quiet_model):
    server = serve(
        {
            "ok": SimEndpoint(quiet_model),
            "nolp": SimEndpoint(quiet_model, supports_logprobs=False),
            "min16": SimEndpoint(quiet_model, min_max_tokens=16),
        }
    )
    ok = probe(endpoint(server, "ok", top_logprobs=5))
    assert ok.kind == OK and ok.point.vector == sample_logprob_vector(quiet_model, 0)
    assert ok.usage.completion_tokens == 1

    assert probe(endpoint(server, "nolp")).kind == LOGPROBS_UNSUPPORTED

    rejected = probe(endpoint(server, "min16"))
    assert rejected.kind == PROTOCOL_ERROR
    assert rejected.status == 400
    assert "Expected a value ≥ 16, but got 1 instead" in rejected.detail
    assert "integer below minimum value" in rejected.detail

    assert probe(endpoint(server, "missing")).kind == PROTOCOL_ERROR


def test_unreachable_host_is_transport_error():
    outcome = probe(EndpointConfig("http://127.0.0.1:9/v1", "m", timeout=1.0, retry=RetryPolicy(1, ())))
    assert outcome.kind == TRANSPORT_ERROR


def test_rate_limit_honours_retry_after(serve, quiet_model):
    server = serve({"rl": SimEndpoint(quiet_model, always_429=True, retry_after=2.5)})
    waits = []
    c = endpoint(server, "rl", retry=RetryPolicy())
    outcome = probe(c, sleep=waits.append)
    assert outcome.kind == RATE_LIMITED
    assert outcome.retry_after == 2.5
    assert outcome.attempts == 3
    assert waits == [2.5, 2.5]
    assert server.request_count("rl") == 0


def test_backoff_schedule_and_recovery():
    calls = []

    def handler(request):
        calls.append(request)
        if len(calls) < 3:
            return httpx.Response(503, json={"error": {"message": "overloaded"}})
        return httpx.Response(200, json=_doc([("a", -0.1)]))

    waits = []
    c = EndpointConfig("http://sim/v1", "m")
    with _mock(handler) as http:
        outcome = probe(c, http, sleep=waits.append)
    assert outcome.kind == OK and outcome.attempts == 3
    assert waits == [1.0, 4.0]


def test_retry_policy_caps_wait():
    policy = RetryPolicy(max_wait=10.0)
    assert [policy.wait(i, None) for i in range(4)] == [1.0, 4.0, 16.0, 16.0]
    # the cap applies to server-provided delays
    assert policy.wait(0, 120.0) == 10.0
    assert RetryPolicy(honor_retry_after=False).wait(0, 30.0) == 1.0


def test_bad_json_is_protocol_error():
    with _mock(lambda r: httpx.Response(200, content=b"<html>")) as http:
        assert probe(EndpointConfig("http://sim/v1", "m"), http).kind == PROTOCOL_ERROR


# ---------------------------------------------------------------------------
# survey
# ---------------------------------------------------------------------------


def test_survey_reports_provider_k_values(serve):
    eps = {f"k{k}": SimEndpoint(SyntheticModel.random(top_k=k, seed=k)) for k in (5, 8, 20)}
    server = serve(eps)
    report = survey([endpoint(server, name, endpoint_id=name) for name in eps])
    assert report.observed_k() == {"k5": 5, "k8": 8, "k20": 20}
    assert report.to_dict()["k_values"] == [5, 8, 20]
    assert report.supported_fraction == 1.0


def test_survey_all_unreachable():
    dead = [EndpointConfig(f"http://127.0.0.1:9/v{i}", "m", timeout=1.0, retry=RetryPolicy(1, ())) for i in range(3)]
    report = survey(dead)
    assert report.reachable == 0
    assert report.supported_fraction is None
    assert report.to_dict()["supported_fraction"] is None


def test_survey_mixed_fleet(serve, quiet_model, monkeypatch):
    monkeypatch.delenv("LPTRACK_MISSING", raising=False)
    server = serve(
        {
            "ok": SimEndpoint(quiet_model),
            "nolp": SimEndpoint(quiet_model, supports_logprobs=False),
            "rl": SimEndpoint(quiet_model, always_429=True),
        }
    )
    fleet = [
        endpoint(server, "ok"),
        endpoint(server, "nolp"),
        endpoint(server, "rl"),
        endpoint(server, "ok", auth_token_env="LPTRACK_MISSING", endpoint_id="noauth"),
    ]
    report = survey(fleet)
    assert (report.total, report.reachable, report.supported) == (4, 2, 1)
    assert report.supported_fraction == 0.5
    reasons = {e.endpoint_id: e.reachability for e in report.entries}
    assert reasons["noauth"] == "config_error"
    assert reasons[fleet[2].key] == RATE_LIMITED


# ---------------------------------------------------------------------------
# sampling and cost
# ---------------------------------------------------------------------------


def test_lt_test_cost_fixture(serve):
    model = SyntheticModel.random(seed=1)
    server = serve({"a": SimEndpoint(model, stream=0), "b": SimEndpoint(model, stream=1)})
    result, cost = run_lt_test(endpoint(server, "a"), endpoint(server, "b"), n=10, permutations=200, seed=0)
    assert cost.requests == 20
    assert set(cost.max_tokens) == {1}
    assert cost.tokens == (28, 20)
    assert 0 < result.p_value <= 1


def test_collect_samples_gives_up():
    with _mock(lambda r: httpx.Response(400, json={"error": {"message": "nope"}})) as http:
        with pytest.raises(ProtocolError):
            collect_samples(EndpointConfig("http://sim/v1", "m"), 3, http, max_failures=2)


# ---------------------------------------------------------------------------
# polling
# ---------------------------------------------------------------------------


def test_poll_loop_stores_points(serve, tmp_path):
    models = {f"m{i}": SimEndpoint(SyntheticModel.random(seed=i)) for i in range(3)}
    server = serve(models)
    store = SeriesStore(tmp_path)
    fleet = [endpoint(server, name, endpoint_id=name) for name in models]
    stats = poll_loop(fleet, 1.0, store, max_ticks=10, seed=0)
    stored = sum(len(store.read_series(name, "x")) for name in models)
    assert stats.ticks == 10
    assert stored >= 28
    assert stored == stats.stored


def test_poll_loop_rate_limited_endpoint(serve, quiet_model, tmp_path):
    server = serve({"rl": SimEndpoint(quiet_model, always_429=True, retry_after=0.01)})
    store = SeriesStore(tmp_path)
    c = endpoint(server, "rl", endpoint_id="rl", retry=RetryPolicy(1, ()))
    stats = poll_loop([c], 0.05, store, max_ticks=4, seed=0)
    assert store.read_series("rl", "x") == []
    assert stats.failures[RATE_LIMITED] == 4
    assert stats.stored == 0


def test_poll_loop_stops_mid_tick(tmp_path):
    started = threading.Event()

    def slow(request):
        started.set()
        time.sleep(0.5)
        return httpx.Response(200, json=_doc([("a", -0.1)]))

    stop = threading.Event()
    fleet = [EndpointConfig("http://sim/v1", f"m{i}", endpoint_id=f"m{i}") for i in range(3)]
    result = {}

    def run():
        with _mock(slow) as http:
            result["stats"] = poll_loop(fleet, 60.0, SeriesStore(tmp_path), stop=stop, http=http)

    thread = threading.Thread(target=run)
    thread.start()
    assert started.wait(5)
    stop.set()
    thread.join(10)
    assert not thread.is_alive()
    # the in-flight tick completes and is stored
    assert result["stats"].ticks == 1
    assert result["stats"].stored == 3


def test_poll_loop_validates_arguments(tmp_path):
    with pytest.raises(InvalidInputError):
        poll_loop([], 0, SeriesStore(tmp_path))
    with pytest.raises(InvalidInputError):
        poll_loop([], 1, SeriesStore(tmp_path), jitter=0.2)


# ---------------------------------------------------------------------------
# fleet config
# ---------------------------------------------------------------------------


def test_load_fleet(tmp_path):
    path = tmp_path / "fleet.yaml"
    path.write_text(
        "defaults:\n"
        "  base_url: http://sim/v1\n"
        "  top_logprobs: 5\n"
        "  retry: {max_attempts: 2, backoff: [0.5]}\n"
        "endpoints:\n"
        "  - model_id: a\n"
        "  - model_id: b\n"
        "    prompt: hello\n"
        "    auth_token_env: B_TOKEN\n"
    )
    a, b = load_fleet(path)
    assert a.top_logprobs == 5 and a.retry == RetryPolicy(2, (0.5,))
    assert b.prompt == "hello" and b.auth_token_env == "B_TOKEN"
    with pytest.raises(ConfigError):
        endpoint_from_dict({"model_id": "a", "base_url": "http://h", "colour": "red"})
    path.write_text("endpoints: []\n")
    with pytest.raises(ConfigError):
        load_fleet(path)
    with pytest.raises(ConfigError):
        load_fleet(tmp_path / "missing.yaml")
