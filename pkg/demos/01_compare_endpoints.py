"""
Comparing two endpoints that claim to serve the same model
==========================================================

Two simulated endpoints run behind a local HTTP server. One serves the base
model, the other a slightly shifted copy. Ten single-token probes per endpoint
are enough to tell them apart; the same test between two honest replicas
finds nothing.
"""

from lptrack.client import EndpointConfig, run_lt_test, survey
from lptrack.server import SimEndpoint, SimulatorServer
from lptrack.simulator import SyntheticModel, apply_variant

base = SyntheticModel.random(seed=0)
shifted = apply_variant(base, ("logit-shift", 0.25))

endpoints = {
    "replica-a": SimEndpoint(base, stream=0),
    "replica-b": SimEndpoint(base, stream=1),
    "shifted": SimEndpoint(shifted, stream=2),
    "no-logprobs": SimEndpoint(base, supports_logprobs=False),
}

with SimulatorServer(endpoints) as server:
    fleet = {name: EndpointConfig(server.url, name) for name in endpoints}

    # which endpoints expose logprobs at all, and how many per position
    report = survey(list(fleet.values()))
    print(f"{report.supported}/{report.reachable} reachable endpoints return logprobs")
    for name, k in sorted(report.observed_k().items()):
        print(f"  {name}: top-{k}")

    for other in ("replica-b", "shifted"):
        result, cost = run_lt_test(fleet["replica-a"], fleet[other], n=10, permutations=1000, seed=0)
        verdict = "different" if result.significant() else "indistinguishable"
        print(f"replica-a vs {other}: p = {result.p_value:.3f} ({verdict})")
        print(f"  {cost.requests} requests, prompt/completion tokens {cost.tokens}")
