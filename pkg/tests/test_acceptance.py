"""Acceptance criteria 1-9.

Each test records one PASS/FAIL line; the lines are printed as they happen
(visible with ``-s``) and repeated in the terminal summary.
"""

import time

import numpy as np
import pytest
from scipy import stats as scipy_stats

from conftest import endpoint
from lptrack.baselines import AccuracyMatrix, mmd_statistic, mmlu_statistic
from lptrack.client import run_lt_test, survey
from lptrack.evaluation import ExperimentPlan, is_nondecreasing, roc_auc, run_benchmark
from lptrack.monitor import detect_changes
from lptrack.server import DEFAULT_USAGE_CYCLE, SimEndpoint
from lptrack.simulator import SyntheticModel, sample_logprob_vector, simulated_series
from lptrack.stats import exact_permutation_test, permutation_test
from lptrack.tokens import LogprobVector, SampleSet, TokenKey
from oracles import auc_pairs, exact_p_value, mmd_double_loop, mmlu_oracle, rows_of

RESULTS: list[str] = []

pytestmark = pytest.mark.acceptance


def report(number: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {number} ({name}): {'PASS' if ok else 'FAIL'} - {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# 1. permutation p-value against the exact enumeration
# ---------------------------------------------------------------------------


def _random_set(rng, n, vocab=8):
    samples = []
    for _ in range(n):
        k = int(rng.integers(2, 6))
        ids = rng.choice(vocab, size=k, replace=False)
        logprobs = np.sort(-rng.exponential(1.0, size=k))[::-1]
        samples.append(LogprobVector(tuple((TokenKey(f"t{i}"), float(lp)) for i, lp in zip(ids, logprobs)), k))
    return SampleSet(tuple(samples), "x")


def test_criterion_1_permutation_matches_exact():
    rng = np.random.default_rng(20240101)
    started = time.perf_counter()
    worst = 0.0
    for i in range(50):
        n = int(rng.integers(2, 6))
        a, b = _random_set(rng, n), _random_set(rng, n)
        exact = exact_permutation_test(a, b).p_value
        # the library's enumeration must itself agree with the loop oracle
        assert exact == pytest.approx(exact_p_value(rows_of(a), rows_of(b)), abs=1e-12)
        estimate = permutation_test(a, b, 50_000, seed=i).p_value
        worst = max(worst, abs(estimate - exact))
    elapsed = time.perf_counter() - started
    report(1, "permutation vs exact", worst < 0.01 and elapsed < 60, f"max |p_hat - p_exact| = {worst:.4f}, {elapsed:.1f} s")


# ---------------------------------------------------------------------------
# 2. null calibration
# ---------------------------------------------------------------------------


def test_criterion_2_null_calibration():
    started = time.perf_counter()
    p_values = []
    for i in range(1000):
        model = SyntheticModel.random(noise_sigma=0.05, seed=i % 10)
        a = SampleSet(tuple(sample_logprob_vector(model, 20 * i + j) for j in range(10)), "x")
        b = SampleSet(tuple(sample_logprob_vector(model, 20 * i + 10 + j) for j in range(10)), "x")
        p_values.append(permutation_test(a, b, 1000, seed=i).p_value)
    elapsed = time.perf_counter() - started
    p = np.array(p_values)
    fpr = float(np.mean(p <= 0.05))
    ks = scipy_stats.kstest(p, "uniform").statistic
    ok = 0.03 <= fpr <= 0.07 and ks < 0.06 and elapsed < 300
    report(2, "null calibration", ok, f"FPR {fpr:.3f}, KS distance {ks:.4f}, {elapsed:.1f} s")


# ---------------------------------------------------------------------------
# 3 and 4. difficulty ladder
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def ladder_benchmark():
    return run_benchmark(ExperimentPlan(methods=("LT", "MET")))


def test_criterion_3_ladder_power(ladder_benchmark):
    rows = ladder_benchmark.summary("LT")
    medians = [r["auc_median"] for r in rows]
    assert [r["magnitude"] for r in rows] == sorted(r["magnitude"] for r in rows)
    assert rows[0]["magnitude"] == 0.0
    ok = is_nondecreasing(medians) and medians[-1] >= 0.99 and abs(medians[0] - 0.5) <= 0.05
    drops = [(medians[i] - medians[i + 1], rows[i + 1]["magnitude"]) for i in range(len(rows) - 1)]
    drop, at = max(drops)
    detail = (
        f"median AUC {medians[0]:.4f} at 0 -> {medians[-1]:.4f} at {rows[-1]['magnitude']:g}, "
        f"monotone={is_nondecreasing(medians)}, largest decrease {max(drop, 0.0):.6f} (at {at:g})"
    )
    report(3, "ladder power", ok, detail)


def test_criterion_4_method_ordering(ladder_benchmark):
    lt = ladder_benchmark.summary("LT")
    met = ladder_benchmark.summary("MET")
    worst = -np.inf
    for column in ("auc", "auc_median"):
        for a, b in zip(lt, met):
            assert a["magnitude"] == b["magnitude"]
            if max(a[column], b[column]) > 0.6:
                worst = max(worst, b[column] - a[column])
    report(4, "LT at least as sensitive as MET", worst <= 0.02, f"largest MET - LT gap on informative rungs {worst:+.3f}")


# ---------------------------------------------------------------------------
# 5. detector precision and recall
# ---------------------------------------------------------------------------


def test_criterion_5_detector():
    started = time.perf_counter()
    rng = np.random.default_rng(5)
    localized = extra = 0
    for i in range(100):
        t0 = int(rng.integers(200, 4800))
        points = simulated_series(SyntheticModel.random(seed=i), 5000, [(t0, ("logit-shift", 6.0))], seed=i)
        events = detect_changes(points, w=24, window=100, k_sigma=12.0, abs_floor=1.0)
        hits = [e for e in events if abs(e.index - t0) <= 1]
        localized += bool(hits)
        extra += len(events) - len(hits)
    false_alarms = 0
    for i in range(100):
        points = simulated_series(SyntheticModel.random(seed=1000 + i), 5000, seed=1000 + i)
        false_alarms += len(detect_changes(points, w=24, window=100, k_sigma=12.0, abs_floor=1.0))
    elapsed = time.perf_counter() - started
    ok = localized >= 95 and false_alarms == 0 and elapsed < 600
    detail = f"{localized}/100 localized within 1 point, {extra} other events, {false_alarms} events on controls, {elapsed:.1f} s"
    report(5, "detector", ok, detail)


# ---------------------------------------------------------------------------
# 6. ROC against the pair count
# ---------------------------------------------------------------------------


def test_criterion_6_roc_oracle():
    rng = np.random.default_rng(6)
    mismatches = 0
    for i in range(1000):
        n, m = (int(x) for x in rng.integers(1, 301, size=2))
        if i % 2:
            # coarse integer scores force many ties
            null, alt = rng.integers(0, 10, n).tolist(), rng.integers(0, 10, m).tolist()
        else:
            null, alt = rng.normal(0, 1, n).tolist(), rng.normal(0.3, 1, m).tolist()
        mismatches += roc_auc(null, alt).auc != float(auc_pairs(null, alt))
    report(6, "ROC oracle", mismatches == 0, f"{mismatches} mismatches in 1000 instances")


# ---------------------------------------------------------------------------
# 7. cost accounting
# ---------------------------------------------------------------------------


def test_criterion_7_cost(serve):
    model = SyntheticModel.random(seed=1)
    server = serve({"a": SimEndpoint(model, stream=0), "b": SimEndpoint(model, stream=1)})
    _, cost = run_lt_test(endpoint(server, "a"), endpoint(server, "b"), n=10, permutations=200, seed=0)
    served = server.request_count("a") + server.request_count("b")
    expected_prompt = 2 * sum(DEFAULT_USAGE_CYCLE[i % len(DEFAULT_USAGE_CYCLE)] for i in range(10))
    ok = (
        cost.requests == served == 20
        and set(cost.max_tokens) == {1}
        and cost.tokens == (expected_prompt, 20)
        and cost.tokens == (28, 20)
    )
    report(7, "cost accounting", ok, f"{cost.requests} requests ({served} served), max_tokens {sorted(set(cost.max_tokens))}, usage {cost.tokens}")


# ---------------------------------------------------------------------------
# 8. survey fidelity
# ---------------------------------------------------------------------------


def test_criterion_8_survey(serve):
    eps = {}
    expected_k = {}
    for i in range(100):
        if i % 4 == 0 and len(expected_k) < 23:
            k = (5, 8, 20)[len(expected_k) % 3]
            eps[f"m{i}"] = SimEndpoint(SyntheticModel.random(top_k=k, seed=i))
            expected_k[f"m{i}"] = k
        else:
            eps[f"m{i}"] = SimEndpoint(SyntheticModel.random(seed=i), supports_logprobs=False)
    server = serve(eps)
    report_ = survey([endpoint(server, name, endpoint_id=name) for name in eps])
    fraction = report_.supported_fraction
    observed = report_.observed_k()
    ok = report_.reachable == 100 and fraction == 0.23 and observed == expected_k
    report(8, "survey fidelity", ok, f"fraction {fraction}, k per endpoint correct: {observed == expected_k}")


# ---------------------------------------------------------------------------
# 9. baseline statistics against oracles
# ---------------------------------------------------------------------------


def test_criterion_9_baseline_statistics():
    rng = np.random.default_rng(9)
    mismatches = 0
    fixtures = 0
    for _ in range(100):
        L = int(rng.integers(1, 8))
        na, nb = (int(x) for x in rng.integers(2, 6, size=2))

        def seqs(count):
            return [tuple(int(t) for t in rng.integers(0, 3, rng.integers(0, L + 1))) for _ in range(count)]

        sa, sb = seqs(na), seqs(nb)
        mismatches += mmd_statistic(sa, sb, L) != float(mmd_double_loop(sa, sb, L))
        P = int(rng.integers(1, 10))
        ra = rng.integers(0, 2, (na, P)).astype(bool)
        rb = rng.integers(0, 2, (nb, P)).astype(bool)
        oracle = mmlu_oracle(ra.astype(int).tolist(), rb.astype(int).tolist())
        ids = tuple(f"q{j}" for j in range(P))
        mismatches += mmlu_statistic(AccuracyMatrix(ra, ids), AccuracyMatrix(rb, ids)) != float(oracle)
        fixtures += 2
    report(9, "baseline statistics", mismatches == 0, f"{mismatches} mismatches in {fixtures} fixtures")
