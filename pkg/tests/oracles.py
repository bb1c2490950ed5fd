"""Slow, loop-based reference implementations used as test oracles.

Nothing here imports the numeric code under test; everything is plain Python
over lists and dicts, with exact arithmetic where the quantity is rational.
"""

from __future__ import annotations

import itertools
import math
from fractions import Fraction


def rows_of(sample_set):
    """Sample set -> list of {canonical bytes: logprob} dicts."""
    return [{t.canonical: lp for t, lp in v.entries} for v in sample_set.samples]


def lt_statistic_rows(rows_a, rows_b):
    tokens = sorted({t for row in rows_a + rows_b for t in row})

    def column_means(rows):
        filled = []
        for row in rows:
            lowest = min(row.values())
            filled.append([row.get(t, lowest) for t in tokens])
        return [math.fsum(col) / len(rows) for col in zip(*filled)]

    mean_a = column_means(rows_a)
    mean_b = column_means(rows_b)
    return math.fsum(abs(x - y) for x, y in zip(mean_a, mean_b)) / len(tokens)


def exact_p_value(rows_a, rows_b, tol=1e-9):
    """Fraction of all equal-size splits whose statistic reaches the observed one."""
    pooled = rows_a + rows_b
    n = len(rows_a)
    observed = lt_statistic_rows(rows_a, rows_b)
    hits = total = 0
    for first in itertools.combinations(range(len(pooled)), n):
        chosen = set(first)
        group_a = [pooled[i] for i in first]
        group_b = [pooled[i] for i in range(len(pooled)) if i not in chosen]
        total += 1
        hits += lt_statistic_rows(group_a, group_b) >= observed - tol
    return hits / total


def hamming_similarity(x, y, L):
    pad = object()
    xs = list(x) + [pad] * (L - len(x))
    ys = list(y) + [pad] * (L - len(y))
    same = sum(1 for i in range(L) if xs[i] is ys[i] or (xs[i] is not pad and ys[i] is not pad and xs[i] == ys[i]))
    return Fraction(same, L)


def mmd_double_loop(sa, sb, L):
    """Unbiased squared MMD with explicit double loops, as an exact Fraction."""
    n, m = len(sa), len(sb)
    within_a = sum(hamming_similarity(sa[i], sa[j], L) for i in range(n) for j in range(n) if i != j)
    within_b = sum(hamming_similarity(sb[i], sb[j], L) for i in range(m) for j in range(m) if i != j)
    cross = sum(hamming_similarity(x, y, L) for x in sa for y in sb)
    return within_a / (n * (n - 1)) + within_b / (m * (m - 1)) - 2 * cross / (n * m)


def mmlu_oracle(rows_a, rows_b):
    """Mean absolute gap of per-question accuracies, as an exact Fraction."""
    P = len(rows_a[0])
    acc_a = [Fraction(sum(r[p] for r in rows_a), len(rows_a)) for p in range(P)]
    acc_b = [Fraction(sum(r[p] for r in rows_b), len(rows_b)) for p in range(P)]
    return sum(abs(x - y) for x, y in zip(acc_a, acc_b)) / P


def auc_pairs(null, alt):
    """P(alt > null) + P(alt = null) / 2 by counting every pair, as a Fraction."""
    score = 0
    for a in alt:
        for b in null:
            if a > b:
                score += 2
            elif a == b:
                score += 1
    return Fraction(score, 2 * len(null) * len(alt))


def log_softmax(logits):
    top = max(logits)
    total = math.fsum(math.exp(z - top) for z in logits)
    return [z - top - math.log(total) for z in logits]
