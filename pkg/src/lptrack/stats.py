"""Logprob-tracking two-sample test.

Each response contributes one row of per-token logprobs over the union of
tokens seen in either group. A token missing from a response's top-k is
imputed with that response's smallest reported logprob, which upper-bounds
the hidden value. The statistic is the mean, over tokens, of the absolute
difference between the two groups' per-token average logprobs, and its
significance comes from a permutation test over equal-size splits of the
pooled rows.

The permutation engine (:func:`permutation_splits`, :func:`permutation_pvalue`)
is shared with :mod:`lptrack.baselines`.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .errors import CapExceededError, InvalidInputError
from .tokens import SampleSet, TokenKey

DEFAULT_EXACT_CAP = math.comb(20, 10)
_CHUNK = 2048

BatchStatistic = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class LogprobMatrix:
    tokens: tuple[TokenKey, ...]
    values: np.ndarray
    imputed: np.ndarray

    @property
    def n_tok(self) -> int:
        return len(self.tokens)

    def column_means(self) -> np.ndarray:
        return self.values.mean(axis=0)


@dataclass(frozen=True)
class TestResult:
    """Outcome of a two-sample test.

    ``permutations`` is ``B`` for the Monte-Carlo test and the number of
    enumerated splits when ``exact`` is true. ``per_token_means`` is empty for
    statistics that are not defined through per-token means (MMD).
    """

    __test__ = False  # keep pytest from collecting this class

    statistic: float
    p_value: float
    permutations: int
    exact: bool
    seed: int | None
    per_token_means: tuple[tuple[float, ...], tuple[float, ...]] = ((), ())
    tokens: tuple[str, ...] = ()
    sizes: tuple[int, int] = (0, 0)
    method: str = "lt"

    def significant(self, alpha: float = 0.05) -> bool:
        return self.p_value < alpha

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "statistic": self.statistic,
            "p_value": self.p_value,
            "permutations": self.permutations,
            "exact": self.exact,
            "seed": self.seed,
            "sizes": list(self.sizes),
            "tokens": list(self.tokens),
            "per_token_means": [list(self.per_token_means[0]), list(self.per_token_means[1])],
        }


# -- matrices ---------------------------------------------------------------


def token_union(a: SampleSet, b: SampleSet) -> tuple[TokenKey, ...]:
    """All distinct tokens seen in either set, sorted by canonical key."""
    if len(a) == 0 or len(b) == 0:
        raise InvalidInputError("token_union needs two non-empty sample sets")
    seen: set[TokenKey] = set()
    for sample_set in (a, b):
        for vector in sample_set:
            seen.update(vector.tokens)
    return tuple(sorted(seen, key=lambda t: t.canonical))


def to_matrix(s: SampleSet, tokens: tuple[TokenKey, ...]) -> LogprobMatrix:
    """Lay ``s`` out over ``tokens``, imputing absent cells with the row minimum."""
    index = {t: i for i, t in enumerate(tokens)}
    values = np.empty((len(s), len(tokens)))
    observed = np.zeros((len(s), len(tokens)), dtype=bool)
    for j, vector in enumerate(s):
        if len(vector) == 0:
            raise InvalidInputError(f"sample {j} has no logprob entries")
        row_min = vector.min_logprob()
        values[j, :] = row_min
        for token, logprob in vector.entries:
            try:
                i = index[token]
            except KeyError:
                raise InvalidInputError(f"token {token!r} of sample {j} missing from token list") from None
            values[j, i] = logprob
            observed[j, i] = True
    return LogprobMatrix(tuple(tokens), values, ~observed)


def impute_min(values: np.ndarray, observed: np.ndarray) -> np.ndarray:
    """Array form of the min-imputation rule; ``values`` outside ``observed`` are ignored.

    Works on any leading shape; the last axis is the token axis.
    """
    observed = np.asarray(observed, dtype=bool)
    if not observed.any(axis=-1).all():
        raise InvalidInputError("every response needs at least one observed logprob")
    masked = np.where(observed, values, np.inf)
    row_min = masked.min(axis=-1, keepdims=True)
    return np.where(observed, values, row_min)


def lt_statistic(ma: LogprobMatrix, mb: LogprobMatrix) -> float:
    if ma.tokens != mb.tokens:
        raise InvalidInputError("matrices are laid out over different token sequences")
    if ma.values.shape[0] < 1 or mb.values.shape[0] < 1:
        raise InvalidInputError("each matrix needs at least one row")
    if ma.n_tok == 0:
        raise InvalidInputError("empty token sequence")
    return float(np.mean(np.abs(ma.column_means() - mb.column_means())))


def lt_statistic_arrays(
    values_a: np.ndarray,
    observed_a: np.ndarray,
    values_b: np.ndarray,
    observed_b: np.ndarray,
) -> np.ndarray:
    """Vectorised statistic over a batch of tests laid out on a shared vocabulary.

    Inputs have shape ``(..., N, V)``; a column enters a test's token union
    when it is observed in at least one row of either group. Returns shape
    ``(...)``.
    """
    filled_a = impute_min(values_a, observed_a)
    filled_b = impute_min(values_b, observed_b)
    union = observed_a.any(axis=-2) | observed_b.any(axis=-2)
    gap = np.abs(filled_a.mean(axis=-2) - filled_b.mean(axis=-2))
    return np.where(union, gap, 0.0).sum(axis=-1) / union.sum(axis=-1)


# -- permutation engine -------------------------------------------------------


def permutation_splits(n_first: int, n_total: int, count: int, seed: int | None) -> Iterator[np.ndarray]:
    """Yield boolean membership masks for ``count`` uniform random splits.

    Each row marks ``n_first`` of ``n_total`` pooled rows as the first group.
    Splits are drawn independently, so repeats are possible. The sequence
    depends only on ``(n_first, n_total, count, seed)``.
    """
    rng = np.random.default_rng(seed)
    remaining = count
    while remaining > 0:
        c = min(_CHUNK, remaining)
        order = np.argsort(rng.random((c, n_total)), axis=1)
        mask = np.zeros((c, n_total), dtype=bool)
        np.put_along_axis(mask, order[:, :n_first], True, axis=1)
        yield mask
        remaining -= c


def enumerate_splits(n_first: int, n_total: int) -> Iterator[np.ndarray]:
    combos = itertools.combinations(range(n_total), n_first)
    while True:
        block = list(itertools.islice(combos, _CHUNK))
        if not block:
            return
        mask = np.zeros((len(block), n_total), dtype=bool)
        rows = np.repeat(np.arange(len(block)), n_first)
        mask[rows, np.asarray(block).ravel()] = True
        yield mask


def tie_tolerance(scale: float) -> float:
    """Slack for treating a permuted statistic as equal to the observed one.

    Identical splits reached through different floating-point paths must still
    count as ties under the ``>=`` comparison.
    """
    return 1e-11 * max(1.0, scale)


def count_at_least(masks: Iterator[np.ndarray], statistic: BatchStatistic, observed: float, tol: float) -> tuple[int, int]:
    hits = 0
    total = 0
    for mask in masks:
        stats = statistic(mask)
        hits += int(np.count_nonzero(stats >= observed - tol))
        total += len(stats)
    return hits, total


def permutation_pvalue(
    statistic: BatchStatistic,
    observed_mask: np.ndarray,
    permutations: int,
    seed: int | None,
    scale: float = 1.0,
) -> tuple[float, float]:
    """Monte-Carlo ``p = (1/B) * #{S_b >= S}``; returns ``(S, p)``."""
    n_total = observed_mask.size
    n_first = int(observed_mask.sum())
    observed = float(statistic(observed_mask[None, :])[0])
    hits, total = count_at_least(
        permutation_splits(n_first, n_total, permutations, seed), statistic, observed, tie_tolerance(scale)
    )
    return observed, hits / total


def exact_pvalue(
    statistic: BatchStatistic,
    observed_mask: np.ndarray,
    cap: int = DEFAULT_EXACT_CAP,
    scale: float = 1.0,
) -> tuple[float, float, int]:
    n_total = observed_mask.size
    n_first = int(observed_mask.sum())
    n_splits = math.comb(n_total, n_first)
    if n_splits > cap:
        raise CapExceededError(f"C({n_total}, {n_first}) = {n_splits} splits exceeds cap {cap}")
    observed = float(statistic(observed_mask[None, :])[0])
    hits, total = count_at_least(enumerate_splits(n_first, n_total), statistic, observed, tie_tolerance(scale))
    return observed, hits / total, total


def split_means(pooled: np.ndarray, masks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-column means of the two groups defined by each mask row."""
    first = masks.astype(pooled.dtype)
    second = (~masks).astype(pooled.dtype)
    means_a = (first @ pooled) / first.sum(axis=1, keepdims=True)
    means_b = (second @ pooled) / second.sum(axis=1, keepdims=True)
    return means_a, means_b


def mean_abs_gap_statistic(pooled: np.ndarray) -> BatchStatistic:
    """Batch statistic: mean over columns of |group-mean difference|."""

    def statistic(masks: np.ndarray) -> np.ndarray:
        means_a, means_b = split_means(pooled, masks)
        return np.mean(np.abs(means_a - means_b), axis=1)

    return statistic


# -- tests ------------------------------------------------------------------


def _check_sizes(a: SampleSet, b: SampleSet, minimum: int) -> None:
    if len(a) != len(b):
        raise InvalidInputError(f"group sizes differ ({len(a)} vs {len(b)}); equal N required")
    if len(a) < minimum:
        raise InvalidInputError(f"need at least {minimum} samples per group, got {len(a)}")


def _pooled(a: SampleSet, b: SampleSet) -> tuple[tuple[TokenKey, ...], np.ndarray, np.ndarray]:
    tokens = token_union(a, b)
    pooled = np.vstack([to_matrix(a, tokens).values, to_matrix(b, tokens).values])
    mask = np.zeros(len(pooled), dtype=bool)
    mask[: len(a)] = True
    return tokens, pooled, mask


def _result(tokens, pooled, mask, p_value, permutations, exact, seed) -> TestResult:
    # row-wise means, so identical groups give identical means and S == 0 exactly
    means_a = pooled[mask].mean(axis=0)
    means_b = pooled[~mask].mean(axis=0)
    return TestResult(
        statistic=float(np.mean(np.abs(means_a - means_b))),
        p_value=p_value,
        permutations=permutations,
        exact=exact,
        seed=seed,
        per_token_means=(tuple(means_a.tolist()), tuple(means_b.tolist())),
        tokens=tuple(t.text for t in tokens),
        sizes=(int(mask.sum()), int((~mask).sum())),
    )


def permutation_test(a: SampleSet, b: SampleSet, permutations: int = 1000, seed: int = 0) -> TestResult:
    """Monte-Carlo permutation test of ``a`` and ``b`` having the same logprob distribution.

    Parameters
    ----------
    a, b : SampleSet
        Equal-size groups of at least two responses each.
    permutations : int
        Number ``B`` of random equal-size splits of the pooled rows.
    seed : int
        Seed of the split stream; identical inputs and seed give identical results.

    Returns
    -------
    TestResult
        ``p_value`` is the fraction of splits whose statistic is at least the
        observed one, without a ``+1`` correction, so it can be exactly 0.
    """
    _check_sizes(a, b, 2)
    if permutations < 1:
        raise InvalidInputError("permutations must be >= 1")
    tokens, pooled, mask = _pooled(a, b)
    scale = float(np.abs(pooled).max())
    _, p = permutation_pvalue(mean_abs_gap_statistic(pooled), mask, permutations, seed, scale)
    return _result(tokens, pooled, mask, p, permutations, False, seed)


def exact_permutation_test(a: SampleSet, b: SampleSet, cap: int = DEFAULT_EXACT_CAP) -> TestResult:
    """Enumerate every equal-size split; refuses when ``C(2N, N) > cap``."""
    _check_sizes(a, b, 1)
    tokens, pooled, mask = _pooled(a, b)
    scale = float(np.abs(pooled).max())
    _, p, total = exact_pvalue(mean_abs_gap_statistic(pooled), mask, cap, scale)
    return _result(tokens, pooled, mask, p, total, True, None)
