"""Comparison tests that look at generated text instead of logprobs.

* MET: squared maximum mean discrepancy between two groups of sampled
  sequences under a Hamming-similarity kernel, ``k(x, y) = 1 - H(x, y) / L``
  with sequences padded to ``L``.
* MMLU-ALG: mean absolute gap between per-question accuracies of two groups
  of graded multiple-choice answers.

Both are tested with the same permutation engine as the logprob test.
Point statistics are computed in exact rational arithmetic before rounding,
so they agree bit-for-bit with any exact reference computation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path
from typing import Hashable, Mapping, Sequence

import numpy as np

from .errors import InvalidInputError
from .stats import BatchStatistic, TestResult, mean_abs_gap_statistic, permutation_pvalue

MET_LENGTH = 50
MET_PROMPTS = 25
PAD = -1

TokenSequence = Sequence[Hashable]


# -- MET ------------------------------------------------------------------------


def hamming_kernel(x: TokenSequence, y: TokenSequence, L: int = MET_LENGTH) -> float:
    if L < 1:
        raise InvalidInputError("L must be positive")
    if len(x) > L or len(y) > L:
        raise InvalidInputError(f"sequence longer than L={L}")
    matches = sum(1 for a, b in zip(x, y) if a == b)
    # both sequences are padded with the same reserved token
    matches += L - max(len(x), len(y))
    return matches / L


def encode_sequences(groups: Sequence[Sequence[TokenSequence]], L: int) -> list[np.ndarray]:
    """Map tokens to integer ids shared across ``groups``; pad with ``PAD`` to length ``L``."""
    vocab: dict[Hashable, int] = {}
    encoded = []
    for group in groups:
        arr = np.full((len(group), L), PAD, dtype=np.int64)
        for i, seq in enumerate(group):
            if len(seq) > L:
                raise InvalidInputError(f"sequence of length {len(seq)} longer than L={L}")
            for j, token in enumerate(seq):
                arr[i, j] = vocab.setdefault(token, len(vocab))
        encoded.append(arr)
    return encoded


def match_counts(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Number of equal positions between every row of ``x`` and every row of ``y``."""
    return (x[:, None, :] == y[None, :, :]).sum(axis=-1)


def _mmd_from_counts(kaa: np.ndarray, kbb: np.ndarray, kab: np.ndarray, L: int) -> float:
    n, m = kaa.shape[0], kbb.shape[0]
    within_a = Fraction(int(kaa.sum() - np.trace(kaa)), n * (n - 1) * L)
    within_b = Fraction(int(kbb.sum() - np.trace(kbb)), m * (m - 1) * L)
    cross = Fraction(int(kab.sum()), n * m * L)
    return float(within_a + within_b - 2 * cross)


def mmd_statistic(sa: Sequence[TokenSequence], sb: Sequence[TokenSequence], L: int = MET_LENGTH) -> float:
    """Unbiased squared MMD with the Hamming kernel."""
    if len(sa) < 2 or len(sb) < 2:
        raise InvalidInputError("unbiased MMD needs at least two sequences per group")
    xa, xb = encode_sequences([sa, sb], L)
    return _mmd_from_counts(match_counts(xa, xa), match_counts(xb, xb), match_counts(xa, xb), L)


def mmd_batch_statistic(kernel: np.ndarray, admissible: np.ndarray | None = None) -> BatchStatistic:
    """Unbiased squared MMD for every split mask, given the pooled kernel matrix.

    ``admissible`` marks which sample pairs are comparable (for multi-prompt
    data: pairs answering the same prompt). Each kernel sum is averaged over
    the admissible pairs it contains; by default every pair is admissible.
    """
    if admissible is None:
        admissible = np.ones_like(kernel)
    admissible = admissible.astype(float)
    kernel = kernel * admissible
    diag_k = np.diag(kernel)
    diag_w = np.diag(admissible)

    def pair_sum(matrix, diag, left, right, same):
        total = ((left @ matrix) * right).sum(axis=1)
        return total - left @ diag if same else total

    def statistic(masks: np.ndarray) -> np.ndarray:
        first = masks.astype(float)
        second = (~masks).astype(float)
        within_a = pair_sum(kernel, diag_k, first, first, True) / pair_sum(admissible, diag_w, first, first, True)
        within_b = pair_sum(kernel, diag_k, second, second, True) / pair_sum(admissible, diag_w, second, second, True)
        cross = pair_sum(kernel, diag_k, first, second, False) / pair_sum(admissible, diag_w, first, second, False)
        return within_a + within_b - 2 * cross

    return statistic


def _check_groups(na: int, nb: int) -> None:
    if na != nb:
        raise InvalidInputError(f"group sizes differ ({na} vs {nb}); equal N required")
    if na < 2:
        raise InvalidInputError(f"need at least 2 samples per group, got {na}")


def _kernel_test(
    kernel: np.ndarray,
    n_first: int,
    permutations: int,
    seed: int,
    method: str,
    admissible: np.ndarray | None = None,
) -> TestResult:
    if permutations < 1:
        raise InvalidInputError("permutations must be >= 1")
    mask = np.zeros(kernel.shape[0], dtype=bool)
    mask[:n_first] = True
    statistic, p = permutation_pvalue(mmd_batch_statistic(kernel, admissible), mask, permutations, seed)
    return TestResult(
        statistic=statistic,
        p_value=p,
        permutations=permutations,
        exact=False,
        seed=seed,
        sizes=(n_first, kernel.shape[0] - n_first),
        method=method,
    )


def met_test(
    sa: Sequence[TokenSequence],
    sb: Sequence[TokenSequence],
    L: int = MET_LENGTH,
    permutations: int = 1000,
    seed: int = 0,
) -> TestResult:
    """Permutation test on the Hamming-kernel MMD of single-prompt sequence groups.

    The reported ``statistic`` is the exact :func:`mmd_statistic` value.
    """
    _check_groups(len(sa), len(sb))
    xa, xb = encode_sequences([sa, sb], L)
    pooled = np.vstack([xa, xb])
    result = _kernel_test(match_counts(pooled, pooled) / L, len(sa), permutations, seed, "met")
    exact = _mmd_from_counts(match_counts(xa, xa), match_counts(xb, xb), match_counts(xa, xb), L)
    return replace(result, statistic=exact)


def prompt_kernel(
    ga: Mapping[str, Sequence[TokenSequence]],
    gb: Mapping[str, Sequence[TokenSequence]],
    L: int = MET_LENGTH,
    aggregate: str = "pool",
) -> tuple[np.ndarray, np.ndarray, int]:
    """Pooled kernel, admissible-pair mask and first-group size for multi-prompt MET.

    ``aggregate="pool"`` treats every (prompt, response) pair as one sample;
    only responses to the same prompt are compared, so a split may hold any
    mix of prompts. ``aggregate="mean"`` treats the j-th responses to all
    prompts as one sample and averages the per-prompt kernels, which makes the
    statistic the mean of per-prompt MMDs. For balanced groups both give the
    same observed statistic and differ in how splits are drawn.
    """
    prompts = sorted(ga)
    if sorted(gb) != prompts or not prompts:
        raise InvalidInputError("both groups must cover the same non-empty prompt set")
    encoded = {p: encode_sequences([ga[p], gb[p]], L) for p in prompts}
    if aggregate == "pool":
        rows_a = [(p, i) for p in prompts for i in range(len(ga[p]))]
        rows_b = [(p, i) for p in prompts for i in range(len(gb[p]))]
        labels = np.array([prompts.index(p) for p, _ in rows_a + rows_b])
        seqs = np.vstack([encoded[p][0][i] for p, i in rows_a] + [encoded[p][1][i] for p, i in rows_b])
        same_prompt = labels[:, None] == labels[None, :]
        # token ids are assigned per prompt, so only same-prompt comparisons mean anything
        return np.where(same_prompt, match_counts(seqs, seqs) / L, 0.0), same_prompt, len(rows_a)
    if aggregate == "mean":
        sizes = {len(ga[p]) for p in prompts} | {len(gb[p]) for p in prompts}
        if len(sizes) != 1:
            raise InvalidInputError("aggregate='mean' needs the same number of responses per prompt")
        n = len(ga[prompts[0]])
        total = np.zeros((2 * n, 2 * n))
        for p in prompts:
            seqs = np.vstack(encoded[p])
            total += match_counts(seqs, seqs) / L
        return total / len(prompts), np.ones_like(total, dtype=bool), n
    raise InvalidInputError(f"unknown aggregate {aggregate!r}; expected 'pool' or 'mean'")


def met_test_prompts(
    ga: Mapping[str, Sequence[TokenSequence]],
    gb: Mapping[str, Sequence[TokenSequence]],
    L: int = MET_LENGTH,
    permutations: int = 1000,
    seed: int = 0,
    aggregate: str = "pool",
) -> TestResult:
    kernel, admissible, n_first = prompt_kernel(ga, gb, L, aggregate)
    _check_groups(n_first, kernel.shape[0] - n_first)
    return _kernel_test(kernel, n_first, permutations, seed, f"met-{aggregate}", admissible)


def mmd_from_kernel(kernel: np.ndarray, n_first: int, admissible: np.ndarray | None = None) -> float:
    mask = np.zeros(kernel.shape[0], dtype=bool)
    mask[:n_first] = True
    return float(mmd_batch_statistic(kernel, admissible)(mask[None, :])[0])


# -- MMLU-ALG -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class AccuracyMatrix:
    """``N x P`` correctness indicators, one column per question."""

    values: np.ndarray
    prompts: tuple[str, ...]

    def __post_init__(self) -> None:
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise InvalidInputError("accuracy matrix must be two-dimensional")
        if values.shape[1] != len(self.prompts):
            raise InvalidInputError(f"{values.shape[1]} columns but {len(self.prompts)} prompt ids")
        if not np.isin(values, (0, 1)).all():
            raise InvalidInputError("accuracy entries must be 0 or 1")
        values = values.astype(np.int8)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "prompts", tuple(self.prompts))

    @property
    def n(self) -> int:
        return self.values.shape[0]


def per_prompt_accuracies(m: AccuracyMatrix) -> np.ndarray:
    if m.n < 1:
        raise InvalidInputError("need at least one graded row")
    return m.values.sum(axis=0) / m.n


def mmlu_statistic(a: AccuracyMatrix, b: AccuracyMatrix) -> float:
    if a.prompts != b.prompts:
        raise InvalidInputError("accuracy matrices cover different prompts")
    if a.n < 1 or b.n < 1 or not a.prompts:
        raise InvalidInputError("accuracy matrices must be non-empty")
    hits_a = a.values.sum(axis=0).tolist()
    hits_b = b.values.sum(axis=0).tolist()
    gap = sum(abs(Fraction(x, a.n) - Fraction(y, b.n)) for x, y in zip(hits_a, hits_b))
    return float(gap / len(a.prompts))


def mmlu_test(a: AccuracyMatrix, b: AccuracyMatrix, permutations: int = 1000, seed: int = 0) -> TestResult:
    if a.prompts != b.prompts:
        raise InvalidInputError("accuracy matrices cover different prompts")
    _check_groups(a.n, b.n)
    if permutations < 1:
        raise InvalidInputError("permutations must be >= 1")
    pooled = np.vstack([a.values, b.values]).astype(float)
    mask = np.zeros(len(pooled), dtype=bool)
    mask[: a.n] = True
    _, p = permutation_pvalue(mean_abs_gap_statistic(pooled), mask, permutations, seed)
    return TestResult(
        statistic=mmlu_statistic(a, b),
        p_value=p,
        permutations=permutations,
        exact=False,
        seed=seed,
        per_token_means=(tuple(per_prompt_accuracies(a).tolist()), tuple(per_prompt_accuracies(b).tolist())),
        tokens=a.prompts,
        sizes=(a.n, b.n),
        method="mmlu",
    )


def grade_answer(response: str, gold: str) -> bool:
    """Correct when the first non-whitespace character is the gold letter, any case."""
    stripped = response.lstrip()
    return bool(stripped) and stripped[0].upper() == gold.strip().upper()


@dataclass(frozen=True)
class QuestionRecord:
    id: str
    prompt: str
    gold: str


def load_questions(path: str | Path) -> list[QuestionRecord]:
    """Read a line-delimited JSON question file with ``id``, ``prompt`` and ``gold`` fields."""
    questions = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
                record = QuestionRecord(str(raw["id"]), str(raw["prompt"]), str(raw["gold"]).strip().upper())
            except (ValueError, KeyError, TypeError) as exc:
                raise InvalidInputError(f"{path}:{lineno}: bad question record ({exc})") from None
            if record.gold not in ("A", "B", "C", "D"):
                raise InvalidInputError(f"{path}:{lineno}: gold letter must be A-D, got {record.gold!r}")
            questions.append(record)
    return questions


def grade_responses(responses: Sequence[Sequence[str]], questions: Sequence[QuestionRecord]) -> AccuracyMatrix:
    """Grade ``responses[j][p]`` against ``questions[p]``."""
    for row in responses:
        if len(row) != len(questions):
            raise InvalidInputError("each response row must answer every question")
    values = np.array(
        [[grade_answer(r, q.gold) for r, q in zip(row, questions)] for row in responses], dtype=np.int8
    ).reshape(len(responses), len(questions))
    return AccuracyMatrix(values, tuple(q.id for q in questions))
