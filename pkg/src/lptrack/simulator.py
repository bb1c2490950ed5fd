"""Synthetic LLM endpoints with known ground truth.

A :class:`SyntheticModel` is a fixed logit vector over a toy vocabulary
``t0 .. t{V-1}``. Every request perturbs the logits with i.i.d. Gaussian
noise, standing in for batch- and hardware-dependent fluctuation, and
reports the top-k entries of the log-softmax. Variants are produced with
:func:`apply_variant` at magnitudes on a power-of-two ladder.

Besides first-token logprobs the model can emit sampled token sequences
(for the MMD baseline) and multiple-choice answers (for the accuracy
baseline), all driven by the same logits so a variant shifts every view.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace
from datetime import datetime, timedelta, timezone
from typing import Sequence

import numpy as np
from scipy.special import log_softmax, softmax

from .errors import InvalidInputError
from .tokens import LogprobVector, SampleSet, SeriesPoint, TokenKey

VARIANT_KINDS = ("logit-shift", "logit-noise-injection", "sparsify")
_KIND_STREAM = {kind: i + 1 for i, kind in enumerate(VARIANT_KINDS)}
_SEQUENCE_STREAM = 101
_QUESTION_STREAM = 102
_PROMPT_STREAM = 103
_SERIES_STREAM = 104

SERIES_START = datetime(2025, 1, 1, tzinfo=timezone.utc)


def token_name(index: int) -> str:
    return f"t{index}"


def token_key(index: int) -> TokenKey:
    name = token_name(index)
    return TokenKey(name, name.encode("utf-8"))


def stable_hash(text: str) -> int:
    return zlib.crc32(text.encode("utf-8"))


def power_of_two_ladder(lowest: int = -15, highest: int = 0) -> list[float]:
    """``[2**lowest, ..., 2**highest]``."""
    return [2.0**e for e in range(lowest, highest + 1)]


@dataclass(frozen=True, eq=False)
class SyntheticModel:
    """Logits plus a per-request noise model.

    ``noise_sigma`` is the standard deviation of the Gaussian added to every
    logit on every request, in nats.
    """

    base_logits: np.ndarray
    noise_sigma: float = 0.05
    top_k: int = 20
    seed: int = 0

    def __post_init__(self) -> None:
        logits = np.array(self.base_logits, dtype=float)
        logits.setflags(write=False)
        object.__setattr__(self, "base_logits", logits)
        if logits.ndim != 1 or logits.size < 1:
            raise InvalidInputError("base_logits must be a non-empty vector")
        if not 1 <= self.top_k <= logits.size:
            raise InvalidInputError(f"top_k must be in [1, {logits.size}], got {self.top_k}")
        if self.noise_sigma < 0:
            raise InvalidInputError("noise_sigma must be >= 0")
        if self.seed < 0:
            raise InvalidInputError("seed must be >= 0")

    @classmethod
    def random(
        cls,
        vocab_size: int = 64,
        noise_sigma: float = 0.05,
        top_k: int = 20,
        seed: int = 0,
        logit_scale: float = 2.0,
    ) -> SyntheticModel:
        rng = np.random.default_rng([seed, 0])
        return cls(rng.normal(0.0, logit_scale, vocab_size), noise_sigma, top_k, seed)

    @property
    def vocab_size(self) -> int:
        return self.base_logits.size

    def full_logprobs(self) -> np.ndarray:
        """Noise-free log-softmax over the whole vocabulary."""
        return log_softmax(self.base_logits)

    def with_noise(self, noise_sigma: float) -> SyntheticModel:
        return replace(self, noise_sigma=noise_sigma)

    # -- first-token logprobs ---------------------------------------------

    def draw_logprobs(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """``n`` full (untruncated) noisy logprob rows, shape ``(n, V)``."""
        logits = np.broadcast_to(self.base_logits, (n, self.vocab_size))
        if self.noise_sigma > 0:
            logits = logits + rng.normal(0.0, self.noise_sigma, (n, self.vocab_size))
        return log_softmax(logits, axis=-1)

    def draw_dense(self, n: int, rng: np.random.Generator, top_k: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Noisy logprobs with a mask of the top-k entries of each row."""
        logprobs = self.draw_logprobs(n, rng)
        return logprobs, top_k_mask(logprobs, top_k or self.top_k)

    def sample_set(self, n: int, rng: np.random.Generator, label: str = "") -> SampleSet:
        logprobs, observed = self.draw_dense(n, rng)
        return SampleSet(tuple(dense_to_vector(row, mask, self.top_k) for row, mask in zip(logprobs, observed)), "x", label)

    # -- sampled sequences ------------------------------------------------

    def position_logits(self, prompt_id: int, length: int) -> np.ndarray:
        """Logits for each output position of one prompt, shape ``(length, V)``.

        Position ``l`` sees the model's logits under a frozen permutation, so
        any change to ``base_logits`` reaches every position.
        """
        rng = np.random.default_rng([self.seed, _SEQUENCE_STREAM, prompt_id])
        perms = np.argsort(rng.random((length, self.vocab_size)), axis=1)
        return self.base_logits[perms]

    def sequence_cdf(self, prompt_ids: Sequence[int], length: int, temperature: float = 1.0) -> np.ndarray:
        """Cumulative sampling probabilities, shape ``(len(prompt_ids), length, V)``."""
        logits = np.stack([self.position_logits(p, length) for p in prompt_ids])
        return np.cumsum(softmax(logits / temperature, axis=-1), axis=-1)

    def sample_sequences(
        self,
        n: int,
        length: int,
        prompt_id: int,
        rng: np.random.Generator,
        temperature: float = 1.0,
    ) -> np.ndarray:
        """``n`` sampled token-id sequences of ``length`` tokens, shape ``(n, length)``.

        Tokens are drawn from the noise-free logits: at sampling temperatures
        the categorical draw swamps per-request logit noise.
        """
        cdf = self.sequence_cdf([prompt_id], length, temperature)
        return sample_categorical(cdf, rng.random((n, 1, length)))[:, 0, :]


def sample_categorical(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draws: ``cdf`` has shape ``(..., V)``, ``u`` broadcasts against ``cdf[..., 0]``."""
    rows = cdf.reshape(-1, cdf.shape[-1])
    n_rows, vocab = rows.shape
    # shift row r into [r, r + 1] so one sorted search serves every row
    flat = (rows / rows[:, -1:] + np.arange(n_rows)[:, None]).ravel()
    u = np.asarray(u, dtype=float)
    shape = np.broadcast_shapes(u.shape, cdf.shape[:-1])
    row_index = np.broadcast_to(np.arange(n_rows).reshape(cdf.shape[:-1]), shape)
    pos = np.searchsorted(flat, np.broadcast_to(u, shape) + row_index, side="right")
    return np.minimum(pos - row_index * vocab, vocab - 1)


def top_k_mask(logprobs: np.ndarray, k: int) -> np.ndarray:
    order = np.argsort(-logprobs, axis=-1, kind="stable")
    mask = np.zeros(logprobs.shape, dtype=bool)
    np.put_along_axis(mask, order[..., :k], True, axis=-1)
    return mask


def dense_to_vector(row: np.ndarray, mask: np.ndarray, requested_k: int) -> LogprobVector:
    idx = np.flatnonzero(mask)
    idx = idx[np.argsort(-row[idx], kind="stable")]
    return LogprobVector(tuple((token_key(int(i)), float(row[i])) for i in idx), requested_k)


def sample_logprob_vector(m: SyntheticModel, draw_seed: int) -> LogprobVector:
    """One noisy top-k response; identical ``(m, draw_seed)`` give identical vectors."""
    if draw_seed < 0:
        raise InvalidInputError("draw_seed must be >= 0")
    rng = np.random.default_rng([m.seed, draw_seed])
    logprobs = m.draw_logprobs(1, rng)[0]
    order = np.argsort(-logprobs, kind="stable")[: m.top_k]
    return LogprobVector(tuple((token_key(int(i)), float(logprobs[i])) for i in order), m.top_k)


# -- variants -----------------------------------------------------------------


@dataclass(frozen=True)
class VariantSpec:
    kind: str
    magnitude: float

    def __post_init__(self) -> None:
        if self.kind not in VARIANT_KINDS:
            raise InvalidInputError(f"unknown variant kind {self.kind!r}; expected one of {VARIANT_KINDS}")
        if not self.magnitude >= 0:
            raise InvalidInputError("variant magnitude must be >= 0")
        if self.kind == "sparsify" and self.magnitude > 1:
            raise InvalidInputError("sparsify magnitude is a fraction in [0, 1]")


def variant_direction(m: SyntheticModel, kind: str) -> np.ndarray:
    """Frozen perturbation direction for ``(m.seed, kind)``; standard normal entries."""
    if kind not in _KIND_STREAM:
        raise InvalidInputError(f"unknown variant kind {kind!r}")
    return np.random.default_rng([m.seed, _KIND_STREAM[kind]]).normal(0.0, 1.0, m.vocab_size)


def apply_variant(m: SyntheticModel, v: VariantSpec | tuple[str, float]) -> SyntheticModel:
    """Return a modified copy of ``m``.

    ``logit-shift`` moves the logits along a fixed direction,
    ``logit-noise-injection`` adds one frozen Gaussian draw (a separate
    stream), and ``sparsify`` zeroes the given fraction of logits with the
    smallest magnitude.
    """
    if not isinstance(v, VariantSpec):
        v = VariantSpec(*v)
    if v.magnitude == 0:
        return m
    if v.kind == "sparsify":
        logits = m.base_logits.copy()
        count = int(np.floor(v.magnitude * m.vocab_size + 1e-9))
        logits[np.argsort(np.abs(logits), kind="stable")[:count]] = 0.0
    else:
        logits = m.base_logits + v.magnitude * variant_direction(m, v.kind)
    return replace(m, base_logits=logits)


# -- monitored series -------------------------------------------------------------


def simulated_series(
    m: SyntheticModel,
    n: int,
    changes: Sequence[tuple[int, VariantSpec | tuple[str, float]]] = (),
    seed: int = 0,
    start: datetime = SERIES_START,
    interval: timedelta = timedelta(hours=1),
    endpoint_id: str = "sim",
    prompt: str = "x",
) -> list[SeriesPoint]:
    """``n`` hourly probes of ``m``; each ``(index, variant)`` change applies from ``index`` on.

    Changes compound: the variant at a later index modifies the model already
    in effect.
    """
    if n < 0:
        raise InvalidInputError("series length must be >= 0")
    bounds = sorted(changes, key=lambda c: c[0])
    if any(not 0 < i < n for i, _ in bounds):
        raise InvalidInputError("change indices must lie inside the series")
    rng = np.random.default_rng([m.seed, _SERIES_STREAM, seed])
    segments = []
    model, begin = m, 0
    for index, variant in [*bounds, (n, None)]:
        segments.append(model.draw_dense(index - begin, rng))
        if variant is not None:
            model = apply_variant(model, variant)
        begin = index
    logprobs = np.concatenate([seg[0] for seg in segments])
    mask = np.concatenate([seg[1] for seg in segments])
    return [
        SeriesPoint(start + i * interval, dense_to_vector(logprobs[i], mask[i], m.top_k), endpoint_id, prompt)
        for i in range(n)
    ]


# -- prompts and multiple-choice questions ----------------------------------------


def prompt_view(m: SyntheticModel, prompt: str, noise_scale: float = 1.0) -> SyntheticModel:
    """The first-token distribution ``m`` shows for ``prompt``.

    Different prompts see the same logits under a prompt-specific frozen
    permutation; ``noise_scale`` multiplies the per-request noise.
    """
    rng = np.random.default_rng([m.seed, _PROMPT_STREAM, stable_hash(prompt)])
    perm = rng.permutation(m.vocab_size)
    return replace(m, base_logits=m.base_logits[perm], noise_sigma=m.noise_sigma * noise_scale)


LETTERS = "ABCD"


@dataclass(frozen=True)
class Question:
    id: str
    prompt: str
    gold: str
    option_tokens: tuple[int, ...] = field(default=(), repr=False)
    option_offsets: tuple[float, ...] = field(default=(), repr=False)


def synthetic_questions(count: int, vocab_size: int = 64, seed: int = 0, offset_scale: float = 1.0) -> list[Question]:
    """A bank of four-option questions answered from a model's logits."""
    rng = np.random.default_rng([seed, _QUESTION_STREAM])
    questions = []
    for q in range(count):
        options = rng.choice(vocab_size, size=4, replace=False)
        offsets = rng.normal(0.0, offset_scale, 4)
        gold = LETTERS[int(rng.integers(4))]
        questions.append(
            Question(f"q{q}", f"Question {q}: pick one of A, B, C, D.", gold, tuple(int(o) for o in options), tuple(offsets))
        )
    return questions


def answer_probabilities(m: SyntheticModel, questions: Sequence[Question], temperature: float = 0.1) -> np.ndarray:
    """Probability of each letter per question, shape ``(P, 4)``."""
    logits = np.array([m.base_logits[list(q.option_tokens)] + np.array(q.option_offsets) for q in questions])
    return softmax(logits / temperature, axis=-1)


def sample_answers(
    m: SyntheticModel,
    questions: Sequence[Question],
    n: int,
    rng: np.random.Generator,
    temperature: float = 0.1,
) -> list[list[str]]:
    """``n`` rows of free-text responses, one per question."""
    probs = answer_probabilities(m, questions, temperature)
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random((n, len(questions), 1))
    letters = np.minimum((u > cdf).sum(axis=-1), 3)
    return [[f" {LETTERS[i]}" for i in row] for row in letters]


def correct_probabilities(m: SyntheticModel, questions: Sequence[Question], temperature: float = 0.1) -> np.ndarray:
    probs = answer_probabilities(m, questions, temperature)
    gold = np.array([LETTERS.index(q.gold) for q in questions])
    return probs[np.arange(len(questions)), gold]
