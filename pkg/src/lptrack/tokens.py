"""Token identity and single-response logprob containers."""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime
from typing import Iterable, Sequence

from .errors import InvalidInputError


@dataclass(frozen=True, eq=False)
class TokenKey:
    """A vocabulary entry as reported by an API.

    Identity is the raw byte sequence when the API supplied one, otherwise the
    UTF-8 encoding of ``text``. Two keys with the same bytes but different
    decoded text compare equal.
    """

    text: str
    bytes: bytes | None = None

    @property
    def canonical(self) -> bytes:
        if self.bytes is not None:
            return self.bytes
        return self.text.encode("utf-8")

    def text_only(self) -> TokenKey:
        return TokenKey(self.text)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TokenKey):
            return NotImplemented
        return self.canonical == other.canonical

    def __lt__(self, other: TokenKey) -> bool:
        return self.canonical < other.canonical

    def __hash__(self) -> int:
        return hash(self.canonical)

    def __repr__(self) -> str:
        if self.bytes is None or self.bytes == self.text.encode("utf-8"):
            return f"TokenKey({self.text!r})"
        return f"TokenKey({self.text!r}, {self.bytes!r})"


def as_token(token: TokenKey | str) -> TokenKey:
    return token if isinstance(token, TokenKey) else TokenKey(token)


@dataclass(frozen=True)
class LogprobVector:
    """Top-k ``(token, logprob)`` pairs for the first output token.

    Use :meth:`from_pairs` to build one from unsorted API output; the
    constructor only validates.
    """

    entries: tuple[tuple[TokenKey, float], ...]
    requested_k: int

    def __post_init__(self) -> None:
        if self.requested_k < 1:
            raise InvalidInputError(f"requested_k must be positive, got {self.requested_k}")
        if not self.entries:
            raise InvalidInputError("logprob vector has no entries")
        if len(self.entries) > self.requested_k:
            raise InvalidInputError(
                f"{len(self.entries)} entries exceed requested_k={self.requested_k}"
            )
        seen = set()
        previous = 0.0
        for token, logprob in self.entries:
            if not isinstance(token, TokenKey):
                raise InvalidInputError(f"expected TokenKey, got {type(token).__name__}")
            if math.isnan(logprob) or math.isinf(logprob) or logprob > 0:
                raise InvalidInputError(f"logprob for {token!r} must be finite and <= 0, got {logprob}")
            if logprob > previous:
                raise InvalidInputError("entries must be sorted by logprob, descending")
            if token in seen:
                raise InvalidInputError(f"duplicate token {token!r}")
            seen.add(token)
            previous = logprob

    @classmethod
    def from_pairs(
        cls,
        pairs: Iterable[tuple[TokenKey | str, float]],
        requested_k: int | None = None,
    ) -> LogprobVector:
        """Sort ``pairs`` descending by logprob; ties keep their input order."""
        items = [(as_token(t), float(lp)) for t, lp in pairs]
        # sorted() is stable, so equal logprobs keep API order
        items = sorted(items, key=lambda item: -item[1])
        return cls(tuple(items), requested_k if requested_k is not None else max(len(items), 1))

    @property
    def tokens(self) -> tuple[TokenKey, ...]:
        return tuple(t for t, _ in self.entries)

    @property
    def logprobs(self) -> tuple[float, ...]:
        return tuple(lp for _, lp in self.entries)

    def as_dict(self) -> dict[TokenKey, float]:
        return dict(self.entries)

    def min_logprob(self) -> float:
        return self.entries[-1][1]

    def text_only(self) -> LogprobVector:
        kept: dict[TokenKey, float] = {}
        for token, logprob in self.entries:
            # distinct byte tokens can decode to the same text; keep the first (largest)
            kept.setdefault(token.text_only(), logprob)
        return LogprobVector.from_pairs(kept.items(), self.requested_k)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class SampleSet:
    """``N`` responses drawn from one (endpoint, prompt) with fixed request parameters."""

    samples: tuple[LogprobVector, ...]
    prompt: str = ""
    source_label: str = ""

    def __post_init__(self) -> None:
        if not isinstance(self.samples, tuple):
            object.__setattr__(self, "samples", tuple(self.samples))
        if not self.samples:
            raise InvalidInputError(f"sample set {self.source_label!r} is empty")

    @classmethod
    def of(cls, samples: Sequence[LogprobVector], prompt: str = "", source_label: str = "") -> SampleSet:
        return cls(tuple(samples), prompt, source_label)

    def text_only(self) -> SampleSet:
        """Drop byte identities so tokens match on decoded text alone."""
        return SampleSet(tuple(v.text_only() for v in self.samples), self.prompt, self.source_label)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)


@dataclass(frozen=True)
class SeriesPoint:
    """One probe result in a monitored (endpoint, prompt) series."""

    timestamp: datetime
    vector: LogprobVector
    endpoint_id: str = ""
    prompt: str = ""

    def __post_init__(self) -> None:
        if self.timestamp.tzinfo is None:
            raise InvalidInputError("series timestamps must be timezone-aware (UTC)")
