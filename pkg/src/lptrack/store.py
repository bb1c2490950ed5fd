"""Append-only JSON-lines store for probe results.

Layout: ``{data_dir}/{quoted endpoint_id}/{sha256(prompt)[:16]}.jsonl``, one
record per line. Appends are flushed before they are acknowledged; a torn
final line left by a crash is skipped on read (with one warning) and cut off
before the next append.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterator, Sequence
from urllib.parse import quote, unquote

from .errors import InvalidInputError, OrderingError, StorageError
from .monitor import format_timestamp
from .tokens import LogprobVector, SeriesPoint, TokenKey

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


def parse_timestamp(text: str) -> datetime:
    ts = datetime.fromisoformat(text.replace("Z", "+00:00"))
    if ts.tzinfo is None:
        raise InvalidInputError(f"timestamp {text!r} has no UTC offset")
    return ts.astimezone(timezone.utc)


@dataclass(frozen=True)
class RequestParams:
    k: int
    max_tokens: int = 1
    temperature: float = 1.0


@dataclass(frozen=True)
class Usage:
    prompt_tokens: int
    completion_tokens: int


@dataclass(frozen=True)
class SeriesRecord:
    endpoint_id: str
    prompt: str
    timestamp: datetime
    vector: LogprobVector
    request_params: RequestParams
    usage: Usage | None = None
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self) -> None:
        if self.timestamp.tzinfo is None:
            raise InvalidInputError("record timestamps must be timezone-aware")
        if not self.endpoint_id:
            raise InvalidInputError("endpoint_id must be non-empty")
        # reload rebuilds the vector with requested_k = k, so it must fit
        if len(self.vector) > self.request_params.k:
            raise InvalidInputError(f"{len(self.vector)} entries exceed request k={self.request_params.k}")

    @classmethod
    def from_point(
        cls, point: SeriesPoint, params: RequestParams | None = None, usage: Usage | None = None
    ) -> SeriesRecord:
        params = params or RequestParams(point.vector.requested_k)
        if point.vector.requested_k > params.k:
            # a server may return more entries than asked for; keep the record reloadable
            params = replace(params, k=point.vector.requested_k)
        return cls(point.endpoint_id, point.prompt, point.timestamp, point.vector, params, usage)

    def to_point(self) -> SeriesPoint:
        return SeriesPoint(self.timestamp, self.vector, self.endpoint_id, self.prompt)

    def to_json(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "endpoint_id": self.endpoint_id,
            "prompt": self.prompt,
            "timestamp": format_timestamp(self.timestamp),
            "entries": [
                {"token": t.text, "bytes": None if t.bytes is None else list(t.bytes), "logprob": lp}
                for t, lp in self.vector.entries
            ],
            "request_params": {
                "k": self.request_params.k,
                "max_tokens": self.request_params.max_tokens,
                "temperature": self.request_params.temperature,
            },
            "usage": None
            if self.usage is None
            else {"prompt_tokens": self.usage.prompt_tokens, "completion_tokens": self.usage.completion_tokens},
        }

    @classmethod
    def from_json(cls, doc: dict) -> SeriesRecord:
        try:
            if doc["schema_version"] != SCHEMA_VERSION:
                raise InvalidInputError(f"unsupported schema_version {doc['schema_version']!r}")
            entries = [
                (TokenKey(e["token"], None if e.get("bytes") is None else bytes(e["bytes"])), float(e["logprob"]))
                for e in doc["entries"]
            ]
            params = doc["request_params"]
            usage = doc.get("usage")
            return cls(
                endpoint_id=doc["endpoint_id"],
                prompt=doc["prompt"],
                timestamp=parse_timestamp(doc["timestamp"]),
                # stored order is authoritative; equal logprobs keep it
                vector=LogprobVector(tuple(entries), int(params["k"])),
                request_params=RequestParams(int(params["k"]), int(params["max_tokens"]), float(params["temperature"])),
                usage=None if usage is None else Usage(int(usage["prompt_tokens"]), int(usage["completion_tokens"])),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidInputError(f"malformed record: {exc}") from exc


@dataclass(frozen=True)
class _FileState:
    size: int
    count: int
    last: datetime | None


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:16]


class SeriesStore:
    """File-backed store; one writer per series, any number of readers.

    Parameters
    ----------
    data_dir
        Root directory, created on demand.
    fsync
        Call ``os.fsync`` after each append, not just flush.
    """

    def __init__(self, data_dir: str | Path, fsync: bool = False):
        self.root = Path(data_dir)
        self.fsync = fsync
        self._states: dict[Path, _FileState] = {}
        self._locks: dict[Path, threading.Lock] = {}
        self._guard = threading.Lock()

    def path_for(self, endpoint_id: str, prompt: str) -> Path:
        return self.root / quote(endpoint_id, safe="") / f"{prompt_hash(prompt)}.jsonl"

    def _lock(self, path: Path) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(path, threading.Lock())

    def _state(self, path: Path) -> _FileState:
        """Intact size, record count and last timestamp, rescanning if the file changed."""
        state = self._states.get(path)
        try:
            size = path.stat().st_size
        except FileNotFoundError:
            size = 0
        if state is None or state.size != size:
            records, valid = _scan(path, warn=False)
            state = _FileState(valid, len(records), records[-1].timestamp if records else None)
            self._states[path] = state
        return state

    def append(self, record: SeriesRecord) -> int:
        """Append one record; returns its line index within the series file."""
        path = self.path_for(record.endpoint_id, record.prompt)
        line = (json.dumps(record.to_json(), sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")
        with self._lock(path):
            state = self._state(path)
            if state.last is not None and record.timestamp <= state.last:
                raise OrderingError(
                    f"timestamp {format_timestamp(record.timestamp)} is not after {format_timestamp(state.last)}"
                )
            try:
                path.parent.mkdir(parents=True, exist_ok=True)
                with open(path, "r+b" if path.exists() else "wb") as fh:
                    fh.seek(0, os.SEEK_END)
                    if fh.tell() > state.size:
                        log.warning("truncating torn tail of %s", path)
                        fh.truncate(state.size)
                    fh.seek(state.size)
                    try:
                        fh.write(line)
                        fh.flush()
                        if self.fsync:
                            os.fsync(fh.fileno())
                    except OSError:
                        # never leave a partial line behind an acknowledged record
                        fh.truncate(state.size)
                        raise
            except OSError as exc:
                self._states.pop(path, None)
                raise StorageError(f"append to {path} failed: {exc}") from exc
            index = state.count
            self._states[path] = _FileState(state.size + len(line), state.count + 1, record.timestamp)
            return index

    def read_series(
        self,
        endpoint_id: str,
        prompt: str,
        start: datetime | None = None,
        end: datetime | None = None,
    ) -> list[SeriesPoint]:
        """Points with ``start <= timestamp < end``, in timestamp order."""
        return [r.to_point() for r in self.read_records(endpoint_id, prompt, start, end)]

    def read_records(
        self,
        endpoint_id: str,
        prompt: str,
        start: datetime | None = None,
        end: datetime | None = None,
    ) -> list[SeriesRecord]:
        records, _ = _scan(self.path_for(endpoint_id, prompt))
        # distinct prompts could share a hash prefix; keep only this series
        return [
            r
            for r in records
            if r.endpoint_id == endpoint_id
            and r.prompt == prompt
            and (start is None or r.timestamp >= start)
            and (end is None or r.timestamp < end)
        ]

    def series_keys(self) -> list[tuple[str, str]]:
        keys = set()
        for path in sorted(self.root.glob("*/*.jsonl")):
            records, _ = _scan(path, warn=False)
            endpoint = unquote(path.parent.name)
            keys.update((endpoint, r.prompt) for r in records)
        return sorted(keys)

    def iter_records(self) -> Iterator[SeriesRecord]:
        for endpoint, prompt in self.series_keys():
            yield from self.read_records(endpoint, prompt)

    def export(self, out: str | Path) -> int:
        """Write every record to one flat JSON-lines archive; returns the record count."""
        n = 0
        with open(out, "w", encoding="utf-8") as fh:
            for record in self.iter_records():
                fh.write(json.dumps(record.to_json(), sort_keys=True, separators=(",", ":")) + "\n")
                n += 1
        return n


def _scan(path: Path, warn: bool = True) -> tuple[list[SeriesRecord], int]:
    """Parse a series file; returns records and the byte length of the intact prefix."""
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        return [], 0
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    records = []
    offset = 0
    while offset < len(data):
        newline = data.find(b"\n", offset)
        if newline < 0:
            if warn:
                log.warning("%s: skipped torn final line (%d bytes lost)", path, len(data) - offset)
            break
        raw = data[offset:newline]
        try:
            records.append(SeriesRecord.from_json(json.loads(raw)))
        except (json.JSONDecodeError, UnicodeDecodeError, InvalidInputError) as exc:
            raise StorageError(f"{path}: corrupt record at byte {offset}: {exc}") from exc
        offset = newline + 1
    return records, offset


def read_archive(path: str | Path) -> list[SeriesRecord]:
    """Load an archive written by :meth:`SeriesStore.export`."""
    with open(path, "rb") as fh:
        return [SeriesRecord.from_json(json.loads(line)) for line in fh if line.strip()]


def group_points(records: Sequence[SeriesRecord]) -> dict[tuple[str, str], list[SeriesPoint]]:
    """Split records into per-(endpoint, prompt) point lists, each in timestamp order."""
    groups: dict[tuple[str, str], list[SeriesPoint]] = {}
    for r in sorted(records, key=lambda r: (r.endpoint_id, r.prompt, r.timestamp)):
        groups.setdefault((r.endpoint_id, r.prompt), []).append(r.to_point())
    return groups
