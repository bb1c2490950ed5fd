import errno
import logging
from datetime import timedelta

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import lptrack.store as store_module
from factories import vector
from lptrack.errors import InvalidInputError, OrderingError, StorageError
from lptrack.simulator import SERIES_START, SyntheticModel, simulated_series
from lptrack.store import RequestParams, SeriesRecord, SeriesStore, Usage, group_points, read_archive
from lptrack.tokens import LogprobVector, TokenKey


def _record(i, endpoint="ep", prompt="x", entries=None):
    v = vector(entries or {"a": -0.25, "b": -1.5 - i * 1e-3})
    return SeriesRecord(endpoint, prompt, SERIES_START + timedelta(hours=i), v, RequestParams(len(v)), Usage(1, 1))


def test_round_trip(tmp_path):
    store = SeriesStore(tmp_path)
    record = SeriesRecord(
        "ep/1",
        "x",
        SERIES_START,
        LogprobVector(((TokenKey("é", b"e\xcc\x81"), -0.1), (TokenKey("z"), -0.1), (TokenKey("a"), -2.0)), 5),
        RequestParams(5, 1, 1.0),
        Usage(2, 1),
    )
    assert store.append(record) == 0
    assert store.read_records("ep/1", "x") == [record]
    assert store.read_series("ep/1", "x") == [record.to_point()]
    # ties keep their stored order and byte sequences survive
    assert store.read_series("ep/1", "x")[0].vector.tokens[0].canonical == b"e\xcc\x81"


def test_bulk_round_trip(tmp_path):
    points = simulated_series(SyntheticModel.random(seed=1), 10_000, seed=1)
    store = SeriesStore(tmp_path)
    for i, p in enumerate(points):
        assert store.append(SeriesRecord.from_point(p)) == i
    reloaded = SeriesStore(tmp_path).read_series("sim", "x")
    assert len(reloaded) == 10_000
    assert reloaded == points


def test_torn_tail_is_skipped_with_one_warning(tmp_path, caplog):
    store = SeriesStore(tmp_path)
    for i in range(3):
        store.append(_record(i))
    path = store.path_for("ep", "x")
    with open(path, "ab") as fh:
        fh.write(b'{"schema_version":1,"endpoint_id":"ep","pro')
    with caplog.at_level(logging.WARNING, logger="lptrack.store"):
        points = SeriesStore(tmp_path).read_series("ep", "x")
    assert len(points) == 3
    warnings = [r for r in caplog.records if "torn" in r.getMessage()]
    assert len(warnings) == 1


def test_append_after_crash_truncates_torn_tail(tmp_path, caplog):
    store = SeriesStore(tmp_path)
    store.append(_record(0))
    path = store.path_for("ep", "x")
    with open(path, "ab") as fh:
        fh.write(b'{"partial')
    fresh = SeriesStore(tmp_path)
    with caplog.at_level(logging.WARNING, logger="lptrack.store"):
        assert fresh.append(_record(1)) == 1
    assert any("truncating torn tail" in r.getMessage() for r in caplog.records)
    caplog.clear()
    with caplog.at_level(logging.WARNING, logger="lptrack.store"):
        assert [p.timestamp for p in fresh.read_series("ep", "x")] == [_record(0).timestamp, _record(1).timestamp]
    assert not caplog.records


def test_failed_write_leaves_no_partial_line(tmp_path, monkeypatch):
    store = SeriesStore(tmp_path)
    store.append(_record(0))
    real_open = open

    class Full:
        def __init__(self, fh):
            self.fh = fh

        def write(self, data):
            self.fh.write(data[: len(data) // 2])
            raise OSError(errno.ENOSPC, "No space left on device")

        def __getattr__(self, name):
            return getattr(self.fh, name)

        def __enter__(self):
            return self

        def __exit__(self, *exc):
            self.fh.close()

    monkeypatch.setattr(store_module, "open", lambda *a, **k: Full(real_open(*a, **k)), raising=False)
    with pytest.raises(StorageError):
        store.append(_record(1))
    monkeypatch.undo()
    assert len(store.read_series("ep", "x")) == 1
    assert store.path_for("ep", "x").read_bytes().endswith(b"\n")
    assert store.append(_record(1)) == 1


def test_ordering_enforced(tmp_path):
    store = SeriesStore(tmp_path)
    store.append(_record(5))
    with pytest.raises(OrderingError):
        store.append(_record(5))
    with pytest.raises(OrderingError):
        store.append(_record(4))
    # other series are unaffected
    store.append(_record(1, endpoint="other"))
    store.append(_record(1, prompt="y"))


def test_empty_and_range_queries(tmp_path):
    store = SeriesStore(tmp_path)
    assert store.read_series("nobody", "x") == []
    for i in range(10):
        store.append(_record(i))
    at = lambda i: SERIES_START + timedelta(hours=i)  # noqa: E731
    assert store.read_series("ep", "x", start=at(100)) == []
    assert store.read_series("ep", "x", end=at(0)) == []
    window = store.read_series("ep", "x", start=at(2), end=at(5))
    assert [p.timestamp for p in window] == [at(2), at(3), at(4)]


def test_interleaved_series_are_isolated(tmp_path):
    store = SeriesStore(tmp_path)
    for i in range(20):
        store.append(_record(i, endpoint="a"))
        store.append(_record(i, endpoint="b", entries={"z": -0.5}))
        store.append(_record(i, endpoint="a", prompt="hello"))
    a = store.read_series("a", "x")
    assert len(a) == 20 and all(p.endpoint_id == "a" and p.prompt == "x" for p in a)
    assert all(p.vector.tokens[0].text == "z" for p in store.read_series("b", "x"))
    assert store.series_keys() == [("a", "hello"), ("a", "x"), ("b", "x")]


def test_export_and_grouping(tmp_path):
    store = SeriesStore(tmp_path / "data")
    for i in range(4):
        store.append(_record(i, endpoint="a"))
        store.append(_record(i, endpoint="b"))
    archive = tmp_path / "all.jsonl"
    assert store.export(archive) == 8
    groups = group_points(read_archive(archive))
    assert sorted(groups) == [("a", "x"), ("b", "x")]
    assert groups[("a", "x")] == store.read_series("a", "x")


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-30, 0, allow_nan=False), min_size=1, max_size=6))
def test_reload_determinism(tmp_path_factory, logprobs):
    root = tmp_path_factory.mktemp("store")
    store = SeriesStore(root)
    entries = [(f"t{i}", lp) for i, lp in enumerate(logprobs)]
    store.append(_record(0, entries=entries))
    store.append(_record(1, entries=entries[::-1]))
    data = store.path_for("ep", "x").read_bytes()
    first = SeriesStore(root).read_records("ep", "x")
    copy = tmp_path_factory.mktemp("copy")
    target = SeriesStore(copy).path_for("ep", "x")
    target.parent.mkdir(parents=True)
    target.write_bytes(data)
    assert SeriesStore(copy).read_records("ep", "x") == first
    assert [r.vector.logprobs for r in first] == [tuple(sorted(logprobs, reverse=True))] * 2


def test_record_validation():
    with pytest.raises(InvalidInputError):
        SeriesRecord("", "x", SERIES_START, vector({"a": -1.0}), RequestParams(1))
    with pytest.raises(InvalidInputError):
        SeriesRecord("ep", "x", SERIES_START, vector({"a": -1.0, "b": -2.0}), RequestParams(1))
    with pytest.raises(InvalidInputError):
        SeriesRecord("ep", "x", SERIES_START.replace(tzinfo=None), vector({"a": -1.0}), RequestParams(1))


def test_corrupt_middle_line_is_an_error(tmp_path):
    store = SeriesStore(tmp_path)
    store.append(_record(0))
    path = store.path_for("ep", "x")
    path.write_bytes(b"not json\n" + path.read_bytes())
    with pytest.raises(StorageError):
        store.read_series("ep", "x")
