import json
import shutil
import time

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import striping_counts
from hcache.scheduler import Complement, RestorationPlan
from hcache.storage import (CHUNK_TOKENS, BufferFull, ChunkKey, DevicePool, DrainIncomplete,
                            DuplicateSession, Kind, SessionCorrupt, SessionIncomplete,
                            StateAbsent, StorageError, StorageManager, UnknownSession,
                            device_for_chunk, expected_chunks)

D = 16


def rows(n, seed=0, width=D):
    return np.random.default_rng(seed).standard_normal((n, width)).astype(np.float32)


def new_session(store, sid="s", n_layers=4, **kw):
    return store.create_session(sid, n_layers=n_layers, d_hidden=D, **kw)


def test_empty_session_finalizes(make_storage):
    store = make_storage()
    new_session(store)
    assert store.daemon_drain() == 0
    m = store.finalize_session("s")
    assert m.state == "final" and m.n_tokens == 0


def test_duplicate_and_unknown_ids(make_storage):
    store = make_storage()
    new_session(store)
    with pytest.raises(DuplicateSession):
        new_session(store)
    with pytest.raises(UnknownSession):
        store.snapshot_layer("nope", 0, rows(1))
    with pytest.raises(UnknownSession):
        store.open_session("nope")


def test_manifest_durable_before_any_chunk(make_storage):
    store = make_storage(n_devices=4)
    new_session(store, plan=RestorationPlan(3, 1, Complement.KV_OFFLOAD))
    record = json.loads(store._manifest_path("s").read_text())
    assert record["n_devices"] == 4
    assert RestorationPlan.from_record(record["plan"]) == RestorationPlan(3, 1, Complement.KV_OFFLOAD)
    assert record["chunk_tokens"] == CHUNK_TOKENS


def test_snapshot_accounting(make_storage):
    store = make_storage()
    new_session(store)
    data = rows(1024)
    assert store.snapshot_layer("s", 3, data) == 1024 * D * 4
    assert store.buffer.occupancy_bytes == 1024 * D * 4
    assert len(store.buffer) == 1
    data[:] = 0  # caller may reuse its buffer straight away
    store.flush()
    store.finalize_session("s")
    assert not np.any(store.read_layer("s", 3) == 0)


def test_decode_batch_is_one_call(make_storage):
    store = make_storage()
    for i in range(16):
        new_session(store, f"s{i}")
    batch = rows(16)
    store.snapshot_batch(2, [(f"s{i}", batch[i:i + 1]) for i in range(16)])
    assert len(store.buffer) == 16
    assert [r.session_id for r in store.buffer.pop_all()] == [f"s{i}" for i in range(16)]


def test_partial_chunk_stays_open_until_finalize(make_storage):
    store = make_storage()
    new_session(store)
    store.snapshot_layer("s", 0, rows(130))
    assert store.daemon_drain() == 2
    asm = store._sessions["s"].assemblers[(0, Kind.HIDDEN)]
    assert asm.count == 2
    store.finalize_session("s")
    assert [e[1] for e in store.manifest("s").chunks["0/hidden"]] == [64, 64, 2]
    assert store.chunk_count("s", 0, Kind.HIDDEN) == expected_chunks(130) == 3


def test_read_before_finalize_is_refused(make_storage):
    store = make_storage()
    new_session(store)
    store.snapshot_layer("s", 0, rows(64))
    store.flush()
    with pytest.raises(SessionIncomplete):
        store.read_layer("s", 0)


def test_round_trip_and_chunk_layout(make_storage):
    store = make_storage(n_devices=3)
    new_session(store, n_layers=6)
    data = rows(128, 1)
    kv = rows(128, 2, width=2 * D)
    store.snapshot_layer("s", 5, data)
    store.snapshot_layer("s", 5, kv, kind=Kind.KV)
    store.flush()
    store.finalize_session("s")
    assert np.array_equal(store.read_layer("s", 5), data)
    assert np.array_equal(store.read_layer("s", 5, Kind.KV), kv)
    # tokens consecutive, each token's elements contiguous, little-endian
    key = ChunkKey("s", 5, Kind.HIDDEN, 1)
    raw = store.chunk_path(key).read_bytes()
    assert raw == data[64:128].astype("<f4").tobytes()
    assert np.array_equal(store.read_chunk("s", 5, Kind.HIDDEN, 1), data[64:])


def test_absent_state_for_unstored_layer(make_storage):
    store = make_storage()
    new_session(store, plan=RestorationPlan(3, 1, Complement.RECOMPUTE))
    for layer in (1, 2, 3):
        store.snapshot_layer("s", layer, rows(70, layer))
    store.flush()
    store.finalize_session("s")
    with pytest.raises(StateAbsent):
        store.read_layer("s", 0)
    with pytest.raises(StateAbsent):
        store.read_layer("s", 1, Kind.KV)


def test_mismatched_layer_lengths_rejected(make_storage):
    store = make_storage()
    new_session(store)
    store.snapshot_layer("s", 0, rows(10))
    store.snapshot_layer("s", 1, rows(11))
    store.flush()
    with pytest.raises(StorageError):
        store.finalize_session("s")


def test_interleaved_sessions_match_serial(make_storage):
    chunks = [(sid, layer, rows(n, seed=hash((sid, layer, i)) % 1000))
              for i, n in enumerate([40, 50, 70, 3])
              for sid in ("a", "b") for layer in range(2)]

    def build(order):
        store = make_storage(n_devices=2)
        for sid in ("a", "b"):
            new_session(store, sid, n_layers=2)
        for sid, layer, data in order:
            store.snapshot_layer(sid, layer, data)
            store.daemon_drain()
        for sid in ("a", "b"):
            store.finalize_session(sid)
        return store

    mixed = build(chunks)
    serial = build(sorted(chunks, key=lambda c: c[0]))
    for sid in ("a", "b"):
        for layer in range(2):
            assert np.array_equal(mixed.read_layer(sid, layer), serial.read_layer(sid, layer))
            a = [p.read_bytes() for p in sorted(mixed._session_dir(sid, 0).glob("*.chk"))]
            b = [p.read_bytes() for p in sorted(serial._session_dir(sid, 0).glob("*.chk"))]
            assert a == b


def test_device_mapping_examples():
    assert [device_for_chunk(ChunkKey("s", 0, Kind.HIDDEN, c), 4) for c in range(8)] == \
        [0, 1, 2, 3, 0, 1, 2, 3]
    assert {device_for_chunk(ChunkKey("s", L, Kind.KV, c), 1)
            for L in range(5) for c in range(9)} == {0}
    assert device_for_chunk(ChunkKey("s", 1, Kind.HIDDEN, 0), 4) == 1


@given(n=st.integers(1, 5000), layer=st.integers(0, 80), devices=st.integers(1, 8))
def test_striping_balance(n, layer, devices):
    counts = [0] * devices
    for c in range(expected_chunks(n)):
        counts[device_for_chunk(ChunkKey("s", layer, Kind.HIDDEN, c), devices)] += 1
    assert counts == striping_counts(n, layer, devices)
    assert max(counts) - min(counts) <= 1


def test_striping_on_disk(make_storage):
    store = make_storage(n_devices=4)
    new_session(store)
    store.snapshot_layer("s", 2, rows(64 * 9))
    store.flush()
    store.finalize_session("s")
    on_disk = [len(list(store._session_dir("s", d).glob("2_hidden_*.chk"))) for d in range(4)]
    assert on_disk == striping_counts(64 * 9, 2, 4)


@given(data=st.lists(st.integers(1, 150), min_size=1, max_size=5), devices=st.integers(1, 4),
       elem=st.sampled_from([2, 4]))
def test_round_trip_property(tmp_path_factory, data, devices, elem):
    pool = DevicePool.under(tmp_path_factory.mktemp("rt"), devices)
    store = StorageManager(pool)
    store.create_session("s", n_layers=2, d_hidden=D, elem_bytes=elem)
    pieces = [rows(n, i) for i, n in enumerate(data)]
    for layer in range(2):
        for p in pieces:
            store.snapshot_layer("s", layer, p)
            store.daemon_drain()
    m = store.finalize_session("s")
    assert m.n_tokens == sum(data)
    want = np.concatenate(pieces).astype("<f2" if elem == 2 else "<f4")
    for layer in range(2):
        assert np.array_equal(store.read_layer("s", layer), want)
        assert len(m.chunks[f"{layer}/hidden"]) == expected_chunks(sum(data))


def test_finalize_twice_is_idempotent(make_storage):
    store = make_storage()
    new_session(store)
    store.snapshot_layer("s", 0, rows(5))
    store.flush()
    first = store.finalize_session("s").to_json()
    assert store.finalize_session("s").to_json() == first


def test_finalize_with_undrained_snapshots(make_storage):
    store = make_storage()
    new_session(store)
    store.snapshot_layer("s", 0, rows(5))
    with pytest.raises(DrainIncomplete):
        store.finalize_session("s")


def test_crash_before_finalize_is_detected(make_storage, tmp_path):
    pool = DevicePool.under(tmp_path / "crash", 2)
    store = StorageManager(pool)
    new_session(store)
    store.snapshot_layer("s", 0, rows(200))
    store.daemon_drain()
    # the process dies here; a fresh manager opens the same devices
    with pytest.raises(SessionIncomplete):
        StorageManager(DevicePool.under(tmp_path / "crash", 2)).open_session("s")
    store.finalize_session("s")
    again = StorageManager(DevicePool.under(tmp_path / "crash", 2))
    again.open_session("s")
    assert np.array_equal(again.read_layer("s", 0), store.read_layer("s", 0))


def test_write_failure_marks_session_corrupt(make_storage):
    store = make_storage(n_devices=2)
    new_session(store)
    shutil.rmtree(store._session_dir("s", 1))
    store.snapshot_layer("s", 1, rows(64))  # layer 1 chunk 0 lives on device 1
    store.daemon_drain()
    assert store.manifest("s").state == "corrupt"
    with pytest.raises(SessionCorrupt):
        store.finalize_session("s")
    with pytest.raises(SessionCorrupt):
        StorageManager(store.pool).open_session("s")


def test_truncated_chunk_is_reported(make_storage):
    store = make_storage()
    new_session(store)
    store.snapshot_layer("s", 0, rows(64))
    store.flush()
    store.finalize_session("s")
    path = store.chunk_path(ChunkKey("s", 0, Kind.HIDDEN, 0))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(SessionCorrupt):
        store.read_layer("s", 0)


def test_backpressure_without_daemon(make_storage):
    store = make_storage(buffer_bytes=64 * D * 4)
    new_session(store)
    store.snapshot_layer("s", 0, rows(64))
    with pytest.raises(BufferFull):
        store.snapshot_layer("s", 1, rows(1))
    assert store.buffer.stalls == 1
    store.daemon_drain()
    store.snapshot_layer("s", 1, rows(1))


def test_blocking_snapshot_waits_for_daemon(make_storage):
    store = make_storage(buffer_bytes=64 * D * 4)
    new_session(store)
    store.start_daemon(poll_s=0.001)
    try:
        for layer in range(4):
            for i in range(3):
                store.snapshot_layer("s", layer, rows(64, i), block=True)
    finally:
        store.stop_daemon()
    store.finalize_session("s")
    assert store.manifest("s").n_tokens == 192
    assert np.array_equal(store.read_layer("s", 3),
                          np.concatenate([rows(64, i) for i in range(3)]))


def test_snapshot_never_touches_devices(make_storage):
    slow = make_storage(bandwidth=1e3)  # a chunk write would take ~4 s
    new_session(slow)
    began = time.perf_counter()
    slow.snapshot_layer("s", 0, rows(64))
    assert time.perf_counter() - began < 0.5
    assert slow.chunks_written == 0
    assert not list(slow._session_dir("s", 0).glob("*.chk"))


def test_simulated_read_time(make_storage):
    store = make_storage(n_devices=4)
    new_session(store, n_layers=3)
    for n_chunks in (1, 4, 9, 13):
        sid = f"c{n_chunks}"
        new_session(store, sid, n_layers=3)
        store.snapshot_layer(sid, 2, rows(64 * n_chunks))
        store.flush()
        store.finalize_session(sid)
        chunk_bytes = 64 * D * 4
        b = 1e6
        assert store.simulated_read_seconds(sid, 2, Kind.HIDDEN, b) == pytest.approx(
            -(-n_chunks // 4) * chunk_bytes / b)


def test_wall_throttle_paces_reads(make_storage):
    bw = 2e6
    store = make_storage(n_devices=2, bandwidth=bw)
    new_session(store)
    store.snapshot_layer("s", 0, rows(64 * 8))
    store.flush()
    store.finalize_session("s")
    began = time.perf_counter()
    store.read_layer("s", 0)
    took = time.perf_counter() - began
    ideal = 4 * 64 * D * 4 / bw  # four chunks per device, devices in parallel
    assert ideal * 0.9 <= took <= ideal * 3 + 0.05


def test_reopen_appends_after_partial_tail(make_storage):
    store = make_storage(n_devices=2)
    new_session(store, n_layers=1)
    first, second = rows(100, 1), rows(50, 2)
    store.snapshot_layer("s", 0, first)
    store.flush()
    store.finalize_session("s")
    store.reopen_session("s")
    store.snapshot_layer("s", 0, second, start=100)
    store.flush()
    m = store.finalize_session("s")
    assert m.n_tokens == 150
    assert [e[1] for e in m.chunks["0/hidden"]] == [64, 64, 22]
    assert np.array_equal(store.read_layer("s", 0), np.concatenate([first, second]))
    store.reopen_session("s")
    with pytest.raises(ValueError):
        store.snapshot_layer("s", 0, rows(1), start=3)


def test_token_ids_round_trip(make_storage):
    store = make_storage()
    new_session(store)
    store.append_tokens("s", [5, 6, 7])
    store.append_tokens("s", np.array([8]))
    assert store.read_tokens("s").tolist() == [5, 6, 7, 8]


def test_pool_validation(tmp_path):
    with pytest.raises(ValueError):
        DevicePool([])
    with pytest.raises(ValueError):
        DevicePool.under(tmp_path, 2, [1.0])
    with pytest.raises(ValueError):
        DevicePool.under(tmp_path, 1, -5.0)
