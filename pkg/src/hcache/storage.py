"""Chunked, striped persistence of per-layer states.

Each layer's rows are cut into 64-token chunks; chunk ``c`` of layer ``l``
lives on device ``(l + c) % n_devices``.  Saving is two-stage: the caller's
rows are copied into a bounded :class:`SnapshotBuffer` in one bulk copy
(stage 1), and a drain pass (run inline or by a background daemon) appends
them to per-(session, layer, kind) chunk assemblers, writing each chunk with a
single contiguous write once it fills (stage 2).  Partial chunks are written
as-is at finalize.

On-disk layout::

    <device_root>/<session_id>/<layer>_<kind>_<chunk_idx>.chk   raw little-endian rows
    <device0_root>/<session_id>/manifest.json                   session manifest
    <device0_root>/<session_id>/tokens.bin                      int32 token ids
"""

from __future__ import annotations

import enum
import json
import logging
import math
import os
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .scheduler import RestorationPlan

__all__ = [
    "CHUNK_TOKENS",
    "Kind",
    "ChunkKey",
    "DevicePool",
    "SessionManifest",
    "SnapshotRecord",
    "SnapshotBuffer",
    "StorageManager",
    "device_for_chunk",
    "StorageError",
    "DuplicateSession",
    "UnknownSession",
    "BufferFull",
    "DrainIncomplete",
    "SessionIncomplete",
    "SessionCorrupt",
    "StateAbsent",
]

log = logging.getLogger(__name__)

CHUNK_TOKENS = 64
DEFAULT_BUFFER_BYTES = 256 * 1024 * 1024


class StorageError(Exception):
    pass


class DuplicateSession(StorageError):
    pass


class UnknownSession(StorageError):
    pass


class BufferFull(StorageError):
    """Snapshot buffer has no room; the caller must stall or drain."""


class DrainIncomplete(StorageError):
    pass


class SessionIncomplete(StorageError):
    """Session was never finalized (e.g. the writer died)."""


class SessionCorrupt(StorageError):
    pass


class StateAbsent(StorageError):
    """The requested layer/kind was never stored (e.g. a recomputed layer)."""


class Kind(enum.Enum):
    HIDDEN = "hidden"
    KV = "kv"

    def width(self, d_hidden: int) -> int:
        return d_hidden if self is Kind.HIDDEN else 2 * d_hidden


@dataclass(frozen=True)
class ChunkKey:
    session_id: str
    layer: int
    kind: Kind
    chunk_idx: int

    @property
    def token_range(self) -> tuple[int, int]:
        start = self.chunk_idx * CHUNK_TOKENS
        return start, start + CHUNK_TOKENS

    @property
    def filename(self) -> str:
        return f"{self.layer}_{self.kind.value}_{self.chunk_idx}.chk"


def device_for_chunk(key: ChunkKey, n_devices: int) -> int:
    """Round-robin placement, with the starting device rotated by layer."""
    return (key.layer + key.chunk_idx) % n_devices


class _Throttle:
    """Serializes transfers on one device at a fixed byte rate (wall clock)."""

    def __init__(self, bandwidth: float | None):
        self.bandwidth = bandwidth
        self._lock = threading.Lock()
        self._free_at = 0.0

    def consume(self, nbytes: int) -> None:
        if self.bandwidth is None:
            return
        with self._lock:
            start = max(time.perf_counter(), self._free_at)
            self._free_at = start + nbytes / self.bandwidth
            wake = self._free_at
        delay = wake - time.perf_counter()
        if delay > 0:
            time.sleep(delay)


class DevicePool:
    """Ordered storage roots standing in for SSDs, each with an optional throttle."""

    def __init__(self, roots, bandwidth=None):
        self.roots = [Path(r) for r in roots]
        if not self.roots:
            raise ValueError("a device pool needs at least one device")
        if bandwidth is None or isinstance(bandwidth, (int, float)):
            bandwidth = [bandwidth] * len(self.roots)
        if len(bandwidth) != len(self.roots):
            raise ValueError("one bandwidth per device")
        for bw in bandwidth:
            if bw is not None and not bw > 0:
                raise ValueError("device bandwidth must be positive")
        self.bandwidth = list(bandwidth)
        self._throttles = [_Throttle(bw) for bw in self.bandwidth]
        for root in self.roots:
            root.mkdir(parents=True, exist_ok=True)

    @classmethod
    def under(cls, base, n_devices: int, bandwidth=None) -> "DevicePool":
        base = Path(base)
        return cls([base / f"dev{i}" for i in range(n_devices)], bandwidth)

    @property
    def device_count(self) -> int:
        return len(self.roots)

    def throttle(self, device: int) -> _Throttle:
        return self._throttles[device]


@dataclass
class SessionManifest:
    session_id: str
    config_hash: str
    n_layers: int
    d_hidden: int
    elem_bytes: int
    n_devices: int
    plan: RestorationPlan | None = None
    n_tokens: int = 0
    n_token_ids: int = 0
    chunk_tokens: int = CHUNK_TOKENS
    state: str = "open"
    # "layer/kind" -> [[chunk_idx, n_tokens, device], ...] ordered by chunk_idx
    chunks: dict = field(default_factory=dict)

    def chunk_list(self, layer: int, kind: Kind) -> list:
        return self.chunks.get(f"{layer}/{kind.value}", [])

    def stored_tokens(self, layer: int, kind: Kind) -> int:
        return sum(entry[1] for entry in self.chunk_list(layer, kind))

    def to_json(self) -> str:
        doc = {
            "session_id": self.session_id,
            "state": self.state,
            "config_hash": self.config_hash,
            "n_layers": self.n_layers,
            "d_hidden": self.d_hidden,
            "elem_bytes": self.elem_bytes,
            "n_devices": self.n_devices,
            "chunk_tokens": self.chunk_tokens,
            "n_tokens": self.n_tokens,
            "n_token_ids": self.n_token_ids,
            "plan": self.plan.to_record() if self.plan else None,
            "chunks": self.chunks,
        }
        return json.dumps(doc, indent=1, sort_keys=False)

    @classmethod
    def from_json(cls, text: str) -> "SessionManifest":
        doc = json.loads(text)
        plan = doc.pop("plan")
        return cls(plan=RestorationPlan.from_record(plan) if plan else None, **doc)


@dataclass
class SnapshotRecord:
    session_id: str
    layer: int
    kind: Kind
    start: int
    rows: np.ndarray

    @property
    def nbytes(self) -> int:
        return self.rows.nbytes


class SnapshotBuffer:
    """Bounded FIFO of snapshot records awaiting chunk assembly."""

    def __init__(self, capacity_bytes: int = DEFAULT_BUFFER_BYTES):
        if capacity_bytes <= 0:
            raise ValueError("capacity must be positive")
        self.capacity_bytes = capacity_bytes
        self._records: deque[SnapshotRecord] = deque()
        self._bytes = 0
        self._cond = threading.Condition()
        self.stalls = 0
        self.stall_seconds = 0.0

    @property
    def occupancy_bytes(self) -> int:
        return self._bytes

    def __len__(self) -> int:
        return len(self._records)

    def put(self, records: list[SnapshotRecord], block: bool = False,
            timeout: float | None = None) -> None:
        """Enqueue ``records`` atomically.

        A full buffer raises :class:`BufferFull` unless ``block`` is set, in
        which case the caller waits for the drain (counted as a stall).
        """
        total = sum(r.nbytes for r in records)
        if total > self.capacity_bytes:
            raise BufferFull(f"{total} bytes can never fit a {self.capacity_bytes}-byte buffer")
        with self._cond:
            if self._bytes + total > self.capacity_bytes:
                self.stalls += 1
                if not block:
                    raise BufferFull(
                        f"snapshot buffer full ({self._bytes}/{self.capacity_bytes} bytes)"
                    )
                began = time.perf_counter()
                ok = self._cond.wait_for(
                    lambda: self._bytes + total <= self.capacity_bytes, timeout
                )
                self.stall_seconds += time.perf_counter() - began
                if not ok:
                    raise BufferFull("timed out waiting for snapshot buffer space")
            self._records.extend(records)
            self._bytes += total
            self._cond.notify_all()

    def pop_all(self) -> list[SnapshotRecord]:
        with self._cond:
            out = list(self._records)
            self._records.clear()
            self._bytes = 0
            self._cond.notify_all()
            return out

    def wait_nonempty(self, timeout: float) -> bool:
        with self._cond:
            return self._cond.wait_for(lambda: bool(self._records), timeout)

    def has_pending(self, session_id: str) -> bool:
        with self._cond:
            return any(r.session_id == session_id for r in self._records)


class _Assembler:
    """Open chunk for one (session, layer, kind)."""

    def __init__(self, chunk_idx: int = 0):
        self.chunk_idx = chunk_idx
        self.parts: list[np.ndarray] = []
        self.count = 0

    def take(self, rows: np.ndarray) -> np.ndarray:
        room = CHUNK_TOKENS - self.count
        head, rest = rows[:room], rows[room:]
        if len(head):
            self.parts.append(head)
            self.count += len(head)
        return rest

    @property
    def full(self) -> bool:
        return self.count == CHUNK_TOKENS

    def payload(self) -> np.ndarray:
        return np.concatenate(self.parts) if len(self.parts) > 1 else self.parts[0]

    def advance(self) -> None:
        self.chunk_idx += 1
        self.parts, self.count = [], 0


@dataclass
class _Session:
    manifest: SessionManifest
    assemblers: dict = field(default_factory=dict)
    enqueued: dict = field(default_factory=dict)


class StorageManager:
    """Owns the sessions persisted on one :class:`DevicePool`."""

    def __init__(self, pool: DevicePool, buffer_bytes: int = DEFAULT_BUFFER_BYTES):
        self.pool = pool
        self._root_strs = [str(r) for r in pool.roots]
        self.buffer = SnapshotBuffer(buffer_bytes)
        self._sessions: dict[str, _Session] = {}
        self._drain_lock = threading.RLock()
        self._daemon: threading.Thread | None = None
        self._stop = threading.Event()
        self.chunks_written = 0
        self.bytes_written = 0

    # -- paths -------------------------------------------------------------

    def _session_dir(self, session_id: str, device: int) -> Path:
        return self.pool.roots[device] / session_id

    def _dir_str(self, session_id: str, device: int) -> str:
        return os.path.join(self._root_strs[device], session_id)

    def _manifest_path(self, session_id: str) -> Path:
        return self._session_dir(session_id, 0) / "manifest.json"

    def chunk_path(self, key: ChunkKey, device: int | None = None) -> Path:
        if device is None:
            device = device_for_chunk(key, self.pool.device_count)
        return self._session_dir(key.session_id, device) / key.filename

    def _write_manifest(self, manifest: SessionManifest) -> None:
        path = self._manifest_path(manifest.session_id)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(manifest.to_json())
        os.replace(tmp, path)

    def _get(self, session_id: str) -> _Session:
        try:
            return self._sessions[session_id]
        except KeyError:
            raise UnknownSession(session_id) from None

    def manifest(self, session_id: str) -> SessionManifest:
        return self._get(session_id).manifest

    def _dtype(self, manifest: SessionManifest) -> np.dtype:
        return np.dtype("<f2" if manifest.elem_bytes == 2 else "<f4")

    # -- lifecycle ---------------------------------------------------------

    def create_session(self, session_id: str, *, n_layers: int, d_hidden: int,
                       elem_bytes: int = 4, plan: RestorationPlan | None = None,
                       config_hash: str = "") -> SessionManifest:
        if session_id in self._sessions or self._manifest_path(session_id).exists():
            raise DuplicateSession(session_id)
        if plan is not None and plan.n_layers != n_layers:
            raise ValueError("plan does not cover the model's layers")
        manifest = SessionManifest(
            session_id=session_id, config_hash=config_hash, n_layers=n_layers,
            d_hidden=d_hidden, elem_bytes=elem_bytes, n_devices=self.pool.device_count,
            plan=plan,
        )
        for device in range(self.pool.device_count):
            self._session_dir(session_id, device).mkdir(parents=True, exist_ok=False)
        self._write_manifest(manifest)
        self._sessions[session_id] = _Session(manifest)
        return manifest

    def open_session(self, session_id: str) -> SessionManifest:
        """Load a session persisted by an earlier manager (e.g. after a restart)."""
        path = self._manifest_path(session_id)
        if not path.exists():
            raise UnknownSession(session_id)
        manifest = SessionManifest.from_json(path.read_text())
        if manifest.state == "corrupt":
            raise SessionCorrupt(session_id)
        if manifest.state != "final":
            raise SessionIncomplete(f"session {session_id} was never finalized")
        if manifest.n_devices != self.pool.device_count:
            raise StorageError("session was striped over a different device count")
        self._sessions[session_id] = _Session(manifest)
        return manifest

    def reopen_session(self, session_id: str) -> SessionManifest:
        """Make a finalized session appendable again, reloading partial tail chunks."""
        sess = self._get(session_id)
        manifest = sess.manifest
        if manifest.state != "final":
            raise SessionIncomplete(f"session {session_id} is not finalized")
        for name, entries in manifest.chunks.items():
            layer_s, kind_s = name.split("/")
            layer, kind = int(layer_s), Kind(kind_s)
            stored = sum(e[1] for e in entries)
            sess.enqueued[(layer, kind)] = stored
            chunk_idx, count, device = entries[-1]
            if count < CHUNK_TOKENS:
                asm = _Assembler(chunk_idx)
                asm.take(self._read_chunk_file(manifest, layer, kind, chunk_idx, count, device))
                entries.pop()
            else:
                asm = _Assembler(chunk_idx + 1)
            sess.assemblers[(layer, kind)] = asm
        manifest.state = "open"
        self._write_manifest(manifest)
        return manifest

    def finalize_session(self, session_id: str) -> SessionManifest:
        """Flush partial chunks and persist the full chunk directory."""
        with self._drain_lock:
            sess = self._get(session_id)
            manifest = sess.manifest
            if manifest.state == "corrupt":
                raise SessionCorrupt(session_id)
            if manifest.state == "final":
                return manifest
            if self.buffer.has_pending(session_id):
                raise DrainIncomplete(f"session {session_id} has undrained snapshots")
            for (layer, kind), asm in sorted(sess.assemblers.items(),
                                             key=lambda kv: (kv[0][0], kv[0][1].value)):
                if asm.count:
                    self._flush_chunk(sess, layer, kind, asm, advance=False)
            counts = {name: sum(e[1] for e in entries)
                      for name, entries in manifest.chunks.items()}
            if manifest.n_token_ids:
                expected = manifest.n_token_ids
            else:
                expected = max(counts.values(), default=0)
            bad = {name: c for name, c in counts.items() if c != expected}
            if bad:
                raise StorageError(f"layers disagree on token count {expected}: {bad}")
            if manifest.state == "corrupt":
                raise SessionCorrupt(session_id)
            manifest.n_tokens = expected
            manifest.state = "final"
            self._write_manifest(manifest)
            return manifest

    # -- stage 1 -----------------------------------------------------------

    def _record(self, sess: _Session, layer: int, kind: Kind, rows,
                start: int | None) -> tuple:
        manifest = sess.manifest
        if manifest.state == "final":
            raise StorageError(f"session {manifest.session_id} is finalized; reopen it first")
        if not 0 <= layer < manifest.n_layers:
            raise ValueError(f"layer {layer} out of range")
        rows = np.asarray(rows)
        width = kind.width(manifest.d_hidden)
        if rows.ndim != 2 or rows.shape[1] != width or rows.shape[0] < 1:
            raise ValueError(f"expected (n>=1, {width}) rows, got {rows.shape}")
        expected = sess.enqueued.get((layer, kind), 0)
        if start is not None and start != expected:
            raise ValueError(f"rows start at {start} but layer {layer} has {expected} tokens")
        return expected, rows

    def snapshot_layer(self, session_id: str, layer: int, rows, kind: Kind = Kind.HIDDEN,
                       start: int | None = None, block: bool = False) -> int:
        """Stage 1: bulk-copy ``rows`` into the snapshot buffer; returns bytes queued.

        No device IO happens here; ``rows`` may be reused as soon as this returns.
        """
        return self.snapshot_batch(layer, [(session_id, rows, start)], kind, block)

    def snapshot_batch(self, layer: int, entries, kind: Kind = Kind.HIDDEN,
                       block: bool = False) -> int:
        """Snapshot one layer's rows for several sessions with a single bulk copy.

        ``entries`` holds ``(session_id, rows)`` or ``(session_id, rows, start)``.
        """
        prepared = []
        for entry in entries:
            session_id, rows = entry[0], entry[1]
            start = entry[2] if len(entry) > 2 else None
            sess = self._get(session_id)
            begin, rows = self._record(sess, layer, kind, rows, start)
            prepared.append((sess, begin, rows))
        if not prepared:
            return 0
        dtype = self._dtype(prepared[0][0].manifest)
        if any(self._dtype(s.manifest) != dtype for s, _, _ in prepared):
            raise ValueError("sessions in one batch must share an element size")
        bulk = np.concatenate([rows for _, _, rows in prepared]).astype(dtype, copy=True)
        records, offset = [], 0
        for sess, begin, rows in prepared:
            n = rows.shape[0]
            records.append(SnapshotRecord(sess.manifest.session_id, layer, kind, begin,
                                          bulk[offset:offset + n]))
            offset += n
        self.buffer.put(records, block=block and self._daemon is not None)
        for sess, begin, rows in prepared:
            sess.enqueued[(layer, kind)] = begin + rows.shape[0]
        return bulk.nbytes

    def append_tokens(self, session_id: str, tokens) -> None:
        """Persist original token ids (needed by recomputed layers)."""
        manifest = self._get(session_id).manifest
        arr = np.asarray(tokens, dtype="<i4").reshape(-1)
        with open(self._session_dir(session_id, 0) / "tokens.bin", "ab") as fh:
            fh.write(arr.tobytes())
        manifest.n_token_ids += arr.size

    def read_tokens(self, session_id: str) -> np.ndarray:
        manifest = self._get(session_id).manifest
        path = self._session_dir(session_id, 0) / "tokens.bin"
        if not path.exists():
            return np.zeros(0, np.int64)
        data = np.frombuffer(path.read_bytes(), dtype="<i4")[: manifest.n_token_ids]
        return data.astype(np.int64)

    # -- stage 2 -----------------------------------------------------------

    def daemon_drain(self) -> int:
        """Move queued records into chunk assemblers; returns chunks written."""
        with self._drain_lock:
            flushed = 0
            for rec in self.buffer.pop_all():
                sess = self._sessions.get(rec.session_id)
                if sess is None or sess.manifest.state == "corrupt":
                    continue
                asm = sess.assemblers.setdefault((rec.layer, rec.kind), _Assembler())
                rest = rec.rows
                while len(rest):
                    rest = asm.take(rest)
                    if asm.full:
                        if not self._flush_chunk(sess, rec.layer, rec.kind, asm, advance=True):
                            break
                        flushed += 1
            return flushed

    def _flush_chunk(self, sess: _Session, layer: int, kind: Kind, asm: _Assembler,
                     advance: bool) -> bool:
        manifest = sess.manifest
        key = ChunkKey(manifest.session_id, layer, kind, asm.chunk_idx)
        device = device_for_chunk(key, self.pool.device_count)
        payload = asm.payload().astype(self._dtype(manifest), copy=False).tobytes()
        try:
            self.pool.throttle(device).consume(len(payload))
            with open(self.chunk_path(key, device), "wb") as fh:
                fh.write(payload)
        except OSError as exc:
            log.error("chunk write failed for %s: %s", key, exc)
            manifest.state = "corrupt"
            try:
                self._write_manifest(manifest)
            except OSError:
                pass
            return False
        entries = manifest.chunks.setdefault(f"{layer}/{kind.value}", [])
        entry = [asm.chunk_idx, asm.count, device]
        if entries and entries[-1][0] == asm.chunk_idx:
            entries[-1] = entry
        else:
            entries.append(entry)
        self.chunks_written += 1
        self.bytes_written += len(payload)
        if advance:
            asm.advance()
        return True

    def flush(self) -> int:
        """Drain until the snapshot buffer is empty."""
        total = 0
        while len(self.buffer):
            total += self.daemon_drain()
        return total

    def start_daemon(self, poll_s: float = 0.01) -> None:
        if self._daemon is not None:
            return
        self._stop.clear()

        def loop():
            while not self._stop.is_set():
                if self.buffer.wait_nonempty(poll_s):
                    self.daemon_drain()

        self._daemon = threading.Thread(target=loop, name="hcache-drain", daemon=True)
        self._daemon.start()

    def stop_daemon(self) -> None:
        if self._daemon is None:
            return
        self._stop.set()
        self._daemon.join()
        self._daemon = None
        self.flush()

    # -- reads -------------------------------------------------------------

    def _read_chunk_file(self, manifest, layer, kind, chunk_idx, count, device,
                         out: np.ndarray | None = None) -> np.ndarray:
        """Read one chunk, straight into ``out`` when given (count x width)."""
        key = ChunkKey(manifest.session_id, layer, kind, chunk_idx)
        width = kind.width(manifest.d_hidden)
        dtype = self._dtype(manifest)
        if out is None:
            out = np.empty((count, width), dtype)
        self.pool.throttle(device).consume(out.nbytes)
        path = os.path.join(self._dir_str(manifest.session_id, device), key.filename)
        fd = os.open(path, os.O_RDONLY)
        try:
            got = os.readv(fd, [memoryview(out).cast("B")])
            trailing = os.read(fd, 1)
        finally:
            os.close(fd)
        if got != out.nbytes or trailing:
            raise SessionCorrupt(f"chunk {key} does not hold {count} rows of {width}")
        return out

    def _readable(self, session_id: str, layer: int, kind: Kind):
        sess = self._get(session_id)
        manifest = sess.manifest
        if manifest.state != "final":
            raise SessionIncomplete(f"session {session_id} is not finalized")
        entries = manifest.chunk_list(layer, kind)
        if not entries:
            raise StateAbsent(f"session {session_id} stores no {kind.value} state for layer {layer}")
        return manifest, entries

    def read_chunk(self, session_id: str, layer: int, kind: Kind, chunk_idx: int) -> np.ndarray:
        manifest, entries = self._readable(session_id, layer, kind)
        _, count, device = entries[chunk_idx]
        return self._read_chunk_file(manifest, layer, kind, chunk_idx, count, device)

    def chunk_count(self, session_id: str, layer: int, kind: Kind) -> int:
        return len(self._readable(session_id, layer, kind)[1])

    def read_layer(self, session_id: str, layer: int, kind: Kind = Kind.HIDDEN) -> np.ndarray:
        """All stored rows of one layer in token order (n_tokens x width).

        Chunks are fetched with one worker per device, so striped chunks load
        in parallel.  A layer that was never stored raises :class:`StateAbsent`.
        """
        manifest, entries = self._readable(session_id, layer, kind)
        width = kind.width(manifest.d_hidden)
        n = sum(e[1] for e in entries)
        out = np.empty((n, width), self._dtype(manifest))
        by_device: dict[int, list] = {}
        for chunk_idx, count, device in entries:
            by_device.setdefault(device, []).append((chunk_idx, count))

        def fetch(device):
            for chunk_idx, count in by_device[device]:
                start = chunk_idx * CHUNK_TOKENS
                self._read_chunk_file(manifest, layer, kind, chunk_idx, count, device,
                                      out[start:start + count])

        if len(by_device) == 1:
            fetch(next(iter(by_device)))
        else:
            with ThreadPoolExecutor(max_workers=len(by_device)) as ex:
                list(ex.map(fetch, by_device))
        return out

    def simulated_read_seconds(self, session_id: str, layer: int, kind: Kind,
                               device_bw: float | None = None) -> float:
        """Read time when each device streams its chunks at ``device_bw``.

        Falls back to the pool's throttles; an unthrottled device costs nothing.
        """
        manifest, entries = self._readable(session_id, layer, kind)
        row_bytes = kind.width(manifest.d_hidden) * manifest.elem_bytes
        per_device: dict[int, int] = {}
        for _, count, device in entries:
            per_device[device] = per_device.get(device, 0) + count * row_bytes
        worst = 0.0
        for device, nbytes in per_device.items():
            bw = device_bw if device_bw is not None else self.pool.bandwidth[device]
            if bw is not None:
                worst = max(worst, nbytes / bw)
        return worst


def expected_chunks(n_tokens: int) -> int:
    return math.ceil(n_tokens / CHUNK_TOKENS)
