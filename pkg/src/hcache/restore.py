"""Two-lane KV restoration: an IO lane fetching stored state and a compute lane
turning it back into K/V.

Two clocks are supported.  In simulated mode, stage durations come from a
throttle model (device bandwidth, link bandwidth, FLOP rate with a stepped
GEMM cost) and are laid out on a virtual clock by :func:`schedule_pipeline`.
The numerics still run for real, but they are not timed.  In wall mode, the
IO lane is a worker thread reading from storage (honoring the device pool's
throttles) while the calling thread computes, and events carry
``perf_counter`` times.

Scheduling rules shared by both clocks:

* hidden-state fetches are double buffered: fetch ``k`` may start once the
  compute lane has started hidden layer ``k - depth`` (default depth 1);
* plans with a recomputed prefix prefetch hidden states without that limit,
  because the compute lane is busy recomputing while the IO lane runs ahead;
* KV-offload layers need no compute.  Their chunks are fetched in IO-lane
  gaps whenever a whole chunk fits before the next hidden fetch may start,
  and whatever is left runs after the last hidden fetch.
"""

from __future__ import annotations

import csv
import enum
import io
import math
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cost import HardwareProfile, stepped_tokens
from .model import KVCache, ModelConfig, WeightSet, layer_forward, project_hidden_to_kv
from .scheduler import Complement, Method, ProfiledTimings, RestorationPlan
from .storage import CHUNK_TOKENS, Kind, SessionIncomplete, StorageManager

__all__ = [
    "ClockMode",
    "Lane",
    "Event",
    "Timeline",
    "ThrottleConfig",
    "PlanMismatch",
    "layer_io_seconds",
    "schedule_pipeline",
    "simulate_restore",
    "simulate_token_wise",
    "token_wise_split",
    "restore",
    "restore_token_wise",
    "bubble_fraction",
]


class PlanMismatch(ValueError):
    pass


class ClockMode(enum.Enum):
    WALL = "wall"
    SIMULATED = "sim"


class Lane(enum.Enum):
    IO = "IO"
    COMPUTE = "COMPUTE"


@dataclass(frozen=True)
class Event:
    lane: Lane
    layer: int
    kind: str  # hidden | kv | project | recompute | mixed
    start_s: float
    end_s: float
    chunk: int = -1

    @property
    def duration(self) -> float:
        return self.end_s - self.start_s


_FIELDS = ("lane", "layer", "kind", "chunk", "start_s", "end_s")


@dataclass
class Timeline:
    """Events of one restoration, on a clock whose origin is the restore start."""

    events: list[Event] = field(default_factory=list)
    clock: str = "sim"

    def add(self, lane: Lane, layer: int, kind: str, start: float, end: float,
            chunk: int = -1) -> Event:
        ev = Event(lane, layer, kind, float(start), float(end), chunk)
        self.events.append(ev)
        return ev

    def lane(self, lane: Lane) -> list[Event]:
        return sorted((e for e in self.events if e.lane is lane), key=lambda e: e.start_s)

    @property
    def total_s(self) -> float:
        return max((e.end_s for e in self.events), default=0.0)

    def lane_end(self, lane: Lane) -> float:
        return max((e.end_s for e in self.lane(lane)), default=0.0)

    def busy_s(self, lane: Lane) -> float:
        return sum(e.duration for e in self.lane(lane))

    def idle_parts(self, lane: Lane) -> tuple[float, float, float]:
        """(fill, internal gaps, drain) idle seconds of ``lane`` over the run.

        A lane with no events is idle for the whole run; that counts as an
        internal gap, not as fill.
        """
        events = self.lane(lane)
        total = self.total_s
        if not events:
            return 0.0, total, 0.0
        fill = events[0].start_s
        gaps, cursor = 0.0, events[0].end_s
        for ev in events[1:]:
            if ev.start_s > cursor:
                gaps += ev.start_s - cursor
            cursor = max(cursor, ev.end_s)
        return fill, gaps, total - cursor

    def bubble_s(self, lane: Lane) -> float:
        return self.idle_parts(lane)[1]

    def fill_s(self) -> float:
        """Idle time before the later of the two lanes starts working."""
        return max(self.idle_parts(lane)[0] for lane in Lane)

    def validate(self, tol: float = 1e-12) -> None:
        """Raise if a lane overlaps itself or a projection precedes its fetch."""
        for lane in Lane:
            events = self.lane(lane)
            for a, b in zip(events, events[1:]):
                if b.start_s < a.end_s - tol:
                    raise AssertionError(f"overlap on {lane.value}: {a} / {b}")
        fetched = {}
        for ev in self.lane(Lane.IO):
            if ev.kind == "hidden":
                fetched[ev.layer] = max(fetched.get(ev.layer, 0.0), ev.end_s)
        for ev in self.lane(Lane.COMPUTE):
            if ev.kind in ("project", "mixed") and ev.layer in fetched:
                if ev.start_s < fetched[ev.layer] - tol:
                    raise AssertionError(f"layer {ev.layer} computed before its fetch ended")

    def to_csv(self, path=None, delimiter: str = ",") -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
        writer.writerow(_FIELDS)
        for ev in sorted(self.events, key=lambda e: (e.start_s, e.lane.value)):
            writer.writerow([ev.lane.value, ev.layer, ev.kind, ev.chunk,
                             repr(ev.start_s), repr(ev.end_s)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, text: str, delimiter: str = ",", clock: str = "sim") -> "Timeline":
        tl = cls(clock=clock)
        for row in csv.DictReader(io.StringIO(text), delimiter=delimiter):
            tl.add(Lane(row["lane"]), int(row["layer"]), row["kind"],
                   float(row["start_s"]), float(row["end_s"]), int(row["chunk"]))
        return tl


def bubble_fraction(timeline: Timeline) -> float:
    """Internal idle time of the less busy lane over the total run time.

    Fill and drain are excluded (see :meth:`Timeline.idle_parts`).
    """
    total = timeline.total_s
    if total <= 0:
        return 0.0
    lane = min(Lane, key=lambda l: (timeline.busy_s(l), l is Lane.IO))
    return min(1.0, timeline.bubble_s(lane) / total)


# ---------------------------------------------------------------------------
# Throttle model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ThrottleConfig:
    """How stage durations are obtained.

    In simulated mode either ``stage_times`` gives fixed per-layer seconds
    (``io_h``, ``io_kv``, ``c_h``, ``c_token``), or they are derived from
    ``device_bw`` (bytes/s per device), ``link_bw`` (aggregate cap) and
    ``flops`` (achieved FLOP/s) with GEMM token counts rounded up to ``step``.
    """

    mode: ClockMode = ClockMode.SIMULATED
    device_bw: float | None = None
    link_bw: float | None = None
    flops: float | None = None
    step: int | None = 256
    prefetch_depth: int = 1
    stage_times: ProfiledTimings | None = None
    n_devices: int = 1

    def __post_init__(self):
        if self.prefetch_depth < 1:
            raise ValueError("prefetch_depth must be >= 1")
        if self.n_devices < 1:
            raise ValueError("n_devices must be >= 1")
        for name in ("device_bw", "link_bw", "flops"):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise ValueError(f"{name} must be positive")
        if self.mode is ClockMode.SIMULATED and self.stage_times is None:
            if self.flops is None or (self.device_bw is None and self.link_bw is None):
                raise ValueError("simulated mode needs stage_times or flops plus a bandwidth")

    @classmethod
    def from_profile(cls, profile: HardwareProfile, n_devices: int = 1,
                     device_bw: float | None = None, **kw) -> "ThrottleConfig":
        return cls(device_bw=device_bw, link_bw=profile.bw, flops=profile.effective_flops,
                   n_devices=n_devices, **kw)

    @classmethod
    def fixed(cls, io_h: float, io_kv: float, c_h: float, c_token: float,
              n_layers: int, **kw) -> "ThrottleConfig":
        return cls(stage_times=ProfiledTimings(io_h, io_kv, c_h, c_token, n_layers), **kw)


def layer_io_seconds(n_tokens: int, row_bytes: int, layer: int, n_devices: int,
                     device_bw: float | None, link_bw: float | None) -> float:
    """Time to read one layer striped in 64-token chunks over ``n_devices``.

    Each device streams its own chunks at ``device_bw``; the aggregate is also
    capped by ``link_bw``.
    """
    if n_tokens <= 0:
        return 0.0
    per_device = [0] * n_devices
    n_chunks = math.ceil(n_tokens / CHUNK_TOKENS)
    for c in range(n_chunks):
        tokens = min(CHUNK_TOKENS, n_tokens - c * CHUNK_TOKENS)
        per_device[(layer + c) % n_devices] += tokens * row_bytes
    t = 0.0
    if device_bw is not None:
        t = max(per_device) / device_bw
    if link_bw is not None:
        t = max(t, n_tokens * row_bytes / link_bw)
    return t


class _Costs:
    """Per-layer stage seconds for one throttle and model shape."""

    def __init__(self, throttle: ThrottleConfig, config: ModelConfig, elem_bytes: int,
                 n_devices: int | None = None):
        self.t = throttle
        self.config = config
        self.eb = elem_bytes
        self.n_devices = n_devices or throttle.n_devices

    def io(self, n: int, layer: int, kind: Kind) -> float:
        st = self.t.stage_times
        if st is not None:
            return st.io_h if kind is Kind.HIDDEN else st.io_kv
        row = kind.width(self.config.d_hidden) * self.eb
        return layer_io_seconds(n, row, layer, self.n_devices, self.t.device_bw, self.t.link_bw)

    def project(self, n: int) -> float:
        if n <= 0:
            return 0.0
        if self.t.stage_times is not None:
            return self.t.stage_times.c_h
        d = self.config.d_hidden
        return 4 * stepped_tokens(n, self.t.step) * d * d / self.t.flops

    def recompute(self, n: int, n_ctx: int | None = None) -> float:
        if n <= 0:
            return 0.0
        if self.t.stage_times is not None:
            return self.t.stage_times.c_token
        d, f = self.config.d_hidden, self.config.d_ffn
        ctx = n if n_ctx is None else n_ctx
        gemm = stepped_tokens(n, self.t.step)
        return (8 * gemm * d * d + 4 * gemm * d * f + n * ctx * d) / self.t.flops


# ---------------------------------------------------------------------------
# Virtual-clock scheduling
# ---------------------------------------------------------------------------


@dataclass
class Stage:
    """One pipelined layer: an optional fetch followed by compute on it."""

    layer: int
    io_s: float
    c_s: float
    io_kind: str = "hidden"
    c_kind: str = "project"


def schedule_pipeline(stages: list[Stage], prefix: list[tuple[int, str, float]] = (),
                      chunks: list[tuple[int, int, float]] = (),
                      depth: int | None = 1) -> Timeline:
    """Lay stages out on two lanes starting at time zero.

    ``prefix`` is compute-only work run first (recomputed layers), ``chunks``
    are IO-only ``(layer, chunk_idx, seconds)`` reads that fill IO gaps.
    ``depth=None`` lifts the prefetch limit.
    """
    tl = Timeline()
    c_free = 0.0
    for layer, kind, dur in prefix:
        tl.add(Lane.COMPUTE, layer, kind, c_free, c_free + dur)
        c_free += dur
    pending = list(chunks)
    io_free = 0.0
    starts: list[float] = []

    def fill_until(limit: float) -> None:
        nonlocal io_free
        while pending and io_free + pending[0][2] <= limit + 1e-15:
            layer, idx, dur = pending.pop(0)
            tl.add(Lane.IO, layer, "kv", io_free, io_free + dur, idx)
            io_free += dur

    for k, st in enumerate(stages):
        gate = starts[k - depth] if depth is not None and k >= depth else 0.0
        fill_until(gate)
        if st.io_s > 0:
            begin = max(io_free, gate)
            io_free = begin + st.io_s
            tl.add(Lane.IO, st.layer, st.io_kind, begin, io_free)
            ready = io_free
        else:
            ready = 0.0
        start = max(c_free, ready)
        starts.append(start)
        c_free = start + st.c_s
        tl.add(Lane.COMPUTE, st.layer, st.c_kind, start, c_free)
    fill_until(math.inf)
    return tl


def _plan_schedule(plan: RestorationPlan, n_tokens: int, costs: _Costs, depth: int) -> Timeline:
    methods = plan.layer_assignment
    prefix, stages, chunks = [], [], []
    n_chunks = max(1, math.ceil(n_tokens / CHUNK_TOKENS))
    for layer, method in enumerate(methods):
        if method is Method.RECOMPUTE:
            prefix.append((layer, "recompute", costs.recompute(n_tokens)))
        elif method is Method.HIDDEN:
            stages.append(Stage(layer, costs.io(n_tokens, layer, Kind.HIDDEN),
                                costs.project(n_tokens)))
        else:
            per_chunk = costs.io(n_tokens, layer, Kind.KV) / n_chunks
            chunks.extend((layer, c, per_chunk) for c in range(n_chunks))
    unbounded = plan.complement is Complement.RECOMPUTE
    return schedule_pipeline(stages, prefix, chunks, None if unbounded else depth)


def simulate_restore(plan: RestorationPlan, n_tokens: int, config: ModelConfig,
                     throttle: ThrottleConfig, elem_bytes: int | None = None) -> Timeline:
    """Timeline of restoring ``n_tokens`` under ``plan`` without touching data."""
    if plan.n_layers != config.n_layers:
        raise PlanMismatch(f"plan covers {plan.n_layers} layers, model has {config.n_layers}")
    costs = _Costs(throttle, config, elem_bytes or config.elem_bytes)
    return _plan_schedule(plan, n_tokens, costs, throttle.prefetch_depth)


def _token_wise_schedule(n_h: int, n_o: int, complement: Method, costs: _Costs,
                         depth: int) -> Timeline:
    n = n_h + n_o
    stages = []
    for layer in range(costs.config.n_layers):
        io_s = costs.io(n_h, layer, Kind.HIDDEN) if n_h else 0.0
        c_s = costs.project(n_h)
        if complement is Method.KV_OFFLOAD:
            io_s += costs.io(n_o, layer, Kind.KV) if n_o else 0.0
        else:
            c_s += costs.recompute(n_o, n_ctx=n)
        stages.append(Stage(layer, io_s, c_s, "hidden", "mixed" if n_o else "project"))
    return schedule_pipeline(stages, depth=depth)


def token_wise_split(timings: ProfiledTimings, n_tokens: int) -> tuple[int, Method]:
    """Hidden-token count that balances both lanes inside every layer.

    Per-token costs come from ``timings`` (profiled at ``n_tokens``).  The
    complement follows the layer-wise rule: recompute the tail when the
    hidden path is IO-bound, read its KV when it is compute-bound.
    """
    a_h, p = timings.io_h / n_tokens, timings.c_h / n_tokens
    if timings.c_h <= timings.io_h:
        r = timings.c_token / n_tokens
        share, complement = r / (a_h - p + r), Method.RECOMPUTE
    else:
        a_kv = timings.io_kv / n_tokens
        share, complement = a_kv / (a_kv + p - a_h), Method.KV_OFFLOAD
    return min(max(round(n_tokens * share), 0), n_tokens), complement


def simulate_token_wise(split: tuple[int, int], config: ModelConfig, throttle: ThrottleConfig,
                        complement: Method = Method.RECOMPUTE,
                        elem_bytes: int | None = None) -> Timeline:
    """Timeline of a vertical split: the first ``split[0]`` tokens of every
    layer come from hidden states, the remaining ``split[1]`` from
    ``complement``; every layer synchronizes both parts."""
    n_h, n_o = split
    if n_h < 0 or n_o < 0 or n_h + n_o < 1:
        raise ValueError(f"invalid split {split}")
    costs = _Costs(throttle, config, elem_bytes or config.elem_bytes)
    return _token_wise_schedule(n_h, n_o, complement, costs, throttle.prefetch_depth)


# ---------------------------------------------------------------------------
# Execution against storage
# ---------------------------------------------------------------------------


def _kv_split(rows: np.ndarray, d: int):
    rows = rows.astype(np.float32, copy=False)
    return rows[:, :d], rows[:, d:]


def _check_session(storage: StorageManager, session_id: str, weights: WeightSet,
                   plan: RestorationPlan):
    manifest = storage.manifest(session_id)
    if manifest.state != "final":
        raise SessionIncomplete(f"session {session_id} is not finalized")
    config = weights.config
    if manifest.n_layers != config.n_layers or manifest.d_hidden != config.d_hidden:
        raise PlanMismatch("session was written by a different model shape")
    if plan.n_layers != config.n_layers:
        raise PlanMismatch(f"plan covers {plan.n_layers} layers, model has {config.n_layers}")
    if manifest.plan is not None and manifest.plan != plan:
        raise PlanMismatch(
            f"session stored for plan {manifest.plan.describe()}, asked for {plan.describe()}"
        )
    return manifest


def _recompute_prefix(weights: WeightSet, tokens: np.ndarray, kv: KVCache, n_layers: int):
    config = weights.config
    positions = np.arange(tokens.size)
    hidden = weights.embedding[tokens]
    for layer in range(n_layers):
        hidden = layer_forward(hidden, weights.layers[layer], kv, layer, positions, config)


def restore(storage: StorageManager, session_id: str, weights: WeightSet,
            plan: RestorationPlan, throttle: ThrottleConfig | None = None):
    """Rebuild a finalized session's full KV cache following ``plan``.

    Returns ``(KVCache, Timeline)``.  Hidden layers are fetched and projected,
    KV layers are fetched as-is and recomputed layers are run forward from the
    stored token ids.
    """
    throttle = throttle or ThrottleConfig(stage_times=None, mode=ClockMode.WALL)
    manifest = _check_session(storage, session_id, weights, plan)
    config = weights.config
    n = manifest.n_tokens
    kv = KVCache(config.n_layers, config.d_hidden, capacity=max(1, n))
    if n == 0:
        return kv, Timeline(clock=throttle.mode.value)
    methods = plan.layer_assignment
    if throttle.mode is ClockMode.WALL:
        return kv, _restore_wall(storage, session_id, weights, plan, kv, n,
                                 throttle.prefetch_depth)

    positions = np.arange(n)
    l_o = len(plan.layers_using(Method.RECOMPUTE))
    if l_o:
        _recompute_prefix(weights, _stored_tokens(storage, session_id, n), kv, l_o)
    for layer, method in enumerate(methods):
        if method is Method.HIDDEN:
            hidden = storage.read_layer(session_id, layer, Kind.HIDDEN)
            k, v = project_hidden_to_kv(hidden, weights.layers[layer], positions, config)
            kv.append(layer, k, v)
        elif method is Method.KV_OFFLOAD:
            kv.append(layer, *_kv_split(storage.read_layer(session_id, layer, Kind.KV),
                                        config.d_hidden))
    costs = _Costs(throttle, config, manifest.elem_bytes, manifest.n_devices)
    return kv, _plan_schedule(plan, n, costs, throttle.prefetch_depth)


def _stored_tokens(storage: StorageManager, session_id: str, n: int) -> np.ndarray:
    tokens = storage.read_tokens(session_id)
    if tokens.size < n:
        raise PlanMismatch("recomputation needs token ids the session did not store")
    return tokens[:n]


def _restore_wall(storage, session_id, weights, plan, kv, n, depth) -> Timeline:
    config = weights.config
    methods = plan.layer_assignment
    hidden_layers = [l for l, m in enumerate(methods) if m is Method.HIDDEN]
    kv_layers = [l for l, m in enumerate(methods) if m is Method.KV_OFFLOAD]
    recompute_layers = [l for l, m in enumerate(methods) if m is Method.RECOMPUTE]
    gated = plan.complement is not Complement.RECOMPUTE
    slots = threading.Semaphore(depth)
    handoff: queue.Queue = queue.Queue()
    tl = Timeline(clock="wall")
    lock = threading.Lock()
    origin = time.perf_counter()

    def stamp() -> float:
        return time.perf_counter() - origin

    def record(*args):
        with lock:
            tl.add(*args)

    def io_lane():
        try:
            for layer in hidden_layers:
                if gated:
                    slots.acquire()
                t0 = stamp()
                rows = storage.read_layer(session_id, layer, Kind.HIDDEN)
                record(Lane.IO, layer, "hidden", t0, stamp())
                handoff.put((layer, rows))
            for layer in kv_layers:
                t0 = stamp()
                rows = storage.read_layer(session_id, layer, Kind.KV)
                record(Lane.IO, layer, "kv", t0, stamp())
                with lock:
                    kv.append(layer, *_kv_split(rows, config.d_hidden))
        except BaseException as exc:  # surface IO failures on the compute side
            handoff.put((None, exc))

    worker = threading.Thread(target=io_lane, name="hcache-restore-io", daemon=True)
    worker.start()
    positions = np.arange(n)
    if recompute_layers:
        tokens = _stored_tokens(storage, session_id, n)
        hidden = weights.embedding[tokens]
        for layer in recompute_layers:
            t0 = stamp()
            with lock:
                hidden = layer_forward(hidden, weights.layers[layer], kv, layer, positions, config)
            record(Lane.COMPUTE, layer, "recompute", t0, stamp())
    for _ in hidden_layers:
        layer, rows = handoff.get()
        if layer is None:
            worker.join()
            raise rows
        t0 = stamp()
        if gated:
            slots.release()
        k, v = project_hidden_to_kv(rows, weights.layers[layer], positions, config)
        with lock:
            kv.append(layer, k, v)
        record(Lane.COMPUTE, layer, "project", t0, stamp())
    worker.join()
    while not handoff.empty():
        layer, exc = handoff.get()
        if layer is None:
            raise exc
    return tl


def restore_token_wise(storage: StorageManager, session_id: str, weights: WeightSet,
                       split: tuple[int, int], throttle: ThrottleConfig | None = None,
                       complement: Method = Method.RECOMPUTE):
    """Restore with a vertical token split instead of a layer split.

    The first ``split[0]`` tokens of every layer are projected from stored
    hidden states; the remaining ``split[1]`` come from ``complement`` (rerun
    from token ids, or read from stored KV).  Only the simulated clock is
    supported; this path exists for comparison against layer-wise plans.
    """
    throttle = throttle or ThrottleConfig.fixed(1.0, 2.0, 1.0, 6.0, weights.config.n_layers)
    if complement not in (Method.RECOMPUTE, Method.KV_OFFLOAD):
        raise ValueError("the token-wise complement is RECOMPUTE or KV_OFFLOAD")
    manifest = storage.manifest(session_id)
    if manifest.state != "final":
        raise SessionIncomplete(f"session {session_id} is not finalized")
    config = weights.config
    n_h, n_o = split
    n = manifest.n_tokens
    if n_h < 0 or n_o < 0 or n_h + n_o != n:
        raise ValueError(f"split {split} does not cover the session's {n} tokens")
    kv = KVCache(config.n_layers, config.d_hidden, capacity=max(1, n))
    if n == 0:
        return kv, Timeline()
    head_pos, tail_pos = np.arange(n_h), np.arange(n_h, n)
    tail_hidden = None
    if n_o and complement is Method.RECOMPUTE:
        tail_hidden = weights.embedding[_stored_tokens(storage, session_id, n)[n_h:]]
    for layer in range(config.n_layers):
        lw = weights.layers[layer]
        if n_h:
            hidden = storage.read_layer(session_id, layer, Kind.HIDDEN)[:n_h]
            kv.append(layer, *project_hidden_to_kv(hidden, lw, head_pos, config))
        if not n_o:
            continue
        if complement is Method.RECOMPUTE:
            tail_hidden = layer_forward(tail_hidden, lw, kv, layer, tail_pos, config)
        else:
            rows = storage.read_layer(session_id, layer, Kind.KV)[n_h:]
            kv.append(layer, *_kv_split(rows, config.d_hidden))
    costs = _Costs(throttle, config, manifest.elem_bytes, manifest.n_devices)
    return kv, _token_wise_schedule(n_h, n_o, complement, costs, throttle.prefetch_depth)
