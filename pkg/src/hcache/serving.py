"""Request lifecycle driver: synthetic traces, strategies, metrics and reports.

Every run is an event loop over a virtual clock.  Durations come from a
full-size *timing* model plus a hardware profile, while the desk-scale
*execution* model actually generates the tokens (unless ``execute`` is off),
so outputs can be compared across strategies while timings keep realistic
proportions.

Lifecycle of one request: restoration of the session's history (skipped for
IDEAL), prefill of the new prompt (whose last position yields the first
token), then continuous-batched decode.  At most one restoration plus prefill
is in flight, and it pauses decoding while it runs.  When a request finishes,
its last token is fed through the model once more so that the stored history
covers every input and output token, and the KV cache is evicted (IDEAL keeps
it).
"""

from __future__ import annotations

import csv
import dataclasses
import enum
import io
import json
import math
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cost import HARDWARE_PRESETS, HardwareProfile, decode_layer_time, prefill_time, storage_bytes
from .model import (KVCache, ModelConfig, WeightSet, decode_step, init_model,
                    layer_forward, prefill, project_hidden_to_kv)
from .restore import ClockMode, ThrottleConfig, _Costs, restore, simulate_restore
from .scheduler import Complement, Method, ProfiledTimings, RestorationPlan, plan as plan_layers
from .storage import CHUNK_TOKENS, BufferFull, DevicePool, Kind, StorageManager

__all__ = [
    "Strategy",
    "TraceKind",
    "Request",
    "Trace",
    "gen_trace",
    "ServingConfig",
    "RequestMetrics",
    "Metrics",
    "UnknownSessionState",
    "run",
    "profile_hardware",
    "profile_io",
    "report",
    "parse_report_csv",
    "SaveModel",
    "simulate_decode",
    "scale_plan",
]


class UnknownSessionState(RuntimeError):
    pass


class Strategy(enum.Enum):
    HCACHE = "hcache"
    KV_OFFLOAD = "kv_offload"
    RECOMPUTE = "recompute"
    IDEAL = "ideal"

    @classmethod
    def parse(cls, text: str) -> "Strategy":
        try:
            return cls(text.lower().replace("-", "_"))
        except ValueError:
            raise ValueError(f"unknown strategy {text!r}; choose from "
                             f"{[s.value for s in cls]}") from None


class TraceKind(enum.Enum):
    CONVERSATION = "conversation"
    LONG_CONTEXT = "long_context"


# ---------------------------------------------------------------------------
# Traces
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Request:
    session_id: str
    history_tokens: int
    new_prompt_tokens: int
    output_budget: int
    arrival_s: float
    round: int = 0

    def __post_init__(self):
        if self.history_tokens < 0:
            raise ValueError("history_tokens must be >= 0")
        if self.new_prompt_tokens < 1:
            raise ValueError("a request needs at least one prompt token")
        if self.output_budget < 1:
            raise ValueError("output_budget must be >= 1")
        if not self.arrival_s >= 0:
            raise ValueError("arrival_s must be >= 0")


@dataclass
class Trace:
    requests: list[Request]
    kind: TraceKind
    seed: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        arrivals = [r.arrival_s for r in self.requests]
        if any(b < a for a, b in zip(arrivals, arrivals[1:])):
            raise ValueError("trace arrivals must be nondecreasing")

    @property
    def session_ids(self) -> list[str]:
        return list(dict.fromkeys(r.session_id for r in self.requests))

    def to_json(self) -> str:
        return json.dumps({
            "kind": self.kind.value,
            "seed": self.seed,
            "params": self.params,
            "requests": [dataclasses.asdict(r) for r in self.requests],
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Trace":
        doc = json.loads(text)
        return cls([Request(**r) for r in doc["requests"]], TraceKind(doc["kind"]),
                   doc["seed"], doc["params"])

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "Trace":
        return cls.from_json(Path(path).read_text())


CONVERSATION_DEFAULTS = {
    "n_sessions": 8, "rounds": 5, "mean_input": 67.0, "mean_output": 359.0,
    "max_input": 1024, "max_output": 1024, "gap_s": 30.0, "rate": 1.0,
}
LONG_CONTEXT_DEFAULTS = {
    "n_requests": 32, "context_min": 4096, "context_max": 16384,
    "max_input": 99, "max_output": 99, "rate": 1.0,
}


def _merge(defaults: dict, params: dict | None) -> dict:
    params = dict(params or {})
    unknown = set(params) - set(defaults)
    if unknown:
        raise ValueError(f"unknown trace parameters {sorted(unknown)}")
    merged = {**defaults, **params}
    for key, value in merged.items():
        if not (isinstance(value, (int, float)) and value > 0):
            raise ValueError(f"trace parameter {key} must be positive, got {value!r}")
    return merged


def _geometric(rng, mean: float, cap: int, size: int) -> np.ndarray:
    # support 1, 2, ...; mean 1/p
    return np.minimum(rng.geometric(min(1.0, 1.0 / mean), size=size), cap)


def gen_trace(kind: TraceKind | str, params: dict | None = None, seed: int = 0) -> Trace:
    """Synthetic workload.

    CONVERSATION: sessions start as a Poisson process (``rate`` per second);
    each has ``rounds`` rounds ``gap_s`` apart with geometric input and
    output lengths, and a round's history is everything before it.
    LONG_CONTEXT: independent requests over a pre-existing context drawn
    uniformly from ``[context_min, context_max]`` with short inputs/outputs.
    """
    kind = TraceKind(kind) if isinstance(kind, str) else kind
    rng = np.random.default_rng(seed)
    requests = []
    if kind is TraceKind.CONVERSATION:
        p = _merge(CONVERSATION_DEFAULTS, params)
        n, rounds = int(p["n_sessions"]), int(p["rounds"])
        starts = np.cumsum(rng.exponential(1.0 / p["rate"], size=n))
        inputs = _geometric(rng, p["mean_input"], int(p["max_input"]), n * rounds)
        outputs = _geometric(rng, p["mean_output"], int(p["max_output"]), n * rounds)
        for s in range(n):
            history = 0
            for r in range(rounds):
                i, o = int(inputs[s * rounds + r]), int(outputs[s * rounds + r])
                requests.append(Request(f"s{s:04d}", history, i, o,
                                        float(starts[s] + r * p["gap_s"]), r))
                history += i + o
    else:
        p = _merge(LONG_CONTEXT_DEFAULTS, params)
        if p["context_min"] > p["context_max"]:
            raise ValueError("context_min exceeds context_max")
        n = int(p["n_requests"])
        arrivals = np.cumsum(rng.exponential(1.0 / p["rate"], size=n))
        contexts = rng.integers(int(p["context_min"]), int(p["context_max"]) + 1, size=n)
        inputs = rng.integers(1, int(p["max_input"]) + 1, size=n)
        outputs = rng.integers(1, int(p["max_output"]) + 1, size=n)
        for i in range(n):
            requests.append(Request(f"c{i:04d}", int(contexts[i]), int(inputs[i]),
                                    int(outputs[i]), float(arrivals[i])))
    requests.sort(key=lambda r: (r.arrival_s, r.session_id))
    return Trace(requests, kind, seed, p)


# ---------------------------------------------------------------------------
# Decode-time saving model
# ---------------------------------------------------------------------------


class SaveModel:
    """Virtual-clock cost of persisting per-token state during decode.

    ``none`` persists nothing.  ``direct`` issues one synchronous device write
    per sequence and layer; a layer cannot finish before its writes do.
    ``two_stage`` pays one bulk host copy per layer, then a daemon drains a
    bounded buffer in 64-token chunks; a full buffer stalls the iteration.
    """

    MODES = ("none", "direct", "two_stage")

    def __init__(self, mode: str, profile: HardwareProfile, n_devices: int = 1,
                 device_bw: float | None = None, write_latency_s: float = 0.0,
                 buffer_bytes: int = 256 * 1024 * 1024):
        if mode not in self.MODES:
            raise ValueError(f"saving mode must be one of {self.MODES}")
        self.mode = mode
        self.profile = profile
        self.n_devices = n_devices
        self.device_bw = device_bw if device_bw is not None else profile.bw
        self.latency = write_latency_s
        self.buffer_bytes = buffer_bytes
        self.occupancy = 0.0
        self.stalls = 0
        self.stall_s = 0.0

    def drain_rate(self, row_bytes: int) -> float:
        """Aggregate bytes/s the daemon sustains writing whole chunks."""
        chunk = CHUNK_TOKENS * row_bytes
        per_device = chunk / (self.latency + chunk / self.device_bw)
        return min(self.n_devices * per_device, self.profile.bw)

    def advance(self, dt: float, row_bytes: int) -> None:
        if self.mode == "two_stage" and row_bytes:
            self.occupancy = max(0.0, self.occupancy - dt * self.drain_rate(row_bytes))

    def layer(self, t_layer: float, batch: int, row_bytes: int) -> float:
        """Seconds one decode layer takes including its saving work."""
        if self.mode == "none" or row_bytes == 0 or batch == 0:
            return t_layer
        if self.mode == "direct":
            per_write = self.latency + row_bytes / self.device_bw
            return max(t_layer, math.ceil(batch / self.n_devices) * per_write)
        payload = batch * row_bytes
        copy = payload / self.profile.bw
        t = t_layer + copy
        self.advance(t, row_bytes)
        self.occupancy += payload
        if self.occupancy > self.buffer_bytes:
            wait = (self.occupancy - self.buffer_bytes) / self.drain_rate(row_bytes)
            self.stalls += 1
            self.stall_s += wait
            self.occupancy = float(self.buffer_bytes)
            t += wait
        return t


def _row_bytes(method: Method | None, config: ModelConfig, eb: int) -> int:
    if method is Method.HIDDEN:
        return config.d_hidden * eb
    if method is Method.KV_OFFLOAD:
        return 2 * config.d_hidden * eb
    return 0


def _decode_iteration(contexts, methods, config: ModelConfig, profile: HardwareProfile,
                      saver: SaveModel) -> float:
    t_layer = decode_layer_time(contexts, config, profile)
    total = 0.0
    for method in methods or [None] * config.n_layers:
        total += saver.layer(t_layer, len(contexts), _row_bytes(method, config, profile.elem_bytes))
    return total


def simulate_decode(batch: int, context: int, steps: int, config: ModelConfig,
                    profile: HardwareProfile, saving: str = "two_stage",
                    methods: list[Method] | None = None, **save_kw) -> dict:
    """Mean time between tokens for a steady decode batch under a saving mode."""
    methods = methods or [Method.HIDDEN] * config.n_layers
    saver = SaveModel(saving, profile, **save_kw)
    times = [_decode_iteration([context + s] * batch, methods, config, profile, saver)
             for s in range(steps)]
    return {"tbt_s": float(np.mean(times)), "stalls": saver.stalls, "stall_s": saver.stall_s}


# ---------------------------------------------------------------------------
# Configuration and metrics
# ---------------------------------------------------------------------------


@dataclass
class ServingConfig:
    """Everything a run needs besides the trace and the strategy."""

    model: ModelConfig = field(default_factory=lambda: ModelConfig(max_seq=16384))
    timing_model: ModelConfig | None = None
    profile: HardwareProfile = field(default_factory=lambda: dataclasses.replace(
        HARDWARE_PRESETS["a100"], efficiency=0.6))
    n_devices: int = 4
    device_bw: float | None = 6.9e9
    step: int | None = 256
    minibatch: int = 1024
    planner: bool = True
    saving: str = "two_stage"
    write_latency_s: float = 20e-6
    buffer_bytes: int = 256 * 1024 * 1024
    max_batch: int = 64
    weights_seed: int = 0
    execute: bool = True
    workdir: str | None = None

    @property
    def timing(self) -> ModelConfig:
        return self.timing_model or self.model

    def throttle(self) -> ThrottleConfig:
        return ThrottleConfig(device_bw=self.device_bw, link_bw=self.profile.bw,
                              flops=self.profile.effective_flops, step=self.step,
                              n_devices=self.n_devices)


@dataclass
class RequestMetrics:
    session_id: str
    round: int
    history_tokens: int
    new_tokens: int
    output_tokens: int
    arrival_s: float
    start_s: float
    restore_s: float
    prefill_s: float
    finish_s: float
    tbt_s: float  # nan when only one token was generated

    @property
    def ttft_s(self) -> float:
        return self.restore_s + self.prefill_s

    @property
    def queue_s(self) -> float:
        return self.start_s - self.arrival_s


def _pct(values, q) -> float:
    values = [v for v in values if not math.isnan(v)]
    return float(np.percentile(values, q)) if values else math.nan


@dataclass
class Metrics:
    strategy: Strategy
    requests: list[RequestMetrics]
    outputs: dict = field(default_factory=dict)
    plan: RestorationPlan | None = None
    bytes_per_token: float = 0.0
    stalls: int = 0
    makespan_s: float = 0.0

    def _ttfts(self):
        return [r.ttft_s for r in self.requests]

    def _tbts(self):
        return [r.tbt_s for r in self.requests if not math.isnan(r.tbt_s)]

    @property
    def ttft_mean(self) -> float:
        return float(np.mean(self._ttfts())) if self.requests else math.nan

    @property
    def ttft_p50(self) -> float:
        return _pct(self._ttfts(), 50)

    @property
    def ttft_p95(self) -> float:
        return _pct(self._ttfts(), 95)

    @property
    def tbt_mean(self) -> float:
        tbts = self._tbts()
        return float(np.mean(tbts)) if tbts else math.nan

    @property
    def tbt_p95(self) -> float:
        return _pct(self._tbts(), 95)

    @property
    def restore_tokens_per_s(self) -> float:
        tokens = sum(r.history_tokens for r in self.requests)
        seconds = sum(r.restore_s for r in self.requests)
        if tokens == 0:
            return 0.0
        return tokens / seconds if seconds > 0 else math.inf

    def summary(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "requests": len(self.requests),
            "ttft_mean_s": self.ttft_mean,
            "ttft_p50_s": self.ttft_p50,
            "ttft_p95_s": self.ttft_p95,
            "tbt_mean_s": self.tbt_mean,
            "tbt_p95_s": self.tbt_p95,
            "restore_tok_per_s": self.restore_tokens_per_s,
            "bytes_per_token": self.bytes_per_token,
        }

    def to_json(self) -> str:
        return json.dumps({
            "strategy": self.strategy.value,
            "plan": self.plan.to_record() if self.plan else None,
            "bytes_per_token": self.bytes_per_token,
            "stalls": self.stalls,
            "makespan_s": self.makespan_s,
            "requests": [dataclasses.asdict(r) for r in self.requests],
            "outputs": [[sid, rnd, toks] for (sid, rnd), toks in sorted(self.outputs.items())],
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Metrics":
        doc = json.loads(text)
        return cls(
            strategy=Strategy(doc["strategy"]),
            requests=[RequestMetrics(**r) for r in doc["requests"]],
            outputs={(sid, rnd): toks for sid, rnd, toks in doc["outputs"]},
            plan=RestorationPlan.from_record(doc["plan"]) if doc["plan"] else None,
            bytes_per_token=doc["bytes_per_token"],
            stalls=doc["stalls"],
            makespan_s=doc["makespan_s"],
        )


# ---------------------------------------------------------------------------
# Profiling and planning
# ---------------------------------------------------------------------------


def profile_hardware(config: ModelConfig, storage: StorageManager | None = None,
                     throttle: ThrottleConfig | None = None, minibatch: int = 1024,
                     weights: WeightSet | None = None, repeats: int = 5) -> ProfiledTimings:
    """Per-layer stage times at ``minibatch`` tokens.

    With a simulated throttle the times follow its bandwidth and FLOP model.
    In wall mode a scratch session is written to ``storage`` and read back,
    and projection and full-layer compute are timed on ``weights``; each
    figure is the fastest of ``repeats`` runs.
    """
    throttle = throttle or ThrottleConfig(mode=ClockMode.WALL)
    if throttle.mode is ClockMode.SIMULATED:
        if throttle.stage_times is not None:
            return dataclasses.replace(throttle.stage_times, n_layers=config.n_layers)
        n_devices = storage.pool.device_count if storage is not None else throttle.n_devices
        costs = _Costs(throttle, config, config.elem_bytes, n_devices)
        return ProfiledTimings(costs.io(minibatch, 0, Kind.HIDDEN),
                               costs.io(minibatch, 0, Kind.KV),
                               costs.project(minibatch), costs.recompute(minibatch),
                               config.n_layers)
    if storage is None:
        raise ValueError("wall-clock profiling needs a storage pool")
    # only layer 0 is timed, so a one-layer model of the same width suffices
    weights = weights or init_model(dataclasses.replace(config, n_layers=1, vocab_size=16), 0)
    io_h, io_kv = profile_io(storage, config.d_hidden, minibatch, config.elem_bytes, repeats)
    hidden = np.random.default_rng(0).standard_normal((minibatch, config.d_hidden))
    hidden = hidden.astype(np.float32)
    lw = weights.layers[0]
    positions = np.arange(minibatch)
    c_h = _best(lambda: project_hidden_to_kv(hidden, lw, positions, config), repeats)
    c_token = _best(lambda: layer_forward(hidden, lw, KVCache(1, config.d_hidden, minibatch), 0,
                                          positions, config), repeats)
    return ProfiledTimings(io_h, io_kv, c_h, c_token, config.n_layers)


def _best(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def profile_io(storage: StorageManager, d_hidden: int, minibatch: int = 1024,
               elem_bytes: int = 4, repeats: int = 5) -> tuple[float, float]:
    """Wall-clock seconds to read one layer of hidden states and of KV rows.

    A scratch session holding ``minibatch`` tokens of each kind is written to
    ``storage`` and read back ``repeats`` times; the fastest read counts.
    """
    rng = np.random.default_rng(0)
    sid = f"__profile_{time.time_ns()}"
    try:
        storage.create_session(sid, n_layers=1, d_hidden=d_hidden, elem_bytes=elem_bytes)
        storage.snapshot_layer(sid, 0, rng.standard_normal((minibatch, d_hidden)), Kind.HIDDEN)
        storage.snapshot_layer(sid, 0, rng.standard_normal((minibatch, 2 * d_hidden)), Kind.KV)
        storage.flush()
        storage.finalize_session(sid)
    except OSError as exc:
        raise RuntimeError(f"storage unavailable: {exc}") from exc
    return (_best(lambda: storage.read_layer(sid, 0, Kind.HIDDEN), repeats),
            _best(lambda: storage.read_layer(sid, 0, Kind.KV), repeats))


def scale_plan(restoration: RestorationPlan, n_layers: int) -> RestorationPlan:
    """Map a plan onto a model with a different depth, keeping its proportions.

    A hybrid plan stays hybrid (at least one layer of each kind) whenever the
    target depth allows it, so the executed model exercises the same paths.
    """
    if restoration.n_layers == n_layers:
        return restoration
    if restoration.complement is Complement.NONE:
        return RestorationPlan(n_layers, 0, Complement.NONE)
    if restoration.l_h == 0:
        return RestorationPlan(0, n_layers, restoration.complement)
    if n_layers == 1:
        return RestorationPlan(1, 0, Complement.NONE)
    l_o = round(restoration.l_o * n_layers / restoration.n_layers)
    l_o = min(max(l_o, 1), n_layers - 1)
    return RestorationPlan(n_layers - l_o, l_o, restoration.complement)


def _strategy_plan(strategy: Strategy, cfg: ServingConfig) -> RestorationPlan | None:
    n = cfg.timing.n_layers
    if strategy is Strategy.KV_OFFLOAD:
        return RestorationPlan.uniform(Method.KV_OFFLOAD, n)
    if strategy is Strategy.RECOMPUTE:
        return RestorationPlan.uniform(Method.RECOMPUTE, n)
    if strategy is Strategy.IDEAL:
        return None
    if not cfg.planner:
        return RestorationPlan.uniform(Method.HIDDEN, n)
    return plan_layers(profile_hardware(cfg.timing, throttle=cfg.throttle(),
                                        minibatch=cfg.minibatch))


# ---------------------------------------------------------------------------
# Execution of the desk-scale model
# ---------------------------------------------------------------------------


_CONTEXT_ROUND = 1 << 20  # RNG stream for pre-existing contexts


class _Executor:
    """Runs the real model and keeps per-session state for one strategy."""

    def __init__(self, strategy: Strategy, exec_plan: RestorationPlan | None,
                 weights: WeightSet, storage: StorageManager | None, seed: int):
        self.strategy = strategy
        self.plan = exec_plan
        self.weights = weights
        self.storage = storage
        self.seed = seed
        self.tokens: dict[str, list[int]] = {}
        self.resident: dict[str, KVCache] = {}
        self.live: dict[str, KVCache] = {}
        self.last: dict[str, int] = {}
        self.methods = exec_plan.layer_assignment if exec_plan else []

    def prompt(self, index: int, rnd: int, n: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, index, rnd])
        return rng.integers(0, self.weights.config.vocab_size, size=n)

    def _persist(self, sids: list[str], hidden_by_sid: dict, kv_by_sid: dict, start: dict):
        """Snapshot captured hidden states / KV rows for the sessions' new tokens."""
        if self.storage is None:
            return
        for layer, method in enumerate(self.methods):
            if method is Method.RECOMPUTE:
                continue
            entries = []
            for sid in sids:
                if method is Method.HIDDEN:
                    rows = hidden_by_sid[sid][layer]
                else:
                    kv, lo, hi = kv_by_sid[sid]
                    rows = np.concatenate([kv.keys(layer)[lo:hi], kv.values(layer)[lo:hi]], axis=1)
                entries.append((sid, rows, start[sid]))
            kind = Kind.HIDDEN if method is Method.HIDDEN else Kind.KV
            try:
                self.storage.snapshot_batch(layer, entries, kind)
            except BufferFull:
                self.storage.daemon_drain()
                self.storage.snapshot_batch(layer, entries, kind)

    def _restore(self, sid: str, history: int) -> KVCache | None:
        cfg = self.weights.config
        have = len(self.tokens.get(sid, []))
        if have != history:
            raise UnknownSessionState(
                f"request for {sid} expects {history} history tokens, state holds {have}")
        if history == 0:
            return None
        if self.strategy is Strategy.IDEAL:
            return self.resident[sid]
        if self.strategy is Strategy.RECOMPUTE:
            return prefill(self.weights, self.tokens[sid]).kv
        kv, _ = restore(self.storage, sid, self.weights, self.plan,
                        ThrottleConfig.fixed(1, 2, 1, 6, cfg.n_layers))
        return kv

    def _open(self, sid: str, fresh: bool):
        if self.storage is None:
            return
        if fresh:
            self.storage.create_session(sid, n_layers=self.weights.config.n_layers,
                                        d_hidden=self.weights.config.d_hidden,
                                        elem_bytes=self.weights.config.elem_bytes,
                                        plan=self.plan,
                                        config_hash=self.weights.config.fingerprint())
        else:
            self.storage.reopen_session(sid)

    def warm(self, sid: str, index: int, history: int) -> None:
        """Materialize a pre-existing context of ``history`` tokens (untimed)."""
        tokens = self.prompt(index, _CONTEXT_ROUND, history)
        res = prefill(self.weights, tokens)
        self.tokens[sid] = [int(t) for t in tokens]
        self._open(sid, True)
        self._persist([sid], {sid: [h.data for h in res.hidden]}, {sid: (res.kv, 0, history)},
                      {sid: 0})
        if self.storage is not None:
            self.storage.append_tokens(sid, tokens)
            self.storage.flush()
            self.storage.finalize_session(sid)
        if self.strategy is Strategy.IDEAL:
            self.resident[sid] = res.kv

    def start(self, req: Request, index: int) -> int:
        """Restore and prefill; returns the first generated token."""
        sid = req.session_id
        past = self._restore(sid, req.history_tokens)
        prompt = self.prompt(index, req.round, req.new_prompt_tokens)
        res = prefill(self.weights, prompt, past=past)
        self._open(sid, req.history_tokens == 0 and sid not in self.tokens)
        self._persist([sid], {sid: [h.data for h in res.hidden]},
                      {sid: (res.kv, req.history_tokens, res.kv.length)},
                      {sid: req.history_tokens})
        if self.storage is not None:
            self.storage.append_tokens(sid, prompt)
        self.tokens.setdefault(sid, []).extend(int(t) for t in prompt)
        self.live[sid] = res.kv
        self.last[sid] = res.next_token
        return res.next_token

    def step(self, sids: list[str]) -> dict[str, int]:
        """Feed each session's last token; returns the newly generated tokens."""
        hidden, kvs, starts, out = {}, {}, {}, {}
        for sid in sids:
            kv = self.live[sid]
            pos = kv.length
            res = decode_step(self.weights, kv, self.last[sid])
            self.tokens[sid].append(self.last[sid])
            hidden[sid] = [h.data for h in res.hidden]
            kvs[sid] = (kv, pos, pos + 1)
            starts[sid] = pos
            if self.storage is not None:
                self.storage.append_tokens(sid, [self.last[sid]])
            self.last[sid] = res.token
            out[sid] = res.token
        self._persist(sids, hidden, kvs, starts)
        return out

    def finish(self, sid: str) -> None:
        kv = self.live.pop(sid)
        self.last.pop(sid)
        if self.storage is not None:
            self.storage.flush()
            self.storage.finalize_session(sid)
        if self.strategy is Strategy.IDEAL:
            self.resident[sid] = kv


# ---------------------------------------------------------------------------
# Event loop
# ---------------------------------------------------------------------------


@dataclass
class _Active:
    req: Request
    index: int
    start_s: float
    restore_s: float
    prefill_s: float
    context: int
    remaining: int  # decode iterations left, the last one only feeds
    stamps: list = field(default_factory=list)
    tokens: list = field(default_factory=list)


def run(trace: Trace, strategy: Strategy | str, config: ServingConfig | None = None) -> Metrics:
    """Serve ``trace`` under ``strategy`` and collect per-request metrics."""
    strategy = Strategy.parse(strategy) if isinstance(strategy, str) else strategy
    cfg = config or ServingConfig()
    timing = cfg.timing
    profile = cfg.profile
    throttle = cfg.throttle()
    restoration = _strategy_plan(strategy, cfg)
    methods = restoration.layer_assignment if restoration else []
    saving = "none" if strategy in (Strategy.IDEAL, Strategy.RECOMPUTE) else cfg.saving
    saver = SaveModel(saving, profile, cfg.n_devices, cfg.device_bw, cfg.write_latency_s,
                      cfg.buffer_bytes)
    index = {sid: i for i, sid in enumerate(trace.session_ids)}

    tmp = None
    executor = None
    if cfg.execute:
        weights = init_model(cfg.model, cfg.weights_seed)
        storage = None
        exec_plan = None
        if strategy in (Strategy.HCACHE, Strategy.KV_OFFLOAD):
            exec_plan = scale_plan(restoration, cfg.model.n_layers)
            root = cfg.workdir
            if root is None:
                tmp = tempfile.TemporaryDirectory(prefix="hcache-run-")
                root = tmp.name
            root = Path(root) / strategy.value
            if root.exists() and any(root.iterdir()):
                raise FileExistsError(f"{root} is not empty")
            storage = StorageManager(DevicePool.under(root, cfg.n_devices), cfg.buffer_bytes)
        executor = _Executor(strategy, exec_plan, weights, storage, trace.seed)

    def restore_seconds(history: int) -> float:
        if history == 0 or restoration is None:
            return 0.0
        return simulate_restore(restoration, history, timing, throttle).total_s

    def snapshot_seconds(tokens: int) -> float:
        if saving == "none":
            return 0.0
        return sum(tokens * _row_bytes(m, timing, profile.elem_bytes) for m in methods) / profile.bw

    try:
        pending = sorted(trace.requests, key=lambda r: (r.arrival_s, r.session_id, r.round))
        # a session's next round waits for the previous one to finish
        done_at: dict[str, float] = {}
        seen: set[str] = set()
        waiting: list[Request] = []
        active: list[_Active] = []
        results: list[RequestMetrics] = []
        outputs: dict = {}
        clock = 0.0

        def ready_time(req: Request) -> float:
            return max(req.arrival_s, done_at.get(req.session_id, 0.0))

        def blocked(req: Request) -> bool:
            return any(a.req.session_id == req.session_id for a in active) or any(
                w.session_id == req.session_id and w.round < req.round for w in waiting)

        while pending or waiting or active:
            while pending and pending[0].arrival_s <= clock:
                waiting.append(pending.pop(0))
            candidates = [w for w in waiting
                          if not blocked(w) and ready_time(w) <= clock]
            if candidates and len(active) < cfg.max_batch:
                req = min(candidates, key=lambda w: (ready_time(w), w.arrival_s, w.session_id))
                waiting.remove(req)
                sid = req.session_id
                if executor is not None and sid not in seen and req.history_tokens > 0:
                    executor.warm(sid, index[sid], req.history_tokens)
                seen.add(sid)
                t_restore = restore_seconds(req.history_tokens)
                ctx = req.history_tokens + req.new_prompt_tokens
                # the prompt's host copy runs on its own stream beside prefill
                t_prefill = max(prefill_time(req.new_prompt_tokens, ctx, timing, profile),
                                snapshot_seconds(req.new_prompt_tokens))
                saver.advance(t_restore + t_prefill, 0)
                start = clock
                clock += t_restore + t_prefill
                act = _Active(req, index[sid], start, t_restore, t_prefill, ctx,
                              req.output_budget, [clock])
                if executor is not None:
                    act.tokens.append(executor.start(req, index[sid]))
                active.append(act)
                continue
            if active:
                dt = _decode_iteration([a.context + 1 for a in active], methods, timing,
                                       profile, saver)
                clock += dt
                if executor is not None:
                    produced = executor.step([a.req.session_id for a in active])
                still = []
                for a in active:
                    a.context += 1
                    a.remaining -= 1
                    if a.remaining > 0:
                        a.stamps.append(clock)
                        if executor is not None:
                            a.tokens.append(produced[a.req.session_id])
                        still.append(a)
                        continue
                    sid = a.req.session_id
                    if executor is not None:
                        executor.finish(sid)
                    done_at[sid] = clock
                    gaps = np.diff(a.stamps)
                    results.append(RequestMetrics(
                        sid, a.req.round, a.req.history_tokens, a.req.new_prompt_tokens,
                        len(a.stamps), a.req.arrival_s, a.start_s, a.restore_s, a.prefill_s,
                        clock, float(gaps.mean()) if gaps.size else math.nan))
                    outputs[(sid, a.req.round)] = a.tokens
                active = still
                continue
            upcoming = [ready_time(w) for w in waiting if not blocked(w)]
            if pending:
                upcoming.append(pending[0].arrival_s)
            clock = max(clock, min(upcoming))

        results.sort(key=lambda r: (r.arrival_s, r.session_id, r.round))
        per_token = 0.0
        if restoration is not None:
            per_token = storage_bytes(restoration, timing, 1, profile.elem_bytes)["hcache"]
        if strategy is Strategy.RECOMPUTE:
            per_token = 4.0
        return Metrics(strategy, results, outputs if executor else {}, restoration,
                       per_token, saver.stalls, clock)
    finally:
        if tmp is not None:
            tmp.cleanup()


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


_COLUMNS = ["strategy", "requests", "ttft_mean_s", "ttft_p50_s", "ttft_p95_s",
            "tbt_mean_s", "tbt_p95_s", "restore_tok_per_s", "bytes_per_token"]


def report(metrics_sets: list[Metrics], fmt: str = "text") -> str:
    """Comparison table of several runs.

    With two or more runs a ``ttft_ratio`` column gives each run's mean TTFT
    divided by the HCACHE run's (or the first run's when HCACHE is absent),
    i.e. how much faster hidden-state restoration is than that baseline.
    """
    if not metrics_sets:
        raise ValueError("report needs at least one metrics set")
    rows = [m.summary() for m in metrics_sets]
    columns = list(_COLUMNS)
    if len(rows) > 1:
        ref = next((m for m in metrics_sets if m.strategy is Strategy.HCACHE), metrics_sets[0])
        for row, m in zip(rows, metrics_sets):
            row["ttft_ratio"] = m.ttft_mean / ref.ttft_mean if ref.ttft_mean > 0 else math.nan
        columns.append("ttft_ratio")
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([row[c] if isinstance(row[c], str) else repr(row[c]) for c in columns])
        return buf.getvalue()
    if fmt != "text":
        raise ValueError("fmt must be 'text' or 'csv'")

    def cell(value) -> str:
        if isinstance(value, str):
            return value
        if isinstance(value, int):
            return str(value)
        return f"{value:.6g}"

    table = [columns] + [[cell(row[c]) for c in columns] for row in rows]
    widths = [max(len(r[i]) for r in table) for i in range(len(columns))]
    lines = ["  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in table]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def parse_report_csv(text: str) -> list[dict]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        parsed = {}
        for key, value in row.items():
            if key == "strategy":
                parsed[key] = value
            elif key == "requests":
                parsed[key] = int(value)
            else:
                parsed[key] = float(value)
        out.append(parsed)
    return out
