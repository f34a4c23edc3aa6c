"""Layer-wise restoration planning.

Most layers are restored from hidden states; a contiguous block of layers uses
a complementary method chosen to soak up whichever resource would otherwise
idle.  When projection is slower than the hidden-state fetch, the IO lane has
slack, so the last layers are fetched as KV.  When the fetch is the
bottleneck, the compute lane has slack, so the first layers are recomputed
from tokens while later hidden states stream in.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

__all__ = [
    "Method",
    "Complement",
    "ProfiledTimings",
    "RestorationPlan",
    "plan",
    "makespan",
    "brute_force_plan",
    "max_stage_cost",
]


class Method(enum.Enum):
    HIDDEN = "HIDDEN"
    KV_OFFLOAD = "KV_OFFLOAD"
    RECOMPUTE = "RECOMPUTE"


class Complement(enum.Enum):
    KV_OFFLOAD = "KV_OFFLOAD"
    RECOMPUTE = "RECOMPUTE"
    NONE = "NONE"


@dataclass(frozen=True)
class ProfiledTimings:
    """Per-layer seconds for each restoration stage at the profiling batch size."""

    io_h: float
    io_kv: float
    c_h: float
    c_token: float
    n_layers: int

    def __post_init__(self):
        for name in ("io_h", "io_kv", "c_h", "c_token"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be positive and finite, got {value!r}")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")


@dataclass(frozen=True)
class RestorationPlan:
    l_h: int
    l_o: int
    complement: Complement

    def __post_init__(self):
        if self.l_h < 0 or self.l_o < 0 or self.l_h + self.l_o < 1:
            raise ValueError(f"invalid layer split {self.l_h}/{self.l_o}")
        if (self.complement is Complement.NONE) != (self.l_o == 0):
            raise ValueError("complement must be NONE exactly when l_o == 0")

    @property
    def n_layers(self) -> int:
        return self.l_h + self.l_o

    @property
    def layer_assignment(self) -> list[Method]:
        if self.complement is Complement.RECOMPUTE:
            return [Method.RECOMPUTE] * self.l_o + [Method.HIDDEN] * self.l_h
        if self.complement is Complement.KV_OFFLOAD:
            return [Method.HIDDEN] * self.l_h + [Method.KV_OFFLOAD] * self.l_o
        return [Method.HIDDEN] * self.l_h

    def layers_using(self, method: Method) -> list[int]:
        return [i for i, m in enumerate(self.layer_assignment) if m is method]

    def describe(self) -> str:
        """Short schedule label such as ``31 H + 1 KV``."""
        if self.complement is Complement.NONE:
            return f"{self.l_h} H"
        tag = "KV" if self.complement is Complement.KV_OFFLOAD else "RE"
        return f"{self.l_h} H + {self.l_o} {tag}" if self.l_h else f"{self.l_o} {tag}"

    def to_record(self) -> str:
        return f"l_h={self.l_h} l_o={self.l_o} complement={self.complement.value}"

    @classmethod
    def from_record(cls, text: str) -> "RestorationPlan":
        fields = dict(part.split("=", 1) for part in text.split())
        return cls(int(fields["l_h"]), int(fields["l_o"]), Complement(fields["complement"]))

    @classmethod
    def uniform(cls, method: Method, n_layers: int) -> "RestorationPlan":
        """Every layer restored the same way (the three baseline strategies)."""
        if method is Method.HIDDEN:
            return cls(n_layers, 0, Complement.NONE)
        return cls(0, n_layers, Complement(method.value))


def _ceil(x: float) -> int:
    # absorb float noise such as 29.000000000004 from an exact quotient
    return math.ceil(x - 1e-9 * max(1.0, abs(x)))


def _build(l_h: int, n_layers: int, complement: Complement) -> RestorationPlan:
    l_h = min(max(l_h, 0), n_layers)
    if l_h == n_layers:
        return RestorationPlan(n_layers, 0, Complement.NONE)
    return RestorationPlan(l_h, n_layers - l_h, complement)


def plan(timings: ProfiledTimings) -> RestorationPlan:
    """Closed-form bubble-free split of layers between hidden states and a complement.

    ``c_h > io_h``: ``L_H = ceil(N * io_kv / (io_kv + c_h - io_h))`` with KV for
    the rest.  Otherwise ``L_H = ceil(N * c_token / (c_token + io_h - c_h))``
    with the first layers recomputed (the tie ``c_h == io_h`` lands here and
    yields all layers on hidden states).
    """
    t = timings
    n = t.n_layers
    if t.c_h > t.io_h:
        l_h = _ceil(n * t.io_kv / (t.io_kv + t.c_h - t.io_h))
        return _build(l_h, n, Complement.KV_OFFLOAD)
    l_h = _ceil(n * t.c_token / (t.c_token + t.io_h - t.c_h))
    return _build(l_h, n, Complement.RECOMPUTE)


def makespan(restoration: RestorationPlan, timings: ProfiledTimings) -> float:
    """Two-lane restoration time predicted for ``restoration``.

    KV complement: ``max(c_h*L_H, io_h*L_H + io_kv*L_O)``.  Recompute
    complement: the compute lane runs the recomputed prefix and then every
    projection, while the IO lane prefetches hidden states from time zero,
    so ``max(io_h*L_H, c_token*L_O + c_h*L_H)``.
    """
    t = timings
    if restoration.n_layers != t.n_layers:
        raise ValueError(
            f"plan covers {restoration.n_layers} layers, timings {t.n_layers}"
        )
    l_h, l_o = restoration.l_h, restoration.l_o
    if restoration.complement is Complement.RECOMPUTE:
        return max(t.io_h * l_h, t.c_token * l_o + t.c_h * l_h)
    return max(t.c_h * l_h, t.io_h * l_h + t.io_kv * l_o)


def max_stage_cost(timings: ProfiledTimings) -> float:
    return max(timings.io_h, timings.io_kv, timings.c_h, timings.c_token)


def brute_force_plan(timings: ProfiledTimings) -> RestorationPlan:
    """Exhaustive argmin of :func:`makespan` over every split and complement.

    Ties go to the larger ``L_H`` and then to recomputation, i.e. toward the
    plan that stores less.
    """
    n = timings.n_layers
    best, best_key = None, None
    for complement in (Complement.RECOMPUTE, Complement.KV_OFFLOAD):
        for l_h in range(n + 1):
            candidate = _build(l_h, n, complement)
            cost = makespan(candidate, timings)
            key = (cost, -l_h)
            if best is None or _better(key, best_key):
                best, best_key = candidate, key
    return best


def _better(key, incumbent) -> bool:
    cost, neg_l_h = key
    best_cost, best_neg = incumbent
    if math.isclose(cost, best_cost, rel_tol=1e-12, abs_tol=0.0):
        return neg_l_h < best_neg
    return cost < best_cost
