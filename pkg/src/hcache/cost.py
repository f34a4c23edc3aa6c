"""Analytic restoration cost model.

Per-layer times for the three ways of getting a layer's KV cache back onto
the accelerator:

* hidden states: fetch ``n * d`` elements and project them (``4 n d^2`` FLOPs),
  with fetch and projection pipelined so the slower one dominates;
* KV offload: fetch ``2 n d`` elements;
* token recompute: the full layer, ``24 n d^2 + n^2 d`` FLOPs.

Unlike the element-count formulation, IO times here carry ``elem_bytes`` so
that bandwidth can be given in bytes per second.  Norms, residual adds and the
embedding lookup are costed at zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

from .config import parse_kv_text
from .model import ModelConfig

__all__ = [
    "HardwareProfile",
    "CostBreakdown",
    "io_time_hidden",
    "io_time_kv",
    "compute_time_hidden",
    "recompute_time",
    "restore_time_hcache",
    "breakdown",
    "storage_bytes",
    "stepped_tokens",
    "prefill_time",
    "decode_layer_time",
    "load_profile",
    "HARDWARE_PRESETS",
]


@dataclass(frozen=True)
class HardwareProfile:
    """Peak compute and storage bandwidth of one serving platform.

    ``efficiency`` scales the peak FLOPS to what GEMMs actually achieve.
    ``hbm_bw`` (optional) adds a memory-bound floor to decode iterations.
    """

    label: str
    flops: float
    bw: float
    elem_bytes: int = 2
    efficiency: float = 1.0
    hbm_bw: float | None = None

    def __post_init__(self):
        for name in ("flops", "bw", "elem_bytes", "efficiency"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.hbm_bw is not None and not self.hbm_bw > 0:
            raise ValueError("hbm_bw must be positive")

    @property
    def effective_flops(self) -> float:
        return self.flops * self.efficiency

    def with_bw(self, bw: float) -> "HardwareProfile":
        return replace(self, bw=bw)


# FP16 peak, host link bandwidth
HARDWARE_PRESETS = {
    "a100": HardwareProfile("A100", 312e12, 32e9, hbm_bw=1.555e12),
    "a30": HardwareProfile("A30", 165e12, 32e9, hbm_bw=0.933e12),
    "4090": HardwareProfile("4090", 330e12, 32e9, hbm_bw=1.008e12),
    "l20": HardwareProfile("L20", 120e12, 32e9, hbm_bw=0.864e12),
    "h800": HardwareProfile("H800", 990e12, 64e9, hbm_bw=3.35e12),
}


def _check_n(n_seq: int) -> None:
    if n_seq < 1:
        raise ValueError(f"n_seq must be >= 1, got {n_seq}")


def io_time_hidden(n_seq: int, config: ModelConfig, profile: HardwareProfile) -> float:
    """Seconds to move one layer's hidden states."""
    _check_n(n_seq)
    return n_seq * config.d_hidden * profile.elem_bytes / profile.bw


def io_time_kv(n_seq: int, config: ModelConfig, profile: HardwareProfile) -> float:
    """Seconds to move one layer's K and V."""
    _check_n(n_seq)
    return 2 * n_seq * config.d_hidden * profile.elem_bytes / profile.bw


def stepped_tokens(n: int, step: int | None) -> int:
    """Token count a GEMM is billed for when kernels plateau every ``step`` rows."""
    if not step or n <= 0:
        return n
    return math.ceil(n / step) * step


def compute_time_hidden(n_seq: int, config: ModelConfig, profile: HardwareProfile,
                        step: int | None = None) -> float:
    """Seconds to project one layer's hidden states to K and V."""
    _check_n(n_seq)
    d = config.d_hidden
    return 4 * stepped_tokens(n_seq, step) * d * d / profile.effective_flops


def recompute_time(n_seq: int, config: ModelConfig, profile: HardwareProfile,
                   step: int | None = None, n_ctx: int | None = None) -> float:
    """Seconds to recompute one layer from tokens (attention + FFN).

    ``n_ctx`` is the attended context length when recomputing only a tail of
    ``n_seq`` tokens; it defaults to ``n_seq``.
    """
    _check_n(n_seq)
    d = config.d_hidden
    ctx = n_seq if n_ctx is None else n_ctx
    gemm = stepped_tokens(n_seq, step)
    c_attn = 8 * gemm * d * d + n_seq * ctx * d
    c_ffn = 16 * gemm * d * d
    return (c_attn + c_ffn) / profile.effective_flops


def restore_time_hcache(n_seq: int, config: ModelConfig, profile: HardwareProfile,
                        whole_model: bool = False) -> float:
    per_layer = max(io_time_hidden(n_seq, config, profile),
                    compute_time_hidden(n_seq, config, profile))
    return per_layer * config.n_layers if whole_model else per_layer


@dataclass(frozen=True)
class CostBreakdown:
    """Per-layer restoration costs in seconds; ``model_*`` scale by layer count."""

    n_seq: int
    n_layers: int
    io_hidden_s: float
    c_hidden_s: float
    io_kv_s: float
    c_attn_s: float
    c_ffn_s: float

    @property
    def t_hidden_s(self) -> float:
        return max(self.io_hidden_s, self.c_hidden_s)

    @property
    def t_kv_s(self) -> float:
        return self.io_kv_s

    @property
    def t_rec_s(self) -> float:
        return self.c_attn_s + self.c_ffn_s

    def model(self, name: str) -> float:
        return getattr(self, name) * self.n_layers


def breakdown(n_seq: int, config: ModelConfig, profile: HardwareProfile) -> CostBreakdown:
    _check_n(n_seq)
    d, f = config.d_hidden, profile.effective_flops
    return CostBreakdown(
        n_seq=n_seq,
        n_layers=config.n_layers,
        io_hidden_s=io_time_hidden(n_seq, config, profile),
        c_hidden_s=compute_time_hidden(n_seq, config, profile),
        io_kv_s=io_time_kv(n_seq, config, profile),
        c_attn_s=(8 * n_seq * d * d + n_seq * n_seq * d) / f,
        c_ffn_s=16 * n_seq * d * d / f,
    )


def storage_bytes(plan, config: ModelConfig, n_tokens: int,
                  elem_bytes: int | None = None) -> dict[str, int]:
    """Persisted bytes for ``n_tokens`` under ``plan`` versus full KV offload.

    Hidden-state layers store ``d`` elements per token, KV layers ``2d`` and
    recomputed layers nothing (their tokens are negligible).
    """
    from .scheduler import Method

    eb = config.elem_bytes if elem_bytes is None else elem_bytes
    d = config.d_hidden
    per_token = 0
    for method in plan.layer_assignment:
        if method is Method.HIDDEN:
            per_token += d
        elif method is Method.KV_OFFLOAD:
            per_token += 2 * d
    return {
        "hcache": per_token * eb * n_tokens,
        "kv_offload": config.n_layers * 2 * d * eb * n_tokens,
    }


def prefill_time(n_new: int, n_ctx: int, config: ModelConfig,
                 profile: HardwareProfile) -> float:
    """Whole-model seconds to prefill ``n_new`` tokens attending ``n_ctx`` keys."""
    if n_new <= 0:
        return 0.0
    d = config.d_hidden
    flops = 24 * n_new * d * d + n_new * n_ctx * d
    return config.n_layers * flops / profile.effective_flops


def decode_layer_time(contexts, config: ModelConfig, profile: HardwareProfile) -> float:
    """Seconds for one layer of one decode iteration over a batch.

    ``contexts`` lists each sequence's attended length.  Roofline: the larger
    of the FLOP time and, when ``hbm_bw`` is known, the time to stream the
    layer's weights plus every sequence's K/V from device memory.
    """
    contexts = list(contexts)
    if not contexts:
        return 0.0
    d, eb = config.d_hidden, profile.elem_bytes
    batch, total_ctx = len(contexts), sum(contexts)
    flops = 24 * batch * d * d + total_ctx * d
    t = flops / profile.effective_flops
    if profile.hbm_bw is not None:
        weight_bytes = (4 * d * d + 2 * d * config.d_ffn) * eb
        kv_bytes = 2 * total_ctx * d * eb
        t = max(t, (weight_bytes + kv_bytes) / profile.hbm_bw)
    return t


def load_profile(path) -> HardwareProfile:
    """Read a flat ``key = value`` profile file.

    Keys: ``label``, ``flops``, ``bw_bytes_per_s``, ``elem_bytes`` and the
    optional ``efficiency`` and ``hbm_bw``.
    """
    values = parse_kv_text(Path(path).read_text())
    try:
        return HardwareProfile(
            label=values.get("label", Path(path).stem),
            flops=float(values["flops"]),
            bw=float(values["bw_bytes_per_s"]),
            elem_bytes=int(values.get("elem_bytes", 2)),
            efficiency=float(values.get("efficiency", 1.0)),
            hbm_bw=float(values["hbm_bw"]) if "hbm_bw" in values else None,
        )
    except KeyError as exc:
        raise ValueError(f"profile {path} is missing {exc.args[0]!r}") from None
