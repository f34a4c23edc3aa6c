"""Flat ``key = value`` config files and named model presets."""

from __future__ import annotations

from .model import ModelConfig

__all__ = ["parse_kv_text", "MODEL_PRESETS", "model_preset"]


def parse_kv_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


# FFN width is 4*d so that the FFN costs 16 n d^2 as in the analytic model.
MODEL_PRESETS = {
    "toy": ModelConfig(n_layers=4, d_hidden=256, n_heads=8, d_ffn=1024,
                       vocab_size=1024, elem_bytes=4, max_seq=16384),
    "7b": ModelConfig(n_layers=32, d_hidden=4096, n_heads=32, d_ffn=16384,
                      vocab_size=32000, elem_bytes=2, max_seq=16384),
    "13b": ModelConfig(n_layers=40, d_hidden=5120, n_heads=40, d_ffn=20480,
                       vocab_size=32000, elem_bytes=2, max_seq=16384),
    "30b": ModelConfig(n_layers=48, d_hidden=7168, n_heads=56, d_ffn=28672,
                       vocab_size=50272, elem_bytes=2, max_seq=16384),
}


def model_preset(name: str) -> ModelConfig:
    try:
        return MODEL_PRESETS[name.lower()]
    except KeyError:
        raise ValueError(
            f"unknown model preset {name!r}; choose from {sorted(MODEL_PRESETS)}"
        ) from None
