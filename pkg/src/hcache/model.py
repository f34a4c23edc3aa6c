"""Deterministic toy transformer with hidden-state capture.

Pre-norm decoder blocks (LayerNorm -> attention -> residual, LayerNorm -> GELU
FFN -> residual), rotary position embedding on Q and K, tied embedding for the
output head and greedy decoding.

Weights are stored as float32 (row-major, ``W @ x`` convention: a linear map
``W`` of shape ``(out, in)`` is applied to token rows as ``x @ W.T``).  Every
GEMM and the attention core accumulate in float64 and round the result back to
float32.  That keeps activations in 4-byte floats while making each output row
independent of how many rows were batched together, so KV restored from hidden
states matches the prefill cache to the last ulp in practice.
"""

from __future__ import annotations

import contextlib
import contextvars
import hashlib
import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

__all__ = [
    "ModelConfig",
    "LayerWeights",
    "WeightSet",
    "HiddenStates",
    "KVCache",
    "PrefillResult",
    "DecodeResult",
    "FlopCounter",
    "count_flops",
    "init_model",
    "apply_rope",
    "project_hidden_to_kv",
    "attention_forward",
    "ffn_forward",
    "layer_forward",
    "prefill",
    "decode_step",
    "layer_flops",
    "save_weights",
    "load_weights",
]

WEIGHT_MAGIC = b"HSW1"


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    d_hidden: int = 256
    n_heads: int = 8
    d_ffn: int = 1024
    vocab_size: int = 1024
    elem_bytes: int = 4
    max_seq: int = 4096
    layer_norm: bool = True
    rope_base: float = 10000.0
    norm_eps: float = 1e-5

    def __post_init__(self):
        for name in ("n_layers", "d_hidden", "n_heads", "d_ffn", "vocab_size", "max_seq"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.d_hidden % self.n_heads:
            raise ValueError(
                f"d_hidden={self.d_hidden} is not divisible by n_heads={self.n_heads}"
            )
        if self.elem_bytes not in (2, 4):
            raise ValueError(f"elem_bytes must be 2 or 4, got {self.elem_bytes}")

    @property
    def d_head(self) -> int:
        return self.d_hidden // self.n_heads

    @property
    def storage_dtype(self) -> np.dtype:
        return np.dtype(np.float16 if self.elem_bytes == 2 else np.float32)

    def fingerprint(self) -> str:
        text = ";".join(f"{f.name}={getattr(self, f.name)}" for f in fields(self))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class LayerWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    fc1: np.ndarray
    fc2: np.ndarray
    _wide: dict = field(default_factory=dict, repr=False, compare=False)

    def wide(self, name: str) -> np.ndarray:
        # float64 copies are cached; the float32 arrays remain the source of truth
        if name not in self._wide:
            self._wide[name] = getattr(self, name).astype(np.float64)
        return self._wide[name]

    def matrices(self):
        return [self.w_q, self.w_k, self.w_v, self.w_o, self.fc1, self.fc2]


@dataclass
class WeightSet:
    config: ModelConfig
    seed: int
    embedding: np.ndarray
    layers: list[LayerWeights]

    def equals(self, other: "WeightSet") -> bool:
        """Bitwise equality of every parameter."""
        if self.config != other.config or self.seed != other.seed:
            return False
        mats = [self.embedding] + [m for lw in self.layers for m in lw.matrices()]
        others = [other.embedding] + [m for lw in other.layers for m in lw.matrices()]
        return all(a.tobytes() == b.tobytes() for a, b in zip(mats, others))


@dataclass
class HiddenStates:
    """Input activations of one layer for tokens ``[start, start + n)``."""

    layer: int
    start: int
    data: np.ndarray

    @property
    def token_range(self) -> tuple[int, int]:
        return self.start, self.start + self.data.shape[0]

    def nbytes(self, elem_bytes: int) -> int:
        n, d = self.data.shape
        return n * d * elem_bytes


class KVCache:
    """Per-layer growable K and V buffers (n_tokens x d_hidden each).

    Single writer: only :meth:`append` mutates, always at the tail.
    """

    def __init__(self, n_layers: int, d_hidden: int, capacity: int = 64):
        self.n_layers = n_layers
        self.d_hidden = d_hidden
        self._k = [np.empty((capacity, d_hidden), np.float32) for _ in range(n_layers)]
        self._v = [np.empty((capacity, d_hidden), np.float32) for _ in range(n_layers)]
        self._len = [0] * n_layers

    @classmethod
    def from_arrays(cls, keys, values) -> "KVCache":
        keys = [np.asarray(k, np.float32) for k in keys]
        values = [np.asarray(v, np.float32) for v in values]
        cache = cls(len(keys), keys[0].shape[1], capacity=max(1, keys[0].shape[0]))
        for layer, (k, v) in enumerate(zip(keys, values)):
            cache.append(layer, k, v)
        return cache

    def append(self, layer: int, k: np.ndarray, v: np.ndarray) -> None:
        if k.shape != v.shape or k.ndim != 2 or k.shape[1] != self.d_hidden:
            raise ValueError(f"bad KV block shapes {k.shape} / {v.shape}")
        n = self._len[layer]
        need = n + k.shape[0]
        if need > self._k[layer].shape[0]:
            cap = max(need, 2 * self._k[layer].shape[0])
            for buf in (self._k, self._v):
                grown = np.empty((cap, self.d_hidden), np.float32)
                grown[:n] = buf[layer][:n]
                buf[layer] = grown
        self._k[layer][n:need] = k
        self._v[layer][n:need] = v
        self._len[layer] = need

    def keys(self, layer: int) -> np.ndarray:
        return self._k[layer][: self._len[layer]]

    def values(self, layer: int) -> np.ndarray:
        return self._v[layer][: self._len[layer]]

    def layer_length(self, layer: int) -> int:
        return self._len[layer]

    @property
    def length(self) -> int:
        if len(set(self._len)) != 1:
            raise RuntimeError(f"layer lengths diverge: {self._len}")
        return self._len[0]

    def copy(self) -> "KVCache":
        clone = KVCache(self.n_layers, self.d_hidden, capacity=max(1, max(self._len)))
        for i in range(self.n_layers):
            clone.append(i, self.keys(i), self.values(i))
        return clone

    def max_abs_diff(self, other: "KVCache") -> float:
        worst = 0.0
        for i in range(self.n_layers):
            if self.layer_length(i) != other.layer_length(i):
                return math.inf
            for a, b in ((self.keys(i), other.keys(i)), (self.values(i), other.values(i))):
                if a.size:
                    worst = max(worst, float(np.max(np.abs(a - b))))
        return worst


# ---------------------------------------------------------------------------
# FLOP instrumentation
# ---------------------------------------------------------------------------


class FlopCounter:
    """Accumulates FLOPs charged by model operations, keyed by category.

    GEMMs are charged 2 FLOPs per multiply-add.  The attention core (scores
    plus the weighted sum over V, all heads) is charged ``n_q * n_ctx *
    d_hidden``, the same convention as the analytic restoration cost model.
    Norms, RoPE, softmax, GELU and residual adds are charged nothing.
    """

    def __init__(self):
        self.by_category: dict[str, int] = {}

    def charge(self, category: str, flops: int) -> None:
        self.by_category[category] = self.by_category.get(category, 0) + int(flops)

    @property
    def total(self) -> int:
        return sum(self.by_category.values())


_ACTIVE_COUNTER: contextvars.ContextVar[FlopCounter | None] = contextvars.ContextVar(
    "hcache_flop_counter", default=None
)


@contextlib.contextmanager
def count_flops():
    counter = FlopCounter()
    token = _ACTIVE_COUNTER.set(counter)
    try:
        yield counter
    finally:
        _ACTIVE_COUNTER.reset(token)


def _charge(category: str, flops: int) -> None:
    counter = _ACTIVE_COUNTER.get()
    if counter is not None:
        counter.charge(category, flops)


def layer_flops(n_new: int, n_ctx: int, config: ModelConfig, kind: str = "layer") -> dict:
    """FLOPs one layer charges for ``n_new`` tokens attending over ``n_ctx`` keys.

    Walks the same operations the forward pass charges, without running them.
    ``kind`` is ``"layer"`` (full recompute) or ``"project"`` (hidden->KV).
    """
    d, f = config.d_hidden, config.d_ffn
    if kind == "project":
        return {"proj_kv": 2 * 2 * n_new * d * d}
    if kind != "layer":
        raise ValueError(f"unknown kind {kind!r}")
    return {
        "proj_kv": 2 * 2 * n_new * d * d,
        "proj_q": 2 * n_new * d * d,
        "attn_core": n_new * n_ctx * d,
        "proj_o": 2 * n_new * d * d,
        "ffn": 2 * 2 * n_new * d * f,
    }


# ---------------------------------------------------------------------------
# Primitive ops
# ---------------------------------------------------------------------------


def init_model(config: ModelConfig, seed: int) -> WeightSet:
    """Draw every parameter uniformly from [-1/sqrt(d_hidden), +1/sqrt(d_hidden)]."""
    if not isinstance(config, ModelConfig):
        raise TypeError("config must be a ModelConfig")
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(config.d_hidden)
    d, f = config.d_hidden, config.d_ffn

    def draw(*shape):
        return rng.uniform(-bound, bound, size=shape).astype(np.float32)

    embedding = draw(config.vocab_size, d)
    layers = [
        LayerWeights(
            w_q=draw(d, d), w_k=draw(d, d), w_v=draw(d, d), w_o=draw(d, d),
            fc1=draw(f, d), fc2=draw(d, f),
        )
        for _ in range(config.n_layers)
    ]
    return WeightSet(config=config, seed=int(seed), embedding=embedding, layers=layers)


def _linear(x: np.ndarray, lw: LayerWeights, name: str, category: str) -> np.ndarray:
    w = lw.wide(name)
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"{name}: input {x.shape} does not match weight {w.shape}")
    _charge(category, 2 * x.shape[0] * w.shape[0] * w.shape[1])
    return (x.astype(np.float64) @ w.T).astype(np.float32)


def _layer_norm(x: np.ndarray, config: ModelConfig) -> np.ndarray:
    if not config.layer_norm:
        return x
    wide = x.astype(np.float64)
    mean = wide.mean(axis=-1, keepdims=True)
    var = wide.var(axis=-1, keepdims=True)
    return ((wide - mean) / np.sqrt(var + config.norm_eps)).astype(np.float32)


def _gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation
    wide = x.astype(np.float64)
    inner = math.sqrt(2.0 / math.pi) * (wide + 0.044715 * wide**3)
    return (0.5 * wide * (1.0 + np.tanh(inner))).astype(np.float32)


def _check_positions(positions, n: int, config: ModelConfig) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.int64)
    if positions.shape != (n,):
        raise ValueError(f"expected {n} positions, got shape {positions.shape}")
    if n and (positions.min() < 0 or positions.max() >= config.max_seq):
        raise ValueError("position outside [0, max_seq)")
    return positions


def apply_rope(vectors: np.ndarray, positions, config: ModelConfig) -> np.ndarray:
    """Rotate each head's consecutive element pairs by ``pos * base**(-2i/d_head)``."""
    dh = config.d_head
    if dh % 2:
        raise ValueError(f"rotary embedding needs an even head dim, got {dh}")
    vectors = np.asarray(vectors)
    n = vectors.shape[0]
    if vectors.ndim != 2 or vectors.shape[1] != config.d_hidden:
        raise ValueError(f"expected (n, {config.d_hidden}) vectors, got {vectors.shape}")
    positions = np.asarray(positions, dtype=np.int64)
    if positions.shape != (n,):
        raise ValueError(f"expected {n} positions, got shape {positions.shape}")
    inv_freq = config.rope_base ** (-np.arange(0, dh, 2, dtype=np.float64) / dh)
    angles = positions[:, None].astype(np.float64) * inv_freq[None, :]
    cos, sin = np.cos(angles), np.sin(angles)
    x = vectors.astype(np.float64).reshape(n, config.n_heads, dh // 2, 2)
    even, odd = x[..., 0], x[..., 1]
    cos, sin = cos[:, None, :], sin[:, None, :]
    out = np.empty_like(x)
    out[..., 0] = even * cos - odd * sin
    out[..., 1] = even * sin + odd * cos
    return out.reshape(n, config.d_hidden).astype(np.float32)


def project_hidden_to_kv(hidden, lw: LayerWeights, positions, config: ModelConfig):
    """Rebuild one layer's (K, V) rows from that layer's input hidden states.

    K is rotated at the tokens' original absolute positions; V is not rotated.
    This is the exact path prefill uses to fill the cache.
    """
    hidden = np.asarray(hidden, dtype=np.float32)
    if hidden.ndim != 2 or hidden.shape[1] != config.d_hidden:
        raise ValueError(f"hidden states must be (n, {config.d_hidden}), got {hidden.shape}")
    positions = _check_positions(positions, hidden.shape[0], config)
    x = _layer_norm(hidden, config)
    k = _linear(x, lw, "w_k", "proj_kv")
    v = _linear(x, lw, "w_v", "proj_kv")
    return apply_rope(k, positions, config), v


def attention_forward(hidden, kv_slice, lw: LayerWeights, positions, config: ModelConfig,
                      return_weights: bool = False, block: int = 1024):
    """Causal multi-head attention for ``hidden`` rows against cached (K, V).

    ``kv_slice`` holds rotated keys and values for positions ``0..ctx-1`` and
    must already include the query tokens themselves.  Returns the output
    projection (no residual); with ``return_weights`` also the per-head
    attention probabilities, shape ``(heads, n, ctx)``.
    """
    hidden = np.asarray(hidden, dtype=np.float32)
    keys, values = kv_slice
    n = hidden.shape[0]
    positions = _check_positions(positions, n, config)
    ctx = keys.shape[0]
    if keys.shape != values.shape or keys.ndim != 2 or keys.shape[1] != config.d_hidden:
        raise ValueError(f"bad kv slice shapes {keys.shape} / {values.shape}")
    if hidden.ndim != 2 or hidden.shape[1] != config.d_hidden:
        raise ValueError(f"hidden states must be (n, {config.d_hidden}), got {hidden.shape}")
    if n and positions.max() >= ctx:
        raise ValueError("kv slice does not cover every query position")

    h, dh = config.n_heads, config.d_head
    x = _layer_norm(hidden, config)
    q = apply_rope(_linear(x, lw, "w_q", "proj_q"), positions, config)
    _charge("attn_core", n * ctx * config.d_hidden)

    qh = q.astype(np.float64).reshape(n, h, dh).transpose(1, 0, 2)
    kh = keys.astype(np.float64).reshape(ctx, h, dh).transpose(1, 0, 2)
    vh = values.astype(np.float64).reshape(ctx, h, dh).transpose(1, 0, 2)
    scale = 1.0 / math.sqrt(dh)
    key_pos = np.arange(ctx)
    mixed = np.empty((h, n, dh), np.float64)
    weights = np.empty((h, n, ctx), np.float64) if return_weights else None
    for lo in range(0, n, block):
        hi = min(n, lo + block)
        scores = np.matmul(qh[:, lo:hi], kh.transpose(0, 2, 1)) * scale
        masked = key_pos[None, :] > positions[lo:hi, None]
        scores[:, masked] = -np.inf
        scores -= scores.max(axis=-1, keepdims=True)
        probs = np.exp(scores)
        probs /= probs.sum(axis=-1, keepdims=True)
        mixed[:, lo:hi] = np.matmul(probs, vh)
        if return_weights:
            weights[:, lo:hi] = probs
    attn = mixed.transpose(1, 0, 2).reshape(n, config.d_hidden).astype(np.float32)
    out = _linear(attn, lw, "w_o", "proj_o")
    return (out, weights) if return_weights else out


def ffn_forward(x, lw: LayerWeights, config: ModelConfig) -> np.ndarray:
    """``x + FC2(gelu(FC1(norm(x))))``."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 2 or x.shape[1] != config.d_hidden:
        raise ValueError(f"ffn input must be (n, {config.d_hidden}), got {x.shape}")
    inner = _gelu(_linear(_layer_norm(x, config), lw, "fc1", "ffn"))
    return x + _linear(inner, lw, "fc2", "ffn")


def layer_forward(hidden, lw: LayerWeights, kv: KVCache, layer: int, positions,
                  config: ModelConfig) -> np.ndarray:
    """Run one block for new tokens, appending their K/V to ``kv``.

    Returns the next layer's input hidden states.
    """
    k, v = project_hidden_to_kv(hidden, lw, positions, config)
    kv.append(layer, k, v)
    attn = attention_forward(hidden, (kv.keys(layer), kv.values(layer)), lw, positions, config)
    return ffn_forward(hidden + attn, lw, config)


# ---------------------------------------------------------------------------
# Prefill / decode
# ---------------------------------------------------------------------------


@dataclass
class PrefillResult:
    kv: KVCache
    hidden: list[HiddenStates]
    output: np.ndarray
    next_token: int


@dataclass
class DecodeResult:
    token: int
    hidden: list[HiddenStates]
    kv: KVCache


def _check_tokens(tokens, config: ModelConfig) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise ValueError("token id outside the vocabulary")
    return tokens


def _greedy(weights: WeightSet, final_hidden: np.ndarray) -> int:
    last = _layer_norm(final_hidden[-1:], weights.config).astype(np.float64)
    logits = last @ weights.embedding.astype(np.float64).T
    return int(np.argmax(logits[0]))


def forward_layers(weights: WeightSet, hidden: np.ndarray, kv: KVCache, positions,
                   layers: range):
    """Run ``layers`` in order, returning the captured inputs and final hidden."""
    captured = []
    for i in layers:
        captured.append(HiddenStates(i, int(positions[0]) if len(positions) else 0, hidden))
        hidden = layer_forward(hidden, weights.layers[i], kv, i, positions, weights.config)
    return captured, hidden


def prefill(weights: WeightSet, tokens, past: KVCache | None = None) -> PrefillResult:
    """Forward pass over ``tokens``, extending ``past`` (or a fresh cache)."""
    config = weights.config
    tokens = _check_tokens(tokens, config)
    if tokens.size == 0:
        raise ValueError("prefill needs at least one token")
    kv = past if past is not None else KVCache(config.n_layers, config.d_hidden,
                                               capacity=tokens.size)
    start = kv.length if past is not None else 0
    if start + tokens.size > config.max_seq:
        raise ValueError(
            f"sequence of {start + tokens.size} tokens exceeds max_seq={config.max_seq}"
        )
    positions = np.arange(start, start + tokens.size)
    hidden = weights.embedding[tokens]
    captured, final = forward_layers(weights, hidden, kv, positions, range(config.n_layers))
    return PrefillResult(kv=kv, hidden=captured, output=final, next_token=_greedy(weights, final))


def decode_step(weights: WeightSet, kv: KVCache, token: int) -> DecodeResult:
    """Feed one token at position ``kv.length`` and greedily pick the next one."""
    config = weights.config
    if kv.length == 0:
        raise ValueError("decode_step needs a non-empty KV cache")
    if kv.length >= config.max_seq:
        raise ValueError(f"KV cache already holds max_seq={config.max_seq} tokens")
    tokens = _check_tokens([token], config)
    positions = np.array([kv.length])
    hidden = weights.embedding[tokens]
    captured, final = forward_layers(weights, hidden, kv, positions, range(config.n_layers))
    return DecodeResult(token=_greedy(weights, final), hidden=captured, kv=kv)


# ---------------------------------------------------------------------------
# Weight file: magic, little-endian header, float32 matrices in layer order
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4s7I?dQ")


def save_weights(weights: WeightSet, path) -> None:
    c = weights.config
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(
            WEIGHT_MAGIC, c.n_layers, c.d_hidden, c.n_heads, c.d_ffn, c.vocab_size,
            c.elem_bytes, c.max_seq, c.layer_norm, c.rope_base, weights.seed,
        ))
        fh.write(weights.embedding.astype("<f4").tobytes())
        for lw in weights.layers:
            for m in lw.matrices():
                fh.write(m.astype("<f4").tobytes())


def load_weights(path) -> WeightSet:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise ValueError("weight file truncated")
    magic, nl, d, nh, f, vocab, eb, max_seq, ln, base, seed = _HEADER.unpack_from(blob)
    if magic != WEIGHT_MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    config = ModelConfig(n_layers=nl, d_hidden=d, n_heads=nh, d_ffn=f, vocab_size=vocab,
                         elem_bytes=eb, max_seq=max_seq, layer_norm=ln, rope_base=base)
    offset = _HEADER.size

    def take(*shape):
        nonlocal offset
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
        return arr.reshape(shape).astype(np.float32)

    embedding = take(vocab, d)
    layers = [
        LayerWeights(w_q=take(d, d), w_k=take(d, d), w_v=take(d, d), w_o=take(d, d),
                     fc1=take(f, d), fc2=take(d, f))
        for _ in range(nl)
    ]
    if offset != len(blob):
        raise ValueError("weight file has trailing bytes")
    return WeightSet(config=config, seed=seed, embedding=embedding, layers=layers)
