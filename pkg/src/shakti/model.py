"""Model configuration, presets, weight layout, forward pass and generation."""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace
from enum import Enum

import numpy as np

from . import tokenizer as tok
from .attention import (KvCache, RopeTable, SparsePattern, apply_rope, build_rope_table,
                        build_sparse_mask, gqa_attend, sparse_attend)
from .errors import CacheError, ConfigError, LayoutError
from .quant import BlockFormat, QuantizedTensor, qmatmul, qmatvec, quantize_tensor
from .rng import SplitMix64, normal_block, stream_seed
from .tensor_core import F32, matvec, rmsnorm, silu


class AttentionKind(Enum):
    GQA_SLIDING = 0
    BLOCK_SPARSE = 1


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    head_dim: int
    n_kv_heads: tuple[int, ...]
    ffn_hidden: int
    vocab_size: int = tok.VOCAB_SIZE
    window: int = 2048
    rope_base: float = 10000.0
    norm_eps: float = 1e-5
    attention_kind: AttentionKind = AttentionKind.GQA_SLIDING
    sparse: SparsePattern = field(default_factory=SparsePattern)
    tied_embeddings: bool = True
    max_positions: int = 8192

    def __post_init__(self):
        object.__setattr__(self, "n_kv_heads", tuple(int(n) for n in self.n_kv_heads))
        self.validate()

    def validate(self) -> None:
        problems = []
        if min(self.n_layers, self.d_model, self.n_heads, self.head_dim, self.ffn_hidden,
               self.vocab_size, self.window, self.max_positions) < 1:
            problems.append("all sizes must be >= 1")
        if self.n_heads * self.head_dim != self.d_model:
            problems.append(f"n_heads*head_dim = {self.n_heads * self.head_dim} != d_model = {self.d_model}")
        if len(self.n_kv_heads) != self.n_layers:
            problems.append(f"n_kv_heads has {len(self.n_kv_heads)} entries for {self.n_layers} layers")
        for i, n in enumerate(self.n_kv_heads):
            if n < 1 or self.n_heads % n:
                problems.append(f"layer {i}: n_kv_heads={n} does not divide n_heads={self.n_heads}")
        if self.head_dim % 2:
            problems.append(f"head_dim={self.head_dim} must be even for rotary embeddings")
        for name in ("d_model", "ffn_hidden"):  # input dims of every quantizable matrix
            if getattr(self, name) % 32:
                problems.append(f"{name}={getattr(self, name)} is not a multiple of 32")
        if self.norm_eps <= 0:
            problems.append("norm_eps must be > 0")
        if problems:
            raise ConfigError("invalid model config: " + "; ".join(problems))

    def kv_dim(self, layer: int) -> int:
        return self.n_kv_heads[layer] * self.head_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_kv_heads"] = list(self.n_kv_heads)
        d["attention_kind"] = self.attention_kind.name
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "attention_kind" in d:
            d["attention_kind"] = AttentionKind[d["attention_kind"]]
        if "sparse" in d:
            d["sparse"] = SparsePattern(**d["sparse"])
        if isinstance(d.get("n_kv_heads"), int):
            d["n_kv_heads"] = [d["n_kv_heads"]] * d["n_layers"]
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f"bad config fields: {e}") from None


def _kv_schedule(n_heads: int, n_layers: int) -> tuple[int, ...]:
    # largest divisor of n_heads not above n_heads / 4
    n = max(k for k in range(1, n_heads + 1) if n_heads % k == 0 and 4 * k <= n_heads)
    return (n,) * n_layers


def _preset(n_layers: int, d_model: int, kind: AttentionKind) -> ModelConfig:
    n_heads = d_model // 64
    kv = _kv_schedule(n_heads, n_layers) if kind is AttentionKind.GQA_SLIDING else (n_heads,) * n_layers
    return ModelConfig(n_layers=n_layers, d_model=d_model, n_heads=n_heads, head_dim=64,
                       n_kv_heads=kv, ffn_hidden=4 * d_model, attention_kind=kind)


PRESETS: dict[str, ModelConfig] = {
    "shakti-100m": _preset(10, 640, AttentionKind.GQA_SLIDING),
    "shakti-250m": _preset(16, 1024, AttentionKind.GQA_SLIDING),
    "shakti-500m": _preset(24, 2048, AttentionKind.BLOCK_SPARSE),
}


def get_preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}") from None


# --- weight layout -----------------------------------------------------------

def weight_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Tensor names and shapes in canonical file order. Matrices are ``[out, in]``."""
    d, f, v = config.d_model, config.ffn_hidden, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"tok_embed": (v, d)}
    for i in range(config.n_layers):
        kv = config.kv_dim(i)
        shapes[f"l{i}.attn_norm"] = (d,)
        shapes[f"l{i}.wq"] = (d, d)
        shapes[f"l{i}.wk"] = (kv, d)
        shapes[f"l{i}.wv"] = (kv, d)
        shapes[f"l{i}.wo"] = (d, d)
        shapes[f"l{i}.mlp_norm"] = (d,)
        shapes[f"l{i}.w_gate"] = (f, d)
        shapes[f"l{i}.w_up"] = (f, d)
        shapes[f"l{i}.w_down"] = (d, f)
    shapes["final_norm"] = (d,)
    if not config.tied_embeddings:
        shapes["lm_head"] = (v, d)
    return shapes


def count_params(config: ModelConfig) -> int:
    d, f, v, hd = config.d_model, config.ffn_hidden, config.vocab_size, config.head_dim
    per_layer = sum(2 * d + 2 * d * d + 2 * n * hd * d + 3 * f * d for n in config.n_kv_heads)
    head = 0 if config.tied_embeddings else v * d
    return v * d + per_layer + d + head


def should_quantize(name: str, shape: tuple[int, ...]) -> bool:
    """Model-level policy: every matrix except the embedding table."""
    return len(shape) == 2 and name != "tok_embed"


def random_tensor(seed: int, name: str, shape: tuple[int, ...], std: float = 0.02) -> np.ndarray:
    n = math.prod(shape)
    out = np.empty(n, dtype=F32)
    state = stream_seed(seed, name)
    step = 1 << 20
    for i in range(0, n, step):
        out[i:i + step], state = normal_block(state, min(step, n - i), std)
    return out.reshape(shape)


def random_weights(config: ModelConfig, seed: int, std: float = 0.02,
                   fmt: BlockFormat | None = None) -> dict:
    """Seeded init: matrices ~ N(0, std^2), norm gains 1. With ``fmt``, matrices are
    quantized one at a time so the float32 model never exists in memory."""
    weights = {}
    for name, shape in weight_shapes(config).items():
        if len(shape) == 1:
            weights[name] = np.ones(shape, dtype=F32)
            continue
        w = random_tensor(seed, name, shape, std)
        weights[name] = quantize_tensor(w, fmt) if fmt is not None and should_quantize(name, shape) else w
    return weights


# --- forward pass ------------------------------------------------------------

def _shape_of(w) -> tuple[int, ...]:
    return tuple(w.shape)


def _linear(w, x: np.ndarray) -> np.ndarray:
    if isinstance(w, QuantizedTensor):
        return qmatvec(w, x)
    return matvec(w, x)


def _linear_rows(w, x: np.ndarray) -> np.ndarray:
    if isinstance(w, QuantizedTensor):
        return qmatmul(w, x)
    out = np.empty((x.shape[0], w.shape[0]), dtype=F32)
    for i in range(x.shape[0]):
        out[i] = _linear(w, x[i])
    return out


@dataclass
class _Layer:
    attn_norm: np.ndarray
    wq: object
    wk: object
    wv: object
    wo: object
    mlp_norm: np.ndarray
    w_gate: object
    w_up: object
    w_down: object
    n_kv: int


class Model:
    """Immutable weights plus config; each generation session owns its caches."""

    def __init__(self, config: ModelConfig, weights: dict):
        expected = weight_shapes(config)
        for name, shape in expected.items():
            if name not in weights:
                raise LayoutError(f"missing tensor {name!r} (expected shape {shape})")
            got = _shape_of(weights[name])
            if got != shape:
                raise LayoutError(f"tensor {name!r} has shape {got}, expected {shape}")
        extra = sorted(set(weights) - set(expected))
        if extra:
            raise LayoutError(f"unexpected tensors: {', '.join(extra)}")
        for name, w in weights.items():
            if isinstance(w, QuantizedTensor) and not should_quantize(name, expected[name]):
                raise LayoutError(f"tensor {name!r} must stay float (quantization policy)")

        def dense(name):
            w = weights[name]
            return w if isinstance(w, QuantizedTensor) else np.asarray(w, dtype=F32)

        self.config = config
        self.weights = weights
        self.tok_embed = dense("tok_embed")
        self.layers = [
            _Layer(*(dense(f"l{i}.{n}") for n in
                     ("attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_gate", "w_up", "w_down")),
                   n_kv=config.n_kv_heads[i])
            for i in range(config.n_layers)
        ]
        self.final_norm = dense("final_norm")
        self.lm_head = self.tok_embed if config.tied_embeddings else dense("lm_head")
        self.rope: RopeTable = build_rope_table(config.head_dim, config.rope_base, config.max_positions)

    @property
    def n_params(self) -> int:
        return sum(math.prod(_shape_of(w)) for w in self.weights.values())

    def new_caches(self) -> list[KvCache]:
        c = self.config
        return [KvCache(c.window, n, c.head_dim) for n in c.n_kv_heads]

    def _embed(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise ValueError(f"token id out of range [0, {self.config.vocab_size})")
        return np.array(self.tok_embed[tokens], dtype=F32)

    def _mlp_rows(self, layer: _Layer, x: np.ndarray) -> np.ndarray:
        h = rmsnorm(x, layer.mlp_norm, self.config.norm_eps)
        g = silu(_linear_rows(layer.w_gate, h)) * _linear_rows(layer.w_up, h)
        return x + _linear_rows(layer.w_down, g)

    def _logits(self, x: np.ndarray) -> np.ndarray:
        return _linear(self.lm_head, rmsnorm(x, self.final_norm, self.config.norm_eps))

    def prefill(self, tokens) -> tuple[np.ndarray, list[KvCache]]:
        """Run the prompt; returns last-position logits and freshly populated caches.

        Sliding-window models compute exactly what repeated ``decode_step`` would.
        Block-sparse models attend under the sparse mask over the whole prompt.
        """
        c = self.config
        tokens = list(tokens)
        if not tokens:
            raise ValueError("prefill needs at least one token")
        T = len(tokens)
        if T > c.max_positions:
            raise ValueError(f"prompt of {T} tokens exceeds max_positions={c.max_positions}")
        caches = self.new_caches()
        pos = np.arange(T)
        x = self._embed(tokens)
        sparse = c.attention_kind is AttentionKind.BLOCK_SPARSE
        mask = build_sparse_mask(T, c.sparse) if sparse else None
        for layer, cache in zip(self.layers, caches):
            h = rmsnorm(x, layer.attn_norm, c.norm_eps)
            q = apply_rope(_linear_rows(layer.wq, h).reshape(T, c.n_heads, c.head_dim), pos, self.rope)
            k = apply_rope(_linear_rows(layer.wk, h).reshape(T, layer.n_kv, c.head_dim), pos, self.rope)
            v = _linear_rows(layer.wv, h).reshape(T, layer.n_kv, c.head_dim)
            if sparse:
                group = c.n_heads // layer.n_kv
                a = sparse_attend(q, np.repeat(k, group, axis=1), np.repeat(v, group, axis=1),
                                  mask, c.sparse.block)
                for t in range(T):
                    cache.append(k[t], v[t], t)
            else:
                a = np.empty_like(q)
                for t in range(T):
                    cache.append(k[t], v[t], t)
                    a[t] = gqa_attend(q[t], cache, layer.n_kv)
            x = x + _linear_rows(layer.wo, a.reshape(T, c.d_model))
            x = self._mlp_rows(layer, x)
        return self._logits(x[-1]), caches

    def decode_step(self, token: int, caches: list[KvCache]) -> np.ndarray:
        c = self.config
        if len(caches) != c.n_layers:
            raise CacheError(f"expected {c.n_layers} caches, got {len(caches)}")
        pos = caches[0].next_pos
        if any(cache.next_pos != pos for cache in caches):
            raise CacheError("cache position mismatch across layers: "
                             + ", ".join(str(cache.next_pos) for cache in caches))
        if pos >= c.max_positions:
            raise CacheError(f"position {pos} exceeds max_positions={c.max_positions}")
        x = self._embed([token])[0]
        for layer, cache in zip(self.layers, caches):
            h = rmsnorm(x, layer.attn_norm, c.norm_eps)
            q = apply_rope(_linear(layer.wq, h).reshape(c.n_heads, c.head_dim), pos, self.rope)
            k = apply_rope(_linear(layer.wk, h).reshape(layer.n_kv, c.head_dim), pos, self.rope)
            v = _linear(layer.wv, h).reshape(layer.n_kv, c.head_dim)
            cache.append(k, v, pos)
            a = gqa_attend(q, cache, layer.n_kv)
            x = x + _linear(layer.wo, a.reshape(c.d_model))
            x = self._mlp_rows(layer, x[None])[0]
        return self._logits(x)


def build_model(config: ModelConfig, weights: dict) -> Model:
    return Model(config, weights)


def with_window(config: ModelConfig, window: int) -> ModelConfig:
    return replace(config, window=window)


# --- sampling and generation ---------------------------------------------------

class Mode(Enum):
    GREEDY = "greedy"
    SAMPLE = "sample"


@dataclass(frozen=True)
class GenerationParams:
    max_tokens: int = 64
    mode: Mode = Mode.GREEDY
    temperature: float = 1.0
    top_k: int = 40
    seed: int = 0
    ban_eos: bool = False

    def __post_init__(self):
        if self.max_tokens < 0:
            raise ConfigError("max_tokens must be >= 0")
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")


def sample_token(logits: np.ndarray, params: GenerationParams, rng: SplitMix64 | None = None) -> int:
    """Greedy argmax (lowest index wins ties) or seeded top-k temperature sampling.

    Sampling consumes exactly one draw from ``rng``.
    """
    z = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(z).any():
        raise ValueError("all logits are -inf")
    if params.mode is Mode.GREEDY:
        return int(np.argmax(z))
    if rng is None:
        raise ValueError("sampling needs an rng")
    order = np.argsort(-z, kind="stable")[:params.top_k]
    zk = z[order] / params.temperature
    p = np.exp(zk - zk[0])
    cdf = np.cumsum(p)
    u = rng.next_float() * cdf[-1]
    i = int(np.searchsorted(cdf, u, side="right"))
    return int(order[min(i, len(order) - 1)])


@dataclass
class GenerationResult:
    text: bytes
    tokens: list[int]
    prefill_seconds: float
    decode_seconds: float
    prompt_tokens: int

    @property
    def tokens_generated(self) -> int:
        return len(self.tokens)


def banned_ids(vocab_size: int, ban_eos: bool = False) -> np.ndarray:
    """Ids generation never emits: BOS, PAD and reserved slots, plus EOS when banned."""
    ids = [tok.BOS, tok.PAD, *range(tok.PAD + 1, vocab_size)]
    if ban_eos:
        ids.append(tok.EOS)
    return np.array(ids, dtype=np.int64)


def generate(model: Model, prompt: bytes, params: GenerationParams) -> GenerationResult:
    tokenizer = tok.ByteTokenizer()
    if model.config.vocab_size <= tok.PAD:
        raise ConfigError(f"vocab_size {model.config.vocab_size} too small for the byte tokenizer")
    ids = tokenizer.encode(prompt)
    banned = banned_ids(model.config.vocab_size, params.ban_eos)
    rng = SplitMix64(params.seed)

    t0 = time.perf_counter()
    logits, caches = model.prefill(ids)
    t1 = time.perf_counter()
    out: list[int] = []
    for _ in range(params.max_tokens):
        logits = logits.copy()
        logits[banned] = -np.inf
        nxt = sample_token(logits, params, rng)
        if nxt == tok.EOS:
            break
        out.append(nxt)
        if len(ids) + len(out) >= model.config.max_positions:
            break
        logits = model.decode_step(nxt, caches)
    t2 = time.perf_counter()
    return GenerationResult(tokenizer.decode(out), out, t1 - t0, t2 - t1, len(ids))
