"""Rotary embeddings, sliding-window KV cache, grouped-query and block-sparse attention."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CacheError, ConfigError, ShapeError
from .tensor_core import F32, NEG_INF, softmax_row


@dataclass(frozen=True)
class RopeTable:
    head_dim: int
    base: float
    max_pos: int
    cos: np.ndarray  # [max_pos, head_dim // 2]
    sin: np.ndarray

    @property
    def theta(self) -> np.ndarray:
        i = np.arange(self.head_dim // 2, dtype=np.float64)
        return self.base ** (-2.0 * i / self.head_dim)


def build_rope_table(head_dim: int, base: float = 10000.0, max_pos: int = 4096) -> RopeTable:
    if head_dim < 2 or head_dim % 2:
        raise ConfigError(f"RoPE head_dim must be even and >= 2, got {head_dim}")
    if max_pos < 1:
        raise ConfigError(f"max_pos must be >= 1, got {max_pos}")
    i = np.arange(head_dim // 2, dtype=np.float64)
    theta = base ** (-2.0 * i / head_dim)
    angles = np.arange(max_pos, dtype=np.float64)[:, None] * theta[None, :]
    return RopeTable(head_dim, base, max_pos, np.cos(angles).astype(F32), np.sin(angles).astype(F32))


def apply_rope(x: np.ndarray, pos, table: RopeTable) -> np.ndarray:
    """Rotate adjacent pairs ``(x[2i], x[2i+1])`` by ``pos * theta_i``.

    ``x`` is ``[heads, head_dim]`` with scalar ``pos``, or ``[seq, heads, head_dim]``
    with one position per row.
    """
    if x.shape[-1] != table.head_dim:
        raise ShapeError(f"head_dim {x.shape[-1]} does not match RoPE table ({table.head_dim})")
    pos = np.asarray(pos)
    if pos.min() < 0 or pos.max() >= table.max_pos:
        raise ValueError(f"position {pos.max()} outside RoPE table range [0, {table.max_pos})")
    c = table.cos[pos]
    s = table.sin[pos]
    if pos.ndim == 1:
        c, s = c[:, None, :], s[:, None, :]
    x0 = x[..., 0::2]
    x1 = x[..., 1::2]
    out = np.empty(x.shape, dtype=F32)
    out[..., 0::2] = x0 * c - x1 * s
    out[..., 1::2] = x0 * s + x1 * c
    return out


class KvCache:
    """Ring buffer of post-RoPE keys and values for one layer.

    Absolute position ``p`` lives in slot ``p % window``; positions older than
    ``next_pos - window`` have been overwritten.
    """

    def __init__(self, window: int, n_kv_heads: int, head_dim: int):
        if window < 1:
            raise ConfigError(f"window must be >= 1, got {window}")
        self.window = window
        self.n_kv_heads = n_kv_heads
        self.head_dim = head_dim
        self.k = np.zeros((window, n_kv_heads, head_dim), dtype=F32)
        self.v = np.zeros((window, n_kv_heads, head_dim), dtype=F32)
        self.next_pos = 0

    @property
    def filled(self) -> int:
        return min(self.next_pos, self.window)

    def append(self, k: np.ndarray, v: np.ndarray, pos: int) -> None:
        if pos != self.next_pos:
            raise CacheError(f"non-sequential cache append: expected position {self.next_pos}, got {pos}")
        shape = (self.n_kv_heads, self.head_dim)
        if k.shape != shape or v.shape != shape:
            raise ShapeError(f"cache entries must be {shape}, got k={k.shape} v={v.shape}")
        slot = pos % self.window
        self.k[slot] = k
        self.v[slot] = v
        self.next_pos += 1

    def view(self) -> tuple[np.ndarray, np.ndarray]:
        """Live keys and values, oldest first."""
        if self.next_pos <= self.window:
            n = self.next_pos
            return self.k[:n], self.v[:n]
        s = self.next_pos % self.window
        return (np.concatenate([self.k[s:], self.k[:s]]),
                np.concatenate([self.v[s:], self.v[:s]]))

    def positions(self) -> np.ndarray:
        return np.arange(self.next_pos - self.filled, self.next_pos)


def cache_append(cache: KvCache, k: np.ndarray, v: np.ndarray, pos: int) -> KvCache:
    cache.append(k, v, pos)
    return cache


def gqa_attend(q: np.ndarray, cache: KvCache, n_kv_heads: int | None = None) -> np.ndarray:
    """One query position against every live cache entry.

    Query head ``h`` reads KV head ``h // (n_heads // n_kv_heads)``.
    """
    n_heads, hd = q.shape
    n_kv = cache.n_kv_heads if n_kv_heads is None else n_kv_heads
    if n_kv != cache.n_kv_heads:
        raise ConfigError(f"n_kv_heads={n_kv} but cache holds {cache.n_kv_heads} KV heads")
    if n_heads % n_kv:
        raise ConfigError(f"n_heads={n_heads} is not divisible by n_kv_heads={n_kv}")
    if cache.filled < 1:
        raise CacheError("attention over an empty cache")
    k, v = cache.view()
    group = n_heads // n_kv
    qg = q.reshape(n_kv, group, hd)
    scores = np.matmul(qg, k.transpose(1, 2, 0))  # [n_kv, group, T]
    p = softmax_row(scores, 1.0 / np.sqrt(hd))
    out = np.matmul(p, v.transpose(1, 0, 2))  # [n_kv, group, hd]
    return out.reshape(n_heads, hd)


@dataclass(frozen=True)
class SparsePattern:
    """Token blocks of size ``block``; block pair (i, j) is active when
    ``|i - j| <= local_blocks`` or either index is below ``global_blocks``."""

    block: int = 64
    local_blocks: int = 4
    global_blocks: int = 1

    def __post_init__(self):
        if self.block < 1 or self.local_blocks < 0 or self.global_blocks < 0:
            raise ConfigError(f"invalid sparse pattern {self}")

    def block_active(self, i, j):
        i, j = np.asarray(i), np.asarray(j)
        g = self.global_blocks
        return (np.abs(i - j) <= self.local_blocks) | (j < g) | (i < g)


def build_sparse_mask(seq_len: int, pattern: SparsePattern) -> np.ndarray:
    if seq_len < 1:
        raise ValueError(f"seq_len must be >= 1, got {seq_len}")
    t = np.arange(seq_len)
    causal = t[:, None] >= t[None, :]
    bi = t // pattern.block
    return causal & pattern.block_active(bi[:, None], bi[None, :])


def sparse_attend(q: np.ndarray, k: np.ndarray, v: np.ndarray, mask: np.ndarray, block: int = 64) -> np.ndarray:
    """Masked scaled-dot-product attention over ``[seq, heads, head_dim]`` inputs.

    The result equals the masked dense formula; only key blocks with at least
    one active entry for a query block are ever multiplied.
    """
    seq, heads, hd = q.shape
    if k.shape != q.shape or v.shape != q.shape or mask.shape != (seq, seq):
        raise ShapeError(f"inconsistent shapes q={q.shape} k={k.shape} v={v.shape} mask={mask.shape}")
    if not mask.any(axis=1).all():
        raise RuntimeError("attention mask has a row with no active column")
    scale = 1.0 / np.sqrt(hd)
    out = np.empty((seq, heads, hd), dtype=F32)
    kh = k.transpose(1, 2, 0)  # [heads, hd, seq]
    vh = v.transpose(1, 0, 2)  # [heads, seq, hd]
    n_blocks = -(-seq // block)
    for bi in range(n_blocks):
        r0, r1 = bi * block, min(seq, (bi + 1) * block)
        sub = mask[r0:r1]
        live = [bj for bj in range(n_blocks) if sub[:, bj * block:(bj + 1) * block].any()]
        cols = np.concatenate([np.arange(bj * block, min(seq, (bj + 1) * block)) for bj in live])
        qb = q[r0:r1].transpose(1, 0, 2)  # [heads, rb, hd]
        scores = np.matmul(qb, kh[:, :, cols])  # [heads, rb, c]
        scores = np.where(sub[:, cols][None], scores, NEG_INF)
        p = softmax_row(scores, scale)
        out[r0:r1] = np.matmul(p, vh[:, cols]).transpose(1, 0, 2)
    return out
