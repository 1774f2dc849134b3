"""Block-wise weight quantization: Q8_0, Q5_0, Q5_1, Q4_0, Q4_1.

Every block holds 32 consecutive weights of a row. Byte layout per block:

    Q8_0  d:f16 | 32 x int8                                   34 bytes
    Q5_0  d:f16 | 16 bytes low nibbles | u32 high-bit field   22 bytes
    Q5_1  d:f16 m:f16 | 16 bytes low nibbles | u32 high bits  24 bytes
    Q4_0  d:f16 | 16 bytes nibbles                            18 bytes
    Q4_1  d:f16 m:f16 | 16 bytes nibbles                      20 bytes

Nibbles are packed two per byte, element ``2j`` in the low nibble of byte
``j``. Bit ``i`` of the little-endian high-bit field is bit 4 of element
``i``. Symmetric 4/5-bit quants are stored offset-binary (``q + 2**(bits-1)``),
Q8_0 quants as two's-complement bytes.

Scales are rounded to f16 *outward*: ``d`` up and ``m`` down, so the block
range is always covered without clamping. For the affine formats ``m`` is
additionally snapped onto ``d``'s f16 grid and ``d`` is kept within 2**12 of
``|m|``; together that makes ``d*u + m`` exactly representable in float32,
so dequantization adds no rounding and ``|x - x_hat| <= d/2`` holds against
the stored ``d``.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import QuantizationError, ShapeError

BLOCK = 32

# elements per chunk when encoding/decoding large tensors (bounds temporaries)
_CHUNK_ELEMS = 1 << 20


class BlockFormat(Enum):
    Q8_0 = (8, False)
    Q5_0 = (5, False)
    Q5_1 = (5, True)
    Q4_0 = (4, False)
    Q4_1 = (4, True)

    def __init__(self, bits: int, affine: bool):
        self.bits = bits
        self.affine = affine

    @property
    def block_len(self) -> int:
        return BLOCK

    @property
    def scale_bytes(self) -> int:
        return 4 if self.affine else 2

    @property
    def block_bytes(self) -> int:
        return self.scale_bytes + (self.bits * BLOCK + 7) // 8

    @property
    def bits_per_weight(self) -> float:
        return self.block_bytes * 8 / BLOCK

    @property
    def qmax(self) -> int:
        """Largest quant magnitude (symmetric) or largest level (affine)."""
        return (1 << self.bits) - 1 if self.affine else (1 << (self.bits - 1)) - 1

    @classmethod
    def parse(cls, name: str) -> "BlockFormat":
        try:
            return cls[name.upper()]
        except KeyError:
            valid = ", ".join(f.name for f in cls)
            raise ValueError(f"unknown quantization format {name!r}; valid: {valid}") from None


def compression_ratio(fmt: BlockFormat) -> float:
    """Size ratio of float32 weights to ``fmt`` weights."""
    return 32 / fmt.bits_per_weight


def payload_bytes(fmt: BlockFormat, rows: int, cols: int) -> int:
    if cols % BLOCK:
        raise ShapeError(f"row length {cols} is not a multiple of {BLOCK}")
    return rows * (cols // BLOCK) * fmt.block_bytes


# --- f16 helpers -------------------------------------------------------------

def _f16_ceil(v: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        h = v.astype(np.float16)
    low = h.astype(np.float64) < v
    h[low] = np.nextafter(h[low], np.float16(np.inf))
    return h


def _f16_floor(v: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        h = v.astype(np.float16)
    high = h.astype(np.float64) > v
    h[high] = np.nextafter(h[high], np.float16(-np.inf))
    return h


def _exponent(v: np.ndarray) -> np.ndarray:
    """floor(log2|v|) for nonzero v."""
    return np.frexp(v)[1] - 1


def _f16_ulp(v: np.ndarray) -> np.ndarray:
    """Spacing of the f16 grid at positive v (subnormal spacing floor 2**-24)."""
    return np.ldexp(1.0, np.maximum(_exponent(v) - 10, -24))


# --- encode ------------------------------------------------------------------

def _symmetric_params(x: np.ndarray, fmt: BlockFormat) -> tuple[np.ndarray, np.ndarray]:
    amax = np.abs(x).max(axis=1)
    d16 = _f16_ceil(amax / fmt.qmax)
    if not np.isfinite(d16).all():
        raise QuantizationError(f"block magnitude exceeds the f16 scale range of {fmt.name}")
    d = d16.astype(np.float64)
    ratio = np.divide(x, d[:, None], out=np.zeros_like(x), where=d[:, None] > 0)
    q = np.clip(np.rint(ratio), -fmt.qmax, fmt.qmax)
    return d16, q.astype(np.int16)


def _affine_params(x: np.ndarray, fmt: BlockFormat) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    levels = fmt.qmax
    lo = x.min(axis=1)
    hi = x.max(axis=1)
    m = _f16_floor(lo).astype(np.float64)
    if not np.isfinite(m).all():
        raise QuantizationError(f"block minimum exceeds the f16 range of {fmt.name}")
    for _ in range(16):
        d = _f16_ceil((hi - m) / levels).astype(np.float64)
        if not np.isfinite(d).all():
            raise QuantizationError(f"block range exceeds the f16 scale range of {fmt.name}")
        nz = d > 0
        # keep d within 2**12 of |m| (d*u + m must fit a float32 significand)
        floor_d = np.where(m != 0, np.ldexp(1.0, np.maximum(_exponent(np.where(m != 0, m, 1.0)) - 12, -24)), 0.0)
        d = np.where(nz, np.maximum(d, floor_d), 0.0)
        # m onto d's f16 grid
        g = np.where(nz, _f16_ulp(np.where(nz, d, 1.0)), 1.0)
        m_new = np.where(nz, np.floor(m / g) * g, m)
        if np.array_equal(m_new, m):
            break
        m = m_new
    else:  # pragma: no cover - converges in <= 3 rounds in practice
        raise QuantizationError("affine scale selection did not converge")
    ratio = np.divide(x - m[:, None], d[:, None], out=np.zeros_like(x), where=d[:, None] > 0)
    u = np.clip(np.rint(ratio), 0, levels)
    return d.astype(np.float16), m.astype(np.float16), u.astype(np.int16)


def _pack_nibbles(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.uint8)
    return (v[:, 0::2] & 0x0F) | ((v[:, 1::2] & 0x0F) << 4)


def _unpack_nibbles(b: np.ndarray) -> np.ndarray:
    out = np.empty((b.shape[0], BLOCK), dtype=np.uint8)
    out[:, 0::2] = b & 0x0F
    out[:, 1::2] = b >> 4
    return out


_BIT_SHIFTS = np.arange(BLOCK, dtype=np.uint32)


def _f16_bytes(h: np.ndarray) -> np.ndarray:
    return h.astype("<f2").view(np.uint8).reshape(-1, 2)


def quantize_blocks(x: np.ndarray, fmt: BlockFormat) -> np.ndarray:
    """Encode ``x[n, 32]`` into ``[n, block_bytes]`` uint8."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != BLOCK:
        raise ShapeError(f"expected blocks of shape (n, {BLOCK}), got {x.shape}")
    if not np.isfinite(x).all():
        raise QuantizationError("cannot quantize non-finite values")
    x = x.astype(np.float64)
    n = x.shape[0]
    out = np.empty((n, fmt.block_bytes), dtype=np.uint8)
    if fmt.affine:
        d16, m16, vals = _affine_params(x, fmt)
        out[:, 0:2] = _f16_bytes(d16)
        out[:, 2:4] = _f16_bytes(m16)
    else:
        d16, q = _symmetric_params(x, fmt)
        out[:, 0:2] = _f16_bytes(d16)
        if fmt.bits == 8:
            out[:, 2:] = q.astype(np.int8).view(np.uint8)
            return out
        vals = q + (1 << (fmt.bits - 1))
    s = fmt.scale_bytes
    out[:, s:s + 16] = _pack_nibbles(vals)
    if fmt.bits == 5:
        hb = ((vals >> 4) & 1).astype(np.uint32)
        field = (hb << _BIT_SHIFTS).sum(axis=1, dtype=np.uint32)
        out[:, s + 16:s + 20] = field.astype("<u4").view(np.uint8).reshape(-1, 4)
    return out


def quantize_block(x, fmt: BlockFormat) -> bytes:
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    if x.shape[1] != BLOCK:
        raise ShapeError(f"a block holds exactly {BLOCK} values, got {x.shape[1]}")
    return quantize_blocks(x, fmt).tobytes()


# --- decode ------------------------------------------------------------------

@dataclass
class DecodedBlocks:
    """Scales and integer quants of ``n`` blocks; ``m`` is None for symmetric formats."""

    d: np.ndarray  # float32 [n]
    m: np.ndarray | None  # float32 [n]
    q: np.ndarray  # int8 (symmetric, signed) or uint8 (affine levels) [n, 32]


def _read_f16(raw: np.ndarray, start: int) -> np.ndarray:
    return np.ascontiguousarray(raw[:, start:start + 2]).view("<f2")[:, 0].astype(np.float32)


def decode_blocks(raw: np.ndarray, fmt: BlockFormat) -> DecodedBlocks:
    raw = np.asarray(raw, dtype=np.uint8)
    if raw.ndim != 2 or raw.shape[1] != fmt.block_bytes:
        raise ShapeError(f"{fmt.name} blocks are {fmt.block_bytes} bytes, got array of shape {raw.shape}")
    d = _read_f16(raw, 0)
    m = _read_f16(raw, 2) if fmt.affine else None
    s = fmt.scale_bytes
    if fmt.bits == 8:
        return DecodedBlocks(d, m, raw[:, 2:].view(np.int8))
    vals = _unpack_nibbles(np.ascontiguousarray(raw[:, s:s + 16]))
    if fmt.bits == 5:
        # bit i of the little-endian field is bit i % 8 of byte i // 8
        vals |= np.unpackbits(raw[:, s + 16:s + 20], axis=1, bitorder="little") << 4
    if not fmt.affine:
        vals = vals.view(np.int8)
        vals -= np.int8(1 << (fmt.bits - 1))
    return DecodedBlocks(d, m, vals)


def dequantize_blocks(raw: np.ndarray, fmt: BlockFormat) -> np.ndarray:
    dec = decode_blocks(raw, fmt)
    out = dec.d[:, None] * dec.q.astype(np.float32)
    if dec.m is not None:
        out += dec.m[:, None]
    return out


def dequantize_block(block: bytes, fmt: BlockFormat) -> np.ndarray:
    if len(block) != fmt.block_bytes:
        raise ShapeError(f"{fmt.name} block must be {fmt.block_bytes} bytes, got {len(block)}")
    raw = np.frombuffer(block, dtype=np.uint8).reshape(1, -1)
    return dequantize_blocks(raw, fmt)[0]


# --- tensors -----------------------------------------------------------------

@dataclass(frozen=True)
class QuantizedTensor:
    """Row-major block-encoded matrix. ``payload`` may be a read-only view into a mapped file."""

    format: BlockFormat
    shape: tuple[int, int]
    payload: np.ndarray

    def __post_init__(self):
        rows, cols = self.shape
        expected = payload_bytes(self.format, rows, cols)
        if self.payload.dtype != np.uint8 or self.payload.ndim != 1 or self.payload.size != expected:
            raise ShapeError(
                f"{self.format.name} payload for shape {self.shape} must be {expected} bytes, "
                f"got {self.payload.size}"
            )

    @property
    def nbytes(self) -> int:
        return self.payload.size

    @property
    def blocks(self) -> np.ndarray:
        rows, cols = self.shape
        return self.payload.reshape(rows, cols // BLOCK, self.format.block_bytes)

    def row(self, i: int) -> "QuantizedTensor":
        rb = self.payload.size // self.shape[0]
        return QuantizedTensor(self.format, (1, self.shape[1]), self.payload[i * rb:(i + 1) * rb])


def _row_chunks(rows: int, cols: int):
    step = max(1, _CHUNK_ELEMS // cols)
    for r0 in range(0, rows, step):
        yield r0, min(rows, r0 + step)


def quantize_tensor(w: np.ndarray, fmt: BlockFormat) -> QuantizedTensor:
    if w.ndim != 2:
        raise ShapeError(f"only rank-2 tensors are quantized, got shape {w.shape}")
    rows, cols = w.shape
    if cols % BLOCK:
        raise ShapeError(f"cannot quantize {w.shape} as {fmt.name}: columns not a multiple of {BLOCK}")
    nb = cols // BLOCK
    out = np.empty((rows, nb, fmt.block_bytes), dtype=np.uint8)
    for r0, r1 in _row_chunks(rows, cols):
        blocks = np.asarray(w[r0:r1]).reshape(-1, BLOCK)
        out[r0:r1] = quantize_blocks(blocks, fmt).reshape(r1 - r0, nb, -1)
    return QuantizedTensor(fmt, (rows, cols), out.reshape(-1))


def dequantize_tensor(qt: QuantizedTensor) -> np.ndarray:
    rows, cols = qt.shape
    out = np.empty((rows, cols), dtype=np.float32)
    blocks = qt.blocks
    for r0, r1 in _row_chunks(rows, cols):
        raw = blocks[r0:r1].reshape(-1, qt.format.block_bytes)
        out[r0:r1] = dequantize_blocks(raw, qt.format).reshape(r1 - r0, cols)
    return out


# --- dot kernels -------------------------------------------------------------

def _dot_decoded(dec: DecodedBlocks, r: int, nb: int, a_blocks: np.ndarray,
                 a_sums: np.ndarray | None) -> np.ndarray:
    # a_blocks is float64, so every q*a product is exact; einsum casts the int8
    # quants on the fly and keeps a fixed per-element summation order
    q = dec.q.reshape(r, nb, BLOCK)
    per_block = dec.d.reshape(r, nb).astype(np.float64) * np.einsum("rbk,bk->rb", q, a_blocks)
    if dec.m is not None:
        per_block += dec.m.reshape(r, nb).astype(np.float64) * a_sums
    return per_block.sum(axis=-1)


def _qdot_rows(raw: np.ndarray, fmt: BlockFormat, a_blocks: np.ndarray, a_sums: np.ndarray | None) -> np.ndarray:
    """Dot products for ``raw[r, nb, block_bytes]`` against ``a_blocks[nb, 32]``.

    Works on integer quants and per-block scales; weights are never
    materialized as floats. Per-row results do not depend on ``r``.
    """
    r, nb, bb = raw.shape
    return _dot_decoded(decode_blocks(raw.reshape(-1, bb), fmt), r, nb, a_blocks, a_sums)


def _prep_activation(qt: QuantizedTensor, a: np.ndarray):
    a = np.asarray(a, dtype=np.float32)
    if a.ndim != 1 or a.shape[0] != qt.shape[1]:
        raise ShapeError(f"activation of shape {a.shape} does not match quantized row length {qt.shape[1]}")
    a_blocks = a.reshape(-1, BLOCK).astype(np.float64)
    a_sums = a_blocks.sum(axis=-1) if qt.format.affine else None
    return a_blocks, a_sums


def qdot_row(qrow: QuantizedTensor, a: np.ndarray) -> float:
    """Dot product of a single quantized row with a float32 vector."""
    if qrow.shape[0] != 1:
        raise ShapeError(f"qdot_row expects one row, got shape {qrow.shape}")
    a_blocks, a_sums = _prep_activation(qrow, a)
    return float(_qdot_rows(qrow.blocks, qrow.format, a_blocks, a_sums)[0])


def qmatvec(qt: QuantizedTensor, a: np.ndarray) -> np.ndarray:
    """``W @ a`` for quantized ``W``; row ``i`` equals ``qdot_row(W.row(i), a)`` bit for bit."""
    a_blocks, a_sums = _prep_activation(qt, a)
    rows, cols = qt.shape
    out = np.empty(rows, dtype=np.float32)
    blocks = qt.blocks
    for r0, r1 in _row_chunks(rows, cols):
        out[r0:r1] = _qdot_rows(blocks[r0:r1], qt.format, a_blocks, a_sums)
    return out


def qmatmul(qt: QuantizedTensor, x: np.ndarray) -> np.ndarray:
    """``x @ W.T`` for activations ``x[T, cols]``; row ``t`` equals ``qmatvec(W, x[t])`` bit for bit.

    Each chunk of weight blocks is decoded once and reused for every row of ``x``.
    """
    x = np.asarray(x, dtype=np.float32)
    rows, cols = qt.shape
    if x.ndim != 2 or x.shape[1] != cols:
        raise ShapeError(f"activations of shape {x.shape} do not match quantized row length {cols}")
    prepped = [_prep_activation(qt, row) for row in x]
    out = np.empty((x.shape[0], rows), dtype=np.float32)
    blocks = qt.blocks
    nb = cols // BLOCK
    for r0, r1 in _row_chunks(rows, cols):
        dec = decode_blocks(blocks[r0:r1].reshape(-1, qt.format.block_bytes), qt.format)
        for t, (a_blocks, a_sums) in enumerate(prepped):
            out[t, r0:r1] = _dot_decoded(dec, r1 - r0, nb, a_blocks, a_sums)
    return out
