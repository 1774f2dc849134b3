"""SKT1 model container: writer, memory-mapped reader, validator, converters.

File layout (all integers little-endian)::

    "SKT1"  u32 version=1
    config  u32 n_layers d_model n_heads head_dim ffn_hidden vocab_size window max_positions
            f64 rope_base norm_eps
            u8  attention_kind tied_embeddings
            u32 sparse.block sparse.local_blocks sparse.global_blocks
            u32 n_kv count, then u32 per layer
    u32 tensor_count  u64 data_offset
    index   per tensor: u16 name_len, utf-8 name, u8 dtype, u8 n_dims, u64 dims...,
            u64 offset (relative to data_offset), u64 byte_len
    zero padding up to data_offset (32-byte aligned)
    data    tensor payloads, each starting on a 32-byte boundary

The reader never trusts ``byte_len``: it recomputes the size from dtype and
shape and refuses to hand out views for entries that disagree.
"""
from __future__ import annotations

import difflib
import math
import mmap
import os
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from .attention import SparsePattern
from .errors import ConfigError, DataError, FormatError, LayoutError, ShapeError, TensorNotFound
from .model import AttentionKind, ModelConfig, Model, should_quantize, weight_shapes
from .quant import BlockFormat, QuantizedTensor, compression_ratio, payload_bytes, quantize_tensor

MAGIC = b"SKT1"
VERSION = 1
ALIGN = 32


class DType(IntEnum):
    F32 = 0
    F16 = 1
    Q8_0 = 2
    Q5_0 = 3
    Q5_1 = 4
    Q4_0 = 5
    Q4_1 = 6

    @property
    def block_format(self) -> BlockFormat | None:
        return BlockFormat[self.name] if self.value >= 2 else None

    @classmethod
    def of(cls, fmt: BlockFormat) -> "DType":
        return cls[fmt.name]

    @classmethod
    def parse(cls, name: str) -> "DType":
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"unknown dtype {name!r}; valid: {', '.join(d.name for d in cls)}") from None


def expected_bytes(dtype: DType, shape: tuple[int, ...]) -> int:
    if dtype is DType.F32:
        return 4 * math.prod(shape)
    if dtype is DType.F16:
        return 2 * math.prod(shape)
    if len(shape) != 2:
        raise ShapeError(f"{dtype.name} tensors must be rank 2, got shape {shape}")
    return payload_bytes(dtype.block_format, *shape)


def _align(n: int) -> int:
    return -(-n // ALIGN) * ALIGN


# --- header codec ------------------------------------------------------------

_CFG = struct.Struct("<8I2d2B3I")


def encode_header(config: ModelConfig) -> bytes:
    s = config.sparse
    out = MAGIC + struct.pack("<I", VERSION)
    out += _CFG.pack(config.n_layers, config.d_model, config.n_heads, config.head_dim,
                     config.ffn_hidden, config.vocab_size, config.window, config.max_positions,
                     config.rope_base, config.norm_eps,
                     config.attention_kind.value, int(config.tied_embeddings),
                     s.block, s.local_blocks, s.global_blocks)
    out += struct.pack(f"<I{len(config.n_kv_heads)}I", len(config.n_kv_heads), *config.n_kv_heads)
    return out


def encode_entry(name: str, dtype: DType, shape: tuple[int, ...], offset: int, byte_len: int) -> bytes:
    raw = name.encode("utf-8")
    return (struct.pack("<H", len(raw)) + raw + struct.pack("<BB", int(dtype), len(shape))
            + struct.pack(f"<{len(shape)}Q", *shape) + struct.pack("<QQ", offset, byte_len))


class _Reader:
    def __init__(self, buf, size: int):
        self.buf = buf
        self.size = size
        self.pos = 0

    def take(self, fmt: str):
        st = struct.Struct(fmt)
        if self.pos + st.size > self.size:
            raise FormatError(f"truncated file: header/index extends past end of file at byte {self.pos}")
        vals = st.unpack_from(self.buf, self.pos)
        self.pos += st.size
        return vals

    def bytes(self, n: int) -> bytes:
        if self.pos + n > self.size:
            raise FormatError(f"truncated file: header/index extends past end of file at byte {self.pos}")
        b = bytes(self.buf[self.pos:self.pos + n])
        self.pos += n
        return b


@dataclass
class IndexEntry:
    name: str
    dtype_code: int
    shape: tuple[int, ...]
    offset: int
    byte_len: int
    entry_pos: int  # absolute file position of this index entry
    problems: list[str] = field(default_factory=list)

    @property
    def dtype(self) -> DType | None:
        try:
            return DType(self.dtype_code)
        except ValueError:
            return None


def _parse_header(buf, size: int):
    r = _Reader(buf, size)
    (magic,) = r.take("<4s")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.take("<I")
    if version != VERSION:
        raise FormatError(f"unsupported version {version} (this reader handles {VERSION})")
    (n_layers, d_model, n_heads, head_dim, ffn, vocab, window, max_pos,
     rope_base, eps, kind, tied, blk, local, glob) = r.take(_CFG.format)
    (n_kv_count,) = r.take("<I")
    if n_kv_count > size:
        raise FormatError(f"implausible n_kv_heads count {n_kv_count}")
    n_kv = r.take(f"<{n_kv_count}I")
    try:
        config = ModelConfig(
            n_layers=n_layers, d_model=d_model, n_heads=n_heads, head_dim=head_dim, n_kv_heads=n_kv,
            ffn_hidden=ffn, vocab_size=vocab, window=window, rope_base=rope_base, norm_eps=eps,
            attention_kind=AttentionKind(kind), sparse=SparsePattern(blk, local, glob),
            tied_embeddings=bool(tied), max_positions=max_pos)
    except (ConfigError, ValueError) as e:
        raise FormatError(f"invalid embedded config: {e}") from None
    count, data_offset = r.take("<IQ")
    entries = []
    for _ in range(count):
        start = r.pos
        (name_len,) = r.take("<H")
        try:
            name = r.bytes(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"index entry at byte {start}: name is not valid UTF-8") from None
        code, n_dims = r.take("<BB")
        dims = r.take(f"<{n_dims}Q")
        offset, byte_len = r.take("<QQ")
        entries.append(IndexEntry(name, code, tuple(dims), offset, byte_len, start))
    return config, entries, data_offset, r.pos


def _check_entry(e: IndexEntry, data_offset: int, file_size: int) -> None:
    if e.dtype is None:
        e.problems.append(f"unknown dtype code {e.dtype_code}")
        return
    if not 1 <= len(e.shape) <= 4 or 0 in e.shape:
        e.problems.append(f"bad shape {e.shape}")
        return
    try:
        want = expected_bytes(e.dtype, e.shape)
    except ShapeError as err:
        e.problems.append(str(err))
        return
    if e.byte_len != want:
        e.problems.append(f"byte_len {e.byte_len} != {want} implied by {e.dtype.name}{list(e.shape)}")
    if e.offset % ALIGN:
        e.problems.append(f"offset {e.offset} not {ALIGN}-byte aligned")
    if data_offset + e.offset + e.byte_len > file_size:
        e.problems.append("payload extends past end of file")


# --- reader ------------------------------------------------------------------

class ModelFile:
    """Read-only memory-mapped model. Payloads are views into the mapping, so pages
    load on first touch and nothing is copied into private memory."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        with open(self.path, "rb") as f:
            self.size = os.fstat(f.fileno()).st_size
            if self.size < 8:
                raise FormatError(f"truncated file: {self.size} bytes")
            self._mm = mmap.mmap(f.fileno(), 0, access=mmap.ACCESS_READ)
        try:
            self.config, entries, self.data_offset, self.index_end = _parse_header(self._mm, self.size)
        except Exception:
            self._mm.close()
            raise
        self.entries: dict[str, IndexEntry] = {}
        self.duplicates: list[str] = []
        for e in entries:
            _check_entry(e, self.data_offset, self.size)
            if e.name in self.entries:
                self.duplicates.append(e.name)
            else:
                self.entries[e.name] = e
        self.entry_list = entries
        self._buf = np.frombuffer(self._mm, dtype=np.uint8)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self) -> None:
        """Drop this object's reference to the mapping; it is unmapped once no
        tensor views remain alive."""
        self._buf = None
        self._mm = None

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entry_list]

    def entry(self, name: str) -> IndexEntry:
        try:
            return self.entries[name]
        except KeyError:
            raise TensorNotFound(name, difflib.get_close_matches(name, self.entries, n=3)) from None

    def raw(self, name: str) -> np.ndarray:
        """Payload bytes of ``name`` as a read-only view into the mapping."""
        e = self.entry(name)
        if e.problems:
            raise FormatError(f"tensor {name!r}: " + "; ".join(e.problems))
        start = self.data_offset + e.offset
        return self._buf[start:start + e.byte_len]

    def read_tensor(self, name: str):
        e = self.entry(name)
        raw = self.raw(name)
        if e.dtype is DType.F32:
            return raw.view("<f4").reshape(e.shape)
        if e.dtype is DType.F16:
            return raw.view("<f2").reshape(e.shape)
        return QuantizedTensor(e.dtype.block_format, e.shape, raw)

    def weights(self) -> dict:
        return {name: self.read_tensor(name) for name in self.names}

    def load_model(self) -> Model:
        return Model(self.config, self.weights())

    def dtype_summary(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for e in self.entry_list:
            key = e.dtype.name if e.dtype is not None else f"?{e.dtype_code}"
            out[key] = out.get(key, 0) + e.byte_len
        return out

    def format_label(self) -> str:
        """Dtype of the quantizable matrices (the model's headline format)."""
        kinds = {e.dtype.name for e in self.entry_list if e.dtype is not None and should_quantize(e.name, e.shape)}
        return "+".join(sorted(kinds)) or "F32"


def open_model(path) -> ModelFile:
    return ModelFile(path)


def read_tensor(mf: ModelFile, name: str):
    return mf.read_tensor(name)


# --- validation --------------------------------------------------------------

@dataclass
class ValidationReport:
    problems: list[str] = field(default_factory=list)
    tensors: dict[str, list[str]] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.problems and not any(self.tensors.values())

    def flag(self, name: str, msg: str) -> None:
        self.tensors.setdefault(name, []).append(msg)

    def lines(self) -> list[str]:
        out = list(self.problems)
        out += [f"{name}: {msg}" for name, msgs in self.tensors.items() for msg in msgs]
        return out

    def __str__(self) -> str:
        if self.ok:
            return "validate: OK"
        return "validate: FAILED\n" + "\n".join(f"  - {line}" for line in self.lines())


def validate(mf: ModelFile) -> ValidationReport:
    report = ValidationReport()
    if mf.data_offset % ALIGN:
        report.problems.append(f"data_offset {mf.data_offset} not {ALIGN}-byte aligned")
    if mf.data_offset != _align(mf.index_end):
        report.problems.append(f"data_offset {mf.data_offset} != first aligned byte after index "
                               f"({_align(mf.index_end)})")
    for name in mf.duplicates:
        report.flag(name, "duplicate index entry")
    for e in mf.entry_list:
        report.tensors.setdefault(e.name, [])
        for p in e.problems:
            report.flag(e.name, p)

    ordered = sorted(mf.entry_list, key=lambda e: (e.offset, e.entry_pos))
    if [e.entry_pos for e in ordered] != [e.entry_pos for e in mf.entry_list]:
        report.problems.append("tensor offsets are not ascending in index order")
    for prev, cur in zip(ordered, ordered[1:]):
        if prev.offset + prev.byte_len > cur.offset:
            report.flag(cur.name, f"overlaps {prev.name!r}")
    # writers pack payloads back to back at ALIGN granularity; anything else is a damaged index
    packed = 0
    for e in mf.entry_list:
        if e.offset != packed:
            report.flag(e.name, f"offset {e.offset} != packed position {packed}")
        packed = _align(e.offset + e.byte_len)
    if mf.entry_list:
        last = max(mf.data_offset + e.offset + e.byte_len for e in mf.entry_list)
        if last != mf.size and not any(e.problems for e in mf.entry_list):
            report.problems.append(f"data section ends at {last} but file is {mf.size} bytes")

    expected = weight_shapes(mf.config)
    for name, shape in expected.items():
        if name not in mf.entries:
            report.problems.append(f"missing tensor {name!r} required by layout")
            continue
        e = mf.entries[name]
        if e.shape != shape:
            report.flag(name, f"shape {list(e.shape)} != layout {list(shape)}")
        if e.dtype is not None and e.dtype.block_format and not should_quantize(name, shape):
            report.flag(name, f"{e.dtype.name} not allowed (kept float by policy)")
    for name in mf.entries:
        if name not in expected:
            report.flag(name, "not part of the layout contract")
    return report


def validate_path(path) -> ValidationReport:
    """Open and validate; structural failures become report entries instead of exceptions."""
    try:
        mf = ModelFile(path)
    except (FormatError, OSError) as e:
        return ValidationReport(problems=[str(e)])
    try:
        return validate(mf)
    finally:
        mf.close()


# --- writer ------------------------------------------------------------------

def _as_payload(name: str, w, dtype: DType) -> tuple[DType, tuple[int, ...], np.ndarray]:
    if isinstance(w, QuantizedTensor):
        if dtype is not DType.of(w.format):
            raise LayoutError(f"tensor {name!r} is already {w.format.name}, cannot store as {dtype.name}")
        return dtype, w.shape, np.asarray(w.payload, dtype=np.uint8)
    w = np.asarray(w)
    if w.dtype not in (np.float32, np.float16):
        raise LayoutError(f"tensor {name!r} has unsupported dtype {w.dtype}")
    shape = tuple(w.shape)
    if dtype is DType.F32:
        return dtype, shape, np.ascontiguousarray(w, dtype="<f4").reshape(-1).view(np.uint8)
    if dtype is DType.F16:
        return dtype, shape, np.ascontiguousarray(w, dtype="<f2").reshape(-1).view(np.uint8)
    try:
        qt = quantize_tensor(np.asarray(w, dtype=np.float32), dtype.block_format)
    except ShapeError as e:
        raise LayoutError(f"tensor {name!r}: {e}") from None
    return dtype, shape, qt.payload


def write_model(path, config: ModelConfig, weights: dict, formats: dict | None = None) -> Path:
    """Write ``weights`` in layout order. ``formats`` maps names to a ``DType`` (or
    ``BlockFormat``); unspecified tensors keep their own dtype. Output bytes are a
    pure function of the inputs."""
    formats = dict(formats or {})
    expected = weight_shapes(config)
    missing = [n for n in expected if n not in weights]
    if missing:
        raise LayoutError(f"missing tensors: {', '.join(missing)}")
    extra = sorted(set(weights) - set(expected))
    if extra:
        raise LayoutError(f"tensors outside the layout contract: {', '.join(extra)}")

    payloads = []
    for name, shape in expected.items():
        w = weights[name]
        want = formats.get(name)
        if isinstance(want, BlockFormat):
            want = DType.of(want)
        if want is None:
            if isinstance(w, QuantizedTensor):
                want = DType.of(w.format)
            else:
                want = DType.F16 if np.asarray(w).dtype == np.float16 else DType.F32
        if want is not DType.F32 and want is not DType.F16 and not should_quantize(name, shape):
            raise LayoutError(f"tensor {name!r} must stay float (quantization policy)")
        dtype, got_shape, data = _as_payload(name, w, want)
        if got_shape != shape:
            raise LayoutError(f"tensor {name!r} has shape {got_shape}, expected {shape}")
        payloads.append((name, dtype, shape, data))

    header = encode_header(config)
    offsets, pos = [], 0
    for _, dtype, shape, data in payloads:
        offsets.append(pos)
        pos = _align(pos + data.size)
    index = b"".join(encode_entry(name, dtype, shape, off, data.size)
                     for (name, dtype, shape, data), off in zip(payloads, offsets))
    head_len = len(header) + struct.calcsize("<IQ") + len(index)
    data_offset = _align(head_len)

    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(struct.pack("<IQ", len(payloads), data_offset))
        f.write(index)
        f.write(b"\0" * (data_offset - head_len))
        for i, (_, _, _, data) in enumerate(payloads):
            f.write(memoryview(data))
            if i + 1 < len(payloads):
                f.write(b"\0" * (offsets[i + 1] - offsets[i] - data.size))
    os.replace(tmp, path)
    return path


# --- converters --------------------------------------------------------------

@dataclass
class ManifestRow:
    name: str
    shape: tuple[int, ...]
    filename: str


def parse_manifest(text: str) -> list[ManifestRow]:
    rows, seen = [], set()
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        try:
            n_dims = int(parts[1])
            if n_dims not in (1, 2) or len(parts) != 3 + n_dims:
                raise ValueError
            shape = tuple(int(p) for p in parts[2:2 + n_dims])
        except (ValueError, IndexError):
            raise FormatError(f"manifest line {lineno}: expected 'name n_dims d0 [d1] filename'") from None
        if parts[0] in seen:
            raise FormatError(f"manifest line {lineno}: duplicate tensor {parts[0]!r}")
        seen.add(parts[0])
        rows.append(ManifestRow(parts[0], shape, parts[-1]))
    return rows


def convert_f32_bundle(directory, manifest, config: ModelConfig, out_path) -> Path:
    """Directory of raw little-endian f32 files plus a manifest -> F32 SKT1 file."""
    directory = Path(directory)
    manifest = Path(manifest)
    if not manifest.is_absolute() and not manifest.exists():
        manifest = directory / manifest
    rows = parse_manifest(manifest.read_text(encoding="utf-8"))
    expected = weight_shapes(config)
    weights = {}
    for row in rows:
        if row.name not in expected:
            raise LayoutError(f"manifest tensor {row.name!r} is not part of the layout contract")
        if row.shape != expected[row.name]:
            raise LayoutError(f"manifest shape {row.shape} for {row.name!r} != layout {expected[row.name]}")
        src = directory / row.filename
        if not src.exists():
            raise FormatError(f"missing data file {src}")
        n = math.prod(row.shape)
        if src.stat().st_size != 4 * n:
            raise FormatError(f"{src.name}: {src.stat().st_size} bytes, but {row.name} {list(row.shape)} "
                              f"needs {4 * n}")
        weights[row.name] = np.fromfile(src, dtype="<f4").reshape(row.shape)
    return write_model(out_path, config, weights)


@dataclass
class SizeRow:
    name: str
    shape: tuple[int, ...]
    dtype_before: str
    dtype_after: str
    bytes_before: int
    bytes_after: int


@dataclass
class SizeReport:
    format: BlockFormat
    rows: list[SizeRow]
    file_bytes_before: int
    file_bytes_after: int

    @property
    def quantized_rows(self) -> list[SizeRow]:
        return [r for r in self.rows if r.dtype_after != r.dtype_before]

    @property
    def rank2_ratio(self) -> float:
        q = self.quantized_rows
        return sum(r.bytes_before for r in q) / sum(r.bytes_after for r in q)

    @property
    def file_ratio(self) -> float:
        return self.file_bytes_before / self.file_bytes_after

    def by_dtype(self, after: bool = True) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.rows:
            key = r.dtype_after if after else r.dtype_before
            out[key] = out.get(key, 0) + (r.bytes_after if after else r.bytes_before)
        return out

    def table(self) -> str:
        lines = [f"{'dtype':<8}{'bytes before':>16}{'bytes after':>16}"]
        before = {}
        for r in self.rows:
            before[r.dtype_after] = before.get(r.dtype_after, 0) + r.bytes_before
        for k, v in self.by_dtype().items():
            lines.append(f"{k:<8}{before[k]:>16,}{v:>16,}")
        lines.append(f"{'file':<8}{self.file_bytes_before:>16,}{self.file_bytes_after:>16,}")
        lines.append(f"rank-2 ratio {self.rank2_ratio:.3f}  (format arithmetic {compression_ratio(self.format):.3f})")
        lines.append(f"file ratio   {self.file_ratio:.3f}")
        return "\n".join(lines)


def quantize_model(in_path, fmt: BlockFormat, out_path) -> SizeReport:
    with ModelFile(in_path) as mf:
        if any(e.dtype is not None and e.dtype.block_format for e in mf.entry_list):
            raise DataError(f"{in_path} is already quantized ({mf.format_label()}); start from an F32 model")
        report = validate(mf)
        if not report.ok:
            raise FormatError(f"input model failed validation:\n{report}")
        weights, formats, rows = {}, {}, []
        for e in mf.entry_list:
            w = mf.read_tensor(e.name)
            weights[e.name] = w
            if should_quantize(e.name, e.shape):
                formats[e.name] = DType.of(fmt)
                after = payload_bytes(fmt, *e.shape)
                rows.append(SizeRow(e.name, e.shape, e.dtype.name, fmt.name, e.byte_len, after))
            else:
                rows.append(SizeRow(e.name, e.shape, e.dtype.name, e.dtype.name, e.byte_len, e.byte_len))
        write_model(out_path, mf.config, weights, formats)
        before = mf.size
    return SizeReport(fmt, rows, before, os.path.getsize(out_path))
