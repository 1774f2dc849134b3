"""Byte-level tokenizer: ids 0-255 are raw bytes, then BOS/EOS/PAD and reserved padding ids."""
from __future__ import annotations

BOS = 256
EOS = 257
PAD = 258
VOCAB_SIZE = 288  # 259 used ids padded to a multiple of 32


class ByteTokenizer:
    bos = BOS
    eos = EOS
    pad = PAD
    vocab_size = VOCAB_SIZE

    def encode(self, data: bytes, bos: bool = True) -> list[int]:
        ids = list(bytes(data))
        return [BOS, *ids] if bos else ids

    def decode(self, ids) -> bytes:
        return bytes(i for i in ids if 0 <= i < 256)
