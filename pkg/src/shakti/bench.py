"""Tokens-per-second benchmark with CSV reporting.

Protocol: a synthetic prompt of N tokens (BOS followed by a repeating byte
pattern), one untimed warmup run, then R timed runs. Prefill and the decode
loop are timed separately with a monotonic clock. Decoding is greedy with EOS
suppressed, so every run produces exactly M tokens.
"""
from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tokenizer as tok
from .model import GenerationParams, Model, banned_ids, sample_token
from .store import ModelFile

CSV_COLUMNS = ["model", "format", "device_label", "prompt_tokens", "gen_tokens", "repeat",
               "prefill_tps", "decode_tps", "wall_seconds", "model_file_bytes"]

PROMPT_PATTERN = b"The quick brown fox jumps over the lazy dog. "
PROTOCOL = "mean;warmup=1;prompt=synthetic;decode=greedy-no-eos"


@dataclass
class BenchResult:
    model_path: str
    format: str
    device_label: str
    prompt_tokens: int
    gen_tokens: int
    repeat: str  # run index, or PROTOCOL on the summary row
    prefill_tps: float
    decode_tps: float
    wall_seconds: float
    model_file_bytes: int
    prefill_seconds: float = 0.0
    decode_seconds: float = 0.0

    def csv_row(self) -> list:
        return [self.model_path, self.format, self.device_label, self.prompt_tokens, self.gen_tokens,
                self.repeat, f"{self.prefill_tps:.4f}", f"{self.decode_tps:.4f}",
                f"{self.wall_seconds:.6f}", self.model_file_bytes]


def synth_prompt(n_tokens: int) -> list[int]:
    if n_tokens < 1:
        raise ValueError("prompt must have at least one token")
    body = (PROMPT_PATTERN * (n_tokens // len(PROMPT_PATTERN) + 1))[:n_tokens - 1]
    return [tok.BOS, *body]


def timed_run(model: Model, prompt: list[int], gen_tokens: int) -> tuple[float, float]:
    params = GenerationParams(max_tokens=gen_tokens, ban_eos=True)
    banned = banned_ids(model.config.vocab_size, ban_eos=True)
    t0 = time.perf_counter()
    logits, caches = model.prefill(prompt)
    t1 = time.perf_counter()
    for _ in range(gen_tokens):
        logits = logits.copy()
        logits[banned] = -np.inf
        logits = model.decode_step(sample_token(logits, params), caches)
    t2 = time.perf_counter()
    return t1 - t0, t2 - t1


def run_bench(model_path, prompt_tokens: int, gen_tokens: int, repeat: int,
              device_label: str = "") -> list[BenchResult]:
    """R per-run rows followed by one summary row."""
    if prompt_tokens < 1 or gen_tokens < 1 or repeat < 1:
        raise ValueError("prompt_tokens, gen_tokens and repeat must all be >= 1")
    mf = ModelFile(model_path)
    model = mf.load_model()
    if prompt_tokens + gen_tokens > model.config.max_positions:
        raise ValueError(f"prompt+gen tokens exceed max_positions={model.config.max_positions}")
    prompt = synth_prompt(prompt_tokens)
    size = os.path.getsize(model_path)
    label = mf.format_label()

    def row(rep, pre_s, dec_s, n=1):
        return BenchResult(str(model_path), label, device_label, prompt_tokens, gen_tokens, rep,
                           prompt_tokens * n / pre_s, gen_tokens * n / dec_s, (pre_s + dec_s) / n, size,
                           pre_s, dec_s)

    timed_run(model, prompt, gen_tokens)  # warmup: first touch of mapped pages
    rows = [row(str(i + 1), *timed_run(model, prompt, gen_tokens)) for i in range(repeat)]
    rows.append(row(PROTOCOL, sum(r.prefill_seconds for r in rows), sum(r.decode_seconds for r in rows),
                    n=repeat))
    return rows


def append_csv(path, rows: list[BenchResult]) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        if new:
            w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow(r.csv_row())


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CSV_COLUMNS:
            raise ValueError(f"unexpected CSV columns {reader.fieldnames}")
        out = []
        for rec in reader:
            for k in ("prompt_tokens", "gen_tokens", "model_file_bytes"):
                rec[k] = int(rec[k])
            for k in ("prefill_tps", "decode_tps", "wall_seconds"):
                rec[k] = float(rec[k])
            out.append(rec)
        return out
