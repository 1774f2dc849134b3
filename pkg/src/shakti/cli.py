"""``shakti`` command line: init, convert, quantize, inspect, generate, bench.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .bench import append_csv, run_bench
from .errors import ConfigError, DataError, ShaktiError, UsageError
from .model import PRESETS, GenerationParams, Mode, ModelConfig, generate, get_preset, random_weights
from .quant import BlockFormat
from .store import ModelFile, convert_f32_bundle, quantize_model, validate_path, write_model

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _format(name: str) -> BlockFormat:
    try:
        return BlockFormat.parse(name)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _load_config(args) -> ModelConfig:
    if args.config:
        try:
            return ModelConfig.from_dict(json.loads(Path(args.config).read_text()))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.config}: not valid JSON ({e})") from None
    if args.preset:
        return get_preset(args.preset)
    raise UsageError("one of --preset or --config is required")


def _add_config_args(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--preset", help=f"one of: {', '.join(PRESETS)}")
    g.add_argument("--config", help="JSON file with ModelConfig fields")


def cmd_init(args) -> int:
    config = _load_config(args)
    fmt = _format(args.format) if args.format.upper() != "F32" else None
    weights = random_weights(config, args.seed, fmt=fmt)
    write_model(args.out, config, weights)
    print(f"wrote {args.out}: {config.n_layers} layers, d_model={config.d_model}, seed={args.seed}")
    return EXIT_OK


def cmd_convert(args) -> int:
    config = _load_config(args)
    convert_f32_bundle(args.dir, args.manifest, config, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_quantize(args) -> int:
    fmt = _format(args.format)
    report = quantize_model(args.input, fmt, args.output)
    print(report.table())
    return EXIT_OK


def cmd_inspect(args) -> int:
    report = validate_path(args.model)
    try:
        mf = ModelFile(args.model)
    except DataError:
        print(report)
        return EXIT_DATA
    with mf:
        c = mf.config
        print(f"file      {args.model} ({mf.size:,} bytes)")
        for k, v in c.to_dict().items():
            print(f"{k:<16}{v}")
        print(f"\n{'name':<16}{'dtype':<8}{'shape':<18}{'bytes':>14}")
        for e in mf.entry_list:
            dt = e.dtype.name if e.dtype is not None else f"?{e.dtype_code}"
            print(f"{e.name:<16}{dt:<8}{str(list(e.shape)):<18}{e.byte_len:>14,}")
        print()
        for k, v in mf.dtype_summary().items():
            print(f"total {k:<10}{v:>14,}")
        print(report)
        return EXIT_OK if report.ok else EXIT_DATA


def cmd_generate(args) -> int:
    params = GenerationParams(
        max_tokens=args.max_tokens,
        mode=Mode.SAMPLE if args.temp is not None else Mode.GREEDY,
        temperature=args.temp if args.temp is not None else 1.0,
        top_k=args.top_k, seed=args.seed, ban_eos=args.no_eos)
    with ModelFile(args.model) as mf:
        model = mf.load_model()
        res = generate(model, args.prompt.encode("utf-8"), params)
    sys.stdout.buffer.write(res.text)
    sys.stdout.flush()
    pre_tps = res.prompt_tokens / res.prefill_seconds if res.prefill_seconds > 0 else 0.0
    dec_tps = res.tokens_generated / res.decode_seconds if res.decode_seconds > 0 else 0.0
    print(f"prefill_tps={pre_tps:.2f} decode_tps={dec_tps:.2f} tokens={res.tokens_generated}",
          file=sys.stderr)
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.csv:
        open(args.csv, "a").close()  # fail on an unwritable path before spending time benchmarking
    rows = run_bench(args.model, args.prompt_tokens, args.gen_tokens, args.repeat, args.device_label)
    if args.csv:
        append_csv(args.csv, rows)
    for r in rows:
        print(f"run {r.repeat}: prefill_tps={r.prefill_tps:.2f} decode_tps={r.decode_tps:.2f} "
              f"wall={r.wall_seconds:.3f}s")
    return EXIT_OK


def _positive(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="shakti", description="Quantized small-LM inference engine.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("init", help="write a randomly initialized model")
    _add_config_args(s)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--format", default="F32", help="F32 (default) or a block format to quantize while writing")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("convert", help="convert a raw f32 tensor bundle to a model file")
    _add_config_args(s)
    s.add_argument("--dir", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_convert)

    s = sub.add_parser("quantize", help="re-encode an F32 model in a block format")
    s.add_argument("input")
    s.add_argument("format", help=", ".join(f.name for f in BlockFormat))
    s.add_argument("output")
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("inspect", help="print header, tensor table and validation report")
    s.add_argument("model")
    s.set_defaults(func=cmd_inspect)

    s = sub.add_parser("generate", help="generate text from a prompt")
    s.add_argument("model")
    s.add_argument("prompt")
    s.add_argument("--max-tokens", type=int, default=64)
    mode = s.add_mutually_exclusive_group()
    mode.add_argument("--greedy", action="store_true", help="argmax decoding (default)")
    mode.add_argument("--temp", type=float, help="sample at this temperature")
    s.add_argument("--top-k", type=int, default=40)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--no-eos", action="store_true", help="never emit EOS")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("bench", help="measure prefill and decode tokens per second")
    s.add_argument("model")
    s.add_argument("--prompt-tokens", type=_positive, default=64)
    s.add_argument("--gen-tokens", type=_positive, default=32)
    s.add_argument("--repeat", type=_positive, default=3)
    s.add_argument("--device-label", default="")
    s.add_argument("--csv")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ShaktiError, OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
