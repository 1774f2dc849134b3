"""Tokens-per-second of one preset across formats on this host, appended to a CSV.

    python scripts/bench_formats.py --preset shakti-100m --formats F32 Q8_0 Q4_0 --device-label laptop
"""
import argparse
from pathlib import Path

from shakti.bench import PROTOCOL, append_csv, run_bench
from shakti.model import get_preset, random_weights
from shakti.quant import BlockFormat
from shakti.store import quantize_model, write_model


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", default="shakti-100m")
    ap.add_argument("--formats", nargs="+", default=["F32", "Q8_0", "Q4_0"])
    ap.add_argument("--prompt-tokens", type=int, default=64)
    ap.add_argument("--gen-tokens", type=int, default=32)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--device-label", default="")
    ap.add_argument("--workdir", type=Path, default=Path("bench_formats"))
    ap.add_argument("--csv", type=Path, default=Path("bench_formats/bench.csv"))
    args = ap.parse_args()

    args.workdir.mkdir(parents=True, exist_ok=True)
    config = get_preset(args.preset)
    f32 = args.workdir / f"{args.preset}-F32.skt"
    if not f32.exists():
        write_model(f32, config, random_weights(config, 0))

    for name in args.formats:
        path = f32
        if name.upper() != "F32":
            path = args.workdir / f"{args.preset}-{name.upper()}.skt"
            if not path.exists():
                quantize_model(f32, BlockFormat.parse(name), path)
        rows = run_bench(path, args.prompt_tokens, args.gen_tokens, args.repeat, args.device_label)
        append_csv(args.csv, rows)
        s = next(r for r in rows if r.repeat == PROTOCOL)
        print(f"{s.format:<6} prefill {s.prefill_tps:9.1f} tok/s  decode {s.decode_tps:8.1f} tok/s  "
              f"{s.model_file_bytes:>14,} bytes")
    print(f"rows appended to {args.csv}")


if __name__ == "__main__":
    main()
