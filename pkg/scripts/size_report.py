"""Model size per quantization format for a preset (randomly initialized).

    python scripts/size_report.py --preset shakti-100m --workdir /tmp/sizes
"""
import argparse
from pathlib import Path

from shakti.model import get_preset, random_weights
from shakti.quant import BlockFormat, compression_ratio
from shakti.store import quantize_model, write_model


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--preset", default="shakti-100m")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workdir", type=Path, default=Path("size_report"))
    ap.add_argument("--keep", action="store_true", help="keep the quantized files")
    args = ap.parse_args()

    args.workdir.mkdir(parents=True, exist_ok=True)
    config = get_preset(args.preset)
    f32 = args.workdir / f"{args.preset}-F32.skt"
    if not f32.exists():
        write_model(f32, config, random_weights(config, args.seed))

    print(f"{'format':<8}{'bpw':>6}{'file bytes':>16}{'rank-2 ratio':>14}{'expected':>10}{'file ratio':>12}")
    print(f"{'F32':<8}{32.0:>6.1f}{f32.stat().st_size:>16,}{1.0:>14.3f}{1.0:>10.3f}{1.0:>12.3f}")
    for fmt in BlockFormat:
        out = args.workdir / f"{args.preset}-{fmt.name}.skt"
        rep = quantize_model(f32, fmt, out)
        print(f"{fmt.name:<8}{fmt.bits_per_weight:>6.1f}{rep.file_bytes_after:>16,}{rep.rank2_ratio:>14.3f}"
              f"{compression_ratio(fmt):>10.3f}{rep.file_ratio:>12.3f}")
        if not args.keep:
            out.unlink()


if __name__ == "__main__":
    main()
