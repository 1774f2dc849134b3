"""Logit error of every quantization format against F32 on a small random model.

    python scripts/precision_sweep.py --prompts 20 --layers 4 --d-model 128
"""
import argparse

import numpy as np

from shakti.model import Model, ModelConfig, random_weights
from shakti.quant import BlockFormat


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--layers", type=int, default=4)
    ap.add_argument("--d-model", type=int, default=128)
    ap.add_argument("--prompts", type=int, default=20)
    ap.add_argument("--std", type=float, default=0.02)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    heads = args.d_model // 64
    config = ModelConfig(n_layers=args.layers, d_model=args.d_model, n_heads=heads, head_dim=64,
                         n_kv_heads=(max(1, heads // 4),) * args.layers, ffn_hidden=4 * args.d_model)
    ref = Model(config, random_weights(config, args.seed, std=args.std))
    rng = np.random.default_rng(args.seed)
    prompts = [list(rng.integers(0, 256, rng.integers(4, 33))) for _ in range(args.prompts)]
    ref_logits = [ref.prefill(p)[0] for p in prompts]

    print(f"{'format':<8}{'bpw':>6}{'mean max|dlogit|':>20}{'worst':>12}")
    for fmt in sorted(BlockFormat, key=lambda f: -f.bits_per_weight):
        model = Model(config, random_weights(config, args.seed, std=args.std, fmt=fmt))
        errs = [float(np.abs(model.prefill(p)[0] - r).max()) for p, r in zip(prompts, ref_logits)]
        print(f"{fmt.name:<8}{fmt.bits_per_weight:>6.1f}{np.mean(errs):>20.3e}{max(errs):>12.3e}")


if __name__ == "__main__":
    main()
