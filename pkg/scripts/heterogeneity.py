"""Per-layer ranks and compression ratios induced by one uniform tolerance.

    python3 scripts/heterogeneity.py --eps 0.1 0.3 0.5
"""

import argparse

from pareto_lowrank.allocate import allocate_uniform
from pareto_lowrank.spectrum import profile
from pareto_lowrank.synthetic import MIXED_SPECTRA, mixed_model


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--eps", type=float, nargs="+", default=[0.1, 0.3, 0.5])
    args = ap.parse_args()

    model = mixed_model(seed=args.seed)
    profiles = [profile(t) for t in model.tensors]
    for eps in args.eps:
        alloc = allocate_uniform(profiles, eps)
        print(f"\neps = {eps}: overall ratio {alloc.compression_ratio:.3f}")
        print(f"{'layer':<9}{'spectrum':<16}{'rank':>5}{'error':>9}{'ratio':>8}")
        ratios = []
        for i, p in enumerate(profiles):
            family, param = MIXED_SPECTRA[i % len(MIXED_SPECTRA)]
            ratio = 1 - alloc.per_layer_params[p.layer_name] / p.dense_params
            ratios.append(ratio)
            print(f"{p.layer_name:<9}{family + ' ' + str(param):<16}{alloc.ranks[p.layer_name]:>5}"
                  f"{alloc.per_layer_error[p.layer_name]:>9.4f}{ratio:>8.3f}")
        lo, hi = min(ratios), max(ratios)
        spread = f"{hi / lo:.2f}x" if lo > 0 else "unbounded (some layer not compressed)"
        print(f"ratio span: {lo:.3f} .. {hi:.3f} ({spread})")


if __name__ == "__main__":
    main()
