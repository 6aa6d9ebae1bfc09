"""How fast ALS approaches the whitened optimum, on gapped and on plain Gaussian weights.

Prints, per ensemble, quantiles of the remaining gap to the closed-form optimum
after selected iterations and the share of the total improvement made by the
first iteration.

    python3 scripts/als_plateau.py --instances 100
"""

import argparse

import numpy as np

from pareto_lowrank.factorize import als_factorize, objective, whitened_factorize
from pareto_lowrank.synthetic import anisotropic_activations, gapped_instance
from pareto_lowrank.tensorio import covariance_from_activations

CHECKPOINTS = (1, 2, 5, 10, 20, 50)


def gaussian_instance(rng, max_dim):
    N, M = (int(x) for x in rng.integers(4, max_dim + 1, 2))
    r = int(rng.integers(1, min(N, M)))
    W = rng.standard_normal((N, M))
    cov = covariance_from_activations(anisotropic_activations(rng, M, 2 * M + 8))
    return W, cov, r


def run(instances):
    gaps = {c: [] for c in CHECKPOINTS}
    first_share = []
    for W, cov, r in instances:
        _, trace = als_factorize(W, cov, r, tau=max(CHECKPOINTS))
        w = whitened_factorize(W, cov, r)
        opt = objective(W, w.A, w.B, cov)
        for c in CHECKPOINTS:
            gaps[c].append((trace.values[c] - opt) / opt)
        total = trace.values[0] - trace.values[-1]
        if total > 0:
            first_share.append((trace.values[0] - trace.values[1]) / total)
    return gaps, first_share


def report(name, gaps, first_share):
    print(f"\n{name}")
    print(f"{'iter':>5}{'median gap':>13}{'90% gap':>12}{'max gap':>12}")
    for c, g in gaps.items():
        q = np.quantile(g, [0.5, 0.9, 1.0])
        print(f"{c:>5}{q[0]:>13.2e}{q[1]:>12.2e}{q[2]:>12.2e}")
    print(f"first-iteration share of total improvement: min {min(first_share):.3f}, "
          f"median {np.median(first_share):.3f}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--instances", type=int, default=100)
    ap.add_argument("--max-dim", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--tail", type=float, nargs="+", default=[0.3, 0.5, 0.7])
    args = ap.parse_args()

    for tail in args.tail:
        rng = np.random.default_rng(args.seed)
        insts = [gapped_instance(rng, args.max_dim, tail) for _ in range(args.instances)]
        report(f"gapped spectrum, tail <= {tail} x smallest leading value",
               *run([(i.W, i.cov, i.rank) for i in insts]))
    rng = np.random.default_rng(args.seed)
    report("plain Gaussian weights (no spectral gap)",
           *run([gaussian_instance(rng, args.max_dim) for _ in range(args.instances)]))


if __name__ == "__main__":
    main()
