"""Code length by margin grid over several seeds on the default synthetic dataset.

For every seed the script trains one model per (bits, alpha) cell and prints
the five-run mAP grid, then the per-cell mean and standard deviation across
seeds. Use it to see how stable the bit-length and margin comparisons are
beyond the single seed the acceptance suite uses::

    python3 scripts/bit_sweep.py --seeds 0,1,2 --bits 16,32,64,128 --alpha 1,2
"""

from __future__ import annotations

import argparse
import time
from dataclasses import replace

import numpy as np

from vmfhash.data import SynthSpec, synth_generate
from vmfhash.pipeline import ExperimentConfig, run_experiment, with_cell


def csv(kind):
    return lambda text: [kind(v) for v in text.split(",") if v.strip()]


def parse_args(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--bits", type=csv(int), default=[16, 32, 64, 128])
    p.add_argument("--alpha", type=csv(float), default=[1.0, 2.0])
    p.add_argument("--seeds", type=csv(int), default=[0])
    p.add_argument("--epochs", type=int, default=ExperimentConfig().train.epochs)
    return p.parse_args(argv)


def print_grid(title, bits, alphas, cell):
    print(title)
    print("bits  " + "  ".join(f"alpha={a:<6g}" for a in alphas))
    for m in bits:
        print(f"{m:>4}  " + "  ".join(f"{cell(m, a):<12}" for a in alphas))


def main(argv=None) -> None:
    args = parse_args(argv)
    ds = synth_generate(SynthSpec())
    results = {}
    for seed in args.seeds:
        base = ExperimentConfig()
        base = replace(base, train=replace(base.train, seed=seed, epochs=args.epochs))
        start = time.perf_counter()
        for m in args.bits:
            for a in args.alpha:
                results[(seed, m, a)] = run_experiment(ds, with_cell(base, m, a)).report.map
        print_grid(f"seed {seed} ({time.perf_counter() - start:.0f} s)", args.bits, args.alpha,
                   lambda m, a: f"{results[(seed, m, a)]:.4f}")
        print()
    if len(args.seeds) > 1:
        def summary(m, a):
            v = np.array([results[(s, m, a)] for s in args.seeds])
            return f"{v.mean():.3f}+-{v.std():.3f}"
        print_grid(f"mean +- std over seeds {args.seeds}", args.bits, args.alpha, summary)


if __name__ == "__main__":
    main()
