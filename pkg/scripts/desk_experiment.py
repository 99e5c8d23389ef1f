"""Desk-scale retrieval experiment on the default synthetic dataset.

Generates the synthetic data, runs one split/train/encode/evaluate cycle and
prints the five-run mAP, the final training loss and the wall time. Every knob
is a flag with the library default, for example::

    python3 scripts/desk_experiment.py --bits 32 --alpha 1 --seed 3
"""

from __future__ import annotations

import argparse
import json
import logging
import time
from dataclasses import replace

from vmfhash.data import SynthSpec, synth_generate
from vmfhash.pipeline import ExperimentConfig, run_experiment
from vmfhash.train import TrainConfig


def parse_args(argv=None):
    d, t, s = ExperimentConfig(), TrainConfig(), SynthSpec()
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--bits", type=int, default=d.bits)
    p.add_argument("--alpha", type=float, default=t.alpha)
    p.add_argument("--epochs", type=int, default=t.epochs)
    p.add_argument("--lr", type=float, default=t.lr)
    p.add_argument("--batch-size", type=int, default=t.batch_size)
    p.add_argument("--seed", type=int, default=t.seed, help="training, split and evaluation seed")
    p.add_argument("--data-seed", type=int, default=s.seed)
    p.add_argument("--noise", type=float, default=s.noise_std)
    p.add_argument("--r", type=int, default=d.R)
    p.add_argument("--runs", type=int, default=d.runs)
    p.add_argument("--probe", action="store_true", help="log the training-set mAP probe every epoch")
    p.add_argument("-v", "--verbose", action="store_true")
    return p.parse_args(argv)


def main(argv=None) -> None:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    ds = synth_generate(SynthSpec(noise_std=args.noise, seed=args.data_seed))
    train = replace(TrainConfig(), alpha=args.alpha, epochs=args.epochs, lr=args.lr,
                    batch_size=args.batch_size, seed=args.seed)
    cfg = replace(ExperimentConfig(), bits=args.bits, train=train, R=args.r, runs=args.runs)
    start = time.perf_counter()
    result = run_experiment(ds, cfg, probe=args.probe)
    elapsed = time.perf_counter() - start
    print(json.dumps(cfg.to_dict(), sort_keys=True))
    print(f"map={result.report.map:.4f} per_run={[round(v, 4) for v in result.report.per_run]}")
    print(f"final_loss={result.final_loss:.6f} epochs={result.epochs_run} seconds={elapsed:.1f}")


if __name__ == "__main__":
    main()
