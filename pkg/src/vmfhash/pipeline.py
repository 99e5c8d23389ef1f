"""Split, standardize, train, encode, evaluate: one retrieval experiment."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from . import hash_index as hx
from .data import TimeSeriesDataset, split_train_test, zscore_normalize
from .encoder import EncoderConfig
from .train import TrainConfig, encode_codes, train

DEFAULT_TEST_FRACTION = 0.5


@dataclass(frozen=True)
class ExperimentConfig:
    bits: int = 16
    train: TrainConfig = TrainConfig()
    test_fraction: float = DEFAULT_TEST_FRACTION
    R: int = 50
    query_fraction: float = hx.DEFAULT_QUERY_FRACTION
    runs: int = hx.DEFAULT_RUNS
    precision: str = "f32"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        return d


@dataclass(frozen=True)
class ExperimentResult:
    config: ExperimentConfig
    report: hx.RetrievalReport
    final_loss: float
    epochs_run: int


def max_useful_r(labels: np.ndarray, query_fraction: float) -> int:
    """Largest R at which every class can still fill its top-R list.

    Under the 1/R AP normalization a query whose class has fewer than R
    database members cannot reach AP = 1.
    """
    smallest = int(np.bincount(labels)[1:].min())
    return max(1, int(smallest * (1.0 - query_fraction)))


def run_experiment(ds: TimeSeriesDataset, cfg: ExperimentConfig, probe: bool = False) -> ExperimentResult:
    """Stratified split (seeded by the training seed), train on the standardized
    training part, then average top-R mAP over ``cfg.runs`` query/database
    splits of the test codes."""
    train_ds, test_ds = split_train_test(ds, cfg.test_fraction, cfg.train.seed)
    train_ds = zscore_normalize(train_ds)
    test_ds = zscore_normalize(test_ds, train_ds.stats)
    enc = EncoderConfig(in_channels=ds.channels, embed_dim=cfg.bits, seed=cfg.train.seed, precision=cfg.precision)
    result = train(train_ds, enc, cfg.train, probe=probe)
    codes = encode_codes(result.weights, test_ds)
    report = hx.evaluate_runs(codes, cfg.query_fraction, cfg.R, cfg.runs, cfg.train.seed)
    final = result.history[-1].mean_loss if result.history else float("nan")
    return ExperimentResult(cfg, report, final, len(result.history))


def with_cell(cfg: ExperimentConfig, bits: int, alpha: float) -> ExperimentConfig:
    return replace(cfg, bits=bits, train=replace(cfg.train, alpha=alpha))
