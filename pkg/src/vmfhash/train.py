"""Training loop and code generation.

Per batch: encode, l2-normalize, re-estimate class vMF parameters from the
batch (no gradient), divide every kappa by alpha, softmax cross-entropy over
class log-densities, backprop to the encoder, Adam step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import hash_index as hx
from . import vmf_loss as vl
from .data import TimeSeriesDataset, batch_iter
from .encoder import (
    EncoderConfig,
    EncoderWeights,
    backward,
    forward,
    init_weights,
    l2_normalize,
    pooled_features,
    set_center,
    valid_rows,
)
from .errors import DomainError, NumericalAbort
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

@dataclass(frozen=True)
class TrainConfig:
    alpha: float = vl.DEFAULT_ALPHA
    ema_decay: float = vl.DEFAULT_EMA_DECAY
    lr: float = 3e-3
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    probe_r: int = hx.DEFAULT_R
    probe_query_fraction: float = hx.DEFAULT_QUERY_FRACTION

    def __post_init__(self):
        if not self.alpha >= 1.0:
            raise DomainError("alpha must be >= 1")
        if not (0.0 <= self.ema_decay < 1.0):
            raise DomainError("ema_decay must lie in [0, 1)")
        if not self.lr > 0:
            raise DomainError("lr must be > 0")
        if self.epochs < 0:
            raise DomainError("epochs must be >= 0")
        if self.batch_size < 2:
            raise DomainError("batch size must be >= 2")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    mean_loss: float
    probe_map: float
    skipped: int
    rejected: int


@dataclass
class TrainResult:
    weights: EncoderWeights
    class_params: vl.ClassParamTable
    history: list[EpochRecord] = field(default_factory=list)
    skipped: int = 0


def embed(weights: EncoderWeights, values: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Raw encoder outputs for an (N, D, T) array, in fixed-order chunks."""
    out = [forward(values[i:i + chunk], weights)[0] for i in range(0, values.shape[0], chunk)]
    return np.concatenate(out) if out else np.empty((0, weights.config.embed_dim))


def encode_codes(weights: EncoderWeights, ds: TimeSeriesDataset) -> hx.CodeDatabase:
    """Hash codes for every series: sign of the normalized embedding, no margin."""
    z = embed(weights, ds.values)
    z_norm, _ = l2_normalize(z, strict=False)
    return hx.CodeDatabase.from_embeddings(z_norm, ds.labels)


def probe_map(weights: EncoderWeights, ds: TimeSeriesDataset, cfg: TrainConfig) -> float:
    """Training-set mAP for monitoring.

    R is clipped to the expected per-class database size so a perfectly
    separated embedding can reach 1 under the 1/R normalization.
    """
    codes = encode_codes(weights, ds)
    smallest = int(np.bincount(ds.labels)[1:].min())
    R = max(1, min(cfg.probe_r, int(smallest * (1.0 - cfg.probe_query_fraction))))
    return hx.evaluate_runs(codes, cfg.probe_query_fraction, R, runs=1, seed=cfg.seed).map


def recenter(weights: EncoderWeights, values: np.ndarray, chunk: int = 256) -> None:
    """Set the centering buffer to the mean pooled feature over ``values``."""
    pooled = [pooled_features(values[i:i + chunk], weights) for i in range(0, values.shape[0], chunk)]
    set_center(weights, np.concatenate(pooled).mean(axis=0))


def train(
    ds: TimeSeriesDataset,
    encoder_config: EncoderConfig,
    cfg: TrainConfig,
    probe: bool = True,
    on_epoch=None,
) -> TrainResult:
    if ds.num_classes < 2:
        raise DomainError("training needs at least 2 classes")
    if encoder_config.in_channels != ds.channels:
        raise DomainError(f"encoder expects {encoder_config.in_channels} channels, data has {ds.channels}")
    weights = init_weights(encoder_config)
    params = vl.init_class_params(ds.num_classes, encoder_config.embed_dim, cfg.seed)
    result = TrainResult(weights, params)
    if cfg.epochs == 0:
        return result
    state = AdamState.for_weights(weights, lr=cfg.lr)
    dtype = encoder_config.dtype
    values = ds.values.astype(dtype)
    bad_streak = 0
    for epoch in range(cfg.epochs):
        total, count, skipped = 0.0, 0, 0
        for idx in batch_iter(ds.labels, min(cfg.batch_size, ds.n), cfg.seed, epoch):
            z, tape = forward(values[idx], weights, center="batch")
            z_norm, ctx = l2_normalize(z, strict=False)
            ok = valid_rows(ctx)
            if not ok.all():
                skipped += int((~ok).sum())
                log.info("epoch %d: skipped %d near-zero embeddings", epoch, int((~ok).sum()))
            if ok.sum() == 0:
                continue
            labels = ds.labels[idx][ok]
            batch = vl.EmbeddingBatch(z[ok].astype(np.float64), z_norm[ok].astype(np.float64), labels, ds.num_classes)
            params = vl.estimate_class_params(batch, params, cfg.ema_decay)
            scaled = vl.downscale(params, cfg.alpha)
            out = vl.loss_forward(batch, scaled)
            if not math.isfinite(out.loss):
                bad_streak += 1
                if bad_streak >= 2:
                    raise NumericalAbort(f"non-finite loss on two consecutive batches (epoch {epoch})")
                continue
            bad_streak = 0
            grad_norm = np.zeros(z.shape, dtype=np.float64)
            grad_norm[ok] = vl.loss_backward(batch, scaled, out) / batch.size
            grads = backward(tape, grad_norm, weights, norm=ctx)
            adam_step(weights, grads, state)
            total += out.loss
            count += batch.size
        recenter(weights, values)
        record = EpochRecord(
            epoch=epoch + 1,
            mean_loss=total / count if count else float("nan"),
            probe_map=probe_map(weights, ds, cfg) if probe else float("nan"),
            skipped=skipped,
            rejected=state.rejected,
        )
        result.history.append(record)
        result.skipped += skipped
        log.info("epoch %d loss %.6f probe mAP %.4f", record.epoch, record.mean_loss, record.probe_map)
        if on_epoch is not None:
            on_epoch(record)
    result.class_params = params
    return result
