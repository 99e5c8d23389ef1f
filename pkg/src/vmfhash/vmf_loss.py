"""Class-conditional vMF likelihood loss over unit-norm embeddings.

Each class c is a vMF(mu_c, kappa_c) on S^{M-1}, re-estimated from the
embeddings of every batch. Logits are the class log-densities
``kappa_c mu_c^T z + log C_M(kappa_c)``; the loss is softmax cross-entropy over
them. During training every kappa is divided by ``alpha >= 1`` first, which
flattens the class densities and acts as an angular margin.

Class labels are 1-based (``1..C``); table rows are indexed by ``label - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import sphere_stats as ss
from .errors import DegenerateResultant, DomainError

DEFAULT_EMA_DECAY = 0.9
DEFAULT_ALPHA = 2.0
PROB_FLOOR = 1e-30


@dataclass(frozen=True)
class EmbeddingBatch:
    raw: np.ndarray
    normalized: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        norm = np.asarray(self.normalized, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if norm.ndim != 2 or norm.shape[0] < 1:
            raise DomainError(f"normalized embeddings must be (B, M) with B >= 1, got {norm.shape}")
        if labels.shape != (norm.shape[0],):
            raise DomainError("one label per embedding required")
        if labels.min() < 1 or labels.max() > self.num_classes:
            raise DomainError(f"labels must lie in 1..{self.num_classes}")
        if not np.allclose(np.linalg.norm(norm, axis=1), 1.0, rtol=0.0, atol=1e-6):
            raise DomainError("normalized embeddings must have unit norm")
        object.__setattr__(self, "normalized", norm)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_normalized(cls, z_norm, labels, num_classes: int) -> "EmbeddingBatch":
        return cls(raw=np.asarray(z_norm), normalized=z_norm, labels=labels, num_classes=num_classes)

    @property
    def size(self) -> int:
        return self.normalized.shape[0]

    @property
    def dim(self) -> int:
        return self.normalized.shape[1]


@dataclass(frozen=True)
class ClassParamTable:
    """Per-class (mu, kappa) plus bookkeeping.

    ``staleness[c]`` counts batches since class c was last re-estimated;
    ``initialized[c]`` is False until the first estimate replaces the random
    initialization (the first estimate is taken as-is, without EMA blending).
    """

    mu: np.ndarray
    kappa: np.ndarray
    staleness: np.ndarray = field(default=None)
    initialized: np.ndarray = field(default=None)

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        kappa = np.asarray(self.kappa, dtype=np.float64)
        C = mu.shape[0]
        if kappa.shape != (C,):
            raise DomainError("kappa must have one entry per class")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "kappa", kappa)
        if self.staleness is None:
            object.__setattr__(self, "staleness", np.zeros(C, dtype=np.int64))
        if self.initialized is None:
            object.__setattr__(self, "initialized", np.ones(C, dtype=bool))

    @property
    def num_classes(self) -> int:
        return self.mu.shape[0]

    @property
    def dim(self) -> int:
        return self.mu.shape[1]

    def params(self, label: int) -> ss.VmfParams:
        return ss.VmfParams(ss.UnitVector(self.mu[label - 1]), self.kappa[label - 1])

    def log_norm_consts(self) -> np.ndarray:
        return np.array([ss.log_norm_const(self.dim, k) for k in self.kappa])


@dataclass(frozen=True)
class LossOutput:
    loss: float
    mean_loss: float
    probs: np.ndarray
    logits: np.ndarray


def init_class_params(num_classes: int, dim: int, seed: int) -> ClassParamTable:
    rng = np.random.default_rng(seed)
    return ClassParamTable(
        mu=ss.sample_uniform_sphere(dim, num_classes, rng),
        kappa=np.ones(num_classes),
        initialized=np.zeros(num_classes, dtype=bool),
    )


def estimate_class_params(
    batch: EmbeddingBatch, prev: ClassParamTable, ema_decay: float = DEFAULT_EMA_DECAY
) -> ClassParamTable:
    if not (0.0 <= ema_decay < 1.0):
        raise DomainError(f"ema_decay must lie in [0, 1), got {ema_decay!r}")
    if prev.num_classes != batch.num_classes or prev.dim != batch.dim:
        raise DomainError("parameter table does not match the batch")
    M = batch.dim
    mu = prev.mu.copy()
    kappa = prev.kappa.copy()
    staleness = prev.staleness + 1
    initialized = prev.initialized.copy()
    for c in range(1, batch.num_classes + 1):
        members = batch.normalized[batch.labels == c]
        if members.shape[0] < 2:
            continue
        stats = ss.accumulate_resultant(members)
        try:
            mu_new = ss.estimate_mean_direction(stats).components
        except DegenerateResultant:
            continue
        kappa_new = ss.estimate_kappa(M, stats.r_bar)
        i = c - 1
        d = ema_decay if initialized[i] else 0.0
        if d > 0.0:
            blended = (1.0 - d) * mu_new + d * mu[i]
            norm = np.linalg.norm(blended)
            mu_new = blended / norm if norm > 1e-12 else mu_new
            kappa_new = (1.0 - d) * kappa_new + d * kappa[i]
        mu[i] = mu_new
        kappa[i] = kappa_new
        staleness[i] = 0
        initialized[i] = True
    return ClassParamTable(mu=mu, kappa=kappa, staleness=staleness, initialized=initialized)


def downscale(params: ClassParamTable, alpha: float) -> ClassParamTable:
    """Divide every concentration by ``alpha`` (training-time margin)."""
    if not alpha >= 1.0:
        raise DomainError(f"alpha must be >= 1, got {alpha!r}")
    kappa = np.clip(params.kappa / alpha, ss.KAPPA_MIN, ss.KAPPA_MAX)
    return replace(params, kappa=kappa)


def class_logits(z_norm, params: ClassParamTable) -> np.ndarray:
    """Class log-densities for one embedding (shape (M,)) or a batch (shape (B, M))."""
    z = z_norm.components if isinstance(z_norm, ss.UnitVector) else np.asarray(z_norm, dtype=np.float64)
    if z.shape[-1] != params.dim:
        raise DomainError(f"dimension mismatch: embedding has {z.shape[-1]}, table has {params.dim}")
    weighted = params.kappa[:, None] * params.mu
    return z @ weighted.T + params.log_norm_consts()


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def loss_forward(batch: EmbeddingBatch, params: ClassParamTable) -> LossOutput:
    if not (np.all(np.isfinite(params.mu)) and np.all(np.isfinite(params.kappa))):
        raise DomainError("class parameters must be finite")
    logits = class_logits(batch.normalized, params)
    probs = softmax(logits)
    p_true = probs[np.arange(batch.size), batch.labels - 1]
    loss = float(-np.log(np.maximum(p_true, PROB_FLOOR)).sum())
    return LossOutput(loss=loss, mean_loss=loss / batch.size, probs=probs, logits=logits)


def loss_backward(batch: EmbeddingBatch, params: ClassParamTable, out: LossOutput) -> np.ndarray:
    """Gradient of the summed loss w.r.t. the normalized embeddings, (B, M).

    Class parameters are held constant (no gradient through the estimator).
    """
    if out.probs.shape != (batch.size, params.num_classes):
        raise DomainError("loss output does not match the batch")
    residual = out.probs.copy()
    residual[np.arange(batch.size), batch.labels - 1] -= 1.0
    return residual @ (params.kappa[:, None] * params.mu)
