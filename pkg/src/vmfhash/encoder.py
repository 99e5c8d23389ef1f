"""Small 1D residual conv encoder with hand-written reverse mode.

Architecture: a stack of residual units

    y = relu(conv_k(x) + skip(x))

where ``skip`` is the identity, or a bias-free 1x1 convolution when the channel
count or stride changes; then global average pooling over time, mean-centering
of the pooled features, and a bias-free linear head to ``embed_dim``.
Convolutions zero-pad ``k // 2`` on both sides.

Centering keeps the mean embedding at the origin. The vMF loss only sees angles
between embeddings, so without it training drifts every class into one orthant
(a shared offset tightens all clusters at once) and the sign codes collapse.
In training mode (``center="batch"``) the batch mean is subtracted and
differentiated through; for inference the ``pool.center`` buffer holds the mean
pooled feature of the training set.

Arrays are laid out (batch, channels, time).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DomainError, FormatError, NearZeroEmbedding, StaleTape

DEFAULT_BLOCKS = ((32, 7, 1), (64, 3, 1))
NEAR_ZERO_NORM = 1e-12
_DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int
    embed_dim: int = 16
    blocks: tuple[tuple[int, int, int], ...] = DEFAULT_BLOCKS
    seed: int = 0
    precision: str = "f32"

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(tuple(int(v) for v in b) for b in self.blocks))
        if self.in_channels < 1:
            raise DomainError("in_channels must be >= 1")
        if self.embed_dim < 2:
            raise DomainError("embed_dim must be >= 2")
        for channels, kernel, stride in self.blocks:
            if channels < 1 or stride < 1:
                raise DomainError(f"bad block {(channels, kernel, stride)}")
            if kernel < 1 or kernel % 2 == 0:
                raise DomainError(f"kernel sizes must be odd, got {kernel}")
        if self.precision not in _DTYPES:
            raise DomainError(f"precision must be one of {sorted(_DTYPES)}")

    @property
    def dtype(self):
        return _DTYPES[self.precision]

    @property
    def max_kernel(self) -> int:
        return max((k for _, k, _ in self.blocks), default=1)

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "embed_dim": self.embed_dim,
            "blocks": [list(b) for b in self.blocks],
            "seed": self.seed,
            "precision": self.precision,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(
            in_channels=d["in_channels"],
            embed_dim=d["embed_dim"],
            blocks=tuple(tuple(b) for b in d["blocks"]),
            seed=d["seed"],
            precision=d["precision"],
        )

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Parameter names and shapes in declaration order."""
        shapes = {}
        c_in = self.in_channels
        for i, (c_out, k, s) in enumerate(self.blocks):
            shapes[f"block{i}.conv.weight"] = (c_out, c_in, k)
            shapes[f"block{i}.conv.bias"] = (c_out,)
            if c_in != c_out or s != 1:
                shapes[f"block{i}.proj.weight"] = (c_out, c_in, 1)
            c_in = c_out
        shapes["head.weight"] = (self.embed_dim, c_in)
        return shapes

    def buffer_shapes(self) -> dict[str, tuple[int, ...]]:
        """Non-trainable state, stored after the parameters."""
        c_last = self.blocks[-1][0] if self.blocks else self.in_channels
        return {"pool.center": (c_last,)}


@dataclass
class EncoderWeights:
    config: EncoderConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default=None)
    version: int = field(default=0)

    def __post_init__(self):
        if self.buffers is None:
            self.buffers = {
                name: np.zeros(shape, dtype=self.config.dtype)
                for name, shape in self.config.buffer_shapes().items()
            }

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "EncoderWeights":
        return EncoderWeights(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
            self.version,
        )


def init_weights(config: EncoderConfig) -> EncoderWeights:
    """He-uniform (fan-in) kernels, zero biases and centering; deterministic in ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in config.param_shapes().items():
        if name.endswith("bias"):
            params[name] = np.zeros(shape, dtype=config.dtype)
            continue
        fan_in = int(np.prod(shape[1:]))
        gain = 3.0 if name.startswith("head") else 6.0
        bound = np.sqrt(gain / fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape).astype(config.dtype)
    return EncoderWeights(config, params)


# ---------------------------------------------------------------------------
# convolution primitives


def conv1d_forward(x, weight, bias, stride):
    """Returns (y, cols); cols is the (B, T_out, C_in*k) patch matrix kept for backward."""
    c_out, c_in, k = weight.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad))) if pad else x
    win = sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]  # (B, C_in, T_out, k)
    B, _, T_out, _ = win.shape
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(B, T_out, c_in * k)
    y = cols @ weight.reshape(c_out, c_in * k).T
    if bias is not None:
        y += bias
    return y.transpose(0, 2, 1), cols


def conv1d_backward(dy, cols, weight, stride, T_in):
    """Gradients (dx, dweight, dbias) of a zero-padded strided conv."""
    c_out, c_in, k = weight.shape
    pad = k // 2
    B, _, T_out = dy.shape
    dyt = dy.transpose(0, 2, 1)  # (B, T_out, C_out)
    dweight = (dyt.reshape(-1, c_out).T @ cols.reshape(-1, c_in * k)).reshape(weight.shape)
    dbias = dy.sum(axis=(0, 2))
    dcols = (dyt @ weight.reshape(c_out, c_in * k)).reshape(B, T_out, c_in, k)
    dxp = np.zeros((B, c_in, T_in + 2 * pad), dtype=dy.dtype)
    span = stride * (T_out - 1) + 1
    for j in range(k):
        dxp[:, :, j:j + span:stride] += dcols[:, :, :, j].transpose(0, 2, 1)
    return dxp[:, :, pad:pad + T_in], dweight, dbias


# ---------------------------------------------------------------------------
# network


@dataclass
class Tape:
    weights_id: int
    version: int
    single: bool
    blocks: list = field(default_factory=list)
    pooled: np.ndarray | None = None
    centered: np.ndarray | None = None
    batch_centered: bool = False
    pool_len: int = 0


def forward(x, weights: EncoderWeights, center: str = "buffer"):
    """Encode ``x`` of shape (D, T) or (B, D, T); returns (z, tape).

    ``center="batch"`` subtracts the batch mean of the pooled features instead
    of the stored buffer (training mode).
    """
    cfg = weights.config
    x = np.asarray(x, dtype=cfg.dtype)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[1] != cfg.in_channels:
        raise DomainError(f"expected input (B, {cfg.in_channels}, T), got {x.shape}")
    if x.shape[2] < cfg.max_kernel:
        raise DomainError(f"series length {x.shape[2]} shorter than kernel {cfg.max_kernel}")
    tape = Tape(id(weights), weights.version, single)
    p = weights.params
    h = x
    for i, (_, _, s) in enumerate(cfg.blocks):
        a, cols = conv1d_forward(h, p[f"block{i}.conv.weight"], p[f"block{i}.conv.bias"], s)
        proj = p.get(f"block{i}.proj.weight")
        if proj is not None:
            skip, skip_cols = conv1d_forward(h, proj, None, s)
        else:
            skip, skip_cols = h, None
        pre = a + skip
        tape.blocks.append((h.shape[2], cols, skip_cols, pre > 0))
        h = np.maximum(pre, 0)
    pooled = h.mean(axis=2)
    if center == "batch":
        centered = pooled - pooled.mean(axis=0)
    elif center == "buffer":
        centered = pooled - weights.buffers["pool.center"]
    else:
        raise DomainError(f"center must be 'batch' or 'buffer', got {center!r}")
    tape.pooled = pooled
    tape.centered = centered
    tape.batch_centered = center == "batch"
    tape.pool_len = h.shape[2]
    z = centered @ p["head.weight"].T
    return (z[0] if single else z), tape


def backward(tape: Tape, grad_z, weights: EncoderWeights, norm=None) -> dict[str, np.ndarray]:
    """Parameter gradients given the upstream gradient.

    ``grad_z`` is dL/dz for the raw encoder output, or dL/dz_norm when the
    ``norm`` context from :func:`l2_normalize` is supplied.
    """
    if tape.weights_id != id(weights) or tape.version != weights.version:
        raise StaleTape("tape was recorded against different or since-updated weights")
    cfg = weights.config
    p = weights.params
    g = np.asarray(grad_z, dtype=cfg.dtype)
    if norm is not None:
        g = l2_normalize_backward(norm, g).astype(cfg.dtype, copy=False)
    if tape.single:
        g = g[None]
    grads = {}
    grads["head.weight"] = g.T @ tape.centered
    dh_pool = g @ p["head.weight"]
    if tape.batch_centered:
        dh_pool = dh_pool - dh_pool.mean(axis=0)
    dh = np.broadcast_to(dh_pool[:, :, None] / tape.pool_len, dh_pool.shape + (tape.pool_len,))
    for i in reversed(range(len(cfg.blocks))):
        _, _, s = cfg.blocks[i]
        T_in, cols, skip_cols, active = tape.blocks[i]
        dpre = dh * active
        dx, grads[f"block{i}.conv.weight"], grads[f"block{i}.conv.bias"] = conv1d_backward(
            dpre, cols, p[f"block{i}.conv.weight"], s, T_in
        )
        if skip_cols is not None:
            dskip, grads[f"block{i}.proj.weight"], _ = conv1d_backward(
                dpre, skip_cols, p[f"block{i}.proj.weight"], s, T_in
            )
            dx = dx + dskip
        else:
            dx = dx + dpre
        dh = dx
    return {name: grads[name].astype(cfg.dtype, copy=False) for name in p}


def set_center(weights: EncoderWeights, pooled_mean) -> None:
    weights.buffers["pool.center"][...] = pooled_mean
    weights.version += 1


def pooled_features(x, weights: EncoderWeights) -> np.ndarray:
    return forward(x, weights)[1].pooled


@dataclass
class NormContext:
    unit: np.ndarray
    norm: np.ndarray


def l2_normalize(z, strict: bool = True):
    """Project onto the unit sphere; returns (z_norm, ctx).

    Rows with norm <= 1e-12 raise NearZeroEmbedding when ``strict``; otherwise
    they come back as zero rows and ``ctx.norm`` is 0 there (callers mask them).
    """
    z = np.asarray(z)
    norms = np.linalg.norm(z, axis=-1, keepdims=True)
    bad = norms <= NEAR_ZERO_NORM
    if np.any(bad) and strict:
        raise NearZeroEmbedding("embedding norm too small to normalize")
    safe = np.where(bad, 1.0, norms)
    unit = np.where(bad, 0.0, z / safe)
    return unit, NormContext(unit, np.where(bad, 0.0, norms))


def l2_normalize_backward(ctx: NormContext, g):
    """Apply J = (I - u u^T) / ||z|| to the upstream gradient (zero where masked)."""
    g = np.asarray(g)
    u = ctx.unit
    tangent = g - u * np.sum(u * g, axis=-1, keepdims=True)
    safe = np.where(ctx.norm > 0, ctx.norm, 1.0)
    return np.where(ctx.norm > 0, tangent / safe, 0.0)


def valid_rows(ctx: NormContext) -> np.ndarray:
    return ctx.norm[..., 0] > 0


# ---------------------------------------------------------------------------
# checkpoint container


CHECKPOINT_MAGIC = b"VMFH"
CHECKPOINT_VERSION = 1


def _header_bytes(config: EncoderConfig, extra: dict | None) -> bytes:
    header = {"encoder": config.to_dict(), "extra": extra or {}}
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def checkpoint_bytes(weights: EncoderWeights, extra: dict | None = None) -> bytes:
    """magic, u16 version, u32 header length, JSON header, then f32 LE params and buffers in declaration order."""
    header = _header_bytes(weights.config, extra)
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(header)), header]
    for name in weights.config.param_shapes():
        parts.append(np.ascontiguousarray(weights.params[name], dtype="<f4").tobytes())
    for name in weights.config.buffer_shapes():
        parts.append(np.ascontiguousarray(weights.buffers[name], dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(path, weights: EncoderWeights, extra: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(weights, extra))


def parse_checkpoint(blob: bytes):
    """Returns (weights, extra)."""
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a VMFH checkpoint (bad magic)")
    if len(blob) < 10:
        raise FormatError("truncated checkpoint header")
    version, hlen = struct.unpack("<HI", blob[4:10])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(blob[10:10 + hlen].decode("utf-8"))
        config = EncoderConfig.from_dict(header["encoder"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"bad checkpoint header: {exc}") from None
    offset = 10 + hlen
    tensors = {}
    for name, shape in {**config.param_shapes(), **config.buffer_shapes()}.items():
        count = int(np.prod(shape))
        chunk = blob[offset:offset + 4 * count]
        if len(chunk) != 4 * count:
            raise FormatError(f"truncated checkpoint while reading {name}")
        tensors[name] = np.frombuffer(chunk, dtype="<f4").reshape(shape).astype(config.dtype)
        offset += 4 * count
    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes after last tensor")
    params = {name: tensors[name] for name in config.param_shapes()}
    buffers = {name: tensors[name] for name in config.buffer_shapes()}
    return EncoderWeights(config, params, buffers), header["extra"]


def load_checkpoint(path):
    return parse_checkpoint(Path(path).read_bytes())
