"""Labeled multivariate time series: file format, preprocessing, splits, batches.

File format (UTF-8 text)::

    VMFTS v1 N=<n> D=<d> T=<t>
    # optional comment lines, e.g. "# config {...}"
    <label>\t<D*T space-separated reals, channel-major>

Reals are written with ``repr`` (shortest round-trip), so save/load is exact.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError

MAGIC = "VMFTS"
VERSION = "v1"
_HEADER_RE = re.compile(r"^VMFTS (v\d+) N=(\d+) D=(\d+) T=(\d+)$")


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


@dataclass(frozen=True)
class TimeSeriesDataset:
    """``values`` is (N, D, T); ``labels`` are dense ids in 1..C.

    ``label_map`` maps each dense id back to the label found in the source file.
    """

    values: np.ndarray
    labels: np.ndarray
    label_map: dict = field(default=None)
    stats: ChannelStats | None = None
    provenance: str = ""

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if values.ndim != 3:
            raise DomainError(f"values must be (N, D, T), got shape {values.shape}")
        if labels.shape != (values.shape[0],):
            raise DomainError("one label per series required")
        if not np.all(np.isfinite(values)):
            raise DomainError("dataset values must be finite")
        if labels.size:
            C = int(labels.max())
            if labels.min() < 1 or np.setdiff1d(np.arange(1, C + 1), labels).size:
                raise DomainError("labels must be dense ids 1..C with every class present")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "labels", labels)
        if self.label_map is None:
            object.__setattr__(self, "label_map", {int(c): int(c) for c in np.unique(labels)})

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @property
    def length(self) -> int:
        return self.values.shape[2]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) if self.labels.size else 0

    def subset(self, idx) -> "TimeSeriesDataset":
        """Rows ``idx``. Class ids are kept as-is, so a subset may miss classes."""
        idx = np.asarray(idx, dtype=np.int64)
        sub = object.__new__(TimeSeriesDataset)
        for name, value in (
            ("values", self.values[idx]),
            ("labels", self.labels[idx]),
            ("label_map", self.label_map),
            ("stats", self.stats),
            ("provenance", self.provenance),
        ):
            object.__setattr__(sub, name, value)
        return sub


def _dense_labels(raw: np.ndarray) -> tuple[np.ndarray, dict]:
    uniq = np.unique(raw)
    dense = np.searchsorted(uniq, raw) + 1
    return dense, {int(i + 1): int(u) for i, u in enumerate(uniq)}


# ---------------------------------------------------------------------------
# I/O


def format_dataset(ds: TimeSeriesDataset, comments: dict | None = None) -> str:
    lines = [f"{MAGIC} {VERSION} N={ds.n} D={ds.channels} T={ds.length}"]
    for key, value in (comments or {}).items():
        lines.append(f"# {key} {json.dumps(value, sort_keys=True, separators=(',', ':'))}")
    flat = ds.values.reshape(ds.n, -1)
    for label, row in zip(ds.labels, flat):
        lines.append(f"{ds.label_map.get(int(label), int(label))}\t" + " ".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def save_dataset(ds: TimeSeriesDataset, path, comments: dict | None = None) -> None:
    Path(path).write_text(format_dataset(ds, comments), encoding="utf-8")


def parse_dataset(text: str, provenance: str = "") -> TimeSeriesDataset:
    lines = text.splitlines()
    if not lines:
        raise FormatError("empty dataset file", line=1)
    m = _HEADER_RE.match(lines[0].strip())
    if m is None:
        if lines[0].startswith(MAGIC + " v"):
            version = lines[0].split()[1]
            if version != VERSION:
                raise FormatError(f"unknown dataset format version {version!r}", line=1)
        raise FormatError(f"bad header {lines[0]!r}, expected '{MAGIC} {VERSION} N=<n> D=<d> T=<t>'", line=1)
    version, n, d, t = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if version != VERSION:
        raise FormatError(f"unknown dataset format version {version!r}", line=1)
    if d < 1 or t < 1:
        raise FormatError("D and T must be positive", line=1)
    width = d * t
    values = np.empty((n, width))
    labels = np.empty(n, dtype=np.int64)
    row = 0
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        if row >= n:
            raise FormatError(f"header declares N={n} but more records follow", line=lineno)
        label_str, sep, body = line.partition("\t")
        if not sep:
            raise FormatError("record must be '<label>\\t<values>'", line=lineno)
        try:
            labels[row] = int(label_str)
        except ValueError:
            raise FormatError(f"label {label_str!r} is not an integer", line=lineno) from None
        fields = body.split()
        if len(fields) != width:
            raise FormatError(f"expected D*T={width} values, found {len(fields)}", line=lineno)
        try:
            vals = [float(f) for f in fields]
        except ValueError as exc:
            raise FormatError(f"bad real value ({exc})", line=lineno) from None
        if not all(math.isfinite(v) for v in vals):
            raise FormatError("non-finite value", line=lineno)
        values[row] = vals
        row += 1
    if row != n:
        raise FormatError(f"header declares N={n} but file holds {row} records")
    dense, label_map = _dense_labels(labels)
    return TimeSeriesDataset(values.reshape(n, d, t), dense, label_map, provenance=provenance)


def load_dataset(path) -> TimeSeriesDataset:
    path = Path(path)
    return parse_dataset(path.read_text(encoding="utf-8"), provenance=str(path))


# ---------------------------------------------------------------------------
# preprocessing


# a channel whose spread is below this fraction of its magnitude is treated as
# constant; the float mean of a constant channel is not exact, so its computed
# std is a rounding residue rather than 0
CONSTANT_RTOL = 1e-12


def fit_channel_stats(ds: TimeSeriesDataset) -> ChannelStats:
    mean = ds.values.mean(axis=(0, 2))
    std = ds.values.std(axis=(0, 2))
    scale = np.maximum(1.0, np.abs(ds.values).max(axis=(0, 2), initial=0.0))
    return ChannelStats(mean, np.where(std <= CONSTANT_RTOL * scale, 0.0, std))


def apply_channel_stats(ds: TimeSeriesDataset, stats: ChannelStats) -> TimeSeriesDataset:
    if stats.mean.shape != (ds.channels,):
        raise DomainError("channel statistics do not match the dataset")
    centered = ds.values - stats.mean[None, :, None]
    safe = np.where(stats.std > 0, stats.std, 1.0)
    out = np.where(stats.std[None, :, None] > 0, centered / safe[None, :, None], 0.0)
    return replace(ds, values=out, stats=stats)


def zscore_normalize(ds: TimeSeriesDataset, stats: ChannelStats | None = None) -> TimeSeriesDataset:
    """Per-channel standardization.

    Fits the statistics on ``ds`` (pass the training split) unless ``stats`` is
    given; the stats are attached to the result for reuse on test data.
    Constant channels map to zero.
    """
    return apply_channel_stats(ds, fit_channel_stats(ds) if stats is None else stats)


def split_train_test(ds: TimeSeriesDataset, test_fraction: float, seed: int):
    """Stratified, seeded train/test split; returns (train, test)."""
    if not (0.0 < test_fraction < 1.0):
        raise DomainError(f"test fraction must lie in (0, 1), got {test_fraction!r}")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in np.unique(ds.labels):
        members = np.flatnonzero(ds.labels == c)
        if members.size < 2:
            raise DomainError(f"class {ds.label_map.get(int(c), int(c))} has a single sample and cannot be stratified")
        n_test = min(max(int(round(test_fraction * members.size)), 1), members.size - 1)
        perm = rng.permutation(members)
        test_idx.append(perm[:n_test])
        train_idx.append(perm[n_test:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    return ds.subset(train_idx), ds.subset(test_idx)


def batch_iter(labels, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Index batches for one epoch, shuffled by (seed, epoch).

    A trailing partial batch is kept only if some class has two samples in it;
    otherwise it is folded into the previous batch.
    """
    labels = np.asarray(labels)
    n = labels.shape[0]
    if batch_size < 2:
        raise DomainError("batch size must be >= 2")
    if batch_size > n:
        raise DomainError(f"batch size {batch_size} exceeds dataset size {n}")
    order = np.random.default_rng([seed, epoch]).permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < batch_size:
        _, counts = np.unique(labels[batches[-1]], return_counts=True)
        if counts.max() < 2:
            tail = batches.pop()
            batches[-1] = np.concatenate([batches[-1], tail])
    return batches


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthSpec:
    """Class c is a sinusoid at ``frequencies[c]`` cycles per window, random phase per channel.

    The default frequencies 8, 16, 24, ... cycles per window put the class
    periods (16, 8, 5.3, ... steps) inside the receptive field of the default
    encoder, so a small conv stack can tell them apart.
    """

    classes: int = 4
    channels: int = 3
    length: int = 128
    samples_per_class: int = 200
    frequencies: tuple[float, ...] | None = None
    amplitudes: tuple[float, ...] | None = None
    noise_std: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.classes < 2:
            raise DomainError("need at least 2 classes")
        if self.channels < 1 or self.length < 2 or self.samples_per_class < 1:
            raise DomainError("channels, length and samples per class must be positive")
        if self.noise_std < 0:
            raise DomainError("noise std must be >= 0")
        if self.frequencies is None:
            object.__setattr__(self, "frequencies", tuple(float(8 * (c + 1)) for c in range(self.classes)))
        if self.amplitudes is None:
            object.__setattr__(self, "amplitudes", (1.0,) * self.classes)
        if len(self.frequencies) != self.classes or len(self.amplitudes) != self.classes:
            raise DomainError("one frequency and one amplitude per class required")
        if len(set(self.frequencies)) != self.classes:
            raise DomainError("class frequencies must be distinct")

    def to_dict(self) -> dict:
        return {
            "classes": self.classes,
            "channels": self.channels,
            "length": self.length,
            "samples_per_class": self.samples_per_class,
            "frequencies": list(self.frequencies),
            "amplitudes": list(self.amplitudes),
            "noise_std": self.noise_std,
            "seed": self.seed,
        }


def synth_generate(spec: SynthSpec) -> TimeSeriesDataset:
    rng = np.random.default_rng(spec.seed)
    t = np.arange(spec.length) / spec.length
    n = spec.classes * spec.samples_per_class
    values = np.empty((n, spec.channels, spec.length))
    labels = np.repeat(np.arange(1, spec.classes + 1), spec.samples_per_class)
    for i, c in enumerate(labels):
        phase = rng.uniform(0.0, 2.0 * np.pi, size=(spec.channels, 1))
        wave = spec.amplitudes[c - 1] * np.sin(2.0 * np.pi * spec.frequencies[c - 1] * t[None, :] + phase)
        values[i] = wave + spec.noise_std * rng.standard_normal((spec.channels, spec.length))
    return TimeSeriesDataset(values, labels, provenance=f"synth {json.dumps(spec.to_dict(), sort_keys=True)}")
