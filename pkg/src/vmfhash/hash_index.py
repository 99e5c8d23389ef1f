"""Sign binarization, packed Hamming retrieval and top-R mAP.

Bit convention: bit j is 1 iff component j of the embedding is > 0, i.e. the
code value is +1; a component that is exactly 0 maps to -1 (bit 0). Bits are
packed little-endian within each byte (bit j lives in byte j // 8 at position
j % 8), and padding bits past M are always 0.

AP follows the top-R definition with a 1/R normalization:
``AP = (1/R) sum_i P(i) rel(i)``. This is *not* the common 1/#relevant form;
when a class has fewer than R database members its queries cannot reach
AP = 1.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, FormatError

DEFAULT_R = 100
DEFAULT_QUERY_FRACTION = 0.2
DEFAULT_RUNS = 5

CODES_MAGIC = "VMFCODES"
CODES_VERSION = "v1"
_HEADER_RE = re.compile(r"^VMFCODES (v\d+) M=(\d+) N=(\d+)$")


@dataclass(frozen=True)
class HashCode:
    bits: np.ndarray  # packed uint8, ceil(M/8) bytes
    M: int

    def to_signs(self) -> np.ndarray:
        return unpack_signs(self.bits[None], self.M)[0]


@dataclass(frozen=True)
class CodeDatabase:
    codes: np.ndarray  # (n, ceil(M/8)) packed uint8
    labels: np.ndarray
    M: int

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=np.uint8)
        labels = np.asarray(self.labels, dtype=np.int64)
        if codes.ndim != 2 or codes.shape[1] != _nbytes(self.M):
            raise DomainError(f"packed codes must be (n, {_nbytes(self.M)}) for M={self.M}")
        if labels.shape != (codes.shape[0],):
            raise DomainError("one label per code required")
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.codes.shape[0]

    def __getitem__(self, i: int) -> HashCode:
        return HashCode(self.codes[i], self.M)

    def subset(self, idx) -> "CodeDatabase":
        idx = np.asarray(idx, dtype=np.int64)
        return CodeDatabase(self.codes[idx], self.labels[idx], self.M)

    @classmethod
    def from_embeddings(cls, z, labels) -> "CodeDatabase":
        z = np.asarray(z)
        return cls(pack_signs(z), labels, z.shape[1])


@dataclass(frozen=True)
class RetrievalReport:
    aps: np.ndarray
    map: float
    R: int
    bits: int
    seed: int | None = None
    runs: int = 1
    per_run: tuple[float, ...] = field(default=())


def _nbytes(M: int) -> int:
    return (M + 7) // 8


def pack_signs(z) -> np.ndarray:
    """Pack the signs of each row of ``z`` (shape (n, M)) into uint8 codes."""
    z = np.asarray(z)
    return np.packbits(z > 0, axis=-1, bitorder="little")


def unpack_signs(codes, M: int) -> np.ndarray:
    bits = np.unpackbits(np.asarray(codes, dtype=np.uint8), axis=-1, count=M, bitorder="little")
    return bits.astype(np.int8) * 2 - 1


def binarize(z_norm) -> HashCode:
    z = getattr(z_norm, "components", z_norm)
    z = np.asarray(z)
    if z.ndim != 1 or z.shape[0] < 2:
        raise DomainError("binarize expects a single embedding with M >= 2")
    return HashCode(pack_signs(z[None])[0], z.shape[0])


def hamming_distance(a: HashCode, b: HashCode) -> int:
    if a.M != b.M:
        raise DomainError(f"code length mismatch: {a.M} vs {b.M}")
    return int(np.bitwise_count(np.bitwise_xor(a.bits, b.bits)).sum())


def hamming_matrix(queries: np.ndarray, db: np.ndarray) -> np.ndarray:
    """(n_q, n) integer distances between packed code sets."""
    x = np.bitwise_xor(queries[:, None, :], db[None, :, :])
    return np.bitwise_count(x).sum(axis=-1, dtype=np.int64)


def _rank(distances: np.ndarray, R: int) -> np.ndarray:
    # stable sort keeps ascending database index among equal distances
    return np.argsort(distances, axis=-1, kind="stable")[..., :R]


def top_r(query: HashCode, db: CodeDatabase, R: int) -> np.ndarray:
    if query.M != db.M:
        raise DomainError(f"code length mismatch: {query.M} vs {db.M}")
    if not (1 <= R <= len(db)):
        raise DomainError(f"R={R} must lie in 1..{len(db)}")
    return _rank(hamming_matrix(query.bits[None], db.codes)[0], R)


def average_precision(relevance) -> float:
    rel = np.asarray(relevance, dtype=np.float64)
    if rel.ndim != 1 or rel.size == 0:
        raise DomainError("relevance must be a non-empty 1-D sequence")
    R = rel.size
    precision = np.cumsum(rel) / np.arange(1, R + 1)
    return float(np.sum(precision * rel) / R)


def _average_precisions(relevance: np.ndarray) -> np.ndarray:
    R = relevance.shape[1]
    precision = np.cumsum(relevance, axis=1) / np.arange(1, R + 1)
    return np.sum(precision * relevance, axis=1) / R


def mean_average_precision(queries: CodeDatabase, db: CodeDatabase, R: int = DEFAULT_R) -> RetrievalReport:
    """Top-R mAP; an item is relevant when its label equals the query's."""
    if len(queries) == 0:
        raise DomainError("empty query set")
    if queries.M != db.M:
        raise DomainError(f"code length mismatch: {queries.M} vs {db.M}")
    if not (1 <= R <= len(db)):
        raise DomainError(f"R={R} must lie in 1..{len(db)}")
    ranked = _rank(hamming_matrix(queries.codes, db.codes), R)
    relevance = (db.labels[ranked] == queries.labels[:, None]).astype(np.float64)
    aps = _average_precisions(relevance)
    return RetrievalReport(aps=aps, map=float(np.mean(aps)), R=R, bits=db.M)


def split_query_database(db: CodeDatabase, query_fraction: float, seed: int):
    """Seeded random split into (queries, database); both non-empty."""
    if not (0.0 < query_fraction < 1.0):
        raise DomainError(f"query fraction must lie in (0, 1), got {query_fraction!r}")
    n = len(db)
    n_q = int(round(query_fraction * n))
    if n_q < 1 or n_q > n - 1:
        raise DomainError(f"cannot split {n} codes into non-empty query/database sets at fraction {query_fraction}")
    perm = np.random.default_rng(seed).permutation(n)
    return db.subset(np.sort(perm[:n_q])), db.subset(np.sort(perm[n_q:]))


def run_seeds(seed: int, runs: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(runs)]


def evaluate_runs(
    db: CodeDatabase,
    query_fraction: float = DEFAULT_QUERY_FRACTION,
    R: int = DEFAULT_R,
    runs: int = DEFAULT_RUNS,
    seed: int = 0,
) -> RetrievalReport:
    """Average mAP over ``runs`` independent query/database splits.

    The returned ``aps`` concatenates the per-query APs of every run.
    """
    if runs < 1:
        raise DomainError("runs must be >= 1")
    reports = []
    for s in run_seeds(seed, runs):
        queries, base = split_query_database(db, query_fraction, s)
        reports.append(mean_average_precision(queries, base, R))
    per_run = tuple(r.map for r in reports)
    return RetrievalReport(
        aps=np.concatenate([r.aps for r in reports]),
        map=float(np.mean(per_run)),
        R=R,
        bits=db.M,
        seed=seed,
        runs=runs,
        per_run=per_run,
    )


# ---------------------------------------------------------------------------
# code file


def code_to_hex(packed: np.ndarray, M: int) -> str:
    """Hex digits in little-endian nibble order: digit i holds bits 4i..4i+3."""
    nibbles = np.empty(2 * packed.shape[0], dtype=np.uint8)
    nibbles[0::2] = packed & 0x0F
    nibbles[1::2] = packed >> 4
    return "".join("0123456789abcdef"[v] for v in nibbles[: (M + 3) // 4])


def hex_to_code(text: str, M: int) -> np.ndarray:
    if len(text) != (M + 3) // 4:
        raise ValueError(f"expected {(M + 3) // 4} hex digits for M={M}, got {len(text)}")
    nibbles = np.array([int(ch, 16) for ch in text], dtype=np.uint8)
    if nibbles.size % 2:
        nibbles = np.append(nibbles, 0)
    packed = nibbles[0::2] | (nibbles[1::2] << 4)
    if M % 8 and packed[-1] >> (M % 8):
        raise ValueError("padding bits past M must be zero")
    return packed.astype(np.uint8)


def format_codes(db: CodeDatabase, comments: dict | None = None) -> str:
    lines = [f"{CODES_MAGIC} {CODES_VERSION} M={db.M} N={len(db)}"]
    for key, value in (comments or {}).items():
        lines.append(f"# {key} {json.dumps(value, sort_keys=True, separators=(',', ':'))}")
    for label, code in zip(db.labels, db.codes):
        lines.append(f"{int(label)} {code_to_hex(code, db.M)}")
    return "\n".join(lines) + "\n"


def save_codes(path, db: CodeDatabase, comments: dict | None = None) -> None:
    Path(path).write_text(format_codes(db, comments), encoding="utf-8")


def parse_codes(text: str) -> CodeDatabase:
    lines = text.splitlines()
    if not lines:
        raise FormatError("empty code file", line=1)
    m = _HEADER_RE.match(lines[0].strip())
    if m is None:
        raise FormatError(f"bad header {lines[0]!r}, expected '{CODES_MAGIC} {CODES_VERSION} M=<bits> N=<count>'", line=1)
    version, M, n = m.group(1), int(m.group(2)), int(m.group(3))
    if version != CODES_VERSION:
        raise FormatError(f"unknown code format version {version!r}", line=1)
    if M < 2:
        raise FormatError("M must be >= 2", line=1)
    codes = np.zeros((n, _nbytes(M)), dtype=np.uint8)
    labels = np.empty(n, dtype=np.int64)
    row = 0
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        if row >= n:
            raise FormatError(f"header declares N={n} but more records follow", line=lineno)
        parts = line.split()
        if len(parts) != 2:
            raise FormatError("record must be '<label> <hex code>'", line=lineno)
        try:
            labels[row] = int(parts[0])
            codes[row] = hex_to_code(parts[1], M)
        except ValueError as exc:
            raise FormatError(str(exc), line=lineno) from None
        row += 1
    if row != n:
        raise FormatError(f"header declares N={n} but file holds {row} records")
    return CodeDatabase(codes, labels, M)


def load_codes(path) -> CodeDatabase:
    return parse_codes(Path(path).read_text(encoding="utf-8"))
