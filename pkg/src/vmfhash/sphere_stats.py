"""Directional statistics on the unit hypersphere.

Everything here works in float64 and in the log domain where magnitudes can
blow up: ``log I_nu(kappa)`` for kappa up to ``KAPPA_MAX`` and nu up to 63
(code length 128) is far outside what a direct Bessel evaluation survives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import DegenerateResultant, DomainError

KAPPA_MIN = 1e-4
KAPPA_MAX = 1e5
R_BAR_MIN = 1e-6
R_BAR_MAX = 1.0 - 1e-4
HIGH_CONCENTRATION_R_BAR = 0.9

_UNIT_TOL = 1e-6
_SERIES_REL_STOP = 1e-18
_LOG_TWO_PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class UnitVector:
    components: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.components, dtype=np.float64)
        if v.ndim != 1 or v.shape[0] < 2:
            raise DomainError(f"unit vector needs shape (M,) with M >= 2, got {v.shape}")
        norm = float(np.linalg.norm(v))
        if not abs(norm - 1.0) <= _UNIT_TOL:
            raise DomainError(f"vector norm {norm!r} is not 1 within {_UNIT_TOL}")
        object.__setattr__(self, "components", v)

    @classmethod
    def normalized(cls, v) -> "UnitVector":
        v = np.asarray(v, dtype=np.float64)
        return cls(v / np.linalg.norm(v))

    @property
    def dim(self) -> int:
        return self.components.shape[0]


@dataclass(frozen=True)
class VmfParams:
    mu: UnitVector
    kappa: float

    def __post_init__(self):
        k = float(self.kappa)
        if not (0.0 <= k <= KAPPA_MAX):
            raise DomainError(f"kappa={k!r} outside [0, {KAPPA_MAX}]")
        object.__setattr__(self, "kappa", k)

    @property
    def dim(self) -> int:
        return self.mu.dim


@dataclass(frozen=True)
class ResultantStats:
    r: np.ndarray
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise DomainError("resultant needs at least one point")

    @property
    def r_bar(self) -> float:
        return float(np.linalg.norm(self.r)) / self.n


# ---------------------------------------------------------------------------
# log I_nu(kappa)


def _debye_polynomials(n_terms: int) -> list[np.ndarray]:
    """Coefficients (ascending powers of t) of the Debye polynomials u_0..u_{n-1}.

    Built exactly in rationals from
    u_{k+1}(t) = t^2 (1 - t^2) u_k'(t) / 2 + 1/8 * int_0^t (1 - 5 s^2) u_k(s) ds.
    """
    polys = [[Fraction(1)]]
    for _ in range(n_terms - 1):
        u = polys[-1]
        nxt = [Fraction(0)] * (len(u) + 3)
        for p, c in enumerate(u):
            if p > 0:
                # t^2 (1 - t^2) * p c t^(p-1) / 2
                nxt[p + 1] += c * p / 2
                nxt[p + 3] -= c * p / 2
            # (1/8) int_0^t (c s^p - 5 c s^(p+2)) ds
            nxt[p + 1] += c / (8 * (p + 1))
            nxt[p + 3] -= 5 * c / (8 * (p + 3))
        while len(nxt) > 1 and nxt[-1] == 0:
            nxt.pop()
        polys.append(nxt)
    return [np.array([float(c) for c in p]) for p in polys]


_DEBYE = _debye_polynomials(14)


def _log_bessel_series(nu: float, kappa: float) -> float:
    # log of sum_j (kappa/2)^(nu+2j) / (j! Gamma(nu+j+1)), summed relative to the largest term
    log_half = math.log(kappa / 2.0)
    log_t = nu * log_half - math.lgamma(nu + 1.0)
    logs = [log_t]
    peak = 0
    j = 0
    while True:
        j += 1
        log_t += 2.0 * log_half - math.log(j) - math.log(nu + j)
        logs.append(log_t)
        if log_t > logs[peak]:
            peak = j
        elif log_t - logs[peak] < math.log(_SERIES_REL_STOP):
            break
    top = logs[peak]
    rest = math.fsum(math.exp(v - top) for i, v in enumerate(logs) if i != peak)
    return top + math.log1p(rest)


def _log_bessel_hankel(nu: float, kappa: float) -> float | None:
    """Large-argument expansion; None when it does not reach double precision."""
    mu = 4.0 * nu * nu
    term = 1.0
    total = 1.0
    prev = math.inf
    for k in range(1, 200):
        term *= -(mu - (2 * k - 1) ** 2) / (8.0 * k * kappa)
        if term == 0.0:
            break
        if abs(term) > prev:
            return None
        total += term
        prev = abs(term)
        if abs(term) < 1e-17 * abs(total):
            break
    else:
        return None
    if total <= 0.0:
        return None
    return kappa - 0.5 * math.log(2.0 * math.pi * kappa) + math.log(total)


def _log_bessel_uniform(nu: float, kappa: float) -> float:
    # uniform expansion in nu: I_nu(nu z) with z = kappa / nu
    root = math.hypot(nu, kappa)  # nu * sqrt(1 + z^2)
    p = nu / root
    total = 0.0
    scale = 1.0
    for poly in _DEBYE:
        total += np.polynomial.polynomial.polyval(p, poly) * scale
        scale /= nu
    eta_nu = root + nu * math.log(kappa / (nu + root))
    return eta_nu - 0.5 * math.log(2.0 * math.pi * nu) + 0.5 * math.log(p) + math.log(total)


def _check_kappa(kappa: float) -> float:
    kappa = float(kappa)
    if not math.isfinite(kappa) or kappa <= 0.0:
        raise DomainError(f"kappa must be finite and > 0, got {kappa!r}")
    return kappa


def log_bessel_i(nu: float, kappa: float) -> float:
    """Natural log of the modified Bessel function of the first kind, I_nu(kappa).

    Power series for ``kappa <= max(20, 2 nu)``; otherwise the large-argument
    expansion when it converges to double precision (small orders) and the
    uniform expansion in the order for the rest.
    """
    nu = float(nu)
    if not math.isfinite(nu) or nu < 0.0:
        raise DomainError(f"order must be finite and >= 0, got {nu!r}")
    kappa = _check_kappa(kappa)
    if kappa <= max(20.0, 2.0 * nu):
        return _log_bessel_series(nu, kappa)
    value = _log_bessel_hankel(nu, kappa)
    if value is None:
        value = _log_bessel_uniform(nu, kappa)
    return value


def log_norm_const(M: int, kappa: float) -> float:
    """log C_M(kappa), the vMF normalizer on S^{M-1}."""
    if int(M) != M or M < 2:
        raise DomainError(f"dimension must be an integer >= 2, got {M!r}")
    kappa = _check_kappa(kappa)
    nu = M / 2.0 - 1.0
    return nu * math.log(kappa) - (M / 2.0) * _LOG_TWO_PI - log_bessel_i(nu, kappa)


def log_sphere_area(M: int) -> float:
    """log of the surface area of S^{M-1}, i.e. minus the uniform log-density."""
    return math.log(2.0) + (M / 2.0) * math.log(math.pi) - math.lgamma(M / 2.0)


def vmf_log_pdf(z: UnitVector, params: VmfParams) -> float:
    if z.dim != params.dim:
        raise DomainError(f"dimension mismatch: z has {z.dim}, mu has {params.dim}")
    kappa = max(params.kappa, KAPPA_MIN)
    return kappa * float(params.mu.components @ z.components) + log_norm_const(z.dim, kappa)


# ---------------------------------------------------------------------------
# estimation


def accumulate_resultant(points) -> ResultantStats:
    """Resultant vector and count of a set of unit vectors (rows of ``points``)."""
    if isinstance(points, (list, tuple)) and points and isinstance(points[0], UnitVector):
        arr = np.stack([p.components for p in points])
    else:
        arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise DomainError("accumulate_resultant needs a non-empty (n, M) set of points")
    arr = arr.astype(np.float64, copy=False)
    return ResultantStats(r=arr.sum(axis=0), n=arr.shape[0])


def estimate_mean_direction(stats: ResultantStats) -> UnitVector:
    norm = float(np.linalg.norm(stats.r))
    if norm <= 1e-12:
        raise DegenerateResultant(f"resultant norm {norm:.3e} too small for a mean direction")
    return UnitVector(stats.r / norm)


def estimate_kappa(M: int, r_bar: float, high_concentration: bool | None = None) -> float:
    """Moment estimate of the concentration from the mean resultant length.

    ``(M r - r^3) / (1 - r^2)`` with ``r`` clamped to ``[R_BAR_MIN, R_BAR_MAX]``.
    Above ``r = 0.9`` the closed-form ``-0.4 + 1.39 r + 0.43 / (1 - r)`` can be
    used instead. That formula is the circular (M = 2) approximation, so by
    default (``high_concentration=None``) it is only switched on for M = 2;
    pass True/False to force it either way.
    """
    r_bar = float(r_bar)
    if not (0.0 <= r_bar <= 1.0):
        raise DomainError(f"mean resultant length must lie in [0, 1], got {r_bar!r}")
    if int(M) != M or M < 2:
        raise DomainError(f"dimension must be an integer >= 2, got {M!r}")
    if high_concentration is None:
        high_concentration = M == 2
    r = min(max(r_bar, R_BAR_MIN), R_BAR_MAX)
    if high_concentration and r > HIGH_CONCENTRATION_R_BAR:
        kappa = -0.4 + 1.39 * r + 0.43 / (1.0 - r)
    else:
        kappa = (M * r - r**3) / (1.0 - r * r)
    return min(max(kappa, KAPPA_MIN), KAPPA_MAX)


# ---------------------------------------------------------------------------
# sampling


def _sample_cosines(kappa: float, M: int, n: int, rng: np.random.Generator) -> np.ndarray:
    # Wood (1994) rejection sampler for w = mu^T x
    d = M - 1
    b = d / (math.sqrt(4.0 * kappa * kappa + d * d) + 2.0 * kappa)
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + d * math.log(1.0 - x0 * x0)
    out = np.empty(n)
    filled = 0
    while filled < n:
        need = n - filled
        z = rng.beta(d / 2.0, d / 2.0, size=need)
        w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.uniform(size=need)
        ok = kappa * w + d * np.log(1.0 - x0 * w) - c >= np.log(u)
        take = w[ok][:need]
        out[filled:filled + take.size] = take
        filled += take.size
    return out


def sample_uniform_sphere(M: int, n: int, rng: np.random.Generator) -> np.ndarray:
    x = rng.standard_normal((n, M))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def sample_vmf(params: VmfParams, n: int, seed: int) -> np.ndarray:
    """Draw ``n`` i.i.d. vMF samples, returned as rows of an (n, M) array."""
    if n < 1:
        raise DomainError(f"sample count must be >= 1, got {n!r}")
    rng = np.random.default_rng(seed)
    M = params.dim
    mu = params.mu.components
    if params.kappa <= 0.0:
        return sample_uniform_sphere(M, n, rng)
    w = _sample_cosines(params.kappa, M, n, rng)
    v = rng.standard_normal((n, M))
    v -= np.outer(v @ mu, mu)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return w[:, None] * mu[None, :] + np.sqrt(np.clip(1.0 - w * w, 0.0, None))[:, None] * v
