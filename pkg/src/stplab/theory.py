"""Information-theoretic bounds, the Brownian cone simulation, the
zero-padding lift identity and a one-tailed paired t-test.

Entropies and capacities are in bits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import fit_power_law


class DegenerateSampleError(ValueError):
    pass


@dataclass(frozen=True)
class TheoryQuery:
    H_Y: float
    epsilon: float
    snr: float
    m: float
    vocab_size: int

    def __post_init__(self):
        if self.H_Y < 0 or self.snr < 0 or self.vocab_size < 2:
            raise ValueError(f"invalid query {self}")


def conditional_entropy_lower_bound(H_Y: float, m: float, I_bits: float) -> float:
    """H(Y | X^m) >= H(Y) - m I(Y; X), floored at zero."""
    if min(H_Y, m, I_bits) < 0:
        raise ValueError("arguments must be non-negative")
    return max(0.0, H_Y - m * I_bits)


def gaussian_capacity(snr: float) -> float:
    """0.5 log2(1 + SNR)."""
    if snr < 0:
        raise ValueError(f"snr must be >= 0, got {snr}")
    return 0.5 * math.log2(1.0 + snr)


def min_samples(H_Y: float, epsilon: float, snr: float) -> float:
    """(H(Y) - eps) / capacity; ``math.inf`` when the capacity is zero."""
    if not (H_Y >= epsilon >= 0):
        raise ValueError(f"need H_Y >= epsilon >= 0, got H_Y={H_Y}, epsilon={epsilon}")
    cap = gaussian_capacity(snr)
    if cap == 0.0:
        return math.inf
    return (H_Y - epsilon) / cap


def fano_error_lower_bound(H_Y: float, m: float, snr: float, vocab_size: int,
                           minus_one: bool = True) -> float:
    """Error probability floor (H(Y) - m C) / log2(|V| - 1), clamped to [0, 1].

    ``minus_one=False`` uses log2 |V| in the denominator instead.
    """
    if vocab_size < 3:
        raise ValueError("vocab_size must be >= 3")
    denom = math.log2(vocab_size - 1 if minus_one else vocab_size)
    value = (H_Y - m * gaussian_capacity(snr)) / denom
    return min(1.0, max(0.0, value))


@dataclass(frozen=True)
class BrownianResult:
    t: np.ndarray
    mean_norm: np.ndarray
    exponent: float | None  # None when every norm is zero

    @property
    def degenerate(self) -> bool:
        return self.exponent is None


def brownian_growth_sim(dim: int, sigma: float, T: int, trials: int, seed: int,
                        shards: int = 1) -> BrownianResult:
    """Mean |sum_{s<=t} eps_s| for i.i.d. N(0, sigma^2 I) increments.

    Trials are split into ``shards`` with seeds ``seed + shard``; shard sums
    are added in shard order, so the result does not depend on how shards
    are scheduled.
    """
    if dim < 1 or trials < 100 or T < 3:
        raise ValueError("need dim >= 1, trials >= 100, T >= 3")
    sizes = [trials // shards + (1 if i < trials % shards else 0) for i in range(shards)]
    total = np.zeros(T)
    for shard, size in enumerate(sizes):
        rng = np.random.default_rng(seed + shard)
        # chunk to bound memory at large trial counts
        for lo in range(0, size, 128):
            n = min(128, size - lo)
            steps = rng.normal(0.0, sigma, size=(n, T, dim))
            paths = np.cumsum(steps, axis=1)
            total += np.sqrt(np.einsum("ntd,ntd->nt", paths, paths)).sum(axis=0)
    mean_norm = total / trials
    t = np.arange(1, T + 1, dtype=np.float64)
    if not (mean_norm > 0).all():
        return BrownianResult(t, mean_norm, None)
    return BrownianResult(t, mean_norm, fit_power_law(zip(t, mean_norm)))


def lift(embeddings, t: int) -> np.ndarray:
    """Zero-padded prefix: rows 0..t kept, the rest zero."""
    x = np.asarray(embeddings, dtype=np.float64)
    out = np.zeros_like(x)
    out[: t + 1] = x[: t + 1]
    return out


def place(x, t: int, T: int) -> np.ndarray:
    """v(x, t): a T x d matrix holding ``x`` in row t + 1 and zeros elsewhere."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros((T, x.shape[-1]))
    out[t + 1] = x
    return out


def lift_identity_check(embeddings, t: int) -> bool:
    """Prefix extension equals adding the placed next embedding, exactly."""
    x = np.asarray(embeddings, dtype=np.float64)
    T = x.shape[0]
    if not (0 <= t and t + 1 < T):
        raise ValueError(f"need 0 <= t and t + 1 < {T}")
    return bool(np.array_equal(lift(x, t + 1) - lift(x, t), place(x[t + 1], t, T)))


def student_t_pdf(x: float, df: float) -> float:
    logc = math.lgamma((df + 1) / 2) - math.lgamma(df / 2) - 0.5 * math.log(df * math.pi)
    return math.exp(logc - (df + 1) / 2 * math.log1p(x * x / df))


def _adaptive_simpson(f, a: float, b: float, tol: float, depth: int = 60) -> float:
    def simpson(fa, fm, fb, a, b):
        return (b - a) / 6.0 * (fa + 4 * fm + fb)

    def recurse(a, b, fa, fm, fb, whole, tol, depth):
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = simpson(fa, flm, fm, a, m)
        right = simpson(fm, frm, fb, m, b)
        if depth <= 0 or abs(left + right - whole) <= 15 * tol:
            return left + right + (left + right - whole) / 15.0
        return (recurse(a, m, fa, flm, fm, left, tol / 2, depth - 1)
                + recurse(m, b, fm, frm, fb, right, tol / 2, depth - 1))

    fa, fb, fm = f(a), f(b), f(0.5 * (a + b))
    return recurse(a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), tol, depth)


def student_t_sf(x: float, df: float, tol: float = 1e-10) -> float:
    """Upper-tail probability P(T > x) by integrating the density over [0, |x|]."""
    if x == 0:
        return 0.5
    body = _adaptive_simpson(lambda u: student_t_pdf(u, df), 0.0, abs(x), tol)
    body = min(body, 0.5)
    return 0.5 - body if x > 0 else 0.5 + body


def paired_t_test_one_tailed(a, b) -> tuple[float, int, float]:
    """One-tailed paired t-test of mean(a - b) > 0; returns (t, df, p)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("need two equal-length samples of size >= 2")
    d = a - b
    n = d.size
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        raise DegenerateSampleError("paired differences have zero variance")
    t_stat = float(d.mean()) / (sd / math.sqrt(n))
    return t_stat, n - 1, student_t_sf(t_stat, n - 1)


def theory_table(queries) -> list[dict]:
    """Evaluate every bound for each query (used by the ``theory`` CLI)."""
    rows = []
    for q in queries:
        cap = gaussian_capacity(q.snr)
        rows.append({
            "H_Y": q.H_Y, "epsilon": q.epsilon, "snr": q.snr, "m": q.m,
            "vocab_size": q.vocab_size, "capacity_bits": cap,
            "cond_entropy_lb": conditional_entropy_lower_bound(q.H_Y, q.m, cap),
            "min_samples": min_samples(q.H_Y, q.epsilon, q.snr) if q.H_Y >= q.epsilon else math.nan,
            "fano_pe_lb": fano_error_lower_bound(q.H_Y, q.m, q.snr, q.vocab_size)
            if q.vocab_size >= 3 else math.nan,
        })
    return rows
