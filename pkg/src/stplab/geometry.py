"""Trajectory geometry: signal/noise split, local linearity, SVD spectra,
rollout divergence and power-law fits.  Plain numpy, no tape."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .tensor import GUARD_EPS


class DegenerateAxisError(ValueError):
    pass


class HypothesisError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class Decomposition:
    parallel: np.ndarray
    perpendicular: np.ndarray


@dataclass(frozen=True)
class LinearityReport:
    tau: int
    epsilon_hat: float
    worst: tuple[int, int, int] | None
    # per-window worst value, keyed by window start s
    per_window: dict[int, float]


def decompose(h_s, h_r, h_t) -> Decomposition:
    """Split h_r - h_s into components parallel / perpendicular to h_t - h_s."""
    h_s, h_r, h_t = (np.asarray(v, dtype=np.float64) for v in (h_s, h_r, h_t))
    axis = h_t - h_s
    nn = float(axis @ axis)
    if nn <= GUARD_EPS**2:
        raise DegenerateAxisError("h_t and h_s coincide; the axis is undefined")
    v = h_r - h_s
    par = (v @ axis) / nn * axis
    return Decomposition(par, v - par)


def _perp_norms(traj: np.ndarray, s: np.ndarray, r: np.ndarray, t: np.ndarray) -> np.ndarray:
    axis = traj[t] - traj[s]
    v = traj[r] - traj[s]
    nn = np.einsum("ij,ij->i", axis, axis)
    coef = np.where(nn > GUARD_EPS**2, np.einsum("ij,ij->i", v, axis) / np.maximum(nn, GUARD_EPS**2), 0.0)
    perp = v - coef[:, None] * axis
    return np.sqrt(np.einsum("ij,ij->i", perp, perp))


def windowed_triples(n: int, tau: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All s < r < t < n with t - s <= tau."""
    s_list, r_list, t_list = [], [], []
    for span in range(2, min(tau, n - 1) + 1):
        for mid in range(1, span):
            s = np.arange(0, n - span)
            s_list.append(s)
            r_list.append(s + mid)
            t_list.append(s + span)
    if not s_list:
        return (np.zeros(0, int),) * 3
    return np.concatenate(s_list), np.concatenate(r_list), np.concatenate(t_list)


def linearity_epsilon(traj, tau: int) -> LinearityReport:
    """Largest perpendicular deviation of a middle point from its window chord.

    Exhaustive over every s < r < t with t - s <= tau.  A zero-length chord
    (h_t == h_s) counts the full |h_r - h_s| as deviation.
    """
    traj = np.asarray(traj, dtype=np.float64)
    if traj.ndim != 2 or traj.shape[0] < 3:
        raise ValueError(f"trajectory needs at least 3 rows, got shape {traj.shape}")
    if tau < 2:
        raise ValueError("tau must be >= 2")
    s, r, t = windowed_triples(traj.shape[0], tau)
    dev = _perp_norms(traj, s, r, t)
    k = int(np.argmax(dev))
    per_window: dict[int, float] = {}
    for si, d in zip(s.tolist(), dev.tolist()):
        if d > per_window.get(si, -1.0):
            per_window[si] = d
    return LinearityReport(tau, float(dev[k]), (int(s[k]), int(r[k]), int(t[k])), per_window)


def stp_deficit(h_s, h_r, h_t) -> float:
    """1 - cos(h_t - h_r, h_r - h_s), guarded like the training loss."""
    a = np.asarray(h_t, float) - np.asarray(h_r, float)
    b = np.asarray(h_r, float) - np.asarray(h_s, float)
    na = math.sqrt(a @ a + GUARD_EPS**2)
    nb = math.sqrt(b @ b + GUARD_EPS**2)
    return 1.0 - float(a @ b) / (na * nb)


def straightening_check(h_s, h_r, h_t, hstar_s, hstar_t, eps: float, slack: float = 1.1):
    """Check |(h_r - h_s) perp (h*_t - h*_s)| <= slack * sqrt(2 eps) |h_r - h_s|.

    Requires the endpoint hypothesis (h_s = h*_s, h_t = h*_t) and a tube
    deficit of at most ``eps``.  Returns ``(holds, lhs, rhs)``.
    """
    h_s, h_r, h_t = (np.asarray(v, dtype=np.float64) for v in (h_s, h_r, h_t))
    if not (np.allclose(h_s, hstar_s, atol=1e-12) and np.allclose(h_t, hstar_t, atol=1e-12)):
        raise HypothesisError("endpoints must coincide with the reference endpoints")
    deficit = stp_deficit(h_s, h_r, h_t)
    if deficit > eps:
        raise HypothesisError(f"tube deficit {deficit:.3g} exceeds eps={eps:.3g}")
    v = h_r - h_s
    axis = np.asarray(hstar_t, float) - np.asarray(hstar_s, float)
    nn = float(axis @ axis)
    perp = v - (v @ axis) / nn * axis if nn > 0 else v
    lhs = float(np.linalg.norm(perp))
    rhs = math.sqrt(2.0 * eps) * float(np.linalg.norm(v)) * slack
    return lhs <= rhs, lhs, rhs


def tube_distance(h_r, reference) -> float:
    """min over reference rows of |h_r - h*_{r'}|."""
    ref = np.asarray(reference, dtype=np.float64)
    d = ref - np.asarray(h_r, dtype=np.float64)[None, :]
    return float(np.sqrt(np.einsum("ij,ij->i", d, d)).min())


def jacobi_singular_values(a, tol: float = 1e-10, max_sweeps: int = 60) -> np.ndarray:
    """Singular values (descending) by one-sided Jacobi (Hestenes) rotations.

    Columns are rotated pairwise until every pair is orthogonal to ``tol``
    relative to their norms; the column norms are then the singular values.
    """
    u = np.array(a, dtype=np.float64, copy=True)
    if u.ndim != 2 or u.size == 0:
        raise ValueError(f"need a nonempty matrix, got shape {u.shape}")
    if u.shape[0] < u.shape[1]:
        u = u.T.copy()
    n = u.shape[1]
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = u[:, p] @ u[:, p]
                beta = u[:, q] @ u[:, q]
                gamma = u[:, p] @ u[:, q]
                if abs(gamma) <= tol * math.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                up = u[:, p].copy()
                u[:, p] = c * up - s * u[:, q]
                u[:, q] = s * up + c * u[:, q]
        if not rotated:
            return np.sort(np.sqrt(np.einsum("ij,ij->j", u, u)))[::-1]
    raise ConvergenceError(f"one-sided Jacobi did not converge in {max_sweeps} sweeps")


def svd_spectrum(rows, normalize: bool = False, tol: float = 1e-10, max_sweeps: int = 60):
    """Singular values of a stack of difference vectors, optionally row-normalized."""
    m = np.asarray(rows, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ValueError("svd_spectrum needs a nonempty 2-D matrix")
    if normalize:
        norms = np.linalg.norm(m, axis=1)
        keep = norms > GUARD_EPS
        if not keep.any():
            raise ValueError("every row is zero; nothing to normalize")
        m = m[keep] / norms[keep, None]
    return jacobi_singular_values(m, tol, max_sweeps)


def fit_power_law(points: Iterable[tuple[float, float]]) -> float:
    """Least-squares slope of log y against log t."""
    pts = np.asarray(list(points), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 3:
        raise ValueError("need at least 3 (t, y) points")
    t, y = pts[:, 0], pts[:, 1]
    if (t <= 0).any() or (y <= 0).any():
        raise ValueError("power-law fit needs positive t and y")
    lt, ly = np.log(t), np.log(y)
    lt_c = lt - lt.mean()
    return float((lt_c @ (ly - ly.mean())) / (lt_c @ lt_c))


def rollout_divergence(params, cfg, prompt, continuation) -> np.ndarray:
    """|h_t - h*_t| per continuation position.

    h comes from the free-running greedy rollout (EOS does not stop it), h*
    from the teacher-forced ground-truth continuation, which stands in for
    the unobservable error-free trajectory.
    """
    from .model import CapacityError, forward, greedy_decode
    from .tensor import no_grad

    prompt = list(map(int, prompt))
    continuation = list(map(int, continuation))
    n = len(continuation)
    if len(prompt) + n > cfg.max_seq_len:
        raise CapacityError(f"prompt+continuation = {len(prompt) + n} > {cfg.max_seq_len}")
    if n == 0:
        return np.zeros(0)
    generated = greedy_decode(params, cfg, prompt, n, stop_at_eos=False)
    with no_grad():
        _, h = forward(params, cfg, generated)
        _, h_star = forward(params, cfg, prompt + continuation)
    p = len(prompt)
    diff = h.values[p:] - h_star.values[p:]
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def write_diagnostics_csv(rows, path) -> None:
    """rows: iterable of (sequence_id, metric, position, value)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sequence_id", "metric", "position", "value"])
        for seq_id, metric, pos, value in rows:
            w.writerow([seq_id, metric, pos, repr(float(value))])
