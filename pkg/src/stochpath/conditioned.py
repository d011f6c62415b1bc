"""Pre- and post-selected statistics for the plain (QND) measurement.

With u = atanh(z) the conditioned path is u = u_bar + eta, where u_bar is a
straight line between atanh(z_I) and atanh(z_F) and eta is a centred Gaussian
with covariance M^{-1}, M = (tau_m/dt) tridiag(-1, 2, -1).  Moments of z follow
by expanding tanh around u_bar; the expansion is asymptotic in
sigma^2 = (t/tau_m)(1 - t/T).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.polynomial import polynomial as P
from scipy import integrate

from .engine import EnsembleChunk, EnsembleRecord
from .errors import (
    BoundaryDivergenceError,
    EmptySelectionError,
    EndpointMismatchError,
    NumericalConsistencyError,
    SeriesTruncationWarning,
    ValidationError,
)

DEFAULT_ORDER = 4


def _atanh(z, name="z"):
    z = np.asarray(z, dtype=float)
    if np.any(np.abs(z) >= 1.0):
        raise BoundaryDivergenceError(f"|{name}| >= 1: atanh diverges")
    return np.arctanh(z)


def _scalar(v):
    v = np.asarray(v)
    return v[()] if v.ndim == 0 else v


def _check_time(t, T):
    t = np.asarray(t, dtype=float)
    if T <= 0:
        raise ValidationError("T must be > 0", [("T", "must be > 0")])
    if np.any(t < -1e-12 * T) or np.any(t > T * (1 + 1e-12)):
        raise ValidationError("t must lie in [0, T]", [("t", "must lie in [0, T]")])
    return np.clip(t, 0.0, T)


def optimal_path_u(z_I, z_F, T, t):
    """Most likely path in u = atanh z: linear interpolation of the end points."""
    t = _check_time(t, T)
    uI = _atanh(z_I, "z_I")
    uF = _atanh(z_F, "z_F")
    return _scalar(t / T * (uF - uI) + uI)


def optimal_readout(z_I, z_F, T, tau_m=1.0):
    return tau_m / T * (float(_atanh(z_F, "z_F")) - float(_atanh(z_I, "z_I")))


def final_state_pdf(z_F, z_I, T, tau_m=1.0):
    """Density of z(T) given z(0) = z_I for a plain measurement of duration T."""
    uF = _atanh(z_F, "z_F")
    uI = float(_atanh(z_I, "z_I"))
    zF = np.asarray(z_F, dtype=float)
    rbar = tau_m / T * (uF - uI)
    expo = -T / (2.0 * tau_m) * (rbar * rbar + 1.0) + 0.5 * np.log((1 - z_I ** 2) / (1 - zF ** 2))
    return _scalar(math.sqrt(tau_m / (2.0 * math.pi * T)) / (1.0 - zF ** 2) * np.exp(expo))


def readout_total_pdf(r_tot, z_I, T, tau_m=1.0):
    """Density of the time-averaged readout: two Gaussians at +/-1, variance tau_m/T."""
    r = np.asarray(r_tot, dtype=float)
    s2 = tau_m / T
    g = lambda m: np.exp(-(r - m) ** 2 / (2 * s2)) / math.sqrt(2 * math.pi * s2)
    return _scalar(0.5 * (1 + z_I) * g(1.0) + 0.5 * (1 - z_I) * g(-1.0))


def acceptance_fraction(sel: "Postselection", z_I, T, tau_m=1.0) -> float:
    lo = max(sel.z_F - sel.tolerance, -1.0)
    hi = min(sel.z_F + sel.tolerance, 1.0)
    if hi <= lo:
        return 0.0
    # integrate in u to keep the edges at +/-1 finite
    uI = float(_atanh(z_I, "z_I"))
    def f(u):
        return float(readout_total_pdf(tau_m / T * (u - uI), z_I, T, tau_m)) * tau_m / T
    ulo = -40.0 if lo <= -1.0 else math.atanh(lo)
    uhi = 40.0 if hi >= 1.0 else math.atanh(hi)
    val, _ = integrate.quad(f, ulo, uhi, epsabs=1e-13, epsrel=1e-11, limit=200)
    return val


# ----------------------------------------------------------------------------
# Gaussian fluctuation matrix

def m_matrix(n: int, dt: float, tau_m: float = 1.0) -> np.ndarray:
    """(n-1)x(n-1) quadratic-form matrix of the fluctuations eta_1..eta_{n-1}."""
    if n < 2:
        raise ValidationError("n must be >= 2", [("n", "must be >= 2")])
    d = n - 1
    M = 2.0 * np.eye(d) - np.eye(d, k=1) - np.eye(d, k=-1)
    return (tau_m / dt) * M


def m_inverse_element(j: int, k: int, n: int, dt: float, tau_m: float = 1.0) -> float:
    if not (1 <= j <= n - 1 and 1 <= k <= n - 1):
        raise IndexError(f"indices ({j}, {k}) outside 1..{n - 1}")
    if k < j:
        j, k = k, j
    return (dt / tau_m) * j * (n - k) / n


def m_inverse(n: int, dt: float, tau_m: float = 1.0) -> np.ndarray:
    i = np.arange(1, n)
    lo = np.minimum.outer(i, i)
    hi = np.maximum.outer(i, i)
    return (dt / tau_m) * lo * (n - hi) / n


def m_log_determinant(n: int, dt: float, tau_m: float = 1.0) -> float:
    return math.log(n) + (n - 1) * math.log(tau_m / dt)


@dataclass(frozen=True)
class WickIndexSet:
    indices: Tuple[int, ...]

    def __post_init__(self):
        if len(self.indices) == 0:
            raise ValidationError("WickIndexSet must be nonempty", [("indices", "empty")])


def _pairings_sum(idx: Tuple[int, ...], cov) -> float:
    @lru_cache(maxsize=None)
    def rec(rest: Tuple[int, ...]) -> float:
        if not rest:
            return 1.0
        a = rest[0]
        tail = rest[1:]
        total = 0.0
        for i, b in enumerate(tail):
            total += cov(a, b) * rec(tail[:i] + tail[i + 1:])
        return total
    return rec(tuple(sorted(idx)))


def wick_moment(idx, n: int, dt: float, tau_m: float = 1.0) -> float:
    """<eta_j1 ... eta_jm> as the sum over perfect pairings of M^{-1} entries."""
    if isinstance(idx, WickIndexSet):
        idx = idx.indices
    idx = tuple(int(i) for i in idx)
    if len(idx) == 0:
        raise ValidationError("empty index set", [("indices", "empty")])
    for i in idx:
        if not 1 <= i <= n - 1:
            raise IndexError(f"index {i} outside 1..{n - 1}")
    if len(idx) % 2:
        return 0.0
    return _pairings_sum(idx, lambda a, b: m_inverse_element(a, b, n, dt, tau_m))


def double_factorial(k: int) -> int:
    out = 1
    while k > 1:
        out *= k
        k -= 2
    return out


def fluctuation_variance(t, T, tau_m=1.0):
    t = np.asarray(t, dtype=float)
    return _scalar(t / tau_m * (1.0 - t / T))


def eta_even_moment(p: int, sigma2):
    """<eta^(2p)> = (2p-1)!! sigma^(2p)."""
    return double_factorial(2 * p - 1) * np.asarray(sigma2) ** p


# ----------------------------------------------------------------------------
# series in tanh derivatives

@lru_cache(maxsize=8)
def _derivative_polys(kind: str, K: int) -> Tuple[np.ndarray, ...]:
    """Polynomials in s = tanh(u) for d^k/du^k of tanh (kind 't') or tanh^2 ('t2')."""
    base = np.array([0.0, 1.0]) if kind == "t" else np.array([0.0, 0.0, 1.0])
    out = [base]
    ds = np.array([1.0, 0.0, -1.0])   # d tanh / du = 1 - tanh^2
    for _ in range(K):
        out.append(P.polymul(P.polyder(out[-1]), ds))
    return tuple(out)


def tanh_derivative(k: int, u):
    s = np.tanh(np.asarray(u, dtype=float))
    return _scalar(P.polyval(s, _derivative_polys("t", max(k, 1))[k]))


def _series_terms(u, s2, order):
    s = np.tanh(u)
    d1 = _derivative_polys("t", 2 * order)
    d2 = _derivative_polys("t2", 2 * order)
    a, b = [], []
    for m in range(order + 1):
        w = s2 ** m / (2.0 ** m * math.factorial(m))   # <eta^2m>/(2m)!
        a.append(P.polyval(s, d1[2 * m]) * w)
        b.append(P.polyval(s, d2[2 * m]) * w)
    return a, b


def _warn_growth(terms, what):
    if len(terms) < 3:
        return
    last = np.abs(terms[-1])
    prev = np.abs(terms[-2])
    if np.any(last > prev * (1 + 1e-12) + 1e-300):
        warnings.warn(f"{what}: last series term exceeds the previous one; "
                      "the expansion is asymptotic, consider a lower order",
                      SeriesTruncationWarning, stacklevel=3)


def _prep(t, z_I, z_F, T, tau_m, order):
    if int(order) != order or order < 1:
        raise ValidationError("order must be a positive integer", [("order", str(order))])
    u = optimal_path_u(z_I, z_F, T, t)
    s2 = fluctuation_variance(_check_time(t, T), T, tau_m)
    return np.asarray(u, float), np.asarray(s2, float), int(order)


def conditional_mean_z(t, z_I, z_F, T, tau_m=1.0, order: int = DEFAULT_ORDER):
    """Pre/post-selected mean of z(t), summed through eta^(2*order)."""
    u, s2, order = _prep(t, z_I, z_F, T, tau_m, order)
    a, _ = _series_terms(u, s2, order)
    _warn_growth(a[1:], "conditional mean")
    return _scalar(sum(a))


def conditional_var_z(t, z_I, z_F, T, tau_m=1.0, order: int = DEFAULT_ORDER):
    """Pre/post-selected variance of z(t), consistently truncated at sigma^(2*order)."""
    u, s2, order = _prep(t, z_I, z_F, T, tau_m, order)
    a, b = _series_terms(u, s2, order)
    c = [b[m] - sum(a[i] * a[m - i] for i in range(m + 1)) for m in range(order + 1)]
    _warn_growth(c[1:], "conditional variance")
    return _scalar(sum(c))


def mean_first_order(t, z_I, z_F, T, tau_m=1.0):
    """tanh(u) - sigma^2 sech^2(u) tanh(u)."""
    u, s2, _ = _prep(t, z_I, z_F, T, tau_m, 1)
    th = np.tanh(u)
    return _scalar(th - s2 * th / np.cosh(u) ** 2)


def var_first_order(t, z_I, z_F, T, tau_m=1.0):
    """sigma^2 sech^4(u)."""
    u, s2, _ = _prep(t, z_I, z_F, T, tau_m, 1)
    return _scalar(s2 / np.cosh(u) ** 4)


def conditional_moments_exact(t, z_I, z_F, T, tau_m=1.0, nodes: int = 120):
    """Mean and variance of tanh(u_bar + eta) by Gauss-Hermite quadrature."""
    u, s2, _ = _prep(t, z_I, z_F, T, tau_m, 1)
    x, w = np.polynomial.hermite_e.hermegauss(nodes)
    w = w / w.sum()
    vals = np.tanh(u[..., None] + np.sqrt(s2)[..., None] * x)
    m = (vals * w).sum(-1)
    v = (vals * vals * w).sum(-1) - m * m
    return _scalar(m), _scalar(np.maximum(v, 0.0))


def conditional_zz_corr(t_j, t_k, z_I, z_F, T, tau_m=1.0):
    """Connected <z_j z_k>: (t_j/tau_m)(1 - t_k/T) sech^2(u_j) sech^2(u_k), t_j <= t_k."""
    tj = np.asarray(_check_time(t_j, T), float)
    tk = np.asarray(_check_time(t_k, T), float)
    lo = np.minimum(tj, tk)
    hi = np.maximum(tj, tk)
    uj = np.asarray(optimal_path_u(z_I, z_F, T, lo))
    uk = np.asarray(optimal_path_u(z_I, z_F, T, hi))
    return _scalar(lo / tau_m * (1.0 - hi / T) / np.cosh(uj) ** 2 / np.cosh(uk) ** 2)


# ----------------------------------------------------------------------------
# empirical post-selection

@dataclass(frozen=True)
class Postselection:
    z_F: float
    tolerance: float = 0.02

    def __post_init__(self):
        problems = []
        if not abs(self.z_F) < 1:
            problems.append(("selection.z_F", "must satisfy |z_F| < 1"))
        if not self.tolerance > 0:
            problems.append(("selection.tolerance", "must be > 0"))
        if problems:
            raise ValidationError("; ".join(f"{a}: {b}" for a, b in problems), problems)


@dataclass
class PostselectionResult:
    selection: Postselection
    times: np.ndarray
    n_total: int
    n_accepted: int
    mean: np.ndarray
    var: np.ndarray
    stderr_mean: np.ndarray
    stderr_var: np.ndarray
    cov: np.ndarray
    cov_stderr: np.ndarray
    predicted_fraction: Optional[float] = None
    accepted_states: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def fraction(self) -> float:
        return self.n_accepted / self.n_total

    @property
    def fraction_stderr(self) -> float:
        f = self.fraction
        return math.sqrt(max(f * (1 - f), 1e-300) / self.n_total)

    @property
    def std(self):
        return np.sqrt(self.var)


def sample_statistics(z: np.ndarray):
    """Mean, variance, their standard errors and the covariance matrix (+ errors).

    ``z`` has shape (N, n_checkpoints).
    """
    N = len(z)
    mean = z.mean(axis=0)
    d = z - mean
    var = (d * d).sum(axis=0) / max(N - 1, 1)
    se_mean = np.sqrt(var / N)
    m4 = (d ** 4).mean(axis=0)
    se_var = np.sqrt(np.maximum(m4 - var ** 2, 0.0) / N)
    cov = d.T @ d / max(N - 1, 1)
    sq = d * d
    e2 = sq.T @ sq / N
    cov_se = np.sqrt(np.maximum(e2 - cov ** 2, 0.0) / N)
    return mean, var, se_mean, se_var, cov, cov_se


def postselect(ensemble, sel: Postselection, *, z_I: Optional[float] = None,
               T: Optional[float] = None, tau_m: float = 1.0) -> PostselectionResult:
    """Keep trajectories with |z(T) - z_F| <= tolerance and summarise them.

    ``ensemble`` is an :class:`~stochpath.engine.EnsembleRecord` or an
    iterable of chunks; only the checkpoint states are used and the last
    checkpoint must be the final time.
    """
    parts = [ensemble] if isinstance(ensemble, (EnsembleRecord, EnsembleChunk)) else ensemble
    kept = []
    total = 0
    times = None
    for part in parts:
        st = part.states
        if times is None:
            times = part.times[part.checkpoint_index]
            if part.checkpoint_index[-1] != len(part.times) - 1:
                raise ValidationError("last checkpoint must be the final step")
        total += len(st)
        mask = np.abs(st[:, -1, 2] - sel.z_F) <= sel.tolerance
        if np.any(mask):
            kept.append(st[mask])
    if total == 0:
        raise ValidationError("empty ensemble", [("ensemble", "no trajectories")])
    pred = None
    if z_I is not None and T is not None:
        pred = acceptance_fraction(sel, z_I, T, tau_m)
    if not kept:
        raise EmptySelectionError(
            f"no trajectory ended within {sel.tolerance} of z_F={sel.z_F} "
            f"(out of {total}); predicted acceptance fraction {pred}", pred)
    acc = np.concatenate(kept, axis=0)
    mean, var, se_m, se_v, cov, cov_se = sample_statistics(acc[:, :, 2])
    return PostselectionResult(sel, times, total, len(acc), mean, var, se_m, se_v,
                               cov, cov_se, pred, acc)


def stats_rows(res: PostselectionResult, z_I, T, tau_m=1.0, order: int = 1):
    """Rows (t, mean_analytic, mean_empirical, var_analytic, var_empirical, stderr)."""
    rows = []
    for j, t in enumerate(res.times):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", SeriesTruncationWarning)
            ma = float(conditional_mean_z(t, z_I, res.selection.z_F, T, tau_m, order))
            va = float(conditional_var_z(t, z_I, res.selection.z_F, T, tau_m, order))
        rows.append((float(t), ma, float(res.mean[j]), va, float(res.var[j]),
                     float(res.stderr_mean[j])))
    return rows


# ----------------------------------------------------------------------------
# action of the u-path

def _log_cosh(u):
    u = np.asarray(u, dtype=float)
    return np.logaddexp(u, -u) - math.log(2.0)


def path_action(u, dt: float, tau_m: float = 1.0, form: str = "boundary") -> float:
    """Discrete action of a u-path (u_0..u_n).

    ``form='boundary'`` writes the tanh(u) du term as ln cosh u_n - ln cosh u_0,
    its exact integral; ``form='riemann'`` keeps the left-point sum.
    """
    u = np.asarray(u, dtype=float)
    du = np.diff(u)
    n = len(du)
    kinetic = -tau_m / (2.0 * dt) * float(np.sum(du * du))
    if form == "boundary":
        drift = float(_log_cosh(u[-1]) - _log_cosh(u[0]))
    elif form == "riemann":
        drift = float(np.sum(np.tanh(u[:-1]) * du))
    else:
        raise ValidationError(f"unknown action form {form!r}", [("form", form)])
    return kinetic + drift - n * dt / (2.0 * tau_m)


def action_decomposition_check(path_z, z_I, z_F, dt: float, tau_m: float = 1.0,
                               rtol: float = 1e-8, form: str = "boundary"):
    """Return (S_full, S_opt, quad_residual) with S_full = S_opt - quad_residual."""
    z = np.asarray(path_z, dtype=float)
    if abs(z[0] - z_I) > 1e-12 or abs(z[-1] - z_F) > 1e-12:
        raise EndpointMismatchError(
            f"path end points ({z[0]}, {z[-1]}) differ from (z_I, z_F) = ({z_I}, {z_F})")
    u = _atanh(z)
    n = len(z) - 1
    T = n * dt
    ubar = optimal_path_u(z_I, z_F, T, np.arange(n + 1) * dt)
    eta = u - ubar
    eta[0] = eta[-1] = 0.0
    s_full = path_action(u, dt, tau_m, form)
    s_opt = path_action(ubar, dt, tau_m, form)
    quad = tau_m / (2.0 * dt) * float(np.sum(np.diff(eta) ** 2))
    if form == "boundary":
        err = abs(s_full - (s_opt - quad))
        if err > rtol * max(1.0, abs(s_full)):
            raise NumericalConsistencyError(
                f"action decomposition off by {err:.3e}")
    return s_full, s_opt, quad
