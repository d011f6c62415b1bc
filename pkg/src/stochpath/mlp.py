"""Most-likely paths.

Continuous part: the qubit stays on the y-z great circle (z = cos theta,
y = sin theta) under direct linear feedback Delta = Delta0 + Delta1 r.
Extremising the action over r gives

    r         = cos(theta) + p (Delta1 tau_m - sin(theta))
    theta_dot = Delta0 + Delta1 r - r sin(theta) / tau_m
    p_dot     = (p cos(theta) + sin(theta)) r / tau_m

with conserved H = r^2 / (2 tau_m) + p Delta0 - 1 / (2 tau_m).

Discrete part: the plain-measurement (scalar z) difference equations, used to
check the continuum solver as dt -> 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate, optimize

from .engine import FeedbackSpec
from .errors import NoRealCurveError, ValidationError
from .model import ModelParams

BLOWUP = 1e8
DEFAULT_SCAN = (-10.0, 10.0)
DEFAULT_SCAN_POINTS = 400


@dataclass(frozen=True)
class PhasePoint:
    theta: float
    p_theta: float

    def __post_init__(self):
        if not math.isfinite(self.theta):
            raise ValidationError("theta must be finite", [("theta", repr(self.theta))])


def _gains(fb: Optional[FeedbackSpec]):
    if fb is None or fb.variant == "none":
        return 0.0, 0.0
    if fb.variant != "direct-linear":
        raise ValidationError("extremal equations are implemented for direct-linear feedback",
                              [("fb.variant", fb.variant)])
    return fb.delta0, fb.delta1


def optimal_r(theta, p, tau_m: float, fb: Optional[FeedbackSpec] = None):
    _, d1 = _gains(fb)
    return np.cos(theta) + p * (d1 * tau_m - np.sin(theta))


def extremal_rhs(pt: PhasePoint, tau_m: float, fb: Optional[FeedbackSpec] = None):
    """(theta_dot, p_dot, r) at a phase point."""
    d0, d1 = _gains(fb)
    th, p = pt.theta, pt.p_theta
    s, c = math.sin(th), math.cos(th)
    r = c + p * (d1 * tau_m - s)
    return d0 + d1 * r - r * s / tau_m, (p * c + s) * r / tau_m, r


def stochastic_hamiltonian(theta, p, tau_m: float, fb: Optional[FeedbackSpec] = None):
    d0, d1 = _gains(fb)
    r = np.cos(theta) + p * (d1 * tau_m - np.sin(theta))
    return r * r / (2 * tau_m) + p * d0 - 1 / (2 * tau_m)


def critical_energy(tau_m: float) -> float:
    return -1.0 / (2.0 * tau_m)


# ----------------------------------------------------------------------------
# phase portrait

@dataclass
class PortraitCurve:
    E: float
    branch: int
    theta: np.ndarray
    p_theta: np.ndarray          # NaN at the poles
    poles: List[float]
    segments: List[Tuple[np.ndarray, np.ndarray]] = field(default_factory=list)


def portrait_curve(E: float, tau_m: float, fb: FeedbackSpec, branch: int = 1,
                   n_points: int = 2001, theta_range=(0.0, 2 * math.pi),
                   pole_gap: float = 1e-3) -> PortraitCurve:
    """Level set H(theta, p) = E for Delta0 = 0, one sign branch of the square root."""
    d0, d1 = _gains(fb)
    if d0 != 0:
        raise ValidationError("portrait curves assume delta0 = 0", [("fb.delta0", str(d0))])
    disc = 1 + 2 * E * tau_m
    if disc < 0:
        raise NoRealCurveError(f"E = {E} < E_c = {critical_energy(tau_m)}: no real curve")
    if branch not in (1, -1):
        raise ValidationError("branch must be +1 or -1", [("branch", str(branch))])
    g = d1 * tau_m
    th = np.linspace(theta_range[0], theta_range[1], n_points)
    den = g - np.sin(th)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = (-np.cos(th) + branch * math.sqrt(disc)) / den
    near = np.abs(den) < pole_gap
    p = np.where(near, np.nan, p)
    poles = []
    if abs(g) <= 1:
        a = math.asin(g)
        for base in (a, math.pi - a):
            for k in range(-2, 4):
                v = base + 2 * math.pi * k
                if theta_range[0] <= v <= theta_range[1] and all(abs(v - q) > 1e-12 for q in poles):
                    poles.append(v)
    poles.sort()
    segments = []
    cuts = [theta_range[0]] + poles + [theta_range[1]]
    for lo, hi in zip(cuts, cuts[1:]):
        m = (th >= lo) & (th <= hi) & ~near
        if np.count_nonzero(m) > 1:
            segments.append((th[m], p[m]))
    return PortraitCurve(E, branch, th, p, poles, segments)


def attractors(tau_m: float, fb: FeedbackSpec) -> List[float]:
    """Stationary attracting angles in [0, 2 pi) for Delta0 = 0 (empty if |Delta1 tau_m| > 1)."""
    _, d1 = _gains(fb)
    g = d1 * tau_m
    if abs(g) > 1:
        return []
    a = math.asin(g)
    out = []
    for v in (a % (2 * math.pi), (math.pi - a) % (2 * math.pi)):
        if all(abs(v - q) > 1e-12 for q in out):
            out.append(v)
    return sorted(out)


# ----------------------------------------------------------------------------
# shooting

@dataclass
class MLPSolution:
    times: np.ndarray
    theta: np.ndarray
    p_theta: np.ndarray
    r: np.ndarray
    E: float
    loglik: float
    boundary: Dict[str, float]
    branch_id: int = 0
    p0: float = 0.0
    boundary_residual: float = 0.0
    energy_drift: float = 0.0

    @property
    def z(self):
        return np.cos(self.theta)


@dataclass
class MLPResult:
    solutions: List[MLPSolution]
    scan_p0: np.ndarray
    scan_residual: np.ndarray
    scan_range: Tuple[float, float]

    def __len__(self):
        return len(self.solutions)

    def __iter__(self):
        return iter(self.solutions)

    def __getitem__(self, i):
        return self.solutions[i]


def _ode(tau_m, d0, d1):
    g = d1 * tau_m
    def f(t, y):
        th, p = y[0], y[1]
        s, c = math.sin(th), math.cos(th)
        r = c + p * (g - s)
        return [d0 + d1 * r - r * s / tau_m, (p * c + s) * r / tau_m,
                -(r * r - 2 * r * c + 1) / (2 * tau_m)]
    return f


def _blowup(t, y):
    return BLOWUP - abs(y[1])


_blowup.terminal = True


def _integrate(theta0, p0, T, tau_m, d0, d1, rtol, atol, t_eval=None):
    return integrate.solve_ivp(_ode(tau_m, d0, d1), (0.0, T), [theta0, p0, 0.0],
                               method="DOP853", rtol=rtol, atol=atol,
                               events=_blowup, t_eval=t_eval)


def solve_mlp(theta_I: float, T: float, tau_m: float, fb: Optional[FeedbackSpec] = None, *,
              theta_F: Optional[float] = None, p_range=DEFAULT_SCAN,
              n_scan: int = DEFAULT_SCAN_POINTS, rtol: float = 1e-9, atol: float = 1e-9,
              n_out: int = 501) -> MLPResult:
    """Shoot over p_theta(0) for theta(0) = theta_I and either theta(T) = theta_F or p_theta(T) = 0.

    Every sign change of the final residual on the scan grid is refined with
    Brent's method; solutions are deduplicated by their energy and sorted by
    decreasing log-likelihood.
    """
    if not T > 0:
        raise ValidationError("T must be > 0", [("T", str(T))])
    d0, d1 = _gains(fb)

    def residual(p0):
        sol = _integrate(theta_I, p0, T, tau_m, d0, d1, rtol, atol)
        if sol.status != 0 or sol.t[-1] < T:
            return math.nan
        y = sol.y[:, -1]
        return y[0] - theta_F if theta_F is not None else y[1]

    grid = np.linspace(p_range[0], p_range[1], n_scan)
    res = np.array([residual(p) for p in grid])
    roots = []
    for i in range(n_scan):
        if res[i] == 0.0:
            roots.append(grid[i])
        elif i + 1 < n_scan and np.isfinite(res[i]) and np.isfinite(res[i + 1]) \
                and res[i] * res[i + 1] < 0:
            try:
                roots.append(optimize.brentq(residual, grid[i], grid[i + 1],
                                             xtol=1e-14, rtol=1e-13, maxiter=200))
            except ValueError:
                continue
    t_eval = np.linspace(0.0, T, n_out)
    sols: List[MLPSolution] = []
    for p0 in roots:
        sol = _integrate(theta_I, p0, T, tau_m, d0, d1, rtol, atol, t_eval)
        if sol.status != 0 or sol.t[-1] < T:
            continue
        th, p, ll = sol.y
        final = th[-1] - theta_F if theta_F is not None else p[-1]
        # a sign change across a pole of the residual is not a root
        if abs(final) > 1e-6:
            continue
        Es = stochastic_hamiltonian(th, p, tau_m, fb)
        E = float(Es[0])
        drift = float(np.max(np.abs(Es - E)) / max(abs(E), 1e-12))
        if any(abs(E - s.E) <= 1e-6 * max(1.0, abs(E)) for s in sols):
            continue
        bnd = {"theta_I": theta_I, "T": T}
        bnd["theta_F" if theta_F is not None else "p_theta_T"] = theta_F if theta_F is not None else 0.0
        sols.append(MLPSolution(sol.t, th, p, optimal_r(th, p, tau_m, fb), E, float(ll[-1]),
                                bnd, 0, float(p0), float(abs(final)), drift))
    sols.sort(key=lambda s: -s.loglik)
    for i, s in enumerate(sols):
        s.branch_id = i
    return MLPResult(sols, grid, res, (float(p_range[0]), float(p_range[1])))


# ----------------------------------------------------------------------------
# discrete extremal system (plain measurement, scalar z)

def discrete_extremal_step(q_k: float, p_k: float, r_k: float, dt: float, tau_m: float = 1.0):
    """One step of the discrete extremal system.

    Forward: q_{k+1} = tanh(atanh q_k + r_k dt / tau_m).
    Backward: p_{k-1} = p_k (1 - q_{k+1}^2) / (1 - q_k^2) + r_k dt / tau_m.
    Residual of the r-stationarity condition r_k = q_k + p_k (1 - q_{k+1}^2).
    """
    q1 = math.tanh(math.atanh(q_k) + r_k * dt / tau_m)
    s = 1 - q1 * q1
    p_prev = p_k * s / (1 - q_k * q_k) + r_k * dt / tau_m
    return q1, p_prev, r_k - q_k - p_k * s


def discrete_march(q0: float, p_init: float, n: int, dt: float, tau_m: float = 1.0):
    """Run the discrete system forward from (q_0, p_{-1}); returns (q, p, r) arrays.

    ``p`` holds p_{-1}..p_{n-1}.
    """
    q = np.empty(n + 1)
    p = np.empty(n + 1)
    r = np.empty(n)
    q[0] = q0
    p[0] = p_init
    c = dt / tau_m
    for k in range(n):
        s0 = 1 - q[k] ** 2
        r[k] = (p[k] + q[k] / s0) / (1 / s0 + c)
        q[k + 1] = math.tanh(math.atanh(q[k]) + r[k] * c)
        p[k + 1] = (r[k] - q[k]) / (1 - q[k + 1] ** 2)
    return q, p, r


def discrete_shoot(q0: float, n: int, dt: float, tau_m: float = 1.0, q_F: Optional[float] = None,
                   bracket=(-50.0, 50.0), n_scan: int = 201):
    """Find p_{-1} so that q_n = q_F, or p_{n-1} = 0 without a final condition."""
    def resid(pi):
        with np.errstate(all="ignore"):
            q, p, _ = discrete_march(q0, pi, n, dt, tau_m)
        return q[-1] - q_F if q_F is not None else p[-1]
    grid = np.linspace(bracket[0], bracket[1], n_scan)
    vals = []
    for g in grid:
        try:
            vals.append(resid(g))
        except (ValueError, OverflowError, ZeroDivisionError):
            vals.append(math.nan)
    vals = np.array(vals)
    for i in range(n_scan - 1):
        if np.isfinite(vals[i]) and np.isfinite(vals[i + 1]) and vals[i] * vals[i + 1] <= 0:
            pi = optimize.brentq(resid, grid[i], grid[i + 1], xtol=1e-15, rtol=1e-14)
            with np.errstate(all="ignore"):
                return discrete_march(q0, pi, n, dt, tau_m)
    raise ValidationError("no discrete extremal solution in the scan bracket",
                          [("bracket", str(bracket))])


def write_mlp_csv(path, sol: MLPSolution, tau_m: float, fb=None):
    E = stochastic_hamiltonian(sol.theta, sol.p_theta, tau_m, fb)
    with open(path, "w") as fh:
        fh.write("t,theta,p_theta,r,E\n")
        for row in zip(sol.times, sol.theta, sol.p_theta, sol.r, E):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def write_portrait_csv(path, curves: Sequence[PortraitCurve]):
    with open(path, "w") as fh:
        fh.write("theta,p_theta,E,branch\n")
        for c in curves:
            for th, p in zip(c.theta, c.p_theta):
                fh.write(f"{float(th)!r},{float(p)!r},{float(c.E)!r},{c.branch}\n")
