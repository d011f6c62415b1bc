"""Phase-lock (Rabi stabilisation) feedback.

With Delta_fb = Delta_d (1 - F dtheta) and dtheta the phase lag behind the
target rotation, coarse graining over one carrier period leaves an
Ornstein-Uhlenbeck process

    d(dtheta)/dt = -F Delta_d dtheta + xi,   Var xi = 1 / (2 tau_m dt_c),

and the z autocorrelation K_z(tau) = cos(Delta_d tau)/2 *
exp[(exp(-k tau) - 1) / (4 tau_m k)] with k = F Delta_d.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .engine import FeedbackSpec, simulate_ensemble
from .errors import BurnInError, ValidationError
from .kernel import UpdateScheme
from .model import BlochState, ModelParams


@dataclass(frozen=True)
class PhaseLockConfig:
    delta_d: float
    F: float
    coarse_dt: Optional[float] = None

    def __post_init__(self):
        problems = self.check(self.delta_d, self.F, self.coarse_dt)
        if problems:
            raise ValidationError("; ".join(f"{a}: {b}" for a, b in problems), problems)

    @staticmethod
    def check(delta_d, F, coarse_dt=None, prefix: str = "fb.") -> List[Tuple[str, str]]:
        out = []
        if not (isinstance(delta_d, (int, float)) and math.isfinite(delta_d)) or delta_d == 0:
            out.append((prefix + "delta_d", "must be a finite nonzero rate"))
        if not (isinstance(F, (int, float)) and math.isfinite(F)):
            out.append((prefix + "F", "must be finite"))
        elif not out and F * delta_d < 0:
            out.append((prefix + "F", "F * delta_d must be >= 0"))
        if coarse_dt is not None and not coarse_dt > 0:
            out.append((prefix + "coarse_dt", "must be > 0"))
        return out

    @property
    def k(self) -> float:
        return self.F * self.delta_d

    @property
    def period(self) -> float:
        return 2 * math.pi / abs(self.delta_d)

    @property
    def dt_c(self) -> float:
        return self.coarse_dt if self.coarse_dt is not None else self.period

    def spec(self) -> FeedbackSpec:
        return FeedbackSpec.phase_lock(self.delta_d, self.F)

    def diffusive_warning(self, tau_m: float) -> Optional[str]:
        if abs(self.delta_d) * tau_m < 10:
            return (f"delta_d tau_m = {abs(self.delta_d) * tau_m:.3g} < 10: outside the "
                    "diffusive-Rabi regime assumed by the coarse-grained description")
        return None


def coarse_grained_step(dtheta, cfg: PhaseLockConfig, tau_m: float,
                        rng: Optional[np.random.Generator], dt: Optional[float] = None,
                        noise: bool = True):
    """One Euler-Maruyama step of the phase-difference OU process."""
    h = cfg.dt_c if dt is None else dt
    d = np.asarray(dtheta, dtype=float)
    out = d - cfg.k * d * h
    if noise:
        out = out + math.sqrt(h / (2 * tau_m)) * rng.standard_normal(d.shape)
    return out[()] if out.ndim == 0 else out


def ou_stationary_variance(cfg: PhaseLockConfig, tau_m: float, dt: Optional[float] = None) -> float:
    """Stationary variance of dtheta.

    ``dt=None`` gives the continuum value 1/(4 tau_m k); a step size gives the
    exact stationary variance of the Euler recursion, 1/(2 tau_m k (2 - k dt)).
    """
    k = cfg.k
    if k <= 0:
        return math.inf
    if dt is None:
        return 1 / (4 * tau_m * k)
    if not 0 < k * dt < 2:
        return math.inf
    return 1 / (2 * tau_m * k * (2 - k * dt))


def simulate_coarse(n_samples: int, n_steps: int, cfg: PhaseLockConfig, tau_m: float,
                    seed: int = 0, dt: Optional[float] = None, stationary: bool = True):
    """Paths of the coarse-grained process, shape (n_samples, n_steps + 1)."""
    rng = np.random.default_rng(seed)
    h = cfg.dt_c if dt is None else dt
    out = np.empty((n_samples, n_steps + 1))
    var = ou_stationary_variance(cfg, tau_m, h)
    out[:, 0] = rng.standard_normal(n_samples) * math.sqrt(var) if stationary and math.isfinite(var) else 0.0
    for i in range(n_steps):
        out[:, i + 1] = coarse_grained_step(out[:, i], cfg, tau_m, rng, h)
    return out


def kz_analytic(tau, cfg: PhaseLockConfig, tau_m: float):
    """K_z(tau) = cos(Delta_d tau)/2 * exp[(e^{-k tau} - 1)/(4 tau_m k)]; k -> 0 gives e^{-tau/(4 tau_m)}."""
    tau = np.asarray(tau, dtype=float)
    if np.any(tau < 0):
        raise ValidationError("tau must be >= 0", [("tau", "negative")])
    k = cfg.k
    if k == 0:
        expo = -tau / (4 * tau_m)
    else:
        expo = np.expm1(-k * tau) / (4 * tau_m * k)
    out = 0.5 * np.cos(cfg.delta_d * tau) * np.exp(expo)
    return out[()] if out.ndim == 0 else out


def kz_envelope(tau, cfg: PhaseLockConfig, tau_m: float):
    tau = np.asarray(tau, dtype=float)
    k = cfg.k
    expo = -tau / (4 * tau_m) if k == 0 else np.expm1(-k * tau) / (4 * tau_m * k)
    out = 0.5 * np.exp(expo)
    return out[()] if out.ndim == 0 else out


def kz_coarse_estimate(paths: np.ndarray, lags: Sequence[int], cfg: PhaseLockConfig):
    """<cos(dtheta(t) - dtheta(t+tau))> cos(Delta_d tau)/2 from stationary coarse paths."""
    h = cfg.dt_c
    est, err = [], []
    for L in lags:
        c = np.cos(paths[:, 0] - paths[:, L])
        f = 0.5 * math.cos(cfg.delta_d * L * h)
        est.append(f * c.mean())
        err.append(abs(f) * c.std(ddof=1) / math.sqrt(len(c)))
    return np.array(est), np.array(err)


# ----------------------------------------------------------------------------
# full-simulation estimator

@dataclass
class KzEstimate:
    tau: np.ndarray
    value: np.ndarray
    stderr: np.ndarray
    n_traj: int
    window: Tuple[float, float]
    burn_in: float


def default_burn_in(cfg: PhaseLockConfig) -> float:
    return 5.0 / cfg.k if cfg.k > 0 else 0.0


def _window(n_steps: int, dt: float, burn_in: float, max_lag: int, period: float):
    start = int(math.ceil(burn_in / dt - 1e-9))
    usable = n_steps - max_lag - start + 1
    if usable < 1:
        raise BurnInError(f"burn-in {burn_in} plus the largest lag exceeds the run length "
                          f"{n_steps * dt}")
    per = period / dt
    n_per = int(math.floor(usable / per + 1e-9))
    if n_per >= 1:
        # whole carrier periods; partial periods bias the time average
        usable = int(round(n_per * per))
    return start, usable


def time_averaged_products(z: np.ndarray, lags: Sequence[int], start: int, length: int):
    """Per-trajectory time averages of z(t) z(t + lag); shape (n_traj, n_lags)."""
    a = z[:, start:start + length]
    return np.stack([(a * z[:, start + L:start + L + length]).mean(axis=1) for L in lags], axis=1)


def jackknife_mean(samples: np.ndarray, n_blocks: Optional[int] = None):
    """Jackknife estimate and standard error of the mean over axis 0 (block deletion)."""
    N = len(samples)
    if N < 2:
        raise ValidationError("jackknife needs at least two samples")
    B = N if n_blocks is None else max(2, min(n_blocks, N))
    blocks = np.array_split(np.arange(N), B)
    total = samples.sum(axis=0)
    loo = np.stack([(total - samples[b].sum(axis=0)) / (N - len(b)) for b in blocks])
    mean = total / N
    var = (B - 1) / B * ((loo - loo.mean(axis=0)) ** 2).sum(axis=0)
    return mean, np.sqrt(var)


def kz_empirical(chunks, dt: float, tau_grid: Sequence[float], cfg: PhaseLockConfig,
                 burn_in: Optional[float] = None, n_blocks: Optional[int] = None) -> KzEstimate:
    """Time-and-ensemble averaged z(t) z(t+tau) with jackknife error bars.

    ``chunks`` yields objects with a ``full_states`` array (b, n+1, 3), such as
    the chunks from ``simulate_ensemble(..., keep_full=True)``.
    """
    burn = default_burn_in(cfg) if burn_in is None else burn_in
    lags = [int(round(t / dt)) for t in tau_grid]
    per_traj = []
    win = None
    for ch in chunks:
        z = ch.full_states[:, :, 2]
        if win is None:
            win = _window(z.shape[1] - 1, dt, burn, max(lags), cfg.period)
        per_traj.append(time_averaged_products(z, lags, *win))
    samples = np.concatenate(per_traj, axis=0)
    mean, se = jackknife_mean(samples, n_blocks)
    start, length = win
    return KzEstimate(np.array(lags) * dt, mean, se, len(samples),
                      (start * dt, (start + length - 1) * dt), burn)


def simulate_kz(cfg: PhaseLockConfig, tau_m: float, n_traj: int, *, dt: Optional[float] = None,
                n_periods: int = 10, tau_max: Optional[float] = None, n_tau: int = 81,
                burn_in: Optional[float] = None, master_seed: int = 0, workers: int = 1,
                scheme=None, initial: Optional[BlochState] = None,
                chunk_size: int = 256) -> KzEstimate:
    """Full stochastic simulation with phase-lock feedback, then kz_empirical.

    Defaults: dt = carrier period / 64, tau grid [0, 20/Delta_d], averaging
    window of ``n_periods`` whole carrier periods after the burn-in.
    """
    dt = cfg.period / 64 if dt is None else dt
    tau_max = 20 / abs(cfg.delta_d) if tau_max is None else tau_max
    burn = default_burn_in(cfg) if burn_in is None else burn_in
    lag_max = int(round(tau_max / dt))
    n_steps = int(math.ceil(burn / dt)) + int(math.ceil(n_periods * cfg.period / dt)) + lag_max
    params = ModelParams(tau_m=tau_m, dt=dt, n_steps=n_steps, delta=cfg.delta_d)
    scheme = UpdateScheme.exact() if scheme is None else UpdateScheme.parse(scheme)
    initial = BlochState(0.0, 0.0, 1.0) if initial is None else initial
    taus = np.arange(lag_max + 1) * dt
    if n_tau and n_tau < len(taus):
        taus = taus[np.unique(np.round(np.linspace(0, lag_max, n_tau)).astype(int))]
    chunks = simulate_ensemble(n_traj, initial, params, cfg.spec(), scheme, master_seed,
                               workers=workers, chunk_size=chunk_size, keep_full=True)
    return kz_empirical(chunks, dt, taus, cfg, burn)


def write_kz_csv(path, est: KzEstimate, cfg: PhaseLockConfig, tau_m: float):
    ana = kz_analytic(est.tau, cfg, tau_m)
    with open(path, "w") as fh:
        fh.write("tau,kz_analytic,kz_empirical,stderr\n")
        for row in zip(est.tau, ana, est.value, est.stderr):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
