"""Parameter records, Bloch states and the diagonal (u, v, w) frame.

Units are whatever the caller uses; nothing is silently normalised to
``tau_m = 1``.  The drift of the Ito equations for (x, y, z) is linear with
eigenvalues ``-Gamma`` and ``-(Gamma +/- Omega)/2``; the frame that
diagonalises it is complex whenever ``Gamma < 2*Delta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .errors import (
    DegenerateEigenvalueError,
    FrameDegenerateError,
    NumericalConsistencyError,
    UnphysicalStateError,
    ValidationError,
)

PURITY_SLACK = 1e-9
IMAG_TOL = 1e-9


@dataclass(frozen=True)
class BlochState:
    x: float
    y: float
    z: float

    def __post_init__(self):
        for name in ("x", "y", "z"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise UnphysicalStateError(f"{name} is not finite: {v}")
        n2 = self.x * self.x + self.y * self.y + self.z * self.z
        if n2 > 1.0 + PURITY_SLACK:
            raise UnphysicalStateError(
                f"|r|^2 = {n2:.12g} exceeds 1 (state outside the Bloch ball)")

    @classmethod
    def from_angle(cls, theta: float) -> "BlochState":
        """Pure state in the y-z plane with z = cos(theta), y = sin(theta)."""
        return cls(0.0, math.sin(theta), math.cos(theta))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)

    @property
    def norm(self) -> float:
        return math.sqrt(self.x * self.x + self.y * self.y + self.z * self.z)

    @property
    def theta(self) -> float:
        return math.atan2(self.y, self.z)


@dataclass(frozen=True)
class ModelParams:
    """Measurement, Hamiltonian and dephasing rates plus the time grid.

    ``total_time`` is derived as ``n_steps * dt``; use
    :meth:`from_total_time` to build a record from T instead.
    """

    tau_m: float = 1.0
    dt: float = 0.006
    n_steps: int = 100
    gamma: float = 0.0
    epsilon: float = 0.0
    delta: float = 0.0

    def __post_init__(self):
        problems = self.check(self.tau_m, self.dt, self.n_steps, self.gamma,
                              self.epsilon, self.delta)
        if problems:
            raise ValidationError(
                "; ".join(f"{p}: {m}" for p, m in problems), problems)

    @staticmethod
    def check(tau_m, dt, n_steps, gamma=0.0, epsilon=0.0, delta=0.0,
              prefix: str = "") -> List[Tuple[str, str]]:
        out = []
        def bad(name, msg):
            out.append((prefix + name, msg))
        for name, v in (("tau_m", tau_m), ("dt", dt), ("gamma", gamma),
                        ("epsilon", epsilon), ("delta", delta)):
            if not isinstance(v, (int, float)) or isinstance(v, bool) or not math.isfinite(v):
                bad(name, f"must be a finite real, got {v!r}")
        if out:
            return out
        if tau_m <= 0:
            bad("tau_m", "must be > 0")
        if dt <= 0:
            bad("dt", "must be > 0")
        if isinstance(n_steps, bool) or not isinstance(n_steps, (int, np.integer)) or n_steps < 1:
            bad("n_steps", f"must be a positive integer, got {n_steps!r}")
        if tau_m > 0:
            big_gamma = gamma + 0.5 / tau_m
            if big_gamma <= 0:
                bad("gamma", "total dephasing Gamma = gamma + 1/(2 tau_m) must be > 0")
            elif 0.5 / (tau_m * big_gamma) > 1.0 + 1e-12:
                bad("gamma", "efficiency eta = 1/(2 tau_m Gamma) exceeds 1 (gamma < 0)")
        return out

    @classmethod
    def from_total_time(cls, total_time: float, dt: float, **kw) -> "ModelParams":
        n = int(round(total_time / dt))
        if n < 1 or abs(n * dt - total_time) > 1e-9 * max(1.0, abs(total_time)):
            raise ValidationError(
                f"total_time={total_time} is not an integer multiple of dt={dt}",
                [("total_time", "must equal n_steps * dt")])
        return cls(dt=dt, n_steps=n, **kw)

    @classmethod
    def from_efficiency(cls, efficiency: float, tau_m: float = 1.0, **kw) -> "ModelParams":
        """Pick gamma so that eta = 1/(2 tau_m Gamma) equals ``efficiency``."""
        if not 0 < efficiency <= 1:
            raise ValidationError("efficiency must lie in (0, 1]",
                                  [("efficiency", "must lie in (0, 1]")])
        gamma = 0.5 / (tau_m * efficiency) - 0.5 / tau_m
        return cls(tau_m=tau_m, gamma=max(gamma, 0.0), **kw)

    @property
    def total_time(self) -> float:
        return self.n_steps * self.dt

    @property
    def Gamma(self) -> float:
        return self.gamma + 0.5 / self.tau_m

    @property
    def efficiency(self) -> float:
        return 0.5 / (self.tau_m * self.Gamma)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def replace(self, **kw) -> "ModelParams":
        d = dict(tau_m=self.tau_m, dt=self.dt, n_steps=self.n_steps,
                 gamma=self.gamma, epsilon=self.epsilon, delta=self.delta)
        d.update(kw)
        return ModelParams(**d)


@dataclass(frozen=True)
class DiagonalFrame:
    lambda1: complex
    lambda2: complex
    lambda3: complex
    omega: complex
    alpha: float
    kappa1: complex
    kappa2: complex
    kappa3: complex
    beta1: Optional[complex]
    beta2: Optional[complex]
    Gamma: float = field(default=0.0)
    delta: float = field(default=0.0)
    tau_m: float = field(default=1.0)

    @property
    def lambdas(self) -> Tuple[complex, complex, complex]:
        return (self.lambda1, self.lambda2, self.lambda3)

    @property
    def kappas(self) -> Tuple[complex, complex, complex]:
        return (self.kappa1, self.kappa2, self.kappa3)

    def require_beta(self):
        if self.beta1 is None or self.beta2 is None:
            raise FrameDegenerateError(
                "beta_1, beta_2 = (Gamma +/- Omega)/(2 Delta) are undefined for Delta = 0")
        return self.beta1, self.beta2


def eigensystem(params: ModelParams, require_beta: bool = False) -> DiagonalFrame:
    """Eigenvalues, noise couplings and transform coefficients of the Ito drift."""
    G = params.Gamma
    D = params.delta
    omega = complex(np.sqrt(complex(G * G - 4.0 * D * D)))
    if abs(omega) <= 1e-12 * G:
        raise DegenerateEigenvalueError(
            f"Gamma = 2 Delta = {G!r}: Omega = 0 makes kappa_2, kappa_3 singular; "
            "perturb delta slightly")
    sq = math.sqrt(params.tau_m)
    if D == 0.0:
        if require_beta:
            raise FrameDegenerateError("Delta = 0: beta_1, beta_2 requested but undefined")
        b1 = b2 = None
    else:
        b1 = (G + omega) / (2.0 * D)
        b2 = (G - omega) / (2.0 * D)
    return DiagonalFrame(
        lambda1=complex(-G),
        lambda2=-(G + omega) / 2.0,
        lambda3=-(G - omega) / 2.0,
        omega=omega,
        alpha=-1.0 / sq,
        kappa1=0j,
        kappa2=(-G + omega) / (2.0 * sq * omega),
        kappa3=(G + omega) / (2.0 * sq * omega),
        beta1=b1,
        beta2=b2,
        Gamma=G,
        delta=D,
        tau_m=params.tau_m,
    )


def to_diagonal(state: BlochState, frame: DiagonalFrame,
                params: Optional[ModelParams] = None) -> Tuple[complex, complex, complex]:
    """(x, y, z) -> (u, v, w)."""
    G = frame.Gamma if params is None else params.Gamma
    D = frame.delta if params is None else params.delta
    if D == 0.0:
        raise FrameDegenerateError("the (u, v, w) transform needs Delta != 0")
    om = frame.omega
    u = complex(state.x)
    v = (2.0 * state.y * D - G * state.z + om * state.z) / (2.0 * om)
    w = (-2.0 * state.y * D + G * state.z + om * state.z) / (2.0 * om)
    return u, v, w


def from_diagonal(u, v, w, frame: DiagonalFrame, check: bool = True) -> BlochState:
    """(u, v, w) -> (x, y, z); the imaginary parts must cancel."""
    b1, b2 = frame.require_beta()
    x = complex(u)
    y = b1 * v + b2 * w
    z = complex(v + w)
    if check:
        worst = max(abs(x.imag), abs(y.imag), abs(z.imag))
        if worst > IMAG_TOL:
            raise NumericalConsistencyError(
                f"residual imaginary part {worst:.3e} in reconstructed Bloch vector")
    return BlochState(x.real, y.real, z.real)


def diagonal_matrix(frame: DiagonalFrame) -> np.ndarray:
    """Forward matrix Q with (x, y, z)^T = Q (u, v, w)^T."""
    b1, b2 = frame.require_beta()
    return np.array([[1, 0, 0], [0, b1, b2], [0, 1, 1]], dtype=complex)
