"""Readout model, state-update schemes and the action density.

All update maps act on the Bloch vector directly.  The array functions
(``*_arrays``) take equally shaped float arrays so that an ensemble can be
advanced one step at a time; the scalar wrappers take and return
:class:`BlochState`.

Readout model (time-averaged detector output over one step)::

    P(r | z) = sqrt(dt / 2 pi tau_m) * [ (1+z)/2 exp(-dt (r-1)^2 / 2 tau_m)
                                        + (1-z)/2 exp(-dt (r+1)^2 / 2 tau_m) ]
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import StepSizeError, UnderflowError, UnphysicalStateError, ValidationError
from .model import BlochState, ModelParams

CLIP_TOL = 1e-6
UNDERFLOW = 1e-300

_TAGS = ("exact-operator", "stratonovich", "ito", "split-operator")


@dataclass(frozen=True)
class UpdateScheme:
    tag: str = "exact-operator"
    m: int = 1

    def __post_init__(self):
        if self.tag not in _TAGS:
            raise ValidationError(f"unknown update scheme {self.tag!r}",
                                  [("scheme", f"must be one of {_TAGS}")])
        if self.tag == "split-operator":
            if not isinstance(self.m, (int, np.integer)) or self.m < 1:
                raise ValidationError("split-operator needs m >= 1",
                                      [("scheme.m", "must be a positive integer")])
        elif self.m != 1:
            raise ValidationError("m is only meaningful for split-operator",
                                  [("scheme.m", "must be 1 unless tag is split-operator")])

    @classmethod
    def exact(cls):
        return cls("exact-operator")

    @classmethod
    def stratonovich(cls):
        return cls("stratonovich")

    @classmethod
    def ito(cls):
        return cls("ito")

    @classmethod
    def split(cls, m: int = 10):
        return cls("split-operator", int(m))

    @classmethod
    def parse(cls, text) -> "UpdateScheme":
        if isinstance(text, UpdateScheme):
            return text
        s = str(text).strip().lower().replace("_", "-")
        mt = re.fullmatch(r"split(?:-operator)?(?:\((\d+)\))?", s)
        if mt:
            return cls.split(int(mt.group(1)) if mt.group(1) else 10)
        aliases = {"exact": "exact-operator", "exact-operator": "exact-operator",
                   "stratonovich": "stratonovich", "strat": "stratonovich",
                   "ito": "ito"}
        if s not in aliases:
            raise ValidationError(f"unknown update scheme {text!r}",
                                  [("scheme", f"unknown scheme {text!r}")])
        return cls(aliases[s])

    def __str__(self):
        if self.tag == "split-operator":
            return f"split-operator({self.m})"
        return self.tag


# ----------------------------------------------------------------------------
# readouts

def readout_pdf(r, z, params: ModelParams):
    z = np.asarray(z, dtype=float)
    if np.any(np.abs(z) > 1.0 + 1e-12):
        raise UnphysicalStateError("|z| > 1 in readout_pdf")
    r = np.asarray(r, dtype=float)
    c = params.dt / (2.0 * params.tau_m)
    pref = math.sqrt(params.dt / (2.0 * math.pi * params.tau_m))
    out = pref * (0.5 * (1 + z) * np.exp(-c * (r - 1.0) ** 2)
                  + 0.5 * (1 - z) * np.exp(-c * (r + 1.0) ** 2))
    return out[()] if out.ndim == 0 else out


def log_readout_pdf(r, z, params: ModelParams):
    r = np.asarray(r, dtype=float)
    z = np.asarray(z, dtype=float)
    c = params.dt / (2.0 * params.tau_m)
    lp = np.log(0.5 * (1 + z)) - c * (r - 1.0) ** 2
    lm = np.log(0.5 * (1 - z)) - c * (r + 1.0) ** 2
    out = 0.5 * math.log(params.dt / (2.0 * math.pi * params.tau_m)) + np.logaddexp(lp, lm)
    return out[()] if out.ndim == 0 else out


def readouts_from_noise(z, uniform, normal, params: ModelParams, white_noise: bool = False):
    """Turn pre-drawn U(0,1) and N(0,1) variates into readouts.

    Mixture sampling picks the +1 branch when ``uniform < (1+z)/2``; white
    noise uses ``r = z + sqrt(tau_m / dt) * normal``.
    """
    sd = math.sqrt(params.tau_m / params.dt)
    if white_noise:
        return z + sd * normal
    branch = np.where(uniform < 0.5 * (1.0 + z), 1.0, -1.0)
    return branch + sd * normal


def sample_readout(z, params: ModelParams, rng: np.random.Generator,
                   white_noise: bool = False):
    z = np.asarray(z, dtype=float)
    if np.any(np.abs(z) > 1.0 + 1e-12):
        raise UnphysicalStateError("|z| > 1 in sample_readout")
    u = rng.random(z.shape)
    g = rng.standard_normal(z.shape)
    out = readouts_from_noise(z, u, g, params, white_noise)
    return out[()] if np.ndim(out) == 0 else out


# ----------------------------------------------------------------------------
# exact maps on arrays

def measure_arrays(x, y, z, a):
    """Gaussian Kraus update with a = r * dt / tau_m, renormalised.

    Written with exp(-2|a|) so that large |a| cannot overflow cosh/sinh.
    """
    s = np.where(a < 0, -1.0, 1.0)
    aa = np.abs(a)
    e2 = np.exp(-2.0 * aa)
    den = (1.0 + s * z) + (1.0 - s * z) * e2
    if np.any(den < UNDERFLOW):
        raise UnderflowError("trace of M rho M^dagger fell below 1e-300")
    e1 = np.exp(-aa)
    th = s * (1.0 - e2) / (1.0 + e2)
    # tanh addition form keeps z = +-1 fixed exactly
    zn = (z + th) / (1.0 + z * th)
    f = 2.0 * e1 / den
    return x * f, y * f, zn


def rotate_arrays(x, y, z, epsilon, delta, h):
    """Unitary for H = (eps/2) sz - (delta/2) sx over time h.

    Rotation of the Bloch vector about (-delta, 0, eps) by angle
    sqrt(eps^2 + delta^2) * h.
    """
    epsilon = np.asarray(epsilon, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if not np.any(epsilon):
        # rotation about the x axis: y' = y c + z s, z' = z c - y s
        phi = delta * h
        c = np.cos(phi)
        sn = np.sin(phi)
        return x, y * c + z * sn, z * c - y * sn
    om = np.sqrt(epsilon * epsilon + delta * delta)
    safe = np.where(om > 0, om, 1.0)
    nx = np.where(om > 0, -delta / safe, 0.0)
    nz = np.where(om > 0, epsilon / safe, 0.0)
    phi = om * h
    c = np.cos(phi)
    sn = np.sin(phi)
    dot = nx * x + nz * z
    cx, cy, cz = -nz * y, nz * x - nx * z, nx * y
    k = dot * (1.0 - c)
    return (x * c + cx * sn + nx * k,
            y * c + cy * sn,
            z * c + cz * sn + nz * k)


def dephase_arrays(x, y, z, gamma, h):
    if gamma == 0.0:
        return x, y, z
    f = math.exp(-gamma * h)
    return x * f, y * f, z


def step_exact_arrays(x, y, z, r, params: ModelParams, delta_eff, scheme: UpdateScheme):
    """One step rho -> O_gamma U M_r [rho]; split-operator interleaves U^(1/m) M^(1/m)."""
    m = scheme.m if scheme.tag == "split-operator" else 1
    h = params.dt / m
    a = r * (h / params.tau_m)
    for _ in range(m):
        x, y, z = measure_arrays(x, y, z, a)
        x, y, z = rotate_arrays(x, y, z, params.epsilon, delta_eff, h)
    return dephase_arrays(x, y, z, params.gamma, params.dt)


# ----------------------------------------------------------------------------
# differential schemes

def clip_arrays(x, y, z, tol: float = CLIP_TOL):
    n2 = x * x + y * y + z * z
    over = np.sqrt(n2) - 1.0
    worst = float(np.max(over)) if np.size(over) else 0.0
    if worst > tol:
        raise StepSizeError(
            f"state left the Bloch ball by {worst:.3e} > {tol:.1e}; use a smaller dt")
    if worst > 0.0:
        f = np.where(over > 0, 1.0 / np.sqrt(np.maximum(n2, 1.0)), 1.0)
        return x * f, y * f, z * f
    return x, y, z


def _strat_drift(x, y, z, r, params, delta):
    k = r / params.tau_m
    g = params.gamma
    e = params.epsilon
    fx = -g * x - e * y - x * z * k
    fy = -g * y + e * x + delta * z - y * z * k
    fz = -delta * y + (1.0 - z * z) * k
    return fx, fy, fz


def step_stratonovich_arrays(x, y, z, r, params: ModelParams, delta_eff, clip_tol=CLIP_TOL):
    """Heun predictor-corrector for the readout-driven (Stratonovich) equations.

    The readout is held fixed over the step.  A plain Euler step would
    converge to the Ito reading of the same equations, so the corrector is
    needed for a consistent Stratonovich limit.
    """
    dt = params.dt
    f1 = _strat_drift(x, y, z, r, params, delta_eff)
    xp, yp, zp = x + dt * f1[0], y + dt * f1[1], z + dt * f1[2]
    f2 = _strat_drift(xp, yp, zp, r, params, delta_eff)
    h = 0.5 * dt
    xn = x + h * (f1[0] + f2[0])
    yn = y + h * (f1[1] + f2[1])
    zn = z + h * (f1[2] + f2[2])
    return clip_arrays(xn, yn, zn, clip_tol)


def step_ito_arrays(x, y, z, xi, params: ModelParams, delta_eff, clip_tol=CLIP_TOL):
    """Euler-Maruyama step of the Ito equations driven by white noise xi (variance 1/dt)."""
    dt = params.dt
    G = params.Gamma
    e = params.epsilon
    k = xi * dt / math.sqrt(params.tau_m)
    xn = x + dt * (-G * x - e * y) - x * z * k
    yn = y + dt * (-G * y + e * x + delta_eff * z) - y * z * k
    zn = z + dt * (-delta_eff * y) + (1.0 - z * z) * k
    return clip_arrays(xn, yn, zn, clip_tol)


# ----------------------------------------------------------------------------
# scalar wrappers

def _unpack(state: BlochState):
    return state.x, state.y, state.z


def _pack(x, y, z) -> BlochState:
    return BlochState(float(x), float(y), float(z))


def _delta(params, delta_eff):
    return params.delta if delta_eff is None else float(delta_eff)


def update_exact(state: BlochState, r: float, params: ModelParams,
                 delta_eff: Optional[float] = None,
                 scheme: UpdateScheme = UpdateScheme()) -> BlochState:
    if scheme.tag not in ("exact-operator", "split-operator"):
        raise ValidationError("update_exact needs exact-operator or split-operator",
                              [("scheme", str(scheme))])
    x, y, z = step_exact_arrays(*_unpack(state), float(r), params, _delta(params, delta_eff), scheme)
    return _pack(x, y, z)


def update_stratonovich(state: BlochState, r: float, params: ModelParams,
                        delta_eff: Optional[float] = None, clip_tol: float = CLIP_TOL) -> BlochState:
    x, y, z = step_stratonovich_arrays(*_unpack(state), float(r), params,
                                       _delta(params, delta_eff), clip_tol)
    return _pack(x, y, z)


def update_ito(state: BlochState, xi: float, params: ModelParams,
               delta_eff: Optional[float] = None, clip_tol: float = CLIP_TOL) -> BlochState:
    x, y, z = step_ito_arrays(*_unpack(state), float(xi), params,
                              _delta(params, delta_eff), clip_tol)
    return _pack(x, y, z)


def action_increment(state: BlochState, r: float, params: ModelParams) -> float:
    """Single-Gaussian log-likelihood increment -dt (r^2 - 2 r z + 1) / (2 tau_m)."""
    return -params.dt * (r * r - 2.0 * r * state.z + 1.0) / (2.0 * params.tau_m)
