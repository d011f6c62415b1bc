"""Monte Carlo trajectory ensembles.

Every trajectory owns a generator seeded from ``trajectory_seed(master, i)``
and draws its uniform/normal variates up front, so a trajectory is the same
whether it is simulated alone, inside any chunk, or by any worker.  Chunks are
advanced in lock-step with vectorised array kernels.
"""

from __future__ import annotations

import json
import math
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ResourceLimitError, SimulationError, StochPathError, ValidationError
from .errors import FeedbackGainWarning
from .kernel import (
    CLIP_TOL,
    UpdateScheme,
    readouts_from_noise,
    step_exact_arrays,
    step_ito_arrays,
    step_stratonovich_arrays,
)
from .model import BlochState, ModelParams

DEFAULT_CHUNK = 2048
DEFAULT_MEMORY_BUDGET = 512 * 2 ** 20

_VARIANTS = ("none", "direct-linear", "phase-lock")


@dataclass(frozen=True)
class FeedbackSpec:
    """Feedback on the Rabi frequency.

    ``direct-linear``: Delta = delta0 + delta1 * r_k (same-step readout).
    ``phase-lock``: Delta = delta_d * (1 - F * dtheta), with dtheta the wrapped
    difference between atan2(y, z) and delta_d * t.
    """

    variant: str = "none"
    delta0: float = 0.0
    delta1: float = 0.0
    delta_d: float = 0.0
    F: float = 0.0

    def __post_init__(self):
        if self.variant not in _VARIANTS:
            raise ValidationError(f"unknown feedback variant {self.variant!r}",
                                  [("fb.variant", f"must be one of {_VARIANTS}")])

    @classmethod
    def none(cls):
        return cls("none")

    @classmethod
    def direct_linear(cls, delta0: float = 0.0, delta1: float = 0.8):
        return cls("direct-linear", delta0=float(delta0), delta1=float(delta1))

    @classmethod
    def phase_lock(cls, delta_d: float, F: float):
        return cls("phase-lock", delta_d=float(delta_d), F=float(F))

    def warnings(self, tau_m: float) -> List[str]:
        out = []
        if self.variant == "direct-linear" and abs(self.delta1 * tau_m) > 1.0:
            out.append("|delta1 * tau_m| > 1: direct-linear feedback has no attractors")
        return out


def default_scheme(fb: Optional[FeedbackSpec]) -> UpdateScheme:
    if fb is not None and fb.variant == "direct-linear":
        return UpdateScheme.split(10)
    return UpdateScheme.exact()


def trajectory_seed(master_seed: int, index: int) -> int:
    """64-bit per-trajectory seed; a counter hash of (master_seed, index)."""
    ss = np.random.SeedSequence([int(master_seed), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def draw_noise(seed: int, n_steps: int) -> Tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    u = rng.random(n_steps)
    g = rng.standard_normal(n_steps)
    return u, g


def wrap_angle(a):
    """Map angles to [-pi, pi)."""
    return (np.asarray(a) + math.pi) % (2.0 * math.pi) - math.pi


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray          # (n+1, 3) rows of (x, y, z)
    readouts: np.ndarray        # (n,)
    seed: int
    scheme: UpdateScheme
    index: Optional[int] = None

    @property
    def x(self):
        return self.states[:, 0]

    @property
    def y(self):
        return self.states[:, 1]

    @property
    def z(self):
        return self.states[:, 2]

    @property
    def n_steps(self) -> int:
        return len(self.readouts)

    def state(self, k: int) -> BlochState:
        return BlochState(*map(float, self.states[k]))


def checkpoint_grid(n_steps: int, n_points: int = 20) -> np.ndarray:
    n_points = max(2, min(int(n_points), n_steps + 1))
    return np.unique(np.round(np.linspace(0, n_steps, n_points)).astype(np.int64))


def _initial_arrays(initial: BlochState, b: int):
    return (np.full(b, float(initial.x)), np.full(b, float(initial.y)),
            np.full(b, float(initial.z)))


def march(initial: BlochState, params: ModelParams, fb: FeedbackSpec, scheme: UpdateScheme,
          U: np.ndarray, G: np.ndarray, *, white_noise: bool = False,
          record: Optional[np.ndarray] = None, keep_full: bool = False,
          clip_tol: float = CLIP_TOL, index_offset: int = 0):
    """Advance a batch of trajectories through all steps.

    ``U`` and ``G`` are (b, n) arrays of pre-drawn uniform and normal
    variates.  Returns ``(checkpoint_states, full_states, readouts)``; the
    last two are ``None`` unless ``keep_full``.
    """
    b, n = U.shape
    if n != params.n_steps:
        raise ValidationError("noise array length does not match n_steps")
    x, y, z = _initial_arrays(initial, b)
    if record is None:
        record = np.array([n], dtype=np.int64)
    record = np.asarray(record, dtype=np.int64)
    cp = np.empty((b, len(record), 3))
    slot = {int(k): j for j, k in enumerate(record)}
    full = np.empty((b, n + 1, 3)) if keep_full else None
    rr = np.empty((b, n)) if keep_full else None
    if 0 in slot:
        cp[:, slot[0], 0], cp[:, slot[0], 1], cp[:, slot[0], 2] = x, y, z
    if keep_full:
        full[:, 0, 0], full[:, 0, 1], full[:, 0, 2] = x, y, z
    dt = params.dt
    sq_dt = math.sqrt(dt)
    sq_tau = math.sqrt(params.tau_m)
    tag = scheme.tag
    for k in range(n):
        r = readouts_from_noise(z, U[:, k], G[:, k], params, white_noise)
        if fb.variant == "none":
            d_eff = params.delta
        elif fb.variant == "direct-linear":
            d_eff = fb.delta0 + fb.delta1 * r
        else:
            dth = wrap_angle(np.arctan2(y, z) - fb.delta_d * (k * dt))
            d_eff = fb.delta_d * (1.0 - fb.F * dth)
        try:
            if tag == "ito":
                xi = G[:, k] / sq_dt if white_noise else (r - z) / sq_tau
                x, y, z = step_ito_arrays(x, y, z, xi, params, d_eff, clip_tol)
            elif tag == "stratonovich":
                x, y, z = step_stratonovich_arrays(x, y, z, r, params, d_eff, clip_tol)
            else:
                x, y, z = step_exact_arrays(x, y, z, r, params, d_eff, scheme)
        except StochPathError as exc:
            raise SimulationError(f"step {k}: {exc}", step=k,
                                  trajectory=index_offset) from exc
        j = slot.get(k + 1)
        if j is not None:
            cp[:, j, 0], cp[:, j, 1], cp[:, j, 2] = x, y, z
        if keep_full:
            full[:, k + 1, 0], full[:, k + 1, 1], full[:, k + 1, 2] = x, y, z
            rr[:, k] = r
    return cp, full, rr


def _resolve(fb, scheme, white_noise):
    fb = fb if fb is not None else FeedbackSpec.none()
    scheme = UpdateScheme.parse(scheme) if scheme is not None else default_scheme(fb)
    if white_noise is None:
        white_noise = scheme.tag == "ito"
    return fb, scheme, bool(white_noise)


def simulate_one(initial: BlochState, params: ModelParams, fb: Optional[FeedbackSpec] = None,
                 scheme=None, seed: int = 0, *, white_noise: Optional[bool] = None,
                 clip_tol: float = CLIP_TOL) -> Trajectory:
    fb, scheme, white_noise = _resolve(fb, scheme, white_noise)
    u, g = draw_noise(seed, params.n_steps)
    _, full, rr = march(initial, params, fb, scheme, u[None, :], g[None, :],
                        white_noise=white_noise, keep_full=True, clip_tol=clip_tol)
    return Trajectory(params.times, full[0], rr[0], int(seed), scheme)


@dataclass
class EnsembleChunk:
    indices: np.ndarray
    seeds: np.ndarray
    checkpoint_index: np.ndarray
    times: np.ndarray
    states: np.ndarray                    # (b, n_cp, 3)
    full_states: Optional[np.ndarray] = None
    readouts: Optional[np.ndarray] = None
    scheme: UpdateScheme = field(default_factory=UpdateScheme)

    @property
    def checkpoint_times(self):
        return self.times[self.checkpoint_index]

    def __len__(self):
        return len(self.indices)

    def trajectories(self) -> Iterator[Trajectory]:
        if self.full_states is None:
            raise StochPathError("chunk was simulated without keep_full=True")
        for j in range(len(self.indices)):
            yield Trajectory(self.times, self.full_states[j], self.readouts[j],
                             int(self.seeds[j]), self.scheme, int(self.indices[j]))


def _run_chunk(job):
    (start, stop, initial, params, fb, scheme, master_seed, record,
     keep_full, white_noise, clip_tol) = job
    idx = np.arange(start, stop, dtype=np.int64)
    seeds = np.array([trajectory_seed(master_seed, i) for i in idx], dtype=np.uint64)
    n = params.n_steps
    U = np.empty((len(idx), n))
    G = np.empty((len(idx), n))
    for j, s in enumerate(seeds):
        U[j], G[j] = draw_noise(int(s), n)
    cp, full, rr = march(initial, params, fb, scheme, U, G, white_noise=white_noise,
                         record=record, keep_full=keep_full, clip_tol=clip_tol,
                         index_offset=start)
    return EnsembleChunk(idx, seeds, record, params.times, cp, full, rr, scheme)


def simulate_ensemble(n_traj: int, initial: BlochState, params: ModelParams,
                      fb: Optional[FeedbackSpec] = None, scheme=None, master_seed: int = 0, *,
                      workers: int = 1, chunk_size: int = DEFAULT_CHUNK,
                      checkpoints: Optional[Sequence[int]] = None, keep_full: bool = False,
                      white_noise: Optional[bool] = None,
                      clip_tol: float = CLIP_TOL) -> Iterator[EnsembleChunk]:
    """Stream an ensemble as index-ordered chunks.

    ``checkpoints`` are step indices at which states are retained (default
    20-point grid).  Output is independent of ``workers`` and ``chunk_size``.
    """
    if n_traj < 1:
        raise ValidationError("n_traj must be >= 1", [("ensemble.n_traj", "must be >= 1")])
    fb, scheme, white_noise = _resolve(fb, scheme, white_noise)
    record = (checkpoint_grid(params.n_steps) if checkpoints is None
              else np.asarray(sorted(set(int(c) for c in checkpoints)), dtype=np.int64))
    if record.size and (record[0] < 0 or record[-1] > params.n_steps):
        raise ValidationError("checkpoint index out of range")
    jobs = [(s, min(s + chunk_size, n_traj), initial, params, fb, scheme, master_seed,
             record, keep_full, white_noise, clip_tol)
            for s in range(0, n_traj, chunk_size)]
    if workers is None or workers <= 1 or len(jobs) == 1:
        for job in jobs:
            yield _run_chunk(job)
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for chunk in pool.map(_run_chunk, jobs):
            yield chunk


# ----------------------------------------------------------------------------
# accumulation

class EnsembleMoments:
    """Mergeable running moments on a checkpoint grid.

    Keeps count, means and second moments of (x, y, z) plus the co-moment
    matrix of z across checkpoints.  ``merge`` is the pairwise (Chan) update,
    so combining partial results in any order agrees up to rounding.
    """

    def __init__(self, n_checkpoints: int):
        self.count = 0
        self.mean = np.zeros((n_checkpoints, 3))
        self.m2 = np.zeros((n_checkpoints, 3))
        self.czz = np.zeros((n_checkpoints, n_checkpoints))

    @classmethod
    def from_states(cls, states: np.ndarray) -> "EnsembleMoments":
        acc = cls(states.shape[1])
        if len(states) == 0:
            return acc
        acc.count = len(states)
        acc.mean = states.mean(axis=0)
        d = states - acc.mean
        acc.m2 = np.einsum("bcd,bcd->cd", d, d)
        dz = d[:, :, 2]
        acc.czz = dz.T @ dz
        return acc

    def update(self, states: np.ndarray) -> "EnsembleMoments":
        return self.merge(EnsembleMoments.from_states(states))

    def merge(self, other: "EnsembleMoments") -> "EnsembleMoments":
        if other.count == 0:
            return self
        if self.count == 0:
            self.count, self.mean = other.count, other.mean.copy()
            self.m2, self.czz = other.m2.copy(), other.czz.copy()
            return self
        na, nb = self.count, other.count
        n = na + nb
        delta = other.mean - self.mean
        self.m2 = self.m2 + other.m2 + delta * delta * (na * nb / n)
        dz = delta[:, 2]
        self.czz = self.czz + other.czz + np.outer(dz, dz) * (na * nb / n)
        self.mean = self.mean + delta * (nb / n)
        self.count = n
        return self

    @property
    def variance(self) -> np.ndarray:
        return self.m2 / max(self.count - 1, 1)

    @property
    def covariance_z(self) -> np.ndarray:
        return self.czz / max(self.count - 1, 1)


@dataclass
class EnsembleRecord:
    """Checkpoint states of a whole ensemble held in memory."""

    indices: np.ndarray
    seeds: np.ndarray
    checkpoint_index: np.ndarray
    times: np.ndarray
    states: np.ndarray

    @property
    def checkpoint_times(self):
        return self.times[self.checkpoint_index]

    @property
    def final(self):
        return self.states[:, -1, :]

    def __len__(self):
        return len(self.indices)


def collect_ensemble(n_traj: int, initial: BlochState, params: ModelParams,
                     fb: Optional[FeedbackSpec] = None, scheme=None, master_seed: int = 0, *,
                     checkpoints=None, memory_budget: int = DEFAULT_MEMORY_BUDGET,
                     **kw) -> EnsembleRecord:
    """Run an ensemble and keep its checkpoint states in memory."""
    n_cp = (len(checkpoint_grid(params.n_steps)) if checkpoints is None
            else len(set(int(c) for c in checkpoints)))
    need = n_traj * n_cp * 3 * 8
    if need > memory_budget:
        raise ResourceLimitError(
            f"{n_traj} trajectories x {n_cp} checkpoints need {need / 2**20:.0f} MiB "
            f"> budget {memory_budget / 2**20:.0f} MiB; stream simulate_ensemble instead")
    parts = list(simulate_ensemble(n_traj, initial, params, fb, scheme, master_seed,
                                   checkpoints=checkpoints, **kw))
    return EnsembleRecord(
        np.concatenate([c.indices for c in parts]),
        np.concatenate([c.seeds for c in parts]),
        parts[0].checkpoint_index, parts[0].times,
        np.concatenate([c.states for c in parts], axis=0))


# ----------------------------------------------------------------------------
# trajectory dump

_MAGIC = b"STPTRAJ1"
COLUMNS = ("t", "x", "y", "z", "r")


def _rows(tr: Trajectory) -> np.ndarray:
    r = np.append(tr.readouts, np.nan)
    return np.column_stack([tr.times, tr.states, r])


def write_trajectories(path, trajectories: Iterable[Trajectory], header: dict,
                       fmt: str = "csv") -> int:
    """Dump trajectories with a JSON header.

    Each block holds rows (t, x, y, z, r); r on row k is the readout used for
    the step from t_k to t_{k+1}, so the last row carries NaN.
    """
    count = 0
    if fmt == "csv":
        with open(path, "w", newline="\n") as fh:
            fh.write("# header " + json.dumps(header, sort_keys=True) + "\n")
            fh.write("# columns " + ",".join(COLUMNS) + "\n")
            for tr in trajectories:
                fh.write(f"# trajectory {tr.index} seed {tr.seed}\n")
                for row in _rows(tr):
                    fh.write(",".join(repr(float(v)) for v in row) + "\n")
                count += 1
    elif fmt == "binary":
        with open(path, "wb") as fh:
            head = json.dumps(header, sort_keys=True).encode()
            fh.write(_MAGIC + struct.pack("<I", len(head)) + head)
            for tr in trajectories:
                rows = _rows(tr).astype("<f8")
                idx = -1 if tr.index is None else int(tr.index)
                fh.write(struct.pack("<qQI", idx, int(tr.seed), rows.shape[0]))
                fh.write(rows.tobytes())
                count += 1
    else:
        raise ValidationError(f"unknown format {fmt!r}", [("output.format", "csv or binary")])
    return count


def read_trajectories(path) -> Tuple[dict, List[dict]]:
    """Read a dump back as (header, [{'index', 'seed', 'rows'}])."""
    with open(path, "rb") as fh:
        start = fh.read(len(_MAGIC))
    blocks = []
    if start == _MAGIC:
        with open(path, "rb") as fh:
            fh.read(len(_MAGIC))
            (hl,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(hl).decode())
            while True:
                meta = fh.read(struct.calcsize("<qQI"))
                if not meta:
                    break
                idx, seed, nr = struct.unpack("<qQI", meta)
                rows = np.frombuffer(fh.read(nr * 5 * 8), dtype="<f8").reshape(nr, 5)
                blocks.append({"index": idx, "seed": seed, "rows": rows.copy()})
        return header, blocks
    header = {}
    cur = None
    with open(path) as fh:
        for line in fh:
            if line.startswith("# header "):
                header = json.loads(line[len("# header "):])
            elif line.startswith("# trajectory "):
                parts = line.split()
                cur = {"index": int(parts[2]) if parts[2] != "None" else None,
                       "seed": int(parts[4]), "rows": []}
                blocks.append(cur)
            elif line.startswith("#") or not line.strip():
                continue
            else:
                cur["rows"].append([float(v) for v in line.split(",")])
    for b in blocks:
        b["rows"] = np.array(b["rows"])
    return header, blocks
