"""Command-line entry point: ``stochpath --mode ... --config ...``."""

from __future__ import annotations

import argparse
import json
import math
import os
import platform
import sys
import time
import warnings
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import yaml

from . import __version__
from .conditioned import (
    SeriesTruncationWarning,
    optimal_path_u,
    postselect,
    stats_rows,
)
from .config import RunConfig, config_warnings, validate
from .diagrams import (
    cov_zz,
    dump_diagrams,
    enumerate_tree,
    mean_z,
    var_z,
    variance_limit,
)
from .engine import (
    FeedbackSpec,
    default_scheme,
    checkpoint_grid,
    collect_ensemble,
    simulate_ensemble,
    write_trajectories,
)
from .errors import StochPathError, ValidationError
from .feedback import simulate_kz, write_kz_csv
from .mlp import attractors, portrait_curve, solve_mlp, write_mlp_csv, write_portrait_csv
from .model import eigensystem, to_diagonal

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2
MANIFEST_VERSION = 1


def default_workers() -> int:
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:
        return max(1, os.cpu_count() or 1)


class _Run:
    def __init__(self, cfg: RunConfig, workers: int):
        self.cfg = cfg
        self.workers = workers
        self.out = Path(cfg["output"]["directory"])
        self.t0 = time.time()
        self.files: List[str] = []
        self.extra: Dict = {}

    def path(self, name: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        return self.out / name

    def manifest(self, data_path: Path, **extra):
        man = {
            "manifest_version": MANIFEST_VERSION,
            "config": self.cfg.to_dict(),
            "resolved": {"workers": self.workers,
                         "scheme": str(self._scheme()) if self.cfg.mode in
                         ("simulate", "postselect", "correlate") else None,
                         **self.extra, **extra},
            "seed": self.cfg["ensemble"]["master_seed"],
            "file": data_path.name,
            "code_version": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "wall_time_s": round(time.time() - self.t0, 3),
        }
        mp = data_path.with_name(data_path.name + ".manifest.json")
        with open(mp, "w") as fh:
            json.dump(man, fh, indent=2, sort_keys=True, default=_jsonable)
            fh.write("\n")
        self.files += [str(data_path), str(mp)]

    def _scheme(self):
        s = self.cfg.scheme()
        return s if s is not None else default_scheme(self.cfg.feedback())


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _write_rows(path: Path, header: str, rows):
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


# ----------------------------------------------------------------------------
# modes

def _mode_simulate(run: _Run):
    cfg = run.cfg
    params, init, fb = cfg.model_params(), cfg.initial_state(), cfg.feedback()
    e = cfg["ensemble"]
    fmt = cfg["output"]["format"]
    chunks = simulate_ensemble(e["n_traj"], init, params, fb, cfg.scheme(), e["master_seed"],
                               workers=run.workers, chunk_size=e["chunk_size"], keep_full=True)
    trajs = (tr for ch in chunks for tr in ch.trajectories())
    p = run.path("trajectories.csv" if fmt == "csv" else "trajectories.bin")
    header = {"mode": "simulate", "n_traj": e["n_traj"], "master_seed": e["master_seed"],
              "scheme": str(run._scheme()), "params": cfg["params"]}
    n = write_trajectories(p, trajs, header, fmt)
    run.manifest(p, n_written=n)


def _mode_postselect(run: _Run):
    cfg = run.cfg
    params, init, fb = cfg.model_params(), cfg.initial_state(), cfg.feedback()
    e = cfg["ensemble"]
    sel = cfg.selection()
    cps = checkpoint_grid(params.n_steps, e["checkpoints"])
    chunks = simulate_ensemble(e["n_traj"], init, params, fb, cfg.scheme(), e["master_seed"],
                               workers=run.workers, chunk_size=e["chunk_size"], checkpoints=cps)
    T = params.total_time
    res = postselect(chunks, sel, z_I=init.z, T=T, tau_m=params.tau_m)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SeriesTruncationWarning)
        rows = stats_rows(res, init.z, T, params.tau_m, order=1)
    p = run.path("postselect_stats.csv")
    _write_rows(p, "t,mean_analytic,mean_empirical,var_analytic,var_empirical,stderr", rows)
    run.manifest(p, n_total=res.n_total, n_accepted=res.n_accepted, fraction=res.fraction,
                 predicted_fraction=res.predicted_fraction, analytic_order=1)
    p = run.path("postselect_corr.csv")
    times = res.times
    with open(p, "w") as fh:
        fh.write("t," + ",".join(repr(float(t)) for t in times) + "\n")
        for t, row in zip(times, res.cov):
            fh.write(repr(float(t)) + "," + ",".join(repr(float(v)) for v in row) + "\n")
    run.manifest(p, kind="empirical connected z-z covariance on the checkpoint grid")
    p = run.path("postselect_path.csv")
    u = optimal_path_u(init.z, sel.z_F, T, times)
    _write_rows(p, "t,u_opt,z_opt", zip(times, u, np.tanh(u)))
    run.manifest(p)


def _mode_correlate(run: _Run):
    cfg = run.cfg
    params, init = cfg.model_params(), cfg.initial_state()
    c = cfg["correlate"]
    T = params.total_time
    frame = eigensystem(params, require_beta=True)
    ts = np.linspace(0.0, T, c["n_points"])[1:]
    t_ref = c["t_ref"] if c["t_ref"] is not None else 0.5 * T
    tau_max = c["tau_max"] if c["tau_max"] is not None else T - t_ref
    taus = np.linspace(0.0, min(tau_max, T - t_ref), c["n_points"])
    var_tree = [var_z(t, init, params, frame) for t in ts]
    cov_tree = [cov_zz(t_ref, t_ref + s, init, params, frame) for s in taus]
    mc_var = se_var = [math.nan] * len(ts)
    mc_cov = se_cov = [math.nan] * len(taus)
    if c["monte_carlo"]:
        e = cfg["ensemble"]
        steps = sorted({int(round(t / params.dt)) for t in ts}
                       | {int(round((t_ref + s) / params.dt)) for s in taus})
        rec = collect_ensemble(e["n_traj"], init, params, cfg.feedback(), cfg.scheme(), e["master_seed"],
                               checkpoints=steps, workers=run.workers, chunk_size=e["chunk_size"])
        z = rec.states[:, :, 2]
        col = {k: j for j, k in enumerate(rec.checkpoint_index)}
        N = len(z)
        def stats(a, b):
            za, zb = z[:, col[a]], z[:, col[b]]
            prod = (za - za.mean()) * (zb - zb.mean())
            return prod.sum() / (N - 1), prod.std(ddof=1) / math.sqrt(N)
        vs = [stats(int(round(t / params.dt)), int(round(t / params.dt))) for t in ts]
        cs = [stats(int(round(t_ref / params.dt)), int(round((t_ref + s) / params.dt))) for s in taus]
        mc_var, se_var = [v for v, _ in vs], [s for _, s in vs]
        mc_cov, se_cov = [v for v, _ in cs], [s for _, s in cs]
    p = run.path("correlate_variance.csv")
    _write_rows(p, "t,mean_z,var_tree,var_mc,stderr",
                zip(ts, mean_z(ts, init, params), var_tree, mc_var, se_var))
    lim = variance_limit(params) if params.delta != 0 else math.nan
    run.manifest(p, variance_limit=lim)
    p = run.path("correlate_cov.csv")
    _write_rows(p, "tau,cov_tree,cov_mc,stderr", zip(taus, cov_tree, mc_cov, se_cov))
    run.manifest(p, t_ref=t_ref)


def _mode_diagrams(run: _Run):
    cfg = run.cfg
    params, init = cfg.model_params(), cfg.initial_state()
    endings = [(str(f), float(t)) for f, t in cfg["diagrams"]["endings"]]
    ds = enumerate_tree(endings)
    frame = eigensystem(params, require_beta=True) if params.delta != 0 else None
    uvw = to_diagonal(init, frame, params) if frame is not None else None
    text = dump_diagrams(ds, frame, uvw)
    p = run.path("diagrams.txt")
    with open(p, "w") as fh:
        fh.write(text)
    total = sum((d.value for d in ds if d.value is not None), 0j) if frame is not None else None
    run.manifest(p, n_diagrams=len(ds), total=None if total is None else [total.real, total.imag])


def _mlp_fb(cfg: RunConfig) -> FeedbackSpec:
    fb = cfg["fb"]
    return FeedbackSpec.direct_linear(fb["delta0"], fb["delta1"])


def _mode_mlp(run: _Run):
    cfg = run.cfg
    m = cfg["mlp"]
    tau = cfg["params"]["tau_m"]
    fb = _mlp_fb(cfg)
    res = solve_mlp(m["theta_I"], m["T"], tau, fb, theta_F=m["theta_F"],
                    p_range=tuple(m["p_range"]), n_scan=m["n_scan"], n_out=m["n_out"])
    for s in res:
        p = run.path(f"mlp_branch{s.branch_id}.csv")
        write_mlp_csv(p, s, tau, fb)
        run.manifest(p, E=s.E, loglik=s.loglik, p0=s.p0, energy_drift=s.energy_drift,
                     scan_range=list(res.scan_range), n_scan=len(res.scan_p0))
    p = run.path("mlp_scan.csv")
    _write_rows(p, "p0,residual", zip(res.scan_p0, res.scan_residual))
    run.manifest(p, n_solutions=len(res), scan_range=list(res.scan_range))


def _mode_portrait(run: _Run):
    cfg = run.cfg
    tau = cfg["params"]["tau_m"]
    fb = _mlp_fb(cfg)
    n = cfg["portrait"]["n_points"]
    curves = []
    skipped = []
    for E in cfg["portrait"]["energies"]:
        if 1 + 2 * E * tau < 0:
            skipped.append(E)
            continue
        for b in (1, -1):
            curves.append(portrait_curve(E, tau, fb, b, n_points=n))
    p = run.path("portrait.csv")
    write_portrait_csv(p, curves)
    run.manifest(p, attractors=attractors(tau, fb), skipped_energies=skipped)


def _mode_feedback_kz(run: _Run):
    cfg = run.cfg
    k = cfg["feedback_kz"]
    tau = cfg["params"]["tau_m"]
    pl = cfg.phase_lock()
    est = simulate_kz(pl, tau, k["n_traj"], dt=k["dt"], n_periods=k["n_periods"],
                      tau_max=k["tau_max"], n_tau=k["n_tau"], burn_in=k["burn_in"],
                      master_seed=cfg["ensemble"]["master_seed"], workers=run.workers,
                      scheme=cfg["ensemble"]["scheme"])
    p = run.path("kz.csv")
    write_kz_csv(p, est, pl, tau)
    run.manifest(p, window=list(est.window), burn_in=est.burn_in, n_traj=est.n_traj,
                 dt=k["dt"] if k["dt"] is not None else pl.period / 64)


_MODES = {"simulate": _mode_simulate, "postselect": _mode_postselect,
          "correlate": _mode_correlate, "diagrams": _mode_diagrams, "mlp": _mode_mlp,
          "portrait": _mode_portrait, "feedback-kz": _mode_feedback_kz}


def _error_record(kind: str, exc: BaseException, violations=None) -> Dict:
    rec = {"status": "error", "kind": kind, "error": type(exc).__name__, "message": str(exc)}
    if violations:
        rec["violations"] = [{"path": p, "message": m} for p, m in violations]
    return rec


def run(config, *, workers: Optional[int] = None, stream=None) -> int:
    """Execute one configured run; returns the process exit status."""
    stream = sys.stderr if stream is None else stream
    try:
        cfg = config if isinstance(config, RunConfig) else RunConfig.from_dict(config)
    except (yaml.YAMLError, TypeError, ValueError) as exc:
        print(json.dumps(_error_record("validation", exc)), file=stream)
        return EXIT_INVALID
    problems = validate(cfg)
    if problems:
        exc = ValidationError("; ".join(f"{p}: {m}" for p, m in problems), problems)
        print(json.dumps(_error_record("validation", exc, problems)), file=stream)
        return EXIT_INVALID
    for p, m in config_warnings(cfg):
        print(json.dumps({"status": "warning", "path": p, "message": m}), file=stream)
    w = workers if workers is not None else cfg["ensemble"]["workers"]
    w = default_workers() if w is None else int(w)
    r = _Run(cfg, w)
    try:
        _MODES[cfg.mode](r)
    except ValidationError as exc:
        print(json.dumps(_error_record("validation", exc, exc.violations)), file=stream)
        return EXIT_INVALID
    except (StochPathError, ArithmeticError, ValueError, OSError, MemoryError) as exc:
        print(json.dumps(_error_record("runtime", exc)), file=stream)
        return EXIT_RUNTIME
    print(json.dumps({"status": "ok", "mode": cfg.mode, "files": r.files}), file=stream)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stochpath",
                                 description="Qubit trajectory statistics, diagrams and most-likely paths.")
    ap.add_argument("--config", help="YAML (or JSON manifest) run configuration")
    ap.add_argument("--mode", choices=sorted(_MODES), help="override the configured mode")
    ap.add_argument("--seed", type=int, help="master seed (env STOCHPATH_SEED)")
    ap.add_argument("--workers", type=int, help="worker processes (env STOCHPATH_WORKERS)")
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--format", choices=("csv", "binary"), help="trajectory dump format")
    ap.add_argument("--n-traj", type=int, dest="n_traj", help="override ensemble.n_traj")
    ap.add_argument("--print-config", action="store_true",
                    help="print the resolved canonical configuration and exit")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
    except (OSError, yaml.YAMLError) as exc:
        print(json.dumps(_error_record("validation", exc)), file=sys.stderr)
        return EXIT_INVALID
    d = cfg.to_dict()
    env_seed = os.environ.get("STOCHPATH_SEED")
    env_workers = os.environ.get("STOCHPATH_WORKERS")
    try:
        if env_seed is not None:
            d["ensemble"]["master_seed"] = int(env_seed)
        if env_workers is not None:
            d["ensemble"]["workers"] = int(env_workers)
    except ValueError as exc:
        print(json.dumps(_error_record("validation", exc)), file=sys.stderr)
        return EXIT_INVALID
    if args.mode:
        d["mode"] = args.mode
    if args.seed is not None:
        d["ensemble"]["master_seed"] = args.seed
    if args.workers is not None:
        d["ensemble"]["workers"] = args.workers
    if args.out:
        d["output"]["directory"] = args.out
    if args.format:
        d["output"]["format"] = args.format
    if args.n_traj is not None:
        d["ensemble"]["n_traj"] = args.n_traj
    cfg = RunConfig(d)
    if args.print_config:
        sys.stdout.write(cfg.emit())
        return EXIT_OK
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
