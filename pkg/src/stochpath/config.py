"""Run configuration: parsing, canonical emission and validation."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import yaml

from .conditioned import Postselection
from .engine import FeedbackSpec
from .errors import ValidationError
from .feedback import PhaseLockConfig
from .kernel import UpdateScheme
from .model import BlochState, ModelParams

MODES = ("simulate", "postselect", "correlate", "diagrams", "mlp", "portrait", "feedback-kz")
FORMATS = ("csv", "binary")

Violation = Tuple[str, str]

# Defaults reproduce the plain-measurement postselection run (z_I = 0,
# z_F = cos(pi/4), T = 0.6 tau_m, dt = 0.006 tau_m).
DEFAULTS: Dict[str, Any] = {
    "mode": "postselect",
    "params": {"tau_m": 1.0, "dt": 0.006, "n_steps": 100, "gamma": 0.0,
               "epsilon": 0.0, "delta": 0.0},
    "initial": {"x": 1.0, "y": 0.0, "z": 0.0},
    "fb": {"variant": "none", "delta0": 0.0, "delta1": 0.0, "delta_d": 0.0, "F": 0.0},
    "ensemble": {"n_traj": 500000, "master_seed": 0, "scheme": None,
                 "chunk_size": 2048, "checkpoints": 20, "workers": None},
    "selection": {"z_F": math.cos(math.pi / 4), "tolerance": 0.02},
    "output": {"directory": "out", "format": "csv"},
    "correlate": {"t_ref": None, "tau_max": None, "n_points": 41, "monte_carlo": True},
    "diagrams": {"endings": [["v", 0.3], ["v", 0.2]]},
    "mlp": {"theta_I": 1.2 * math.pi, "T": 10.0, "theta_F": None,
            "p_range": [-10.0, 10.0], "n_scan": 400, "n_out": 501},
    "portrait": {"energies": [-0.5, -0.45, -0.4, -0.3, -0.2, -0.1, 0.0, 0.2],
                 "n_points": 2001},
    "feedback_kz": {"delta_d": 20.0, "F": 0.3, "n_traj": 200, "n_periods": 10,
                    "dt": None, "tau_max": None, "n_tau": 81, "burn_in": None},
}

_SECTIONS = tuple(k for k in DEFAULTS if isinstance(DEFAULTS[k], dict))


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class RunConfig:
    """A fully resolved run description (every section present)."""

    data: Dict[str, Any] = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def from_dict(cls, d: Optional[Dict[str, Any]]) -> "RunConfig":
        d = dict(d or {})
        if "config" in d and "manifest_version" in d:
            d = d["config"]
        d = copy.deepcopy(d)
        p = d.get("params")
        if isinstance(p, dict) and "eta" in p:
            eta = p.pop("eta")
            tau = p.get("tau_m", DEFAULTS["params"]["tau_m"])
            try:
                p.setdefault("gamma", 0.5 / (tau * eta) - 0.5 / tau)
            except (TypeError, ZeroDivisionError):
                p["gamma"] = float("nan")
        if isinstance(p, dict) and "T" in p:
            T = p.pop("T")
            dt = p.get("dt", DEFAULTS["params"]["dt"])
            try:
                p.setdefault("n_steps", int(round(T / dt)))
            except (TypeError, ZeroDivisionError):
                p["n_steps"] = -1
        init = d.get("initial")
        if isinstance(init, dict) and "theta" in init:
            th = init.pop("theta")
            init.update({"x": 0.0, "y": math.sin(th), "z": math.cos(th)})
        return cls(_merge(DEFAULTS, d))

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh) or {})

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        return cls.from_dict(yaml.safe_load(text) or {})

    def to_dict(self) -> Dict[str, Any]:
        return copy.deepcopy(self.data)

    def emit(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=True, default_flow_style=False)

    def __getitem__(self, key):
        return self.data[key]

    @property
    def mode(self) -> str:
        return self.data["mode"]

    # typed views ----------------------------------------------------------
    def model_params(self) -> ModelParams:
        return ModelParams(**self.data["params"])

    def initial_state(self) -> BlochState:
        i = self.data["initial"]
        return BlochState(float(i["x"]), float(i["y"]), float(i["z"]))

    def feedback(self) -> FeedbackSpec:
        return FeedbackSpec(**self.data["fb"])

    def scheme(self) -> Optional[UpdateScheme]:
        s = self.data["ensemble"]["scheme"]
        return None if s is None else UpdateScheme.parse(s)

    def selection(self) -> Postselection:
        s = self.data["selection"]
        return Postselection(float(s["z_F"]), float(s["tolerance"]))

    def phase_lock(self) -> PhaseLockConfig:
        k = self.data["feedback_kz"]
        return PhaseLockConfig(float(k["delta_d"]), float(k["F"]))


def _num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def validate(config) -> List[Violation]:
    """Every violated invariant as (field path, message); empty means runnable."""
    cfg = config if isinstance(config, RunConfig) else RunConfig.from_dict(config)
    d = cfg.data
    out: List[Violation] = []
    unknown = set(d) - set(DEFAULTS)
    for k in sorted(unknown):
        out.append((k, "unknown section"))
    if d["mode"] not in MODES:
        out.append(("mode", f"must be one of {MODES}"))
    p = d["params"]
    extra = set(p) - set(DEFAULTS["params"])
    for k in sorted(extra):
        out.append((f"params.{k}", "unknown field"))
    out += ModelParams.check(p.get("tau_m"), p.get("dt"), p.get("n_steps"), p.get("gamma"),
                             p.get("epsilon"), p.get("delta"), prefix="params.")
    i = d["initial"]
    if not all(_num(i.get(k)) for k in "xyz"):
        out.append(("initial", "x, y, z must be finite reals"))
    elif i["x"] ** 2 + i["y"] ** 2 + i["z"] ** 2 > 1 + 1e-9:
        out.append(("initial", "state lies outside the Bloch ball"))
    fb = d["fb"]
    if fb.get("variant") not in ("none", "direct-linear", "phase-lock"):
        out.append(("fb.variant", "must be none, direct-linear or phase-lock"))
    for k in ("delta0", "delta1", "delta_d", "F"):
        if not _num(fb.get(k)):
            out.append((f"fb.{k}", "must be a finite real"))
    if fb.get("variant") == "phase-lock" and not out:
        out += PhaseLockConfig.check(fb["delta_d"], fb["F"], prefix="fb.")
    e = d["ensemble"]
    if not (isinstance(e.get("n_traj"), int) and e["n_traj"] >= 1):
        out.append(("ensemble.n_traj", "must be a positive integer"))
    if not (isinstance(e.get("master_seed"), int) and e["master_seed"] >= 0):
        out.append(("ensemble.master_seed", "must be a non-negative integer"))
    if not (isinstance(e.get("chunk_size"), int) and e["chunk_size"] >= 1):
        out.append(("ensemble.chunk_size", "must be a positive integer"))
    if not (isinstance(e.get("checkpoints"), int) and e["checkpoints"] >= 2):
        out.append(("ensemble.checkpoints", "must be an integer >= 2"))
    w = e.get("workers")
    if w is not None and not (isinstance(w, int) and w >= 1):
        out.append(("ensemble.workers", "must be a positive integer or null"))
    if e.get("scheme") is not None:
        try:
            UpdateScheme.parse(e["scheme"])
        except ValidationError as exc:
            out.append(("ensemble.scheme", str(exc)))
    s = d["selection"]
    if not _num(s.get("z_F")) or not abs(s["z_F"]) < 1:
        out.append(("selection.z_F", "must satisfy |z_F| < 1"))
    if not _num(s.get("tolerance")) or not s["tolerance"] > 0:
        out.append(("selection.tolerance", "must be > 0"))
    o = d["output"]
    if o.get("format") not in FORMATS:
        out.append(("output.format", f"must be one of {FORMATS}"))
    if not isinstance(o.get("directory"), str) or not o["directory"]:
        out.append(("output.directory", "must be a nonempty path"))
    m = d["mlp"]
    if not _num(m.get("theta_I")):
        out.append(("mlp.theta_I", "must be a finite real"))
    if not _num(m.get("T")) or not m["T"] > 0:
        out.append(("mlp.T", "must be > 0"))
    pr = m.get("p_range")
    if not (isinstance(pr, (list, tuple)) and len(pr) == 2 and all(_num(v) for v in pr) and pr[0] < pr[1]):
        out.append(("mlp.p_range", "must be [low, high] with low < high"))
    if not (isinstance(m.get("n_scan"), int) and m["n_scan"] >= 2):
        out.append(("mlp.n_scan", "must be an integer >= 2"))
    k = d["feedback_kz"]
    if _num(k.get("delta_d")) and _num(k.get("F")):
        out += PhaseLockConfig.check(k["delta_d"], k["F"], prefix="feedback_kz.")
    else:
        out.append(("feedback_kz", "delta_d and F must be finite reals"))
    if not (isinstance(k.get("n_traj"), int) and k["n_traj"] >= 2):
        out.append(("feedback_kz.n_traj", "must be an integer >= 2"))
    en = d["diagrams"].get("endings")
    if not isinstance(en, list) or not all(isinstance(x, (list, tuple)) and len(x) == 2 for x in en):
        out.append(("diagrams.endings", "must be a list of [flavor, time] pairs"))
    c = d["correlate"]
    if not (isinstance(c.get("n_points"), int) and c["n_points"] >= 2):
        out.append(("correlate.n_points", "must be an integer >= 2"))
    return out


def config_warnings(config) -> List[Violation]:
    cfg = config if isinstance(config, RunConfig) else RunConfig.from_dict(config)
    d = cfg.data
    out = []
    tau = d["params"].get("tau_m", 1.0)
    fb = d["fb"]
    if _num(fb.get("delta1")) and _num(tau) and abs(fb["delta1"] * tau) > 1 \
            and (d["mode"] in ("portrait", "mlp") or fb.get("variant") == "direct-linear"):
        out.append(("fb.delta1", "|delta1 * tau_m| > 1: no attractors"))
    k = d["feedback_kz"]
    if d["mode"] == "feedback-kz" and _num(k.get("delta_d")) and _num(tau) and abs(k["delta_d"]) * tau < 10:
        out.append(("feedback_kz.delta_d", "delta_d tau_m < 10: outside the diffusive regime"))
    return out
