"""Tree-level diagrams for the noise-driven (u, v, w) dynamics.

Every interaction vertex carries exactly one conjugate leg, so the field
propagators form a forest whose roots are the field endings; noise legs pair
up through delta-function edges.  Tree level means the combined graph has no
cycles.  The combinatorial factor of a diagram is the number of Wick
contractions producing it divided by the 1/m! of repeated vertices, which
reduces to the number of distinct leg orderings at vertices with two
identical field legs.

Propagators are Theta(t - t') exp(lambda (t - t')) with Theta(0) = 0, so a
field can only connect to a strictly earlier conjugate.
"""

from __future__ import annotations

import cmath
import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate

from .errors import (
    LoopOrderError,
    NumericalConsistencyError,
    UnsupportedFlavorError,
    ValidationError,
)
from .model import BlochState, DiagonalFrame, ModelParams, eigensystem, to_diagonal

FIELDS = ("u", "v", "w")
FLAVORS = FIELDS + ("xi",)
EXP_TOL = 1e-12
IMAG_TOL = 1e-9


@dataclass(frozen=True)
class Vertex:
    """One interaction term: a conjugate leg p_<conj>, field legs and maybe a noise leg."""

    kind: str
    conj: str
    fields: Tuple[str, ...] = ()
    noise: bool = False

    @property
    def is_initial(self) -> bool:
        return not self.noise

    @property
    def symmetric(self) -> bool:
        return len(self.fields) == 2 and self.fields[0] == self.fields[1]

    def weight(self, frame: DiagonalFrame, initial: Sequence[complex]) -> complex:
        i = FIELDS.index(self.conj)
        if not self.noise:
            return complex(initial[i])
        if not self.fields:
            return complex(frame.kappas[i])
        return complex(frame.alpha)


def _catalog() -> Dict[str, Vertex]:
    out = {}
    for f in FIELDS:
        out[f"p_{f}0"] = Vertex(f"p_{f}0", f)
    for f in FIELDS:
        for g in ("v", "w"):
            k = f"p_{f} {f}{g} xi"
            out[k] = Vertex(k, f, (f, g), True)
    for f in FIELDS:
        k = f"p_{f} xi"
        out[k] = Vertex(k, f, (), True)
    return out


VERTICES: Dict[str, Vertex] = _catalog()


def propagator(flavor: str, t, t_prime, frame: DiagonalFrame):
    """G_f(t, t') = Theta(t - t') exp(lambda_f (t - t')), Theta(0) = 0."""
    if flavor not in FIELDS:
        raise UnsupportedFlavorError(f"no field propagator for {flavor!r}")
    lam = frame.lambdas[FIELDS.index(flavor)]
    d = np.asarray(t, dtype=float) - np.asarray(t_prime, dtype=float)
    out = np.where(d > 0, np.exp(lam * np.where(d > 0, d, 0.0)), 0.0)
    return out[()] if out.ndim == 0 else out


# ----------------------------------------------------------------------------
# diagram records

@dataclass
class Diagram:
    """A tree-level diagram.

    Nodes 0..E-1 are the endings, the rest are vertices.  ``parents[i]`` is
    the node whose field leg the conjugate of vertex ``E + i`` attaches to.
    """

    endings: Tuple[Tuple[str, float], ...]
    vertices: Tuple[Vertex, ...]
    parents: Tuple[int, ...]
    noise_edges: Tuple[Tuple[int, int], ...]
    factor: int = 1
    order: int = 0
    loops: int = 0
    value: Optional[complex] = None

    @property
    def n_endings(self) -> int:
        return len(self.endings)

    def node_kind(self, i: int) -> str:
        E = self.n_endings
        if i < E:
            return f"{self.endings[i][0]}(t{i + 1})"
        return self.vertices[i - E].kind

    def field_edges(self) -> List[Tuple[int, int, str]]:
        E = self.n_endings
        return [(p, E + i, self.vertices[i].conj) for i, p in enumerate(self.parents)]

    def with_times(self, times: Sequence[float]) -> "Diagram":
        ends = tuple((f, float(t)) for (f, _), t in zip(self.endings, times))
        return Diagram(ends, self.vertices, self.parents, self.noise_edges,
                       self.factor, self.order, self.loops, None)

    def describe(self) -> str:
        lines = ["endings: " + ", ".join(f"{f}@{t:g}" for f, t in self.endings),
                 "vertices: " + (", ".join(v.kind for v in self.vertices) or "-")]
        fe = ", ".join(f"{self.node_kind(c)}[{c}]->{self.node_kind(p)}[{p}]"
                       for p, c, _ in self.field_edges())
        ne = ", ".join(f"{self.node_kind(a)}[{a}]~{self.node_kind(b)}[{b}]"
                       for a, b in self.noise_edges)
        lines.append("field edges: " + (fe or "-"))
        lines.append("noise edges: " + (ne or "-"))
        lines.append(f"factor: {self.factor}  order: {self.order}  loops: {self.loops}")
        if self.value is not None:
            lines.append(f"value: {self.value.real:.12g}{self.value.imag:+.12g}j")
        return "\n".join(lines)


# ----------------------------------------------------------------------------
# enumeration

def _normalise_flavor(f) -> str:
    s = str(f).strip().lower()
    if s in ("ξ", "xi", "noise"):
        return "xi"
    if s in FIELDS:
        return s
    raise UnsupportedFlavorError(f"unsupported ending flavor {f!r}; use one of {FLAVORS}")


def _forests(root_slots, n_noise):
    """All ordered forests with exactly n_noise noise vertices.

    Returns tuples of (kind, parent, slot position).  Slots are filled in
    breadth-first order so the position of every node is canonical.
    """
    out = []

    def rec(queue, built, left):
        if not queue:
            if left == 0:
                out.append(tuple(built))
            return
        (parent, pos, f), rest = queue[0], queue[1:]
        me = len(built)
        rec(rest, built + [(f"p_{f}0", parent, pos)], left)
        if left >= 1:
            rec(rest, built + [(f"p_{f} xi", parent, pos)], left - 1)
            for g in ("v", "w"):
                kind = f"p_{f} {f}{g} xi"
                rec(rest + [(("v", me), 0, f), (("v", me), 1, g)],
                    built + [(kind, parent, pos)], left - 1)

    rec(list(root_slots), [], n_noise)
    return out


class _DSU:
    def __init__(self, n):
        self.p = list(range(n))

    def find(self, a):
        while self.p[a] != a:
            self.p[a] = self.p[self.p[a]]
            a = self.p[a]
        return a

    def union(self, a, b) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.p[ra] = rb
        return True

    def copy(self):
        d = _DSU(0)
        d.p = list(self.p)
        return d


def _matchings(legs, dsu):
    """Perfect matchings of noise legs that keep the graph acyclic."""
    if not legs:
        yield ()
        return
    a, rest = legs[0], legs[1:]
    for i, b in enumerate(rest):
        d = dsu.copy()
        if not d.union(a, b):
            continue
        for m in _matchings(rest[:i] + rest[i + 1:], d):
            yield ((a, b),) + m


def _canonical(E, kinds, parents, positions, noise_edges):
    sym = [i for i, k in enumerate(kinds) if VERTICES[k].symmetric]
    best = None
    for bits in itertools.product((0, 1), repeat=len(sym)):
        flip = {E + sym[j] for j, b in enumerate(bits) if b}
        paths = {e: (e,) for e in range(E)}
        for i in range(len(kinds)):
            p = parents[i]
            pos = positions[i]
            if p in flip:
                pos = 1 - pos
            paths[E + i] = paths[p] + (pos,)
        nodes = tuple(sorted((paths[E + i], kinds[i]) for i in range(len(kinds))))
        edges = tuple(sorted(tuple(sorted((paths[a], paths[b]))) for a, b in noise_edges))
        key = (nodes, edges)
        if best is None or key < best:
            best = key
    return best


@lru_cache(maxsize=64)
def _enumerate_flavors(flavors: Tuple[str, ...]) -> Tuple[Diagram, ...]:
    E = len(flavors)
    if E == 0:
        return (Diagram((), (), (), (), 1, 0, 0),)
    field_roots = [i for i, f in enumerate(flavors) if f != "xi"]
    n_xi = E - len(field_roots)
    n_max = 2 * len(field_roots) + n_xi - 2
    groups: Dict[tuple, list] = {}
    order_keys = []
    for n_noise in range(0, max(n_max, 0) + 1):
        if (n_noise + n_xi) % 2:
            continue
        for forest in _forests([(("e", i), 0, flavors[i]) for i in field_roots], n_noise):
            kinds = [k for k, _, _ in forest]
            parents = []
            for _, par, _ in forest:
                parents.append(par[1] if par[0] == "e" else E + par[1])
            positions = [pos for _, _, pos in forest]
            n = E + len(kinds)
            dsu = _DSU(n)
            for i, p in enumerate(parents):
                dsu.union(p, E + i)
            legs = [i for i, f in enumerate(flavors) if f == "xi"]
            legs += [E + i for i, k in enumerate(kinds) if VERTICES[k].noise]
            for m in _matchings(legs, dsu):
                key = _canonical(E, kinds, parents, positions, m)
                if key not in groups:
                    groups[key] = [0, (kinds, parents, m)]
                    order_keys.append(key)
                groups[key][0] += 1
    out = []
    for key in order_keys:
        count, (kinds, parents, m) = groups[key]
        V = len(kinds)
        I = len(parents) + len(m)
        n = E + V
        dsu = _DSU(n)
        for i, p in enumerate(parents):
            dsu.union(p, E + i)
        for a, b in m:
            dsu.union(a, b)
        C = len({dsu.find(i) for i in range(n)})
        loops = I - n + C
        out.append(Diagram(tuple((f, 0.0) for f in flavors),
                           tuple(VERTICES[k] for k in kinds), tuple(parents),
                           tuple(m), count, E + I - V, loops))
    return tuple(out)


def enumerate_tree(endings: Sequence[Tuple[str, float]], loops: int = 0) -> List[Diagram]:
    """All tree-level diagrams for the given ending vertices."""
    if loops != 0:
        raise LoopOrderError("only tree-level (zero-loop) diagrams are implemented")
    flavors = tuple(_normalise_flavor(f) for f, _ in endings)
    times = [float(t) for _, t in endings]
    return [d.with_times(times) for d in _enumerate_flavors(flavors)]


# ----------------------------------------------------------------------------
# evaluation

def _time_structure(d: Diagram):
    """Map every node to ('fixed', t) or ('var', k) and collect per-variable exponents."""
    E = d.n_endings
    n = E + len(d.vertices)
    slot: Dict[int, tuple] = {}
    for i, (f, t) in enumerate(d.endings):
        slot[i] = ("fixed", t)
    for i, v in enumerate(d.vertices):
        if v.is_initial:
            slot[E + i] = ("fixed", 0.0)
    n_var = 0
    delta_checks = []
    for a, b in d.noise_edges:
        fa, fb = slot.get(a), slot.get(b)
        if fa is not None and fb is not None:
            delta_checks.append((fa[1], fb[1]))
        elif fa is not None:
            slot[b] = fa
        elif fb is not None:
            slot[a] = fb
        else:
            slot[a] = slot[b] = ("var", n_var)
            n_var += 1
    assert len(slot) == n
    return slot, n_var, delta_checks


def _prepare(d: Diagram, frame: DiagonalFrame, initial):
    for f, t in d.endings:
        if not t > 0:
            raise ValidationError("ending times must be > 0", [("endings", f"time {t}")])
    slot, n_var, delta_checks = _time_structure(d)
    for ta, tb in delta_checks:
        if ta == tb:
            raise ValidationError("noise-noise ending pair at coincident times is a bare delta")
    if delta_checks:
        return None
    const = complex(d.factor)
    for v in d.vertices:
        const *= v.weight(frame, initial)
    expo = [0j] * n_var
    less = set()          # (a, b): a < b, items are ('var', k) or ('fixed', t)
    for p, c, f in d.field_edges():
        lam = frame.lambdas[FIELDS.index(f)]
        sp, sc = slot[p], slot[c]
        if sp[0] == "fixed" and sc[0] == "fixed":
            if not sp[1] > sc[1]:
                return None
            const *= cmath.exp(lam * (sp[1] - sc[1]))
            continue
        if sp[0] == "fixed":
            const *= cmath.exp(lam * sp[1])
        else:
            expo[sp[1]] += lam
        if sc[0] == "fixed":
            const *= cmath.exp(-lam * sc[1])
        else:
            expo[sc[1]] -= lam
        if not (sc[0] == "fixed" and sc[1] == 0.0):
            less.add((sc, sp))
    return const, expo, less, n_var


def _linear_extensions(items, less):
    preds = {it: {a for a, b in less if b == it} for it in items}

    def rec(placed, remaining):
        if not remaining:
            yield list(placed)
            return
        for it in sorted(remaining, key=repr):
            if preds[it] <= set(placed):
                yield from rec(placed + [it], remaining - {it})

    yield from rec([], frozenset(items))


def _antiderivative(terms, a_v):
    """Indefinite integral of sum c s^k e^{a s} times e^{a_v s}."""
    out = []
    for c, k, a in terms:
        b = a + a_v
        if abs(b) < EXP_TOL:
            out.append((c / (k + 1), k + 1, 0j))
            continue
        fact = 1.0
        for j in range(k + 1):
            # (-1)^j k!/(k-j)! / b^(j+1)
            out.append((c * (-1) ** j * fact / b ** (j + 1), k - j, b))
            fact *= (k - j)
    return out


def _eval_terms(terms, x):
    return sum(c * x ** k * cmath.exp(a * x) for c, k, a in terms)


def _chain_integral(chain, expo):
    terms = [(1 + 0j, 0, 0j)]
    lower = 0.0
    for it in chain:
        if it[0] == "fixed":
            terms = [(_eval_terms(terms, it[1]), 0, 0j)]
            lower = it[1]
        else:
            anti = _antiderivative(terms, expo[it[1]])
            terms = anti + [(-_eval_terms(anti, lower), 0, 0j)]
    if chain and chain[-1][0] == "var":
        raise NumericalConsistencyError("a time variable has no later bound")
    return terms[0][0]


def evaluate_diagram(d: Diagram, frame: DiagonalFrame, initial: Sequence[complex],
                     T: Optional[float] = None) -> complex:
    """Closed-form value of a diagram, including vertex constants and factor."""
    if T is not None and any(t > T * (1 + 1e-12) for _, t in d.endings):
        raise ValidationError("ending time beyond T", [("endings", "time > T")])
    prep = _prepare(d, frame, initial)
    if prep is None:
        return 0j
    const, expo, less, n_var = prep
    if n_var == 0:
        return const
    fixed = sorted({s for pair in less for s in pair if s[0] == "fixed"}, key=lambda s: s[1])
    rel = set(less)
    for a, b in zip(fixed, fixed[1:]):
        rel.add((a, b))
    items = set(fixed) | {("var", k) for k in range(n_var)}
    total = 0j
    for chain in _linear_extensions(items, rel):
        total += _chain_integral(chain, expo)
    return const * total


def evaluate_quadrature(d: Diagram, frame: DiagonalFrame, initial: Sequence[complex],
                        epsabs: float = 1e-13, epsrel: float = 1e-10) -> complex:
    """Same value by adaptive nested quadrature of the time integrals."""
    prep = _prepare(d, frame, initial)
    if prep is None:
        return 0j
    const, expo, less, n_var = prep
    if n_var == 0:
        return const
    upper = {k: [] for k in range(n_var)}
    lower = {k: [0.0] for k in range(n_var)}
    after = {k: set() for k in range(n_var)}
    for a, b in less:
        if a[0] == "var" and b[0] == "var":
            upper[a[1]].append(("var", b[1]))
            after[a[1]].add(b[1])
        elif a[0] == "var":
            upper[a[1]].append(("fixed", b[1]))
        else:
            lower[b[1]].append(a[1])
    # outermost variables first: those with no variable parents
    order = []
    left = set(range(n_var))
    while left:
        ready = sorted(k for k in left if after[k] <= set(order))
        order.extend(ready)
        left -= set(ready)
    inner_first = order[::-1]
    pos = {k: i for i, k in enumerate(inner_first)}

    def make_range(k):
        def rng(*outer):
            vals = []
            for kind, v in upper[k]:
                vals.append(v if kind == "fixed" else outer[pos[v] - pos[k] - 1])
            return [max(lower[k]), min(vals)]
        return rng

    ranges = [make_range(k) for k in inner_first]

    def f(part, *xs):
        s = sum(expo[k] * xs[pos[k]] for k in range(n_var))
        val = cmath.exp(s)
        return val.real if part == 0 else val.imag

    opts = {"epsabs": epsabs, "epsrel": epsrel, "limit": 200}
    re = integrate.nquad(lambda *xs: f(0, *xs), ranges, opts=[opts] * n_var)[0]
    im = integrate.nquad(lambda *xs: f(1, *xs), ranges, opts=[opts] * n_var)[0]
    return const * complex(re, im)


# ----------------------------------------------------------------------------
# correlators

def _frame_and_initial(initial: BlochState, params: ModelParams, frame=None):
    frame = frame if frame is not None else eigensystem(params, require_beta=True)
    frame.require_beta()
    return frame, to_diagonal(initial, frame, params)


def _real(z: complex, what: str) -> float:
    if abs(z.imag) > IMAG_TOL * max(1.0, abs(z.real)):
        raise NumericalConsistencyError(f"{what}: imaginary residue {z.imag:.3e}")
    return z.real


def tree_correlator(endings, frame: DiagonalFrame, uvw) -> complex:
    return sum((evaluate_diagram(d, frame, uvw) for d in enumerate_tree(endings)), 0j)


def _sinhc(x: complex) -> complex:
    if abs(x) < 1e-4:
        return 1 + x * x / 6 + x ** 4 / 120
    return cmath.sinh(x) / x


def mean_z(t, initial: BlochState, params: ModelParams):
    """Ensemble-mean z(t) of the unconditioned dynamics (exact, it is linear)."""
    G, D = params.Gamma, params.delta
    om = complex(np.sqrt(complex(G * G - 4 * D * D)))
    def one(tt):
        if tt < 0:
            raise ValidationError("t must be >= 0", [("t", str(tt))])
        h = 0.5 * om * tt
        val = cmath.exp(-0.5 * G * tt) * (initial.z * cmath.cosh(h)
                                          + (initial.z * G - 2 * D * initial.y) * 0.5 * tt * _sinhc(h))
        return _real(val, "mean_z")
    t = np.asarray(t, dtype=float)
    if t.ndim == 0:
        return one(float(t))
    return np.array([one(float(v)) for v in t.ravel()]).reshape(t.shape)


def mean_z_diagrams(t, initial: BlochState, params: ModelParams, frame=None) -> float:
    frame, uvw = _frame_and_initial(initial, params, frame)
    val = tree_correlator([("v", t)], frame, uvw) + tree_correlator([("w", t)], frame, uvw)
    return _real(val, "mean_z")


def corr_z_xi(t1, t2, initial: BlochState, params: ModelParams, frame=None) -> float:
    """Tree-level <z(t1) xi(t2)>; zero unless t1 > t2."""
    if not t1 > t2:
        return 0.0
    frame, (u, v, w) = _frame_and_initial(initial, params, frame)
    l2, l3 = frame.lambda2, frame.lambda3
    k2, k3, a = frame.kappa2, frame.kappa3, frame.alpha
    e = cmath.exp
    val = (e(l2 * t1) * (k2 * e(-l2 * t2) + a * v * v * e(l2 * t2) + a * v * w * e(l3 * t2))
           + e(l3 * t1) * (k3 * e(-l3 * t2) + a * w * w * e(l3 * t2) + a * v * w * e(l2 * t2)))
    return _real(val, "corr_z_xi")


def corr_z_xi_diagrams(t1, t2, initial, params, frame=None) -> float:
    frame, uvw = _frame_and_initial(initial, params, frame)
    val = sum(tree_correlator([(f, t1), ("xi", t2)], frame, uvw) for f in ("v", "w"))
    return _real(val, "corr_z_xi")


def _pair_sum(t1, t2, frame, uvw, w1=(1.0, 1.0)):
    total = 0j
    for a, ca in zip(("v", "w"), w1):
        for b in ("v", "w"):
            total += ca * tree_correlator([(a, t1), (b, t2)], frame, uvw)
    return total


def corr_zz(t1, t2, initial: BlochState, params: ModelParams, frame=None) -> float:
    """Tree-level <z(t1) z(t2)> as the sum of the four (v, w) flavor pairs."""
    frame, uvw = _frame_and_initial(initial, params, frame)
    return _real(_pair_sum(t1, t2, frame, uvw), "corr_zz")


def corr_yz(t1, t2, initial: BlochState, params: ModelParams, frame=None) -> float:
    """Tree-level <y(t1) z(t2)>, y = beta1 v + beta2 w."""
    frame, uvw = _frame_and_initial(initial, params, frame)
    return _real(_pair_sum(t1, t2, frame, uvw, frame.require_beta()), "corr_yz")


def cov_zz(t1, t2, initial: BlochState, params: ModelParams, frame=None) -> float:
    return corr_zz(t1, t2, initial, params, frame) - mean_z(t1, initial, params) * mean_z(t2, initial, params)


def var_z(t, initial: BlochState, params: ModelParams, frame=None) -> float:
    return cov_zz(t, t, initial, params, frame)


def cov_zz_closed(t1, t2, initial: BlochState, params: ModelParams, frame=None) -> float:
    """Connected tree-level <z z> from the single-noise-edge integral.

    int_0^min(t1,t2) ds sum_{X,Y in v,w} e^{l_X (t1-s)} e^{l_Y (t2-s)} A_X(s) A_Y(s),
    A_X(s) = kappa_X + alpha X_bar(s) z_bar(s).  Independent of the diagram
    machinery; used as a cross-check.
    """
    frame, (u, v, w) = _frame_and_initial(initial, params, frame)
    lam = {"v": frame.lambda2, "w": frame.lambda3}
    kap = {"v": frame.kappa2, "w": frame.kappa3}
    ini = {"v": v, "w": w}
    a = frame.alpha
    hi = min(t1, t2)

    def integrand(s, part):
        zb = ini["v"] * cmath.exp(lam["v"] * s) + ini["w"] * cmath.exp(lam["w"] * s)
        A = {X: kap[X] + a * ini[X] * cmath.exp(lam[X] * s) * zb for X in ("v", "w")}
        tot = 0j
        for X in ("v", "w"):
            for Y in ("v", "w"):
                tot += cmath.exp(lam[X] * (t1 - s) + lam[Y] * (t2 - s)) * A[X] * A[Y]
        return tot.real if part == 0 else tot.imag

    re = integrate.quad(integrand, 0.0, hi, args=(0,), epsabs=1e-13, epsrel=1e-11, limit=400)[0]
    im = integrate.quad(integrand, 0.0, hi, args=(1,), epsabs=1e-13, epsrel=1e-11, limit=400)[0]
    return _real(complex(re, im), "cov_zz_closed")


def variance_limit(params: ModelParams) -> float:
    """Long-time tree-level variance of z: (Gamma^2 + Delta^2) / (2 Gamma Delta^2 tau_m)."""
    G, D = params.Gamma, params.delta
    if D == 0:
        raise ValidationError("the long-time limit needs delta != 0", [("delta", "0")])
    return (G * G + D * D) / (2 * G * D * D * params.tau_m)


def variance_limit_frame(frame: DiagonalFrame) -> float:
    l2, l3, k2, k3 = frame.lambda2, frame.lambda3, frame.kappa2, frame.kappa3
    val = -k2 * k2 / (2 * l2) - k3 * k3 / (2 * l3) - 2 * k2 * k3 / (l2 + l3)
    return _real(complex(val), "variance_limit")


def write_grid_csv(path, t1s, t2s, values, name: str = "value"):
    """Correlator grid as rows (t1, t2, value)."""
    with open(path, "w") as fh:
        fh.write(f"t1,t2,{name}\n")
        for a, b, c in zip(np.ravel(t1s), np.ravel(t2s), np.ravel(values)):
            fh.write(f"{float(a)!r},{float(b)!r},{float(c)!r}\n")


def dump_diagrams(diagrams: Sequence[Diagram], frame: Optional[DiagonalFrame] = None,
                  initial=None) -> str:
    blocks = []
    for i, d in enumerate(diagrams):
        if frame is not None:
            d.value = evaluate_diagram(d, frame, initial)
        blocks.append(f"# diagram {i + 1}\n" + d.describe())
    return "\n\n".join(blocks) + "\n"
