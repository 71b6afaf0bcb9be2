"""Galerkin projection of random-parameter polynomial ODEs onto a PC basis.

Coefficient states are named ``<state>_<mode>`` and stored dimension-major,
``[x1_0..x1_p, x2_0..x2_p, ...]``.  ``PceSystem.mode_major`` gives the
permutation to the mean-modes-first layout ``[x1_0, x2_0, x1_1, x2_1, ...]``.
"""

from __future__ import annotations

import itertools
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats as _stats

from . import basis as _basis
from .basis import BasisFamily
from .errors import ConfigError, PcroaError
from .mvpoly import Poly, PolyMap

EXPAND_TOL = 1e-12
DEFAULT_MAX_RANK = 6
SINGLE_POINT_TOL = 1e-8


# -- parameters -------------------------------------------------------------------


@dataclass(frozen=True)
class ParamSpec:
    """``kind`` is ``uniform`` (a=lo, b=hi), ``gaussian`` (a=mean, b=std) or ``pce``."""

    kind: str
    a: float = 0.0
    b: float = 0.0
    coeffs: tuple = ()

    def __post_init__(self):
        if self.kind == "uniform" and not self.a < self.b:
            raise ConfigError(f"Uniform({self.a}, {self.b}) needs lower < upper",
                              module="expand", operation="ParamSpec", code="bad_distribution")
        if self.kind == "gaussian" and self.b < 0:
            raise ConfigError(f"Gaussian std must be non-negative, got {self.b}",
                              module="expand", operation="ParamSpec", code="bad_distribution")
        if self.kind not in ("uniform", "gaussian", "pce"):
            raise ConfigError(f"unknown parameter kind {self.kind!r}", module="expand",
                              operation="ParamSpec", code="bad_distribution")

    @classmethod
    def uniform(cls, lo, hi):
        return cls("uniform", float(lo), float(hi))

    @classmethod
    def gaussian(cls, mean, std):
        return cls("gaussian", float(mean), float(std))

    @classmethod
    def pce(cls, coeffs):
        return cls("pce", coeffs=tuple(float(c) for c in coeffs))

    @property
    def natural_family(self):
        return {"uniform": BasisFamily.LEGENDRE, "gaussian": BasisFamily.HERMITE}.get(self.kind)

    def sample_map(self, family: BasisFamily):
        """``a(xi)`` as a callable for a germ of the given family."""
        fam = BasisFamily.parse(family)
        if self.kind == "uniform":
            mid, half = 0.5 * (self.a + self.b), 0.5 * (self.b - self.a)
            if fam is BasisFamily.LEGENDRE:
                return lambda xi: mid + half * np.asarray(xi)
            return lambda xi: self.a + (self.b - self.a) * _stats.norm.cdf(xi)
        if self.kind == "gaussian":
            if fam is BasisFamily.HERMITE:
                return lambda xi: self.a + self.b * np.asarray(xi)
            return lambda xi: self.a + self.b * _stats.norm.ppf(0.5 * (np.asarray(xi) + 1.0))
        c = np.array(self.coeffs)
        return lambda xi: _basis.evaluate(fam, len(c) - 1, xi) @ c


def project_param(spec: ParamSpec, family, p: int, override: bool = False,
                  nnodes: int | None = None) -> np.ndarray:
    """Coefficients ``a_i = <a, psi_i> / gamma_i`` for ``i = 0..p``."""
    family = BasisFamily.parse(family)
    if spec.kind == "pce":
        out = np.zeros(p + 1)
        c = np.array(spec.coeffs)
        out[: min(p + 1, len(c))] = c[: p + 1]
        return out
    if spec.natural_family is not family and not override:
        raise ConfigError(
            f"{spec.kind} parameter expanded in the {family.value} basis; pass override=True to allow it",
            module="expand", operation="project_param", code="family_mismatch")
    affine = spec.natural_family is family
    nodes, w = _basis.gauss_nodes(family, nnodes or (p + 2 if affine else max(60, 4 * p + 8)))
    vals = spec.sample_map(family)(nodes)
    psi = _basis.evaluate(family, p, nodes)
    out = (w * vals) @ psi / _basis.norm_constants(family, p)
    out[np.abs(out) < EXPAND_TOL] = 0.0
    return out


# -- systems --------------------------------------------------------------------


@dataclass
class StochSystem:
    states: tuple
    params: tuple  # of (name, ParamSpec)
    rhs: list      # Polys over states + param names

    def __post_init__(self):
        self.states = tuple(self.states)
        self.params = tuple((str(nm), sp) for nm, sp in self.params)
        declared = set(self.states) | {nm for nm, _ in self.params}
        if len(self.rhs) != len(self.states):
            raise ConfigError(f"{len(self.rhs)} rhs rows for {len(self.states)} states",
                              module="expand", operation="StochSystem", code="dimension")
        allvars = self.variables
        rows = []
        for r in self.rhs:
            extra = set(r.used_vars()) - declared
            if extra:
                raise ConfigError(f"rhs uses undeclared variables {sorted(extra)}",
                                  module="expand", operation="StochSystem", code="undeclared")
            rows.append(r.with_vars(allvars))
        self.rhs = rows

    @property
    def n(self):
        return len(self.states)

    @property
    def param_names(self):
        return tuple(nm for nm, _ in self.params)

    @property
    def variables(self):
        return self.states + self.param_names

    def natural_family(self):
        fams = {sp.natural_family for _, sp in self.params if sp.natural_family is not None}
        if len(fams) > 1:
            raise ConfigError("parameters disagree on the germ distribution",
                              module="expand", operation="natural_family", code="family_mismatch")
        return fams.pop() if fams else BasisFamily.LEGENDRE

    def sampled_rhs(self, values: dict):
        """Deterministic rhs with the parameters fixed to ``values``."""
        mapping = {nm: float(values[nm]) for nm in self.param_names}
        return [r.compose(mapping, self.states) for r in self.rhs]


def coeff_name(state: str, mode: int) -> str:
    return f"{state}_{mode}"


@dataclass
class PceSystem:
    states: tuple
    p: int
    family: BasisFamily
    rhs: list
    param_coeffs: dict = field(default_factory=dict)
    _map: object = field(default=None, repr=False, compare=False)
    _jac: object = field(default=None, repr=False, compare=False)

    @property
    def n(self):
        return len(self.states)

    @property
    def N(self):
        return self.n * (self.p + 1)

    @property
    def names(self):
        return tuple(coeff_name(s, i) for s in self.states for i in range(self.p + 1))

    def index(self, d: int, i: int) -> int:
        return d * (self.p + 1) + i

    @property
    def mean_indices(self):
        return [self.index(d, 0) for d in range(self.n)]

    @property
    def variance_indices(self):
        return [self.index(d, i) for i in range(1, self.p + 1) for d in range(self.n)]

    @property
    def mode_major(self):
        """Permutation ``perm`` with ``x[perm]`` in mean-modes-first order."""
        return np.array([self.index(d, i) for i in range(self.p + 1) for d in range(self.n)])

    def to_mode_major(self, x):
        return np.asarray(x)[..., self.mode_major]

    def from_mode_major(self, y):
        y = np.asarray(y, dtype=float)
        out = np.empty_like(y)
        out[..., self.mode_major] = y
        return out

    def coeff_matrix(self, x):
        """Reshape a coefficient vector to ``(n, p+1)``."""
        return np.asarray(x, dtype=float).reshape(self.n, self.p + 1)

    def mean_start(self, mean):
        x = np.zeros(self.N)
        x[self.mean_indices] = mean
        return x

    @property
    def polymap(self) -> PolyMap:
        if self._map is None:
            self._map = PolyMap(self.rhs, self.names)
        return self._map

    def f(self, x):
        return self.polymap(x)

    def jacobian(self, x):
        if self._jac is None:
            self._jac = self.polymap.jacobian_map()
        x = np.asarray(x, dtype=float)
        return self._jac(x).reshape(x.shape[:-1] + (self.N, self.N))

    @property
    def degree(self):
        return max((r.degree for r in self.rhs), default=0)


def expand_system(sys: StochSystem, family=None, p: int = 2, *, max_rank: int = DEFAULT_MAX_RANK,
                  override: bool = False, cache_dir=None) -> PceSystem:
    """Intrusive Galerkin expansion, monomial by monomial, with one tensor per factor count."""
    family = BasisFamily.parse(family) if family is not None else sys.natural_family()
    abar = {nm: project_param(sp, family, p, override=override) for nm, sp in sys.params}
    names = tuple(coeff_name(s, i) for s in sys.states for i in range(p + 1))
    N = len(names)
    n = sys.n
    nv = len(sys.variables)
    tensors = {}
    rows = [defaultdict(float) for _ in range(N)]
    zero = (0,) * N

    for d, poly in enumerate(sys.rhs):
        for mono, c in poly.terms.items():
            factors = [k for k in range(nv) for _ in range(mono[k])]
            k = len(factors)
            if k == 0:
                rows[d * (p + 1)][zero] += c
                continue
            rank = k + 1
            if rank > max_rank:
                label = Poly(sys.variables, {mono: 1.0}).to_str()
                raise PcroaError(f"monomial {label} needs a rank-{rank} tensor (max {max_rank})",
                                 module="expand", operation="expand_system", code="rank_exceeded")
            if rank not in tensors:
                tensors[rank] = _basis.galerkin_tensor(family, p, rank, cache_dir=cache_dir)
            tensor = tensors[rank]
            for idx, e in tensor.entries.items():
                *lead, q = idx
                for perm in set(itertools.permutations(lead)):
                    coef = c * e
                    expo = [0] * N
                    for var, j in zip(factors, perm):
                        if var < n:
                            expo[var * (p + 1) + j] += 1
                        else:
                            coef *= abar[sys.variables[var]][j]
                            if coef == 0.0:
                                break
                    if coef != 0.0:
                        rows[d * (p + 1) + q][tuple(expo)] += coef
    rhs = [Poly(names, {m: v for m, v in r.items() if abs(v) >= EXPAND_TOL}) for r in rows]
    return PceSystem(tuple(sys.states), p, family, rhs, abar)


# -- moments ----------------------------------------------------------------------


def _as_matrix(coeffs, n=None, p=None):
    x = np.asarray(coeffs, dtype=float)
    if n is None and p is None:
        raise ValueError("give n or p to interpret the coefficient vector")
    if n is None:
        n = x.size // (p + 1)
    if x.size % n:
        raise ValueError(f"coefficient length {x.size} not divisible by n={n}")
    return x.reshape(n, x.size // n)


def moments(coeffs, family, mode="mean", *, n=None, p=None, order=None,
            max_rank: int = DEFAULT_MAX_RANK):
    """``mean`` (n,), ``covariance`` (n, n) or ``raw`` (per-dimension ``E[x_d^order]``)."""
    family = BasisFamily.parse(family)
    X = _as_matrix(coeffs, n, p)
    p = X.shape[1] - 1
    if mode == "mean":
        return X[:, 0].copy()
    gam = _basis.norm_constants(family, p)
    if mode in ("covariance", "cov"):
        XJ = X[:, 1:]
        return (XJ * gam[1:]) @ XJ.T
    if mode == "raw":
        if order is None or order < 1:
            raise ValueError("raw moments need order >= 1")
        if order == 1:
            return X[:, 0].copy()
        if order > max_rank:
            raise PcroaError(f"raw moment order {order} exceeds tensor rank limit {max_rank}",
                             module="expand", operation="moments", code="rank_exceeded")
        T = _basis.galerkin_tensor(family, p, order).dense() * gam  # <psi_i..psi_q>
        out = np.empty(X.shape[0])
        for d in range(X.shape[0]):
            acc = T
            for _ in range(order):
                acc = acc @ X[d]
            out[d] = acc
        return out
    raise ValueError(f"unknown moment mode {mode!r}")


@dataclass
class EquilibriumSetStats:
    x_ep: np.ndarray
    mean: np.ndarray
    covariance: np.ndarray
    raw: dict
    single_point: bool
    family: BasisFamily
    p: int

    def to_dict(self, mode_major_perm=None):
        d = {
            "x_ep": [float(v) for v in self.x_ep],
            "mean": [float(v) for v in self.mean],
            "covariance": [[float(v) for v in row] for row in self.covariance],
            "raw_moments": {str(k): [float(v) for v in vals] for k, vals in sorted(self.raw.items())},
            "single_point": bool(self.single_point),
            "family": self.family.value,
            "p": self.p,
        }
        if mode_major_perm is not None:
            d["x_ep_mode_major"] = [float(v) for v in np.asarray(self.x_ep)[mode_major_perm]]
        return d


def equilibrium_set_stats(x_ep, family, *, n=None, p=None, raw_orders=(2, 3)) -> EquilibriumSetStats:
    family = BasisFamily.parse(family)
    X = _as_matrix(x_ep, n, p)
    p = X.shape[1] - 1
    raw = {P: moments(X, family, "raw", n=X.shape[0], order=P) for P in raw_orders if P <= DEFAULT_MAX_RANK}
    single = bool(np.max(np.abs(X[:, 1:]), initial=0.0) < SINGLE_POINT_TOL)
    return EquilibriumSetStats(np.asarray(x_ep, dtype=float).ravel(), X[:, 0].copy(),
                               moments(X, family, "covariance", n=X.shape[0]), raw, single, family, p)


def reconstruct_sample(coeffs, family, xi, *, n=None, p=None):
    """``x_d(xi) = sum_i coeffs[d, i] psi_i(xi)``; ``xi`` may be an array."""
    X = _as_matrix(coeffs, n, p)
    psi = _basis.evaluate(family, X.shape[1] - 1, xi)
    return psi @ X.T


def admissible_variance_modes(sigma2, family, p: int, rng=None) -> np.ndarray:
    """Variance modes ``X_J`` (n, p) with ``sum_j X_j X_j' gamma_j = sigma2`` (needs p >= rank)."""
    sigma2 = np.asarray(sigma2, dtype=float)
    n = sigma2.shape[0]
    w, V = np.linalg.eigh(0.5 * (sigma2 + sigma2.T))
    w = np.clip(w, 0.0, None)
    L = V * np.sqrt(w)  # L L' = sigma2
    if p < n and np.count_nonzero(w > 1e-14) > p:
        raise ValueError(f"covariance of rank > {p} cannot be represented with {p} variance modes")
    # keep the significant columns
    keep = np.argsort(w)[::-1][: min(n, p)]
    L = L[:, keep]
    r = L.shape[1]
    if rng is None:
        U = np.eye(r, p)
    else:
        Q, _ = np.linalg.qr(rng.standard_normal((p, p)))
        U = Q[:r, :]
    gam = _basis.norm_constants(family, p)[1:]
    return (L @ U) / np.sqrt(gam)


def truncation_diagnostic(sys: StochSystem, p: int, mean0, t_end: float = 20.0, family=None,
                          npoints: int = 200):
    """Simulate the order-``p`` and order-``p+1`` expansions from the same mean start.

    Returns the max deviation over shared modes, per-mode peak magnitudes of the
    ``p+1`` run, and the ratio of the highest mode's peak to the peak of the rest.
    """
    from .sim import integrate, IntegratorOptions

    lo = expand_system(sys, family, p)
    hi = expand_system(sys, family, p + 1)
    ts = np.linspace(0.0, t_end, npoints)
    opts = IntegratorOptions(t_eval=ts)
    a = integrate(lo.polymap, lo.mean_start(mean0), t_end, opts).states
    b = integrate(hi.polymap, hi.mean_start(mean0), t_end, opts).states
    shared = [hi.index(d, i) for d in range(hi.n) for i in range(p + 1)]
    m = min(len(a), len(b))
    dev = float(np.max(np.abs(a[:m] - b[:m, shared])))
    peaks = np.max(np.abs(b), axis=0).reshape(hi.n, p + 2)
    top = float(np.max(peaks[:, p + 1]))
    rest = float(np.max(peaks[:, : p + 1]))
    return {"max_shared_deviation": dev, "mode_peaks": peaks.tolist(),
            "top_mode_ratio": top / rest if rest > 0 else math.inf}
