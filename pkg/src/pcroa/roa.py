"""Inner estimates of the region of attraction of a PCE equilibrium and their
translation to sets of admissible initial means.

Everything is posed in shifted coordinates ``z = x - x_ep`` so that the
analysed equilibrium sits at the origin.  ``V`` certificates use the level
``rho = 1``; the estimate is ``{V <= 1}``.

Two alternations are provided:

* :func:`estimate_roa` alternates a multiplier step (``s1``, ``s2`` with
  ``V`` and the inner ellipsoid ``E = {z' P_B z <= 1}`` fixed) with a V-step
  (``V`` and ``P_B`` with the multipliers fixed).
* :func:`recover_r0` alternates the analogous steps for the set of initial
  means ``R0 = {q(z_0) <= 1}`` compatible with a prescribed initial covariance.

Volume is pushed up by shrinking ``det(P_B)``: each V-step minimises the
linearisation ``tr(P_k^-1 P_B)`` of ``log det P_B`` at the previous iterate,
a majorise-minimise step that never increases ``det(P_B)``.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq

from . import linalg
from .basis import norm_constants
from .errors import DimensionError, PcroaError, SolverNumericalError, SosInfeasibleError
from .expand import PceSystem
from .mvpoly import Poly, monomial_basis
from .sosdp import LinPoly, SdpOptions, SosProgram, verify_gram

log = logging.getLogger(__name__)

MAX_BISECT_BRACKET = (1e-6, 1e6)
INIT_BALL_SLACK = 1.1
INIT_BACKOFF = (1.0, 1.02, 1.05, 1.1, 1.25, 1.5, 2.0, 4.0)


@dataclass
class RoaOptions:
    deg_V: int = 2
    deg_s1: int | None = None
    deg_s2: int | None = None
    max_iter: int = 40
    obj_tol: float = 1e-3
    l_coeff: float = 1e-4
    eps_cap: float = 1e-2
    step_margin: float = 1e-5
    verify_tol: float = 1e-6
    bisect_iter: int = 30
    bracket: tuple = MAX_BISECT_BRACKET
    # deg_V = 4 starts from the converged quadratic certificate instead of the linearisation
    quadratic_warm_start: bool = True
    sdp: SdpOptions = field(default_factory=SdpOptions)

    def __post_init__(self):
        if self.deg_V not in (2, 4):
            raise PcroaError(f"deg_V must be 2 or 4, got {self.deg_V}", module="roa",
                             operation="estimate_roa", code="bad_degree")
        for name in ("deg_s1", "deg_s2"):
            d = getattr(self, name)
            if d is not None and (d < 0 or d % 2):
                raise PcroaError(f"{name} must be a non-negative even integer, got {d}",
                                 module="roa", operation="estimate_roa", code="bad_degree")


def _even_up(d: int) -> int:
    return d + (d % 2)


def default_degrees(deg_f: int, deg_V: int):
    """``(deg s1, deg s2)`` making the decrease and containment constraints degree-consistent."""
    return max(2, _even_up(deg_f - 1)), max(0, deg_V - 2)


# -- small polynomial helpers --------------------------------------------------------


def quad_poly(vars, P, idx=None) -> Poly:
    """``z' P z`` over the variables ``idx`` of ``vars`` (all of them by default)."""
    n = len(vars)
    idx = list(range(n)) if idx is None else list(idx)
    P = np.asarray(P, dtype=float)
    terms = {}
    for a, ia in enumerate(idx):
        for b, ib in enumerate(idx):
            m = [0] * n
            m[ia] += 1
            m[ib] += 1
            m = tuple(m)
            terms[m] = terms.get(m, 0.0) + P[a, b]
    return Poly(vars, terms)


def _quad_lin(vars, keys, idx=None) -> LinPoly:
    n = len(vars)
    idx = list(range(n)) if idx is None else list(idx)
    terms = {}
    for a, ia in enumerate(idx):
        for b in range(a + 1):
            ib = idx[b]
            m = [0] * n
            m[ia] += 1
            m[ib] += 1
            d = terms.setdefault(tuple(m), {})
            d[keys[a][b]] = d.get(keys[a][b], 0.0) + (1.0 if a == b else 2.0)
    return LinPoly(n, terms)


def _sub_basis(n: int, idx, lo: int, hi: int):
    """Graded monomials in the variables ``idx`` only, embedded in ``n`` variables."""
    out = []
    for m in monomial_basis(len(idx), lo, hi):
        full = [0] * n
        for k, e in zip(idx, m):
            full[k] = e
        out.append(tuple(full))
    return out


def vdot(V: Poly, fbar) -> Poly:
    out = Poly.zero(V.vars)
    for i, fi in enumerate(fbar):
        dv = V.diff(i)
        if not dv.is_zero():
            out = out + dv * fi
    return out


def _vdot_lin(V: LinPoly, fbar) -> LinPoly:
    out = LinPoly.zero(V.nvars)
    for i, fi in enumerate(fbar):
        out = out + V.diff(i).mul_poly(fi)
    return out


def _auto_basis(n: int, expr: LinPoly, min_deg: int | None = None):
    degs = [sum(m) for m in expr.terms]
    lo = min(degs, default=0) if min_deg is None else min_deg
    hi = max(degs, default=0)
    return monomial_basis(n, lo // 2, max(lo // 2, hi // 2))


def _add_with_margin(prog: SosProgram, expr: LinPoly, name: str, cap: float, min_deg=None, free=False):
    """``expr - eps v'v`` SOS on the automatic Gram basis ``v``, maximising ``eps <= cap``.

    Pushing the whole Gram matrix away from the PSD boundary keeps the next
    alternation step strictly feasible.  With ``free`` the margin may go negative:
    the program is then strictly feasible whenever the equalities are, and ``expr``
    is SOS exactly when the optimal ``eps >= 0``.
    """
    n = prog.n
    basis = _auto_basis(n, expr, min_deg)
    eps = _scalar_margin(prog, cap, name, free)
    terms = {}
    for b in basis:
        m = tuple(2 * e for e in b)
        terms[m] = {eps: -1.0}
    prog.add_sos(expr + LinPoly(n, terms), name, basis=basis)
    prog.minimize({eps: -1.0})
    return eps


def _scalar_margin(prog: SosProgram, cap: float, name: str, free=False):
    eps = prog.free_scalar(f"{name}:eps") if free else prog.psd_matrix(1, f"{name}:eps")[0][0]
    slack = prog.psd_matrix(1, f"{name}:slack")[0][0]
    prog.add_linear({eps: 1.0, slack: 1.0}, cap, f"{name}:cap")
    return eps


def _const(vars, c) -> Poly:
    return Poly.constant(vars, c)


# -- certificate ------------------------------------------------------------------------------


@dataclass
class GramPart:
    """A polynomial together with the Gram matrix that certifies it SOS."""

    poly: Poly
    gram: np.ndarray
    basis: list

    def verify(self, tol: float = 1e-6) -> dict:
        return verify_gram(self.poly, self.gram, self.basis, tol)

    def to_dict(self):
        return {
            "poly": poly_to_list(self.poly),
            "gram": np.asarray(self.gram).tolist(),
            "basis": [list(m) for m in self.basis],
        }

    @classmethod
    def from_dict(cls, d, vars):
        return cls(poly_from_list(d["poly"], vars), np.array(d["gram"], dtype=float),
                   [tuple(m) for m in d["basis"]])


def poly_to_list(p: Poly):
    return [[list(m), float(p.terms[m])] for m in p.monomials()]


def poly_from_list(items, vars) -> Poly:
    return Poly(vars, {tuple(m): float(c) for m, c in items})


@dataclass
class RoaCertificate:
    system_names: tuple
    n: int
    p: int
    family: str
    x_ep: np.ndarray
    fbar: list
    l_coeff: float
    V: Poly
    parts: dict  # name -> GramPart for every SOS fact used
    P_B: np.ndarray
    history: list = field(default_factory=list)
    status: str = "optimal"
    diagnostics: dict = field(default_factory=dict)

    @property
    def vars(self):
        return self.V.vars

    @property
    def N(self):
        return len(self.system_names)

    @property
    def deg_V(self):
        return self.V.degree

    @property
    def gram_V(self):
        """``Q_V`` with ``V = v' Q_V v`` (the ``V - l`` Gram plus the Gram of ``l``)."""
        part = self.parts["lyap"]
        L = np.zeros_like(part.gram)
        for i, m in enumerate(part.basis):
            if sum(m) == 1:
                L[i, i] = self.l_coeff
        return part.gram + L

    @property
    def mean_indices(self):
        return [d * (self.p + 1) for d in range(self.n)]

    @property
    def volume_proxy(self):
        """``det(P_B)^(-1/N)``; grows with the volume of the inner ellipsoid."""
        return 1.0 / linalg.geomean_eig(self.P_B)

    def V_unshifted(self, x):
        """``V(x - x_ep)`` for coefficient vectors in storage order."""
        return self.V.eval(np.asarray(x, dtype=float) - self.x_ep)

    def verify(self, tol: float = 1e-6) -> dict:
        """Recompute every certified polynomial from ``V``, ``s1``, ``s2`` and ``P_B``
        and check it against its Gram matrix."""
        out = {}
        z = self.vars
        lpoly = quad_poly(z, self.l_coeff * np.eye(self.N))
        s1 = self.parts["s1"].poly
        s2 = self.parts["s2"].poly
        b = quad_poly(z, self.P_B)
        expected = {
            "lyap": self.V - lpoly,
            "decrease": -vdot(self.V, self.fbar) - s1 * (1.0 - self.V) - lpoly,
            "contain": (1.0 - self.V) - s2 * (1.0 - b),
            "s1": s1,
            "s2": s2,
        }
        for name, poly in expected.items():
            part = self.parts[name]
            out[name] = verify_gram(poly, part.gram, part.basis, tol)
        out["V(0)"] = {"residual": abs(self.V.coeff((0,) * self.N)), "min_eig": math.inf,
                       "passed": abs(self.V.coeff((0,) * self.N)) < tol}
        lam = float(np.linalg.eigvalsh(linalg.symmetrize(self.P_B))[0])
        out["P_B"] = {"residual": 0.0, "min_eig": lam, "passed": lam > 0}
        return out

    def verified(self, tol: float = 1e-6) -> bool:
        return all(d["passed"] for d in self.verify(tol).values())

    def to_dict(self):
        return {
            "kind": "roa_certificate",
            "system": {"names": list(self.system_names), "n": self.n, "p": self.p,
                       "family": self.family},
            "shift": {"x_ep": self.x_ep.tolist(), "coordinates": "z = x - x_ep"},
            "vars": list(self.vars),
            "fbar": [poly_to_list(f) for f in self.fbar],
            "l_coeff": self.l_coeff,
            "V": poly_to_list(self.V),
            "Q_V": self.gram_V.tolist(),
            "parts": {k: v.to_dict() for k, v in sorted(self.parts.items())},
            "P_B": self.P_B.tolist(),
            "history": self.history,
            "status": self.status,
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d):
        vars = tuple(d["vars"])
        return cls(
            system_names=tuple(d["system"]["names"]), n=d["system"]["n"], p=d["system"]["p"],
            family=d["system"]["family"], x_ep=np.array(d["shift"]["x_ep"], dtype=float),
            fbar=[poly_from_list(f, vars) for f in d["fbar"]], l_coeff=d["l_coeff"],
            V=poly_from_list(d["V"], vars),
            parts={k: GramPart.from_dict(v, vars) for k, v in d["parts"].items()},
            P_B=np.array(d["P_B"], dtype=float), history=list(d.get("history", [])),
            status=d.get("status", "optimal"), diagnostics=dict(d.get("diagnostics", {})))


# -- shifted system -------------------------------------------------------------------------


def shifted_dynamics(sys: PceSystem, x_ep):
    """Right-hand side in ``z = x - x_ep`` coordinates, over the same variable names."""
    x_ep = np.asarray(x_ep, dtype=float)
    names = sys.names
    mapping = {v: Poly.variable(names, v) + float(x_ep[i]) for i, v in enumerate(names)}
    fbar = [r.with_vars(names).compose(mapping, names) for r in sys.rhs]
    # the constant part is the equilibrium residual; drop it so V' vanishes at 0
    zero = (0,) * len(names)
    resid = max(abs(f.coeff(zero)) for f in fbar)
    if resid > 1e-6:
        raise PcroaError(f"x_ep is not an equilibrium (|f(x_ep)| = {resid:.3g})", module="roa",
                         operation="shift", code="not_equilibrium")
    return [Poly(names, {m: c for m, c in f.terms.items() if m != zero}) for f in fbar]


# -- multiplier step ------------------------------------------------------------------------


def _lpoly(vars, c):
    return quad_poly(vars, c * np.eye(len(vars)))


def _multiplier_s1(vars, fbar, V: Poly, deg_s1: int, opts: RoaOptions, margin: bool = True):
    """Find ``s1`` in SOS with ``-V' - s1 (1 - V) - l`` SOS, maximising a small margin."""
    n = len(vars)
    prog = SosProgram(vars)
    s1 = prog.sos_poly(deg_s1, "s1", min_deg=2) if deg_s1 >= 2 else prog.sos_poly(0, "s1")
    known = -vdot(V, fbar) - _lpoly(vars, opts.l_coeff)
    expr = LinPoly.from_poly(known) - s1.mul_poly(1.0 - V)
    if margin:
        _add_with_margin(prog, expr, "decrease", opts.eps_cap)
    else:
        prog.add_sos(expr, "decrease")
    sol = prog.solve(opts.sdp, raise_structural=False)
    return prog, sol, s1


def _multiplier_s2(vars, V: Poly, P_B, deg_s2: int, opts: RoaOptions):
    prog = SosProgram(vars)
    s2 = prog.sos_poly(deg_s2, "s2", min_deg=0)
    b = quad_poly(vars, P_B)
    expr = LinPoly.from_poly(1.0 - V) - s2.mul_poly(1.0 - b)
    prog.add_sos(expr, "contain", min_deg=0)
    sol = prog.solve(opts.sdp, raise_structural=False)
    return prog, sol, s2


def _part(sol, lp: LinPoly | None, gram_name: str, poly: Poly | None = None) -> GramPart:
    return GramPart(poly if poly is not None else sol.value(lp), sol.gram(gram_name),
                    sol.basis(gram_name))


def _sol_ok(sol, tol):
    # a stalled feasibility solve whose last iterate verifies is as good as an optimal one
    return sol is not None and sol.verified(tol)


def _margin_test_ok(sol, tol) -> bool:
    """Free-margin feasibility test: ``expr`` itself has Gram ``G + eps I``, so it
    verifies when ``min_eig(G) + eps > -tol`` (the residual is unchanged)."""
    if not _sol_ok(sol, tol):
        return False
    d = sol.verify(tol)["cov"]
    return d["min_eig"] - sol.objective > -tol


def _solve_or_none(prog: SosProgram, sdp_opts):
    """Solve, mapping a solver breakdown to ``None`` (callers treat it as a failed step)."""
    try:
        return prog.solve(sdp_opts, raise_structural=False)
    except SolverNumericalError as exc:
        log.debug("solver breakdown treated as a failed step: %s", exc)
        return None


# -- initial Lyapunov function -----------------------------------------------------------------


@dataclass
class LyapunovInit:
    V0: Poly
    P: np.ndarray
    c_star: float
    s1: GramPart
    decrease: GramPart
    evaluations: int


def init_lyapunov(sys: PceSystem, x_ep, opts: RoaOptions | None = None, fbar=None) -> LyapunovInit:
    """Quadratic ``V0 = z' P z / c*`` from the linearisation, ``c*`` by geometric bisection."""
    opts = opts or RoaOptions()
    x_ep = np.asarray(x_ep, dtype=float)
    vars = sys.names
    fbar = fbar if fbar is not None else shifted_dynamics(sys, x_ep)
    A = sys.jacobian(x_ep)
    try:
        P = linalg.solve_lyapunov(A)
    except PcroaError as exc:
        raise SosInfeasibleError(f"initialisation failed: {exc}", module="roa",
                                 operation="init_lyapunov", code="not_hurwitz") from exc
    deg_s1 = opts.deg_s1 if opts.deg_s1 is not None else default_degrees(_deg(fbar), 2)[0]
    lam_min = float(np.linalg.eigvalsh(P)[0])
    evals = 0
    worst = {}

    def feasible(c):
        nonlocal evals
        evals += 1
        if lam_min / c <= opts.l_coeff:  # V0 - l would not be SOS
            worst[c] = "lyap"
            return None
        V0 = quad_poly(vars, P / c)
        try:
            _, sol, s1 = _multiplier_s1(vars, fbar, V0, deg_s1, opts)
        except SolverNumericalError as exc:
            worst[c] = str(exc)
            return None
        if not _sol_ok(sol, opts.verify_tol):
            worst[c] = sol.status
            return None
        return V0, _part(sol, s1, "s1"), _part(sol, None, "gram:decrease",
                                                 sol.value(sol.program.constraints[0].expr))

    # plain geometric bisection: the bracket ends are presumed feasible / infeasible and
    # never solved themselves (an SDP at c = 1e-6 is badly scaled)
    lo, hi = opts.bracket
    best, c_best = None, None
    for _ in range(opts.bisect_iter):
        mid = math.sqrt(lo * hi)
        res = feasible(mid)
        if res is None:
            hi = mid
        else:
            lo, best, c_best = mid, res, mid
    if best is None:
        raise SosInfeasibleError(
            f"no feasible Lyapunov scaling in [{opts.bracket[0]:g}, {opts.bracket[1]:g}] "
            f"(smallest tried c = {hi:.3g} failed: {worst.get(hi)})",
            module="roa", operation="init_lyapunov", code="init_failed")
    V0, s1p, dec = best
    return LyapunovInit(V0, P, c_best, s1p, dec, evals)


def _deg(polys):
    return max((p.degree for p in polys), default=0)


# -- alternation ----------------------------------------------------------------------------


def _lyap_part(vars, V: Poly, basis, l_coeff):
    """Gram of ``V - l`` on ``basis`` for a quadratic ``V`` (exact, no solve needed)."""
    n = len(vars)
    G = np.zeros((len(basis), len(basis)))
    lin = {m: i for i, m in enumerate(basis) if sum(m) == 1}
    for m, c in V.terms.items():
        if sum(m) != 2:
            raise ValueError("exact Gram only for quadratic V")
        idx = [k for k in range(n) for _ in range(m[k])]
        a = lin[tuple(int(k == idx[0]) for k in range(n))]
        b = lin[tuple(int(k == idx[1]) for k in range(n))]
        if a == b:
            G[a, a] += c
        else:
            G[a, b] += c / 2
            G[b, a] += c / 2
    for i in lin.values():
        G[i, i] -= l_coeff
    return GramPart(V - _lpoly(vars, l_coeff), G, list(basis))


def _v_step(vars, fbar, s1: Poly, s2: Poly, P_prev, opts: RoaOptions, pad_basis=None, pad=None):
    n = len(vars)
    prog = SosProgram(vars)
    basis_V = monomial_basis(n, 1, opts.deg_V // 2)
    G = prog.gram_block(basis_V, "gram:lyap")
    lpoly = _lpoly(vars, opts.l_coeff)
    V = G + lpoly
    Pk = prog.psd_matrix(n, "P_B")
    b = _quad_lin(vars, Pk)
    one = LinPoly.from_poly(_const(vars, 1.0))
    dec = -_vdot_lin(V, fbar) - (one - V).mul_poly(s1) - LinPoly.from_poly(lpoly)
    basis = _auto_basis(n, dec)
    # a fixed Gram margin keeps the next multiplier step strictly feasible; it only covers
    # the monomials the multiplier step padded, so the previous V stays a feasible point
    pad = opts.step_margin if pad is None else pad
    padded = basis if pad_basis is None else pad_basis
    shift = {tuple(2 * e for e in m): {None: -pad} for m in padded}
    prog.add_sos(dec + LinPoly(n, shift), "decrease", basis=basis)
    con = (one - V) - (one - b).mul_poly(s2)
    prog.add_sos(con, "contain", min_deg=0)
    W = np.linalg.inv(linalg.symmetrize(P_prev))
    obj = {}
    for a in range(n):
        for c in range(a + 1):
            obj[Pk[a][c]] = obj.get(Pk[a][c], 0.0) + (W[a, a] if a == c else 2.0 * W[a, c])
    prog.minimize(obj)
    sol = prog.solve(opts.sdp, raise_structural=False)
    return prog, sol, V, Pk, basis_V, _pad_matrix(sol.basis("gram:decrease"), padded, pad)


def _pad_matrix(basis, padded, pad):
    padded = set(padded)
    return np.diag([pad if m in padded else 0.0 for m in basis])


def estimate_roa(sys: PceSystem, x_ep, opts: RoaOptions | None = None, *, init: LyapunovInit | None = None,
                 warm_start: RoaCertificate | None = None, progress=None) -> RoaCertificate:
    """Bilinear alternation for an inner estimate ``{V <= 1}`` of the ROA of ``x_ep``.

    ``warm_start`` continues from an existing certificate (typically the converged
    quadratic one when ``deg_V = 4``) instead of the linearisation; since no V-step
    increases ``det(P_B)``, the result never has a smaller inner ellipsoid.
    """
    opts = opts or RoaOptions()
    t0 = time.perf_counter()
    x_ep = np.asarray(x_ep, dtype=float)
    vars = sys.names
    N = len(vars)
    fbar = shifted_dynamics(sys, x_ep)
    d1, d2 = default_degrees(_deg(fbar), opts.deg_V)
    deg_s1 = opts.deg_s1 if opts.deg_s1 is not None else d1
    deg_s2 = opts.deg_s2 if opts.deg_s2 is not None else d2
    stage = None
    if warm_start is None and init is None and opts.deg_V > 2 and opts.quadratic_warm_start:
        warm_start = estimate_roa(sys, x_ep, replace(opts, deg_V=2, deg_s1=None, deg_s2=None))
        stage = {"deg_V": 2, "status": warm_start.status, "volume_proxy": warm_start.volume_proxy,
                 "iterations": warm_start.diagnostics["iterations"],
                 "runtime_s": warm_start.diagnostics["runtime_s"]}
    if warm_start is not None:
        if warm_start.vars != tuple(vars) or not np.allclose(warm_start.x_ep, x_ep):
            raise PcroaError("warm-start certificate belongs to a different system or equilibrium",
                             module="roa", operation="estimate_roa", code="warm_start_mismatch")
        V, P_B, lyap = warm_start.V, warm_start.P_B.copy(), warm_start.parts["lyap"]
        c_star = warm_start.diagnostics.get("c_star", math.nan)
        init_evals = 0
    else:
        init = init or init_lyapunov(sys, x_ep, opts, fbar=fbar)
        V = init.V0
        # ball strictly inside {V0 <= 1}; the 10% slack keeps the containment step strictly feasible
        P_B = INIT_BALL_SLACK * float(np.linalg.eigvalsh(init.P)[-1]) / init.c_star * np.eye(N)
        lyap = _lyap_part(vars, V, monomial_basis(N, 1, 1), opts.l_coeff)
        c_star, init_evals = init.c_star, init.evaluations

    def make_cert(V, lyap, s1p, decp, s2p, conp, P_B, status="optimal"):
        return RoaCertificate(
            system_names=tuple(vars), n=sys.n, p=sys.p, family=sys.family.value, x_ep=x_ep,
            fbar=fbar, l_coeff=opts.l_coeff, V=V,
            parts={"lyap": lyap, "s1": s1p, "decrease": decp, "s2": s2p, "contain": conp},
            P_B=linalg.symmetrize(P_B), status=status)

    history = []
    best = None
    stall = 0
    status = "optimal"
    for k in range(opts.max_iter):
        # multiplier step
        _, sol1, s1lp = _multiplier_s1(vars, fbar, V, deg_s1, opts)
        _, sol2, s2lp = _multiplier_s2(vars, V, P_B, deg_s2, opts)
        ok1, ok2 = _sol_ok(sol1, opts.verify_tol), _sol_ok(sol2, opts.verify_tol)
        if not (ok1 and ok2):
            if k == 0:
                raise SosInfeasibleError(
                    f"multiplier step infeasible on the initial estimate "
                    f"(decrease: {sol1.status}, containment: {sol2.status})",
                    module="roa", operation="estimate_roa", code="init_failed")
            status = "degraded"
            log.warning("multiplier step failed at iteration %d (decrease: %s, containment: %s); "
                        "keeping best iterate", k, sol1.status, sol2.status)
            break
        s1 = sol1.value(s1lp)
        s2 = sol2.value(s2lp)
        s1p = _part(sol1, s1lp, "s1")
        s2p = _part(sol2, s2lp, "s2")
        if best is None:
            decp = _part(sol1, None, "gram:decrease", -vdot(V, fbar) - s1 * (1.0 - V) - _lpoly(vars, opts.l_coeff))
            conp = _part(sol2, None, "gram:contain", (1.0 - V) - s2 * (1.0 - quad_poly(vars, P_B)))
            best = make_cert(V, lyap, s1p, decp, s2p, conp, P_B)
            obj0 = best.volume_proxy
            history.append({"iteration": 0, "objective": obj0, "eps": sol1.objective})
        # V-step
        try:
            # half the achieved multiplier margin (capped) keeps the current V strictly feasible
            pad = min(opts.step_margin, 0.5 * max(-sol1.objective, 0.0))
            _, sol, Vlp, Pk, basis_V, padG = _v_step(vars, fbar, s1, s2, P_B, opts,
                                                      pad_basis=sol1.basis("gram:decrease"), pad=pad)
        except SolverNumericalError as exc:
            log.warning("V-step solver failure at iteration %d: %s", k, exc)
            status = "degraded"
            break
        # a stalled last iterate is still usable when it passes verification below
        if not (sol.ok or sol.status == "max_iter"):
            log.warning("V-step returned %s at iteration %d; keeping best iterate", sol.status, k)
            status = "degraded"
            break
        Vn = sol.value(Vlp)
        Pn = np.array([[sol.key_value(Pk[a][c]) for c in range(N)] for a in range(N)])
        cand = make_cert(
            Vn, GramPart(Vn - _lpoly(vars, opts.l_coeff), sol.gram("gram:lyap"), basis_V),
            s1p, GramPart(-vdot(Vn, fbar) - s1 * (1.0 - Vn) - _lpoly(vars, opts.l_coeff),
                          sol.gram("gram:decrease") + padG,
                          sol.basis("gram:decrease")),
            s2p, _part(sol, None, "gram:contain", (1.0 - Vn) - s2 * (1.0 - quad_poly(vars, Pn))), Pn)
        try:
            obj = cand.volume_proxy
        except PcroaError:
            status = "degraded"
            break
        if not cand.verified(opts.verify_tol) or obj < best.volume_proxy * (1 - 1e-9):
            log.warning("V-step iterate %d rejected (verified=%s, objective %.6g vs %.6g)", k + 1,
                        cand.verified(opts.verify_tol), obj, best.volume_proxy)
            status = "degraded"
            break
        rel = (obj - best.volume_proxy) / best.volume_proxy
        history.append({"iteration": k + 1, "objective": obj, "eps": sol1.objective, "rel_improvement": rel})
        if progress:
            progress(k + 1, obj)
        best = cand
        V, P_B = Vn, Pn
        stall = stall + 1 if rel < opts.obj_tol else 0
        if stall >= 2:
            break
    best.history = history
    best.status = status
    best.diagnostics = {
        "verification": best.verify(opts.verify_tol),
        "c_star": c_star,
        "init_evaluations": init_evals,
        "warm_start": stage if stage is not None else warm_start is not None,
        "deg_V": opts.deg_V, "deg_s1": deg_s1, "deg_s2": deg_s2,
        "iterations": len(history) - 1,
        "runtime_s": time.perf_counter() - t0,
    }
    return best


# -- sampling helpers ---------------------------------------------------------------------------


def _first_crossing(fun, level, direction_eval, r_max=1e3, ngrid=400):
    """Smallest ``r`` with ``fun(r) = level`` on a geometric grid, refined by brentq."""
    rs = np.geomspace(1e-6, r_max, ngrid)
    vals = direction_eval(rs)
    above = np.nonzero(vals >= level)[0]
    if not len(above):
        return math.nan
    j = above[0]
    if j == 0:
        return 0.0
    return brentq(lambda r: fun(r) - level, rs[j - 1], rs[j], xtol=1e-14, rtol=1e-13)


def level_set_points(cert: RoaCertificate, level: float, count: int, rng, r_max: float = 1e3):
    """``count`` points with ``V = level`` along random rays (first crossing)."""
    N = cert.N
    out = []
    while len(out) < count:
        u = rng.standard_normal(N)
        u /= np.linalg.norm(u)
        r = _first_crossing(lambda r: cert.V.eval(r * u), level,
                            lambda rs: cert.V.eval(rs[:, None] * u[None, :]), r_max)
        if np.isfinite(r):
            out.append(r * u)
    return np.array(out)


def sublevel_samples(cert: RoaCertificate, count: int, rng, level: float = 1.0):
    """Uniform-radius samples inside ``{V <= level}`` (rays scaled by a uniform fraction)."""
    pts = level_set_points(cert, level, count, rng)
    return pts * rng.uniform(0.0, 1.0, size=(count, 1))


# -- recovery of R0 -------------------------------------------------------------------------------


@dataclass
class RZeroResult:
    sigma2: np.ndarray
    mean_center: np.ndarray
    mean_vars: tuple
    poly: Poly  # q(z0); R0 = {x0 : q(x0 - mean_center) <= 1}
    Q0: np.ndarray | None = None
    basis: list | None = None
    P_B0: np.ndarray | None = None
    parts: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    status: str = "optimal"
    method: str = "sos"
    diagnostics: dict = field(default_factory=dict)

    def contains(self, x0) -> np.ndarray:
        z = np.asarray(x0, dtype=float) - self.mean_center
        return self.poly.eval(z) <= 1.0

    def boundary(self, npts: int = 720, r_max: float = 1e3) -> np.ndarray:
        return trace_boundary(self.poly, self.mean_center, npts, r_max)

    def area(self, npts: int = 720) -> float:
        return polygon_area(self.boundary(npts))

    def to_dict(self):
        out = {
            "kind": "r0_result",
            "method": self.method,
            "status": self.status,
            "sigma2": np.asarray(self.sigma2).tolist(),
            "mean_center": self.mean_center.tolist(),
            "mean_vars": list(self.mean_vars),
            "poly": poly_to_list(self.poly),
            "history": self.history,
            "diagnostics": self.diagnostics,
            "parts": {k: v.to_dict() for k, v in sorted(self.parts.items())},
        }
        if self.Q0 is not None:
            out["Q0"] = self.Q0.tolist()
            out["basis"] = [list(m) for m in self.basis]
        if self.P_B0 is not None:
            out["P_B0"] = self.P_B0.tolist()
        return out

    @classmethod
    def from_dict(cls, d):
        mv = tuple(d["mean_vars"])
        basis = [tuple(m) for m in d["basis"]] if "basis" in d else None
        return cls(sigma2=np.array(d["sigma2"], dtype=float),
                   mean_center=np.array(d["mean_center"], dtype=float), mean_vars=mv,
                   poly=poly_from_list(d["poly"], mv),
                   Q0=np.array(d["Q0"], dtype=float) if "Q0" in d else None, basis=basis,
                   P_B0=np.array(d["P_B0"], dtype=float) if "P_B0" in d else None,
                   history=list(d.get("history", [])), status=d.get("status", "optimal"),
                   method=d.get("method", "sos"), diagnostics=dict(d.get("diagnostics", {})))


def _mean_poly(poly_full: Poly, mean_idx, mean_vars):
    """Restrict a polynomial that only involves the mean variables to those variables."""
    terms = {}
    for m, c in poly_full.terms.items():
        if any(e for k, e in enumerate(m) if k not in mean_idx):
            raise ValueError("polynomial involves non-mean variables")
        terms[tuple(m[k] for k in mean_idx)] = c
    return Poly(mean_vars, terms)


def slice_zero_variance(cert: RoaCertificate) -> RZeroResult:
    """Mean-coordinate slice of ``{V <= 1}`` for deterministic initial states.

    A deterministic initial condition has all variance modes equal to zero,
    i.e. ``z_J = -x_ep_J`` in shifted coordinates; the slice is the
    substitution of those values into ``V``.
    """
    z = cert.vars
    midx = cert.mean_indices
    mean_vars = tuple(z[i] for i in midx)
    mapping = {}
    for i, v in enumerate(z):
        if i not in midx:
            mapping[v] = -float(cert.x_ep[i])
    sl = cert.V.compose(mapping, z)
    q = _mean_poly(sl, midx, mean_vars)
    center = cert.x_ep[midx].copy()
    return RZeroResult(sigma2=np.zeros((cert.n, cert.n)), mean_center=center, mean_vars=mean_vars,
                       poly=q, method="slice", diagnostics={"q(0)": float(q.eval(np.zeros(cert.n)))})


def covariance_polys(cert: RoaCertificate, family=None):
    """``{(l, k): sum_i gamma_i x_{l,i} x_{k,i}}`` for ``l <= k`` in shifted variables."""
    z = cert.vars
    gam = norm_constants(family or cert.family, cert.p)
    out = {}
    for l in range(cert.n):
        for k in range(l, cert.n):
            acc = Poly.zero(z)
            for i in range(1, cert.p + 1):
                a, b = l * (cert.p + 1) + i, k * (cert.p + 1) + i
                xa = Poly.variable(z, z[a]) + float(cert.x_ep[a])
                xb = Poly.variable(z, z[b]) + float(cert.x_ep[b])
                acc = acc + (xa * xb).scale(gam[i])
            out[(l, k)] = acc
    return out


@dataclass
class RecoverOptions:
    deg_s1: int = 0
    deg_s2: int | None = None
    deg_h: int | None = None
    max_iter: int = 40
    obj_tol: float = 1e-3
    eps_cap: float = 1e-2
    verify_tol: float = 1e-6
    bisect_iter: int = 30
    bracket: tuple = MAX_BISECT_BRACKET
    force_sos: bool = False
    sdp: SdpOptions = field(default_factory=SdpOptions)


class _R0Builder:
    """Shared pieces of the recovery programs."""

    def __init__(self, cert: RoaCertificate, opts: RecoverOptions):
        self.cert = cert
        self.opts = opts
        self.z = cert.vars
        self.N = cert.N
        self.midx = cert.mean_indices
        self.dV = cert.deg_V
        self.deg_h = opts.deg_h if opts.deg_h is not None else max(0, self.dV - 2)
        self.deg_s2 = opts.deg_s2 if opts.deg_s2 is not None else max(0, self.dV - 2)
        self.basis_q = _sub_basis(self.N, self.midx, 1, self.dV // 2)
        self.cov = covariance_polys(cert)
        self.h_monos = monomial_basis(self.N, 0, self.deg_h)

    def containment(self, prog, q, s1, sigma2, h=None, margin=True):
        """(1 - V) - s1 (1 - q) + sum h_lk (sigma2_lk - cov_lk); returns (expr, h dict).

        ``margin``: True maximises a nonnegative margin, False adds the plain SOS
        constraint, "test" maximises a free margin (feasible iff it ends >= 0).
        """
        one = _const(self.z, 1.0)
        if isinstance(q, Poly) and isinstance(s1, Poly):
            expr = LinPoly.from_poly(1.0 - self.cert.V - s1 * (1.0 - q))
        elif isinstance(q, Poly):
            expr = LinPoly.from_poly(1.0 - self.cert.V) - s1.mul_poly(1.0 - q)
        else:
            expr = LinPoly.from_poly(1.0 - self.cert.V) - (LinPoly.from_poly(one) - q).mul_poly(s1)
        hs = {}
        for (l, k), cov in self.cov.items():
            if h is None:
                hp = prog.free_poly(self.h_monos, f"h[{l},{k}]")
                hs[(l, k)] = hp
            else:
                hp = h[(l, k)]
            if isinstance(sigma2, dict):
                # sigma2 entries are decision keys; h must then be fixed
                expr = expr + LinPoly.from_poly(hp * (-cov))
                key = sigma2[(l, k)]
                for mono, c in hp.terms.items():
                    d = expr.terms.setdefault(mono, {})
                    d[key] = d.get(key, 0.0) + c
            else:
                gpoly = _const(self.z, float(sigma2[l, k])) - cov
                expr = expr + (hp.mul_poly(gpoly) if isinstance(hp, LinPoly) else LinPoly.from_poly(hp * gpoly))
        if margin:
            _add_with_margin(prog, expr, "cov", self.opts.eps_cap, min_deg=0, free=margin == "test")
        else:
            prog.add_sos(expr, "cov", min_deg=0)
        return hs

    def s1_atom(self, prog):
        if self.opts.deg_s1 == 0:
            return prog.gram_block([(0,) * self.N], "s1")
        return prog.gram_block(monomial_basis(self.N, 0, self.opts.deg_s1 // 2), "s1")

    def s2_atom(self, prog):
        return prog.gram_block(_sub_basis(self.N, self.midx, 0, self.deg_s2 // 2), "s2")

    def surrogate(self, prog, q, s2, P_B0):
        """(1 - q) - s2 (1 - z0' P_B0 z0) over the mean variables."""
        one = _const(self.z, 1.0)
        ql = q if isinstance(q, LinPoly) else LinPoly.from_poly(q)
        if isinstance(P_B0, np.ndarray):
            b = quad_poly(self.z, P_B0, self.midx)
            expr = (LinPoly.from_poly(one) - ql) - s2.mul_poly(1.0 - b)
        else:
            b = _quad_lin(self.z, P_B0, self.midx)
            expr = (LinPoly.from_poly(one) - ql) - (LinPoly.from_poly(one) - b).mul_poly(s2)
        prog.add_sos(expr, "surrogate",
                     basis=_sub_basis(self.N, self.midx, 0, self.dV // 2))


def _gram_poly(vars, basis, G):
    return Poly.from_quadratic_form(vars, basis, G)


def recover_r0(cert: RoaCertificate, sigma2, opts: RecoverOptions | None = None) -> RZeroResult:
    """Largest set of initial means certified for the fixed initial covariance ``sigma2``."""
    opts = opts or RecoverOptions()
    sigma2 = linalg.symmetrize(np.atleast_2d(np.asarray(sigma2, dtype=float)))
    if sigma2.shape != (cert.n, cert.n):
        raise DimensionError(f"sigma2 must be {cert.n}x{cert.n}", module="roa", operation="recover_r0",
                             code="shape")
    if np.linalg.eigvalsh(sigma2)[0] < -1e-12:
        raise PcroaError("sigma2 is not positive semidefinite", module="roa", operation="recover_r0",
                         code="not_psd")
    if not opts.force_sos and np.all(sigma2 == 0):
        return slice_zero_variance(cert)
    t0 = time.perf_counter()
    B = _R0Builder(cert, opts)
    z, N, midx = B.z, B.N, B.midx
    mean_vars = tuple(z[i] for i in midx)
    nq = len(B.basis_q)
    quadratic = B.dV == 2

    def mult_step(q: Poly, P_B0=None, strict=False):
        # strict: the trial set must be feasible with a nonnegative margin, not just to tolerance
        prog = SosProgram(z)
        s1 = B.s1_atom(prog)
        hs = B.containment(prog, q, s1, sigma2, margin="test")
        sol = _solve_or_none(prog, opts.sdp)
        if not _margin_test_ok(sol, opts.verify_tol) or (strict and sol.objective > 0.0):
            return None
        res = {"s1": sol.value(s1), "h": {k: sol.value(v) for k, v in hs.items()},
               "s1_part": _part(sol, s1, "s1"), "cov_part": _part(sol, None, "gram:cov",
                                                                   sol.value(prog.constraints[0].expr)),
               "eps": -sol.objective}
        if P_B0 is not None:
            prog2 = SosProgram(z)
            s2 = B.s2_atom(prog2)
            B.surrogate(prog2, q, s2, P_B0)
            sol2 = _solve_or_none(prog2, opts.sdp)
            if not _sol_ok(sol2, opts.verify_tol):
                return None
            res.update({"s2": sol2.value(s2), "s2_part": _part(sol2, s2, "s2"),
                        "sur_part": _part(sol2, None, "gram:surrogate",
                                          sol2.value(prog2.constraints[0].expr))})
        return res

    # initial q = c * v'v, smallest feasible c by geometric bisection
    def q_of(c):
        return _gram_poly(z, B.basis_q, c * np.eye(nq))

    lo, hi = opts.bracket
    evals = 0
    first = mult_step(q_of(hi), strict=True)
    evals += 1
    if first is None:
        raise SosInfeasibleError(
            "no initial-mean set is certified for this covariance (containment constraint infeasible "
            "even for the smallest trial set)", module="roa", operation="recover_r0", code="infeasible")
    best_c, best_m = hi, first
    for _ in range(opts.bisect_iter):
        mid = math.sqrt(lo * hi)
        evals += 1
        r = mult_step(q_of(mid), strict=True)
        if r is None:
            lo = mid
        else:
            hi, best_c, best_m = mid, mid, r
    Q = best_c * np.eye(nq)
    q = q_of(best_c)
    P_B0 = None
    if not quadratic:
        # the bisected c sits on the feasibility boundary, where the surrogate step may
        # not verify; shrink the trial set a little until both steps do
        for backoff in INIT_BACKOFF:
            c = best_c * backoff
            evals += 1
            if mult_step(q_of(c)) is None:
                continue
            # ball inside {q <= 1}: on |z0|^2 <= r2, v'v <= r2 + r2^2
            r2 = (-1.0 + math.sqrt(1.0 + 4.0 / c)) / 2.0
            P_B0 = (1.0 / r2) * np.eye(cert.n)
            m2 = None
            for _ in range(60):
                evals += 1
                m2 = mult_step(q_of(c), P_B0)
                if m2 is not None:
                    break
                P_B0 = 2.0 * P_B0
            if m2 is not None:
                best_c, best_m = c, m2
                Q, q = c * np.eye(nq), q_of(c)
                break
        else:
            raise SosInfeasibleError("could not initialise the surrogate ellipsoid", module="roa",
                                     operation="recover_r0", code="init_failed")

    def objective(Q, P_B0):
        M = Q[: cert.n, : cert.n] if quadratic else P_B0
        return 1.0 / linalg.geomean_eig(M)

    history = [{"iteration": 0, "objective": objective(Q, P_B0), "c0": best_c}]
    cur = {"Q": Q, "q": q, "P_B0": P_B0, "m": best_m}
    status = "optimal"
    stall = 0
    for k in range(opts.max_iter):
        m = mult_step(cur["q"], cur["P_B0"]) if k else cur["m"]
        if m is None:
            status = "degraded"
            break
        # Q-step
        prog = SosProgram(z)
        qlp = prog.gram_block(B.basis_q, "Q0")
        B.containment(prog, qlp, m["s1"], sigma2, margin=False)
        if quadratic:
            W = np.linalg.inv(cur["Q"])
            obj = {}
            for a in range(nq):
                for c in range(a + 1):
                    key = prog.gram_entry("Q0", a, c)
                    obj[key] = obj.get(key, 0.0) + (W[a, a] if a == c else 2.0 * W[a, c])
        else:
            Pk = prog.psd_matrix(cert.n, "P_B0")
            B.surrogate(prog, qlp, m["s2"], Pk)
            W = np.linalg.inv(cur["P_B0"])
            obj = {}
            for a in range(cert.n):
                for c in range(a + 1):
                    obj[Pk[a][c]] = obj.get(Pk[a][c], 0.0) + (W[a, a] if a == c else 2.0 * W[a, c])
        prog.minimize(obj)
        try:
            sol = prog.solve(opts.sdp, raise_structural=False)
        except SolverNumericalError:
            status = "degraded"
            break
        if not _sol_ok(sol, opts.verify_tol):
            status = "degraded"
            break
        Qn = sol.gram("Q0")
        Pn = None if quadratic else np.array(
            [[sol.key_value(Pk[a][c]) for c in range(cert.n)] for a in range(cert.n)])
        try:
            obj_new = objective(Qn, Pn)
        except PcroaError:
            status = "degraded"
            break
        prev = history[-1]["objective"]
        rel = (obj_new - prev) / prev
        if rel < -1e-9:
            status = "degraded"
            break
        cur = {"Q": Qn, "q": sol.value(qlp), "P_B0": Pn, "m": m, "sol": sol}
        history.append({"iteration": k + 1, "objective": obj_new, "rel_improvement": rel})
        stall = stall + 1 if rel < opts.obj_tol else 0
        if stall >= 2:
            break
    m = cur["m"]
    parts = {"s1": m["s1_part"]}
    if "sol" in cur:
        sol = cur["sol"]
        parts["cov"] = _part(sol, None, "gram:cov", sol.value(sol.program.constraints[0].expr))
        if not quadratic:
            parts["surrogate"] = _part(sol, None, "gram:surrogate", sol.value(sol.program.constraints[1].expr))
            parts["s2"] = m["s2_part"]
    else:
        parts["cov"] = m["cov_part"]
        if not quadratic:
            parts["surrogate"], parts["s2"] = m["sur_part"], m["s2_part"]
    qpoly = _mean_poly(cur["q"], midx, mean_vars)
    res = RZeroResult(
        sigma2=sigma2, mean_center=cert.x_ep[midx].copy(), mean_vars=mean_vars, poly=qpoly,
        Q0=cur["Q"], basis=[tuple(b[i] for i in midx) for b in B.basis_q], P_B0=cur["P_B0"],
        parts=parts, history=history, status=status, method="sos")
    res.diagnostics = {
        "verification": {k: v.verify(opts.verify_tol) for k, v in parts.items()},
        "h": {f"{l},{k}": poly_to_list(p) for (l, k), p in m["h"].items()},
        "init_evaluations": evals,
        "runtime_s": time.perf_counter() - t0,
    }
    return res


def max_initial_covariance(cert: RoaCertificate, q0: Poly, opts: RecoverOptions | None = None):
    """Largest ``det(sigma2)^(1/n)`` for which the fixed mean set ``{q0 <= 1}`` stays certified.

    ``q0`` is a polynomial in the shifted mean variables (as in :class:`RZeroResult`).
    Returns ``(sigma2, history)``.
    """
    opts = opts or RecoverOptions()
    B = _R0Builder(cert, opts)
    z, N, midx, n = B.z, B.N, B.midx, cert.n
    qfull = _embed_mean_poly(q0, z, midx)

    def mult_step(sig):
        prog = SosProgram(z)
        s1 = B.s1_atom(prog)
        hs = B.containment(prog, qfull, s1, sig, margin=True)
        sol = _solve_or_none(prog, opts.sdp)
        if not _sol_ok(sol, opts.verify_tol):
            return None
        return sol.value(s1), {k: sol.value(v) for k, v in hs.items()}

    sig = np.zeros((n, n))
    m = mult_step(sig)
    if m is None:
        raise SosInfeasibleError("fixed mean set is not certified even with zero covariance "
                                 "(Q0 too large)", module="roa", operation="max_initial_covariance",
                                 code="q0_too_large")
    history = [{"iteration": 0, "objective": 0.0}]
    stall = 0
    for k in range(opts.max_iter):
        s1, h = m
        prog = SosProgram(z)
        S = prog.psd_matrix(n, "sigma2")
        keys = {(l, kk): S[kk][l] for l in range(n) for kk in range(l, n)}
        B.containment(prog, qfull, s1, keys, h=h, margin=False)
        prog.maximize_geomean(S, "sigma")
        try:
            sol = prog.solve(opts.sdp, raise_structural=False)
        except SolverNumericalError:
            break
        if not _sol_ok(sol, opts.verify_tol):
            break
        sig_new = np.array([[sol.key_value(S[a][c]) for c in range(n)] for a in range(n)])
        sig_new = linalg.symmetrize(sig_new)
        lam = np.linalg.eigvalsh(sig_new)
        g = float(np.exp(np.mean(np.log(np.maximum(lam, 1e-300))))) if lam[0] > 0 else 0.0
        prev = history[-1]["objective"]
        if g < prev * (1 - 1e-9):
            break
        sig = sig_new
        rel = (g - prev) / prev if prev > 0 else math.inf
        history.append({"iteration": k + 1, "objective": g, "rel_improvement": rel})
        stall = stall + 1 if rel < opts.obj_tol else 0
        if stall >= 2:
            break
        m2 = mult_step(sig)
        if m2 is None:
            break
        m = m2
    return sig, history


def _embed_mean_poly(q0: Poly, z, midx) -> Poly:
    N = len(z)
    terms = {}
    for m, c in q0.terms.items():
        full = [0] * N
        for k, e in zip(midx, m):
            full[k] = e
        terms[tuple(full)] = c
    return Poly(z, terms)


def r0_certified(cert: RoaCertificate, sigma2, q0: Poly, opts: RecoverOptions | None = None) -> bool:
    """Whether the containment certificate exists for the fixed set ``{q0 <= 1}``."""
    opts = opts or RecoverOptions()
    B = _R0Builder(cert, opts)
    prog = SosProgram(B.z)
    s1 = B.s1_atom(prog)
    B.containment(prog, _embed_mean_poly(q0, B.z, B.midx), s1,
                  linalg.symmetrize(np.atleast_2d(sigma2)), margin="test")
    sol = _solve_or_none(prog, opts.sdp)
    return _margin_test_ok(sol, opts.verify_tol)


# -- boundary tracing -------------------------------------------------------------------------------


def trace_boundary(q: Poly, center, npts: int = 720, r_max: float = 1e3) -> np.ndarray:
    """``{q = 1}`` along ``npts`` rays from ``center`` (first crossing); returns vertices."""
    if q.nvars != 2:
        raise DimensionError(f"boundary tracing needs a 2-D mean space, got {q.nvars}", module="roa",
                             operation="trace_boundary", code="not_planar")
    center = np.asarray(center, dtype=float)
    if q.eval(np.zeros(2)) >= 1.0:
        raise PcroaError("the set does not contain its centre", module="roa",
                         operation="trace_boundary", code="empty_set")
    th = 2 * np.pi * np.arange(npts) / npts
    U = np.stack([np.cos(th), np.sin(th)], axis=1)
    rs = np.geomspace(1e-6, r_max, 600)
    pts = rs[None, :, None] * U[:, None, :]
    vals = q.eval(pts.reshape(-1, 2)).reshape(npts, len(rs))
    out = np.empty((npts, 2))
    for k in range(npts):
        above = np.nonzero(vals[k] >= 1.0)[0]
        if not len(above):
            raise PcroaError(f"set is unbounded along ray {k}", module="roa",
                             operation="trace_boundary", code="unbounded")
        j = above[0]
        u = U[k]
        lo = rs[j - 1] if j else 0.0
        r = brentq(lambda r: q.eval(r * u) - 1.0, lo, rs[j], xtol=1e-14, rtol=1e-13)
        out[k] = center + r * u
    return out


def polygon_area(vertices) -> float:
    v = np.asarray(vertices, dtype=float)
    x, y = v[:, 0], v[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))
