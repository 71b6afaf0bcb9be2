"""Sum-of-squares constraints compiled to :class:`SdpProblem` rows.

A :class:`LinPoly` is a polynomial whose coefficients are affine in SDP
decision variables: ``terms[mono][key]`` with ``key = None`` for the constant.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from ..errors import SosInfeasibleError
from ..mvpoly import Poly, grlex_key, monomial_basis
from .sdp import (INFEASIBLE, MAX_ITER, OPTIMAL, SdpOptions, SdpProblem, SdpSolution, solve_conic,
                  sym_from_coords, coord_count)

ZERO_TOL = 1e-12


def _madd(a, b):
    return tuple(x + y for x, y in zip(a, b))


class LinPoly:
    __slots__ = ("nvars", "terms")

    def __init__(self, nvars: int, terms=None):
        self.nvars = nvars
        self.terms = terms if terms is not None else {}

    @classmethod
    def from_poly(cls, p: Poly):
        return cls(p.nvars, {m: {None: c} for m, c in p.terms.items()})

    @classmethod
    def zero(cls, nvars):
        return cls(nvars, {})

    def copy(self):
        return LinPoly(self.nvars, {m: dict(d) for m, d in self.terms.items()})

    def _accum(self, other, sign):
        out = self.copy()
        if isinstance(other, Poly):
            other = LinPoly.from_poly(other)
        for m, d in other.terms.items():
            tgt = out.terms.setdefault(m, {})
            for k, v in d.items():
                tgt[k] = tgt.get(k, 0.0) + sign * v
        return out

    def __add__(self, other):
        return self._accum(other, 1.0)

    def __sub__(self, other):
        return self._accum(other, -1.0)

    def __neg__(self):
        return self.scale(-1.0)

    def scale(self, c):
        return LinPoly(self.nvars, {m: {k: c * v for k, v in d.items()} for m, d in self.terms.items()})

    def mul_poly(self, p: Poly) -> "LinPoly":
        out = defaultdict(lambda: defaultdict(float))
        for m1, d in self.terms.items():
            for m2, c in p.terms.items():
                tgt = out[_madd(m1, m2)]
                for k, v in d.items():
                    tgt[k] += c * v
        return LinPoly(self.nvars, {m: dict(d) for m, d in out.items()})

    __mul__ = mul_poly

    def diff(self, i: int) -> "LinPoly":
        out = {}
        for m, d in self.terms.items():
            e = m[i]
            if e:
                out[m[:i] + (e - 1,) + m[i + 1:]] = {k: e * v for k, v in d.items()}
        return LinPoly(self.nvars, out)

    def monomials(self):
        return sorted(self.terms, key=grlex_key)

    def keys(self):
        return {k for d in self.terms.values() for k in d if k is not None}

    @property
    def degree(self):
        return max((sum(m) for m in self.terms), default=0)

    def value(self, getval, vars) -> Poly:
        """Substitute decision values (``getval(key) -> float``)."""
        out = {}
        for m, d in self.terms.items():
            out[m] = sum(v * (1.0 if k is None else getval(k)) for k, v in d.items())
        return Poly(vars, out)


@dataclass
class GramInfo:
    name: str
    block: int
    basis: list


@dataclass
class ConstraintInfo:
    name: str
    kind: str  # "sos" or "eq"
    expr: LinPoly
    gram: str | None


class SosProgram:
    """Builder for SOS programs over the polynomial variables ``vars``."""

    def __init__(self, vars):
        self.vars = tuple(vars)
        self.n = len(self.vars)
        self.sdp = SdpProblem()
        self.grams: dict[str, GramInfo] = {}
        self.constraints: list[ConstraintInfo] = []
        self.structural: list[str] = []
        self._maxdet = None
        self._nrows_by_constraint: dict[str, int] = {}

    # -- decision atoms ---------------------------------------------------------

    def gram_block(self, basis, name: str) -> LinPoly:
        """New PSD block ``G`` on ``basis``; returns ``v' G v``."""
        if name in self.grams:
            raise ValueError(f"duplicate Gram name {name!r}")
        basis = [tuple(b) for b in basis]
        m = len(basis)
        blk = self.sdp.add_block(m, name)
        self.grams[name] = GramInfo(name, blk, basis)
        terms = {}
        for b in range(m):
            for a in range(b, m):
                mono = _madd(basis[a], basis[b])
                key = self.sdp.var_block(blk, a, b)
                d = terms.setdefault(mono, {})
                d[key] = d.get(key, 0.0) + (1.0 if a == b else 2.0)
        return LinPoly(self.n, terms)

    def sos_poly(self, max_deg: int, name: str, min_deg: int = 0) -> LinPoly:
        """SOS polynomial with Gram basis of degrees ``min_deg/2 .. max_deg/2``."""
        basis = monomial_basis(self.n, min_deg // 2, max_deg // 2)
        return self.gram_block(basis, name)

    def free_poly(self, monos, name: str) -> LinPoly:
        terms = {}
        for i, m in enumerate(monos):
            k = self.sdp.var_free(self.sdp.add_free(f"{name}[{i}]"))
            terms[tuple(m)] = {k: 1.0}
        return LinPoly(self.n, terms)

    def free_scalar(self, name: str):
        return self.sdp.var_free(self.sdp.add_free(name))

    def gram_entry(self, name: str, a: int, b: int):
        return self.sdp.var_block(self.grams[name].block, a, b)

    def psd_matrix(self, d: int, name: str):
        """A bare PSD matrix variable; returns the matrix of entry keys."""
        blk = self.sdp.add_block(d, name)
        self.grams[name] = GramInfo(name, blk, [])
        return [[self.sdp.var_block(blk, a, b) for b in range(d)] for a in range(d)]

    # -- constraints ----------------------------------------------------------------

    def add_sos(self, expr: LinPoly, name: str, basis=None, min_deg: int | None = None,
                max_deg: int | None = None) -> str:
        """Require ``expr`` to be SOS with a fresh Gram block; returns the Gram name."""
        if basis is None:
            degs = [sum(m) for m in expr.terms]
            lo = min(degs, default=0) if min_deg is None else min_deg
            hi = max(degs, default=0) if max_deg is None else max_deg
            basis = monomial_basis(self.n, lo // 2, max(lo // 2, hi // 2))
        gname = f"gram:{name}"
        gram = self.gram_block(basis, gname)
        self._add_identity(expr - gram, name)
        self.constraints.append(ConstraintInfo(name, "sos", expr, gname))
        return gname

    def add_eq(self, expr: LinPoly, name: str):
        """Require every coefficient of ``expr`` to vanish."""
        self._add_identity(expr, name)
        self.constraints.append(ConstraintInfo(name, "eq", expr, None))

    def add_linear(self, coeffs: dict, rhs: float, name: str = ""):
        """Scalar equality ``sum coeffs[k] * k = rhs``."""
        self.sdp.add_row({k: v for k, v in coeffs.items()}, rhs, name)

    def _add_identity(self, expr: LinPoly, name: str):
        count = 0
        for m in sorted(expr.terms, key=grlex_key):
            d = expr.terms[m]
            const = d.get(None, 0.0)
            coeffs = {k: v for k, v in d.items() if k is not None and abs(v) > ZERO_TOL}
            if not coeffs:
                if abs(const) > 1e-10:
                    label = Poly(self.vars, {m: 1.0}).to_str() if self.vars else str(m)
                    self.structural.append(
                        f"{name}: monomial {label} has coefficient {const:.3g} and no decision slot")
                continue
            self.sdp.add_row(coeffs, -const, f"{name}:{m}")
            count += 1
        self._nrows_by_constraint[name] = count

    # -- objectives -----------------------------------------------------------------

    def minimize(self, coeffs: dict):
        self.sdp.set_objective(coeffs)

    def maximize_geomean(self, entries, name: str = "maxdet"):
        """Maximise ``det(B)^(1/d)`` where ``entries[a][b]`` is a key or a ``{key: coef}`` dict.

        Uses ``[[B, D], [D', diag D]] >= 0`` with ``D`` lower triangular and a tower of
        2x2 blocks ``[[u, w], [w, v]] >= 0`` realising ``w <= sqrt(u v)``.
        """
        d = len(entries)
        Z = self.psd_matrix(2 * d, f"{name}:Z")

        def as_dict(e):
            return dict(e) if isinstance(e, dict) else {e: 1.0}

        for a in range(d):
            for b in range(a + 1):
                row = {Z[a][b]: 1.0}
                for k, v in as_dict(entries[a][b]).items():
                    row[k] = row.get(k, 0.0) - v
                self.sdp.add_row(row, 0.0, f"{name}:B[{a},{b}]")
        for j in range(d):
            for i in range(d):
                if j > i:  # D[i, j] = 0 above the diagonal
                    self.sdp.add_row({Z[d + j][i]: 1.0}, 0.0, f"{name}:Dup[{i},{j}]")
            for k in range(j):
                self.sdp.add_row({Z[d + j][d + k]: 1.0}, 0.0, f"{name}:offdiag[{j},{k}]")
            self.sdp.add_row({Z[d + j][d + j]: 1.0, Z[d + j][j]: -1.0}, 0.0, f"{name}:diag[{j}]")
        level = [Z[d + j][d + j] for j in range(d)]
        size = 1 << max(0, math.ceil(math.log2(d))) if d > 1 else 1
        if d == 1:
            t = level[0]
        else:
            top = self.free_scalar(f"{name}:t")
            level = level + [top] * (size - d)
            depth = 0
            while len(level) > 1:
                nxt = []
                for i in range(0, len(level), 2):
                    T = self.psd_matrix(2, f"{name}:tower{depth}.{i // 2}")
                    self.sdp.add_row({T[0][0]: 1.0, level[i]: -1.0}, 0.0)
                    self.sdp.add_row({T[1][1]: 1.0, level[i + 1]: -1.0}, 0.0)
                    nxt.append(T[1][0])
                level = nxt
                depth += 1
            self.sdp.add_row({level[0]: 1.0, top: -1.0}, 0.0, f"{name}:top")
            t = top
        self._maxdet = t
        self.sdp.set_objective({t: -1.0})
        return t

    # -- solve ------------------------------------------------------------------------

    def solve(self, opts: SdpOptions | None = None, raise_structural: bool = True) -> "SosSolution":
        if self.structural:
            if raise_structural:
                raise SosInfeasibleError("structurally infeasible: " + "; ".join(self.structural[:5]),
                                         module="sosdp", operation="compile_sos", code="structural")
            return SosSolution(self, None, "infeasible", structural=list(self.structural))
        sol = solve_conic(self.sdp, opts)
        return SosSolution(self, sol, sol.status)


@dataclass
class SosSolution:
    program: SosProgram
    sdp: SdpSolution | None
    status: str
    structural: list = field(default_factory=list)

    @property
    def ok(self):
        return self.status == OPTIMAL

    def _offsets(self):
        return self.program.sdp.block_offsets()

    def key_value(self, key) -> float:
        off = self._offsets()
        if key[0] == "b":
            return float(self.sdp.x[off[key[1]] + key[2]])
        return float(self.sdp.x[off[-1] + key[1]])

    def value(self, lp: LinPoly) -> Poly:
        return lp.value(self.key_value, self.program.vars)

    def gram(self, name: str) -> np.ndarray:
        return self.sdp.blocks[self.program.grams[name].block]

    def basis(self, name: str):
        return self.program.grams[name].basis

    @property
    def objective(self):
        return self.sdp.objective if self.sdp else math.nan

    def verify(self, tol: float = 1e-6) -> dict:
        """``verify_gram`` on every SOS constraint plus the max residual of equality ones."""
        out = {}
        for c in self.program.constraints:
            p = self.value(c.expr)
            if c.kind == "sos":
                out[c.name] = verify_gram(p, self.gram(c.gram), self.basis(c.gram), tol)
            else:
                res = max((abs(v) for v in p.terms.values()), default=0.0)
                out[c.name] = {"residual": res, "min_eig": math.inf, "passed": res < tol}
        return out

    def verified(self, tol: float = 1e-6) -> bool:
        """Gram checks pass; a ``max_iter`` last iterate counts when it passes them too."""
        return self.status in (OPTIMAL, MAX_ITER) and all(d["passed"] for d in self.verify(tol).values())


def verify_gram(poly: Poly, G, basis, tol: float = 1e-6) -> dict:
    """Coefficient residual of ``v' G v - poly`` and the minimum eigenvalue of ``G``."""
    G = np.asarray(G, dtype=float)
    G = 0.5 * (G + G.T)
    q = Poly.from_quadratic_form(poly.vars, basis, G) if len(basis) else Poly.zero(poly.vars)
    diff = q - poly
    res = max((abs(v) for v in diff.terms.values()), default=0.0)
    lam = float(np.linalg.eigvalsh(G)[0]) if G.size else math.inf
    return {"residual": float(res), "min_eig": lam, "passed": bool(res < tol and lam > -tol)}


def compile_sos(prog: SosProgram, constraint, name: str = "sos", basis=None) -> str:
    """Add ``constraint`` (a Poly or LinPoly) as an SOS requirement to ``prog``."""
    expr = LinPoly.from_poly(constraint.with_vars(prog.vars)) if isinstance(constraint, Poly) else constraint
    return prog.add_sos(expr, name, basis=basis)


def sos_decompose(poly: Poly, basis=None, opts: SdpOptions | None = None) -> SosSolution:
    """Feasibility test ``poly in SOS`` (structural failures come back as ``infeasible``)."""
    prog = SosProgram(poly.vars)
    compile_sos(prog, poly, "p", basis)
    return prog.solve(opts, raise_structural=False)
