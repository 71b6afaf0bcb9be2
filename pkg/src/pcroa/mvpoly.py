"""Sparse multivariate polynomials over named variables.

A :class:`Poly` stores a map from monomial to float coefficient.  Monomials are
dense exponent tuples aligned with ``Poly.vars`` (``(2, 0, 1)`` is ``x1^2*x3``
over ``("x1", "x2", "x3")``); a zero exponent is simply absent from the
product.  Polys are immutable; every operation returns a new object with
coefficients below the prune threshold dropped.
"""

from __future__ import annotations

import itertools
import math
import re
from collections import defaultdict
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DimensionError, ParseError

PRUNE_TOL = 1e-14

Monomial = tuple


def grlex_key(mono: Sequence[int]):
    """Sort key for graded-lexicographic order (lower degree first, then x1 > x2 > ...)."""
    return (sum(mono), tuple(-e for e in mono))


class Poly:
    __slots__ = ("vars", "terms", "_index")

    def __init__(self, vars: Sequence[str], terms: Mapping | None = None, prune: float = PRUNE_TOL):
        self.vars = tuple(vars)
        if len(set(self.vars)) != len(self.vars):
            raise ValueError(f"duplicate variable names in {self.vars}")
        n = len(self.vars)
        clean = {}
        for mono, c in (terms or {}).items():
            mono = tuple(int(e) for e in mono)
            if len(mono) != n:
                raise DimensionError(
                    f"monomial {mono} has {len(mono)} exponents, expected {n}",
                    module="mvpoly", operation="Poly", code="dimension")
            if any(e < 0 for e in mono):
                raise ValueError(f"negative exponent in {mono}")
            c = float(c)
            if abs(c) > prune:
                clean[mono] = clean.get(mono, 0.0) + c
        self.terms = {m: c for m, c in clean.items() if abs(c) > prune}
        self._index = None

    # -- construction -------------------------------------------------------

    @classmethod
    def constant(cls, vars, value):
        return cls(vars, {(0,) * len(vars): value})

    @classmethod
    def variable(cls, vars, name):
        vars = tuple(vars)
        i = vars.index(name) if isinstance(name, str) else int(name)
        mono = [0] * len(vars)
        mono[i] = 1
        return cls(vars, {tuple(mono): 1.0})

    @classmethod
    def zero(cls, vars):
        return cls(vars, {})

    @classmethod
    def from_quadratic_form(cls, vars, basis, gram):
        """``v(x)^T G v(x)`` for a list of basis monomials ``v``."""
        gram = np.asarray(gram, dtype=float)
        acc = defaultdict(float)
        for i, a in enumerate(basis):
            for j, b in enumerate(basis):
                if gram[i, j] != 0.0:
                    acc[tuple(x + y for x, y in zip(a, b))] += gram[i, j]
        return cls(vars, acc)

    # -- basic properties ---------------------------------------------------

    @property
    def nvars(self):
        return len(self.vars)

    @property
    def degree(self):
        return max((sum(m) for m in self.terms), default=0)

    @property
    def min_degree(self):
        return min((sum(m) for m in self.terms), default=0)

    def is_zero(self):
        return not self.terms

    def coeff(self, mono) -> float:
        return self.terms.get(tuple(mono), 0.0)

    def monomials(self):
        return sorted(self.terms, key=grlex_key)

    def var_index(self, name):
        if self._index is None:
            self._index = {v: i for i, v in enumerate(self.vars)}
        return self._index[name]

    def __len__(self):
        return len(self.terms)

    def __repr__(self):
        return f"Poly({self.to_str()!r}, vars={list(self.vars)})"

    def __str__(self):
        return self.to_str()

    def __eq__(self, other):
        if isinstance(other, (int, float)):
            other = Poly.constant(self.vars, other)
        if not isinstance(other, Poly):
            return NotImplemented
        if self.vars != other.vars:
            a, b = _align(self, other)
            return a.terms == b.terms
        return self.terms == other.terms

    def __hash__(self):
        return hash((self.vars, frozenset(self.terms.items())))

    # -- variable handling ----------------------------------------------------

    def with_vars(self, vars: Sequence[str]) -> "Poly":
        """Re-express over ``vars``, which must contain every variable actually used."""
        vars = tuple(vars)
        if vars == self.vars:
            return self
        pos = {v: i for i, v in enumerate(vars)}
        used = {self.vars[i] for m in self.terms for i, e in enumerate(m) if e}
        missing = used - set(vars)
        if missing:
            raise DimensionError(f"variables {sorted(missing)} not in target list",
                                 module="mvpoly", operation="with_vars", code="dimension")
        terms = {}
        for m, c in self.terms.items():
            new = [0] * len(vars)
            for i, e in enumerate(m):
                if e:
                    new[pos[self.vars[i]]] = e
            terms[tuple(new)] = c
        return Poly(vars, terms)

    def used_vars(self):
        return tuple(v for i, v in enumerate(self.vars) if any(m[i] for m in self.terms))

    # -- arithmetic -----------------------------------------------------------

    def _coerce(self, other):
        if isinstance(other, Poly):
            return _align(self, other)
        if isinstance(other, (int, float, np.floating, np.integer)):
            return self, Poly.constant(self.vars, float(other))
        return None, None

    def __add__(self, other):
        a, b = self._coerce(other)
        if a is None:
            return NotImplemented
        terms = dict(a.terms)
        for m, c in b.terms.items():
            terms[m] = terms.get(m, 0.0) + c
        return Poly(a.vars, terms)

    __radd__ = __add__

    def __neg__(self):
        return Poly(self.vars, {m: -c for m, c in self.terms.items()})

    def __sub__(self, other):
        a, b = self._coerce(other)
        if a is None:
            return NotImplemented
        return a + (-b)

    def __rsub__(self, other):
        return (-self) + other

    def scale(self, c):
        c = float(c)
        if c == 0.0:
            return Poly(self.vars, {})
        return Poly(self.vars, {m: c * v for m, v in self.terms.items()})

    def __mul__(self, other):
        if isinstance(other, (int, float, np.floating, np.integer)):
            return self.scale(other)
        a, b = self._coerce(other)
        if a is None:
            return NotImplemented
        acc = defaultdict(float)
        for m1, c1 in a.terms.items():
            for m2, c2 in b.terms.items():
                acc[tuple(x + y for x, y in zip(m1, m2))] += c1 * c2
        return Poly(a.vars, acc)

    __rmul__ = __mul__

    def __pow__(self, k):
        if not isinstance(k, int) or k < 0:
            raise ValueError("only non-negative integer powers are supported")
        out = Poly.constant(self.vars, 1.0)
        base = self
        while k:
            if k & 1:
                out = out * base
            base = base * base
            k >>= 1
        return out

    # -- evaluation -----------------------------------------------------------

    def __call__(self, point):
        return self.eval(point)

    def eval(self, point):
        """Value at ``point``; a trailing axis of length ``nvars`` allows batches."""
        x = np.asarray(point, dtype=float)
        if x.shape[-1:] != (self.nvars,) and not (self.nvars == 0 and x.size == 0):
            raise DimensionError(
                f"point has dimension {x.shape[-1] if x.ndim else 0}, polynomial has {self.nvars} variables",
                module="mvpoly", operation="eval", code="dimension")
        if not self.terms:
            return 0.0 if x.ndim <= 1 else np.zeros(x.shape[:-1])
        exps = np.array(list(self.terms), dtype=int).reshape(len(self.terms), self.nvars)
        coefs = np.array(list(self.terms.values()))
        vals = np.prod(x[..., None, :] ** exps, axis=-1)
        out = vals @ coefs
        return float(out) if np.ndim(out) == 0 else out

    # -- calculus -------------------------------------------------------------

    def diff(self, var) -> "Poly":
        i = self.var_index(var) if isinstance(var, str) else int(var)
        if not 0 <= i < self.nvars:
            raise DimensionError(f"variable index {i} out of range for {self.nvars} variables",
                                 module="mvpoly", operation="differentiate", code="index")
        terms = {}
        for m, c in self.terms.items():
            e = m[i]
            if e:
                terms[m[:i] + (e - 1,) + m[i + 1:]] = c * e
        return Poly(self.vars, terms)

    def gradient(self):
        return [self.diff(i) for i in range(self.nvars)]

    # -- substitution ---------------------------------------------------------

    def compose(self, mapping: Mapping[str, "Poly"], new_vars: Sequence[str]) -> "Poly":
        """Substitute a polynomial for every variable (variables missing from
        ``mapping`` must also appear in ``new_vars`` and are kept)."""
        new_vars = tuple(new_vars)
        images = []
        for v in self.vars:
            if v in mapping:
                img = mapping[v]
                img = img.with_vars(new_vars) if isinstance(img, Poly) else Poly.constant(new_vars, img)
            else:
                img = Poly.variable(new_vars, v)
            images.append(img)
        # cache powers per variable
        powers = [dict() for _ in images]

        def power(i, e):
            if e not in powers[i]:
                powers[i][e] = images[i] ** e
            return powers[i][e]

        acc = defaultdict(float)
        for m, c in self.terms.items():
            term = Poly.constant(new_vars, c)
            for i, e in enumerate(m):
                if e:
                    term = term * power(i, e)
            for mm, cc in term.terms.items():
                acc[mm] += cc
        return Poly(new_vars, acc)

    # -- printing -------------------------------------------------------------

    def to_str(self) -> str:
        if not self.terms:
            return "0"
        parts = []
        for m in sorted(self.terms, key=grlex_key, reverse=True):
            c = self.terms[m]
            factors = []
            for v, e in zip(self.vars, m):
                if e == 1:
                    factors.append(v)
                elif e > 1:
                    factors.append(f"{v}^{e}")
            mag = abs(c)
            if factors:
                body = "*".join(factors) if mag == 1.0 else repr(mag) + "*" + "*".join(factors)
            else:
                body = repr(mag)
            sign = "-" if c < 0 else "+"
            parts.append((sign, body))
        first_sign, first = parts[0]
        out = ("-" if first_sign == "-" else "") + first
        for sign, body in parts[1:]:
            out += f" {sign} {body}"
        return out


def _align(a: Poly, b: Poly):
    if a.vars == b.vars:
        return a, b
    union = a.vars + tuple(v for v in b.vars if v not in a.vars)
    return a.with_vars(union), b.with_vars(union)


# -- module-level operations ---------------------------------------------------


def arith(op: str, a: Poly, b=None):
    """Dispatch ``add``/``mul``/``scale``/``eval`` (a single generic entry point)."""
    if op == "add":
        return a + b
    if op == "mul":
        return a * b
    if op == "scale":
        return a.scale(b)
    if op == "eval":
        return a.eval(b)
    raise ValueError(f"unknown operation {op!r}")


def differentiate(p: Poly, var) -> Poly:
    return p.diff(var)


def gradient(p: Poly):
    return p.gradient()


def substitute_affine(p: Poly, mapping: Mapping[str, Poly], new_vars: Sequence[str]) -> Poly:
    """Substitute affine expressions for every variable of ``p``."""
    for v in p.vars:
        if v not in mapping:
            raise KeyError(f"no image given for variable {v!r}")
        img = mapping[v]
        if isinstance(img, Poly) and img.degree > 1:
            raise ValueError(f"image of {v!r} is not affine (degree {img.degree})")
    return p.compose(mapping, new_vars)


def monomial_basis(nvars, min_deg: int, max_deg: int):
    """All exponent tuples with total degree in ``[min_deg, max_deg]``, graded-lex order."""
    n = nvars if isinstance(nvars, int) else len(nvars)
    if not 0 <= min_deg <= max_deg:
        raise ValueError(f"need 0 <= min_deg <= max_deg, got {min_deg}, {max_deg}")
    out = []
    for d in range(min_deg, max_deg + 1):
        block = []
        for combo in itertools.combinations_with_replacement(range(n), d):
            mono = [0] * n
            for i in combo:
                mono[i] += 1
            block.append(tuple(mono))
        block.sort(key=grlex_key)
        out.extend(block)
    return out


def basis_size(nvars: int, min_deg: int, max_deg: int) -> int:
    return sum(math.comb(nvars + d - 1, d) for d in range(min_deg, max_deg + 1))


# -- parser ----------------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<pow>\^|\*\*)"
    r"|(?P<op>[+\-*]))"
)


def parse(expr: str, vars: Sequence[str], params: Sequence[str] = ()) -> Poly:
    """Parse ``"-x2 - 1.5*x1^2 + c"`` style text into a Poly over ``vars + params``."""
    allvars = tuple(vars) + tuple(params)
    index = {v: i for i, v in enumerate(allvars)}
    text = expr.replace("−", "-")
    if not text.strip():
        raise ParseError("empty expression", position=0)

    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise ParseError(f"unexpected character {text[pos:].lstrip()[:1]!r} at {pos}", position=pos)
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()

    n = len(allvars)
    terms = defaultdict(float)
    i = 0
    expect_term = True
    sign = 1.0
    while i < len(tokens):
        kind, val, at = tokens[i]
        if expect_term:
            if kind == "op" and val in "+-":
                sign = sign * (-1.0 if val == "-" else 1.0)
                i += 1
                continue
            coef, mono, i = _parse_product(tokens, i, index, n, text)
            terms[mono] += sign * coef
            sign = 1.0
            expect_term = False
        else:
            if kind == "op" and val in "+-":
                sign = -1.0 if val == "-" else 1.0
                expect_term = True
                i += 1
            else:
                raise ParseError(f"expected '+' or '-' at {at}, got {val!r}", position=at)
    if expect_term:
        raise ParseError("expression ends with an operator", position=len(text))
    return Poly(allvars, terms)


def _parse_product(tokens, i, index, n, text):
    coef = 1.0
    mono = [0] * n
    got_factor = False
    while i < len(tokens):
        kind, val, at = tokens[i]
        if kind == "num":
            base = float(val)
            i += 1
            e, i = _parse_exponent(tokens, i, text)
            coef *= base ** e
            got_factor = True
        elif kind == "name":
            if val not in index:
                raise ParseError(f"unknown identifier {val!r} at {at}", position=at)
            i += 1
            e, i = _parse_exponent(tokens, i, text)
            mono[index[val]] += e
            got_factor = True
        else:
            if not got_factor:
                raise ParseError(f"expected a factor at {at}, got {val!r}", position=at)
            break
        # optional '*' between factors, implicit multiplication otherwise
        if i < len(tokens) and tokens[i][0] == "op" and tokens[i][1] == "*":
            i += 1
            if i >= len(tokens) or tokens[i][0] not in ("num", "name"):
                raise ParseError("dangling '*'", position=tokens[i - 1][2])
            continue
        if i < len(tokens) and tokens[i][0] in ("num", "name"):
            continue
        break
    if not got_factor:
        raise ParseError("expected a factor", position=len(text))
    return coef, tuple(mono), i


def _parse_exponent(tokens, i, text):
    if i < len(tokens) and tokens[i][0] == "pow":
        at = tokens[i][2]
        if i + 1 >= len(tokens) or tokens[i + 1][0] != "num":
            raise ParseError(f"malformed exponent at {at}", position=at)
        raw = tokens[i + 1][1]
        if not raw.isdigit():
            raise ParseError(f"malformed exponent {raw!r} at {at}: must be a non-negative integer",
                             position=at)
        return int(raw), i + 2
    return 1, i


# -- fast evaluation of polynomial vector fields ---------------------------------


class PolyMap:
    """Vectorised evaluator for a list of Polys sharing one variable list.

    ``PolyMap(rows)(X)`` accepts ``X`` of shape ``(nvars,)`` or ``(batch, nvars)``.
    """

    def __init__(self, rows: Sequence[Poly], vars: Sequence[str] | None = None):
        rows = list(rows)
        self.vars = tuple(vars) if vars is not None else (rows[0].vars if rows else ())
        rows = [r.with_vars(self.vars) for r in rows]
        monos = sorted({m for r in rows for m in r.terms}, key=grlex_key)
        pos = {m: k for k, m in enumerate(monos)}
        self.exps = np.array(monos, dtype=int).reshape(len(monos), len(self.vars))
        self.coefs = np.zeros((len(rows), len(monos)))
        for r, p in enumerate(rows):
            for m, c in p.terms.items():
                self.coefs[r, pos[m]] = c
        self.maxdeg = int(self.exps.max()) if self.exps.size else 0
        self.rows = rows

    def __len__(self):
        return len(self.rows)

    def monomials(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        out = np.ones((X.shape[0], self.exps.shape[0]))
        for j in range(self.exps.shape[1]):
            col = self.exps[:, j]
            if not col.any():
                continue
            pw = X[:, j:j + 1] ** np.arange(self.maxdeg + 1)
            out *= pw[:, col]
        return out

    def __call__(self, X):
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        out = self.monomials(X) @ self.coefs.T
        return out[0] if single else out

    def jacobian_map(self) -> "PolyMap":
        """PolyMap whose rows are the row-major flattened Jacobian entries."""
        return PolyMap([r.diff(j) for r in self.rows for j in range(len(self.vars))], self.vars)


def poly_vector_from_strings(exprs: Iterable[str], vars, params=()):
    return [parse(e, vars, params) for e in exprs]
