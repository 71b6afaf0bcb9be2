import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pcroa.errors import DimensionError, ParseError
from pcroa.mvpoly import (Poly, PolyMap, arith, basis_size, differentiate, gradient, grlex_key,
                          monomial_basis, parse, substitute_affine)

X = ("x1", "x2", "x3")


def P(text, vars=X):
    return parse(text, vars)


coef = st.floats(min_value=-3, max_value=3, allow_nan=False, allow_infinity=False)
mono = st.tuples(*[st.integers(0, 3)] * 3)


@st.composite
def polys(draw):
    terms = draw(st.dictionaries(mono, coef, max_size=5))
    return Poly(X, terms)


def _close_on_points(a, b, rng):
    pts = rng.uniform(-1.5, 1.5, size=(10, 3))
    va, vb = a.eval(pts), b.eval(pts)
    scale = 1.0 + np.max(np.abs(va)) + np.max(np.abs(vb))
    return np.max(np.abs(va - vb)) < 1e-10 * scale


@pytest.mark.parametrize("a, b, expected", [
    ("x1 + 1", "x1 - 1", "x1^2 - 1"),
    ("x1 + x2", "x1 + x2", "x1^2 + 2*x1*x2 + x2^2"),
    ("2", "x3", "2*x3"),
])
def test_products(a, b, expected):
    assert P(a) * P(b) == P(expected)


def test_eval_and_annihilation():
    assert arith("eval", parse("x1^2 + x2", ["x1", "x2"]), (2, 3)) == 7.0
    z = arith("scale", P("x1"), 0)
    assert z.terms == {} and z.is_zero()


def test_eval_dimension_error():
    with pytest.raises(DimensionError):
        parse("x1", ["x1", "x2"]).eval([1.0, 2.0, 3.0])


@settings(max_examples=40, deadline=None)
@given(polys(), polys(), polys())
def test_ring_laws(a, b, c):
    rng = np.random.default_rng(0)
    assert _close_on_points(a + b, b + a, rng)
    assert _close_on_points(a * b, b * a, rng)
    assert _close_on_points((a + b) + c, a + (b + c), rng)
    assert _close_on_points((a * b) * c, a * (b * c), rng)
    assert _close_on_points(a * (b + c), a * b + a * c, rng)


@settings(max_examples=40, deadline=None)
@given(polys(), polys(), st.integers(0, 2))
def test_product_rule(f, g, i):
    rng = np.random.default_rng(1)
    lhs = differentiate(f * g, i)
    rhs = f * differentiate(g, i) + g * differentiate(f, i)
    assert _close_on_points(lhs, rhs, rng)


def test_derivatives():
    assert differentiate(P("x1^3"), 0) == P("3*x1^2")
    assert differentiate(P("x1^3"), 1).is_zero()
    gx, gy = gradient(parse("x1*x2", ["x1", "x2"]))
    assert gx == parse("x2", ["x1", "x2"]) and gy == parse("x1", ["x1", "x2"])


def test_substitute_shift():
    z = ("z",)
    out = substitute_affine(parse("x^2", ["x"]), {"x": Poly.variable(z, "z") + 1.0}, z)
    assert out == parse("z^2 + 2*z + 1", z)


def test_substitute_identity():
    p = P("x1^2*x3 - 4*x2 + 0.5")
    ident = {v: Poly.variable(X, v) for v in X}
    assert substitute_affine(p, ident, X) == p


@settings(max_examples=30, deadline=None)
@given(polys(), st.lists(coef, min_size=3, max_size=3), st.lists(coef, min_size=3, max_size=3))
def test_substitute_then_eval(p, scale, shift):
    Y = ("y1", "y2", "y3")
    mapping = {v: Poly.variable(Y, Y[k]) * scale[k] + shift[k] for k, v in enumerate(X)}
    q = substitute_affine(p, mapping, Y)
    rng = np.random.default_rng(2)
    y = rng.uniform(-1, 1, size=(6, 3))
    x = y * np.array(scale) + np.array(shift)
    ref = p.eval(x)
    assert np.allclose(q.eval(y), ref, atol=1e-9 * (1 + np.max(np.abs(ref))))


@pytest.mark.parametrize("nvars, lo, hi, count", [(2, 1, 1, 2), (2, 1, 2, 5), (8, 1, 2, 44), (3, 0, 3, 20)])
def test_monomial_basis_counts(nvars, lo, hi, count):
    b = monomial_basis(nvars, lo, hi)
    assert len(b) == count == basis_size(nvars, lo, hi)
    keys = [grlex_key(m) for m in b]
    assert keys == sorted(keys) and len(set(b)) == len(b)


def test_monomial_basis_order():
    assert monomial_basis(2, 1, 1) == [(1, 0), (0, 1)]
    assert monomial_basis(2, 2, 2) == [(2, 0), (1, 1), (0, 2)]


def test_parse_system_row():
    p = parse("-x2 - 1.5*x1^2 - 0.5*x1^3 + c", ["x1", "x2"], ["c"])
    assert len(p) == 4
    assert p.coeff((3, 0, 0)) == -0.5 and p.coeff((0, 0, 1)) == 1.0
    q = parse("3*x1 - x2 - x2^2", ["x1", "x2"], ["c"])
    assert q.coeff((0, 2, 0)) == -1.0


@pytest.mark.parametrize("text, expected", [
    ("x1*x1", "x1^2"),
    ("x1 x2", "x1*x2"),
    ("2.5e-1*x3**2", "0.25*x3^2"),
    ("- -x1", "x1"),
])
def test_parse_equivalences(text, expected):
    assert P(text) == P(expected)


@pytest.mark.parametrize("text", ["x4", "x1^", "x1 +", "", "x1^-2", "x1 / 2"])
def test_parse_errors(text):
    with pytest.raises(ParseError):
        P(text)


@settings(max_examples=40, deadline=None)
@given(polys())
def test_printer_round_trip(p):
    q = parse(p.to_str(), X)
    assert set(q.terms) == set(p.terms)
    for m, c in p.terms.items():
        assert math.isclose(q.terms[m], c, rel_tol=1e-15, abs_tol=0)


def test_prune_threshold():
    p = P("x1") + Poly(X, {(1, 0, 0): -1.0 + 1e-16})
    assert p.is_zero() or all(abs(c) > 1e-14 for c in p.terms.values())
    assert Poly(X, {(0, 0, 0): 1e-15}).is_zero()


def test_polymap_matches_rows():
    rows = [P("x1^2 - x2*x3"), P("3*x3^3 + 1"), P("x1*x2*x3")]
    F = PolyMap(rows)
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(7, 3))
    ref = np.stack([r.eval(pts) for r in rows], axis=1)
    assert np.allclose(F(pts), ref, atol=1e-12)
    J = F.jacobian_map()(pts[0]).reshape(3, 3)
    fd = np.zeros((3, 3))
    h = 1e-6
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        fd[:, j] = (F(pts[0] + e) - F(pts[0] - e)) / (2 * h)
    assert np.allclose(J, fd, atol=1e-6)
