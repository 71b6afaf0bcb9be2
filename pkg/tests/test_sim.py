import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pcroa import config, expand, sim
from pcroa.basis import BasisFamily
from pcroa.errors import EquilibriumError
from pcroa.expand import ParamSpec, StochSystem, expand_system
from pcroa.mvpoly import Poly, parse
from pcroa.sim import IntegratorOptions, McOptions

X = ["x1", "x2"]


def rows(*texts, vars=X):
    return [parse(t, list(vars)) for t in texts]


def test_linear_decay():
    tr = sim.integrate(rows("-x", vars=["x"]), [1.0], 10.0)
    assert tr.reason == sim.T_END
    assert abs(tr.final[0] - math.exp(-10)) < 1e-6
    assert np.all(np.diff(tr.times) > 0) and len(tr.times) == len(tr.states)


def test_blowup_diverges():
    tr = sim.integrate(rows("x^2", vars=["x"]), [1.0], 5.0)
    assert tr.reason == sim.DIVERGED and tr.times[-1] < 2.0


def test_convergence_exit():
    tr = sim.integrate(rows("-x", vars=["x"]), [1.0], 1e4, IntegratorOptions(eq_tol=1e-9))
    assert tr.reason == sim.CONVERGED and tr.times[-1] < 100


def test_t_eval_grid():
    ts = np.linspace(0, 2, 11)
    tr = sim.integrate(rows("-x2", "x1"), [1.0, 0.0], 2.0, IntegratorOptions(t_eval=ts))
    assert np.allclose(tr.times, ts)
    assert np.allclose(tr.states[:, 0], np.cos(ts), atol=1e-7)


def test_batch_matches_single():
    F = rows("-x2 - x1^3", "x1 - x2")
    X0 = np.array([[1.0, 0.5], [-0.3, 2.0], [0.0, 0.0]])
    Yf, reasons, t, _ = sim.integrate_batch(F, X0, 3.0)
    for k in range(3):
        ref = sim.integrate(F, X0[k], 3.0).final
        assert np.allclose(Yf[k], ref, atol=1e-7)
    assert list(reasons) == ["t_end"] * 3


def test_integrator_order():
    cfg = config.load_config("vdp.json")
    pce = expand_system(cfg.system, cfg.family, 2)
    x0 = pce.mean_start([1.0, 1.5])
    ref = sim.integrate(pce, x0, 5.0, IntegratorOptions(rtol=1e-13, atol=1e-15)).final
    errs = [np.max(np.abs(sim.integrate(pce, x0, 5.0, IntegratorOptions(rtol=r, atol=r * 1e-2)).final - ref))
            for r in (1e-4, 1e-6, 1e-8)]
    assert errs[0] > errs[1] > errs[2]


def test_to_csv(tmp_path):
    tr = sim.integrate(rows("-x", vars=["x"]), [1.0], 1.0, IntegratorOptions(t_eval=[0.0, 0.5, 1.0]))
    f = tmp_path / "t.csv"
    tr.to_csv(f, ["x"], comment="hello")
    lines = f.read_text().splitlines()
    assert lines[0] == "# hello" and lines[1] == "t,x"
    assert float(lines[3].split(",")[1]) == tr.states[1, 0]


@pytest.mark.parametrize("texts, point, expected", [
    (("-x1^3",), [1.0], [[-3.0]]),
    (("2*x1 - x2", "x1 + 3*x2"), [5.0, -7.0], [[2.0, -1.0], [1.0, 3.0]]),
])
def test_jacobian_examples(texts, point, expected):
    vars = X[: len(texts)]
    assert np.allclose(sim.jacobian(rows(*texts, vars=vars), point), expected)


mono = st.tuples(st.integers(0, 3), st.integers(0, 3))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.dictionaries(mono, st.floats(-2, 2, allow_nan=False), max_size=5), min_size=2, max_size=2),
       st.lists(st.floats(-1, 1, allow_nan=False), min_size=2, max_size=2))
def test_jacobian_finite_differences(terms, pt):
    F = [Poly(X, t) for t in terms]
    J = sim.jacobian(F, pt)
    h = 1e-5
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        fd = [(f.eval(np.add(pt, e)) - f.eval(np.subtract(pt, e))) / (2 * h) for f in F]
        assert np.allclose(J[:, j], fd, atol=1e-6)


def test_find_equilibrium_trivial():
    x = sim.find_equilibrium(rows("-x", vars=["x"]), [5.0])
    assert abs(x[0]) < 1e-12


def test_find_equilibrium_saddle_rejected():
    # from (1, 0) the flow reaches the saddle at the origin along its stable manifold
    with pytest.raises(EquilibriumError) as exc:
        sim.find_equilibrium(rows("-x1", "x2"), [1.0, 0.0])
    assert exc.value.code == "not_hurwitz"


def test_vdp_modes_decay_to_zero():
    cfg = config.load_config("vdp.json")
    pce = expand_system(cfg.system, cfg.family, 3)
    x_ep = sim.find_equilibrium(pce, pce.mean_start([1.0, 1.5]))
    assert pce.N == 8 and np.max(np.abs(x_ep)) < 1e-8


def test_forced_equilibrium():
    cfg = config.load_config("forced_cubic.json")
    pce = expand_system(cfg.system, cfg.family, 2)
    x_ep = sim.find_equilibrium(pce, pce.mean_start([0.8, 0.8]))
    reference = [0.4086, 0.7145, 0.0369, 0.0456, -4.9635e-4, -0.0012]
    assert np.allclose(pce.to_mode_major(x_ep), reference, atol=1e-3)
    assert np.max(np.abs(pce.f(x_ep))) < 1e-12
    assert np.max(np.linalg.eigvals(pce.jacobian(x_ep)).real) < 0


def test_moments_converge_along_trajectory():
    cfg = config.load_config("forced_cubic.json")
    pce = expand_system(cfg.system, cfg.family, 2)
    x_ep = sim.find_equilibrium(pce, pce.mean_start([0.8, 0.8]))
    stats = expand.equilibrium_set_stats(x_ep, pce.family, n=2)
    tr = sim.integrate(pce, pce.mean_start([0.5, 0.3]), 60.0)
    xt = tr.final
    assert np.allclose(expand.moments(xt, pce.family, "mean", n=2), stats.mean, atol=1e-6)
    assert np.allclose(expand.moments(xt, pce.family, "covariance", n=2), stats.covariance, atol=1e-6)


@pytest.mark.parametrize("backward", [False, True])
def test_limit_cycle_unit_circle(backward):
    # r' = r (1 - r^2) in polar form: attracting unit circle (repelling when reversed)
    s = -1.0 if backward else 1.0
    F = [parse(t, X) for t in ("x1 - x2 - x1^3 - x1*x2^2", "x1 + x2 - x2^3 - x1^2*x2")]
    F = [f.scale(s) for f in F]
    C = sim.limit_cycle(F, [0.3, 0.1] if not backward else [0.6, 0.0], backward=backward, dt=1e-3)
    r = np.linalg.norm(C, axis=1)
    assert np.max(np.abs(r - 1.0)) < 1e-6
    assert abs(len(C) * 1e-3 - 2 * math.pi) < 5e-3


def test_limit_cycle_missing():
    with pytest.raises(EquilibriumError):
        sim.limit_cycle(rows("-x1", "-x2"), [1.0, 1.0], t_transient=5.0)


@pytest.mark.parametrize("fam, n", [(BasisFamily.LEGENDRE, 20), (BasisFamily.LEGENDRE, 1),
                                    (BasisFamily.HERMITE, 10)])
def test_germ_realizations(fam, n):
    xi = sim.germ_realizations(fam, n, sim.make_rng(0))
    assert len(xi) == n
    if fam is BasisFamily.LEGENDRE:
        assert np.all(np.abs(xi) <= 1)
        if n >= 2:
            assert xi[0] == -1.0 and xi[-1] == 1.0
            # one sample per interior stratum
            strata = np.floor((xi[1:-1] + 1) / 2 * (n - 2))
            assert np.array_equal(strata, np.arange(n - 2))


@pytest.fixture(scope="module")
def scalar_case():
    sys = StochSystem(("x",), (("a", ParamSpec.uniform(0.5, 1.5)),), [parse("-a*x + x^3", ["x"], ["a"])])
    pce = expand_system(sys, None, 2)
    stats = expand.equilibrium_set_stats(np.zeros(3), pce.family, n=1)
    return sys, stats


def test_monte_carlo_basic(scalar_case):
    sys, stats = scalar_case
    # stable interval is |x| < sqrt(a), a in [0.5, 1.5]
    inside = np.array([[0.1], [-0.5], [0.6]])
    rep = sim.monte_carlo_validate(sys, stats, inside, 3, 10, seed=1, opts=McOptions(t_end=100))
    assert rep.converged_count == 30 and rep.total == 30
    outside = np.array([[1.3], [-2.0]])
    rep = sim.monte_carlo_validate(sys, stats, outside, 2, 10, seed=1, opts=McOptions(t_end=100))
    assert rep.diverged_count == 20
    assert rep.converged_count + rep.diverged_count + rep.inconclusive_count == rep.total


def test_monte_carlo_deterministic(scalar_case):
    sys, stats = scalar_case
    sampler = lambda n, rng: rng.uniform(-1.0, 1.0, size=(n, 1))  # noqa: E731
    a = sim.monte_carlo_validate(sys, stats, sampler, 50, 8, seed=7).to_dict()
    b = sim.monte_carlo_validate(sys, stats, sampler, 50, 8, seed=7).to_dict()
    assert a == b
    c = sim.monte_carlo_validate(sys, stats, sampler, 50, 8, seed=8).to_dict()
    assert c["xi"] != a["xi"]


def test_monte_carlo_empty(scalar_case):
    sys, stats = scalar_case
    rep = sim.monte_carlo_validate(sys, stats, np.zeros((0, 1)), 0, 20)
    assert rep.total == 0 and rep.converged_count == 0 and rep.diverged_count == 0
    assert rep.to_dict()["converged_fraction"] == 1.0
