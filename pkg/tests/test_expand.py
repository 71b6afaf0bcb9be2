import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.polynomial import hermite_e, legendre
from scipy import integrate, special, stats

from pcroa import config, expand, sim
from pcroa.basis import BasisFamily
from pcroa.errors import ConfigError, PcroaError
from pcroa.expand import ParamSpec, StochSystem, expand_system, moments, project_param
from pcroa.mvpoly import parse

LEG, HER = BasisFamily.LEGENDRE, BasisFamily.HERMITE


def rule(fam, n=40):
    x, w = legendre.leggauss(n) if fam is LEG else hermite_e.hermegauss(n)
    return x, w / w.sum()


def psi(fam, p, x):
    f = special.eval_legendre if fam is LEG else special.eval_hermitenorm
    return np.stack([f(i, x) for i in range(p + 1)], axis=-1)


def gammas(fam, p):
    x, w = rule(fam)
    return w @ psi(fam, p, x) ** 2


def system(rows, states=("x1", "x2"), params=(("c", ParamSpec.uniform(0.7, 1.3)),)):
    pn = [nm for nm, _ in params]
    return StochSystem(states, params, [parse(r, list(states), pn) for r in rows])


VDP = ["-x2", "x1 - c*x2 + c*x1^2*x2"]
FORCED_CUBIC = ["-x2 - 1.5*x1^2 - 0.5*x1^3 + c", "3*x1 - x2 - x2^2"]


@pytest.mark.parametrize("spec, fam, p, expected", [
    (ParamSpec.uniform(0.7, 1.3), LEG, 3, [1.0, 0.3, 0.0, 0.0]),
    (ParamSpec.uniform(0.9, 1.1), LEG, 2, [1.0, 0.1, 0.0]),
    (ParamSpec.gaussian(0.0, 1.0), HER, 2, [0.0, 1.0, 0.0]),
    (ParamSpec.gaussian(2.0, 0.5), HER, 3, [2.0, 0.5, 0.0, 0.0]),
    (ParamSpec.pce([1.0, 2.0, 3.0]), LEG, 1, [1.0, 2.0]),
])
def test_project_param(spec, fam, p, expected):
    assert np.allclose(project_param(spec, fam, p), expected, atol=1e-14)


def test_project_param_family_mismatch():
    with pytest.raises(ConfigError):
        project_param(ParamSpec.uniform(0, 1), HER, 2)


def test_project_param_override_against_scipy_quad():
    # uniform parameter driven by a Gaussian germ through the normal CDF
    spec = ParamSpec.uniform(0.7, 1.3)
    got = project_param(spec, HER, 3, override=True)
    for i in range(4):
        num = integrate.quad(lambda t: (0.7 + 0.6 * stats.norm.cdf(t)) * special.eval_hermitenorm(i, t)
                             * stats.norm.pdf(t), -12, 12, epsabs=1e-13)[0]
        assert abs(got[i] - num / special.factorial(i)) < 1e-6


@pytest.mark.parametrize("bad", [lambda: ParamSpec.uniform(1.0, 1.0), lambda: ParamSpec.gaussian(0, -1),
                                 lambda: ParamSpec("beta")])
def test_bad_distributions(bad):
    with pytest.raises(ConfigError):
        bad()


def test_undeclared_variable():
    with pytest.raises(ConfigError):
        StochSystem(("x",), (), [parse("x*y", ["x", "y"])])


def test_linear_p1_hand_expansion():
    sys = StochSystem(("x",), (("a", ParamSpec.pce([2.0, 0.7])),), [parse("a*x", ["x"], ["a"])])
    pce = expand_system(sys, LEG, 1)
    a0, a1 = 2.0, 0.7
    rng = np.random.default_rng(0)
    for x0, x1 in rng.normal(size=(5, 2)):
        f = pce.f(np.array([x0, x1]))
        assert np.allclose(f, [a0 * x0 + a1 * x1 / 3, a0 * x1 + a1 * x0], atol=1e-14)


def test_rank_limit_names_monomial():
    sys = StochSystem(("x",), (), [parse("x^6", ["x"])])
    with pytest.raises(PcroaError, match="x\\^6"):
        expand_system(sys, LEG, 2, max_rank=6)


def galerkin_oracle(sys, fam, p, xbar):
    """Project f(x(xi), a(xi)) onto each psi_q with an independent Gauss rule."""
    x, w = rule(fam)
    P = psi(fam, p, x)
    X = xbar.reshape(sys.n, p + 1) @ P.T  # (n, nodes)
    abar = {nm: project_param(sp, fam, p) for nm, sp in sys.params}
    cols = [X[d] for d in range(sys.n)] + [abar[nm] @ P.T for nm in sys.param_names]
    pts = np.stack(cols, axis=1)
    gam = gammas(fam, p)
    out = []
    for row in sys.rhs:
        vals = row.eval(pts)
        out.append((w * vals) @ P / gam)
    return np.concatenate(out)


@pytest.mark.parametrize("rows, spec, fam, p", [
    (VDP, ParamSpec.uniform(0.7, 1.3), LEG, 3),
    (FORCED_CUBIC, ParamSpec.uniform(0.9, 1.1), LEG, 2),
    (VDP, ParamSpec.gaussian(1.0, 0.2), HER, 3),
    (["c*x1^3 - x2", "x1*x2*c"], ParamSpec.gaussian(0.5, 1.0), HER, 2),
])
def test_galerkin_residual_orthogonal(rows, spec, fam, p):
    sys = system(rows, params=(("c", spec),))
    pce = expand_system(sys, fam, p)
    rng = np.random.default_rng(1)
    for _ in range(5):
        xbar = rng.normal(scale=0.7, size=pce.N)
        ref = galerkin_oracle(sys, fam, p, xbar)
        assert np.max(np.abs(pce.f(xbar) - ref)) < 1e-10 * max(1.0, np.max(np.abs(ref)))


def test_expansion_degree_bounded():
    pce = expand_system(system(FORCED_CUBIC, params=(("c", ParamSpec.uniform(0.9, 1.1)),)), LEG, 3)
    assert pce.degree <= 3


def test_deterministic_block_invariance():
    sys = system(VDP, params=(("c", ParamSpec.pce([1.0])),))
    pce = expand_system(sys, LEG, 3)
    ref = sys.sampled_rhs({"c": 1.0})
    rng = np.random.default_rng(2)
    for m in rng.normal(size=(5, 2)):
        x = pce.mean_start(m)
        f = pce.f(x)
        assert np.all(f[pce.variance_indices] == 0.0)
        assert np.allclose(f[pce.mean_indices], [r.eval(m) for r in ref], atol=1e-14)


def test_mode_major_permutation():
    pce = expand_system(system(VDP), LEG, 2)
    assert list(pce.names) == ["x1_0", "x1_1", "x1_2", "x2_0", "x2_1", "x2_2"]
    assert [pce.names[i] for i in pce.mode_major] == ["x1_0", "x2_0", "x1_1", "x2_1", "x1_2", "x2_2"]
    x = np.arange(6.0)
    assert np.array_equal(pce.from_mode_major(pce.to_mode_major(x)), x)


def test_moment_examples():
    x = [1.0, 0.5, 0.1]
    assert moments(x, LEG, "mean", n=1)[0] == 1.0
    assert moments(x, LEG, "covariance", n=1)[0, 0] == pytest.approx(0.25 / 3 + 0.01 / 5, abs=1e-15)


coeffs = st.lists(st.floats(-2, 2, allow_nan=False), min_size=8, max_size=8)


@settings(max_examples=30, deadline=None)
@given(coeffs, st.sampled_from([LEG, HER]))
def test_moments_against_quadrature(c, fam):
    X = np.array(c).reshape(2, 4)
    xi, w = rule(fam, 60)
    S = expand.reconstruct_sample(X, fam, xi, n=2)  # (nodes, 2)
    mean = w @ S
    cov = (S - mean).T @ ((S - mean) * w[:, None])
    scale = 1.0 + np.max(np.abs(S)) ** 2
    assert np.allclose(moments(X.ravel(), fam, "mean", n=2), mean, atol=1e-10 * scale)
    assert np.allclose(moments(X.ravel(), fam, "covariance", n=2), cov, atol=1e-10 * scale)
    for order in (2, 3, 4):
        ref = w @ S**order
        got = moments(X.ravel(), fam, "raw", n=2, order=order)
        assert np.allclose(got, ref, atol=1e-10 * scale ** (order / 2) * 10)


def test_raw_order_limit():
    with pytest.raises(PcroaError):
        moments(np.ones(3), LEG, "raw", n=1, order=7)


def test_reconstruct_sample():
    assert np.allclose(expand.reconstruct_sample([0.0, 1.0, 0.0], LEG, 0.5, n=1), [0.5])
    X = np.array([[3.0, 0, 0], [-1.0, 0, 0]])
    for xi in (-1.0, 0.2, 0.9):
        assert np.allclose(expand.reconstruct_sample(X, LEG, xi, n=2), [3.0, -1.0])


def test_single_point_stats():
    s = expand.equilibrium_set_stats(np.zeros(6), LEG, n=2)
    assert s.single_point and np.all(s.mean == 0) and np.all(s.covariance == 0)
    s = expand.equilibrium_set_stats([1.0, 0, 0, 2.0, 0, 0], LEG, n=2)
    assert s.single_point and np.allclose(s.mean, [1.0, 2.0])


def test_admissible_variance_modes():
    sig = np.array([[0.02, 0.005], [0.005, 0.01]])
    XJ = expand.admissible_variance_modes(sig, LEG, 3, rng=np.random.default_rng(4))
    x = np.concatenate([np.zeros((2, 1)), XJ], axis=1).ravel()
    assert np.allclose(moments(x, LEG, "covariance", n=2), sig, atol=1e-15)


@pytest.fixture(scope="module")
def forced_eq():
    cfg = config.load_config("forced_cubic.json")
    pce = expand_system(cfg.system, cfg.family, cfg.p)
    x_ep = sim.find_equilibrium(pce, pce.mean_start(cfg.raw["equilibrium"]["mean_start"]))
    return cfg, pce, x_ep


def test_forced_equilibrium_stats(forced_eq):
    cfg, pce, x_ep = forced_eq
    s = expand.equilibrium_set_stats(x_ep, pce.family, n=2)
    assert np.allclose(s.mean, [0.408586, 0.7145229], atol=1e-3)
    reference = np.array([[4.533e-4, 5.603e-4], [5.603e-4, 6.923e-4]])
    assert np.all(np.abs(s.covariance - reference) <= 0.02 * np.abs(reference))
    assert np.linalg.eigvalsh(s.covariance)[0] >= -1e-12
    assert not s.single_point


def test_forced_cubic_members_are_equilibria(forced_eq):
    cfg, pce, x_ep = forced_eq
    spec = dict(cfg.system.params)["c"]
    members = []
    for xi in (-1.0, 1.0):
        x = expand.reconstruct_sample(x_ep, pce.family, xi, n=2)
        rows = cfg.system.sampled_rhs({"c": spec.sample_map(pce.family)(xi)})
        # p = 2 truncation leaves a residual of order 1e-5 at the germ endpoints
        assert max(abs(r.eval(x)) for r in rows) < 1e-4
        members.append(x)
    assert np.linalg.norm(members[0] - members[1]) > 0.05


def test_truncation_diagnostic():
    sys = system(VDP)
    d = expand.truncation_diagnostic(sys, 3, [1.0, 1.5], t_end=20.0)
    assert d["max_shared_deviation"] < 0.05
    assert d["top_mode_ratio"] < 0.05
