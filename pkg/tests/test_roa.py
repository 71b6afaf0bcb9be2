"""Region-of-attraction certificates and initial-mean recovery on small systems."""

import json
import math

import numpy as np
import pytest

from pcroa import expand, roa, sim
from pcroa.errors import PcroaError, SosInfeasibleError
from pcroa.expand import ParamSpec, StochSystem, expand_system
from pcroa.mvpoly import Poly, parse


def scalar(text, params=()):
    pn = [nm for nm, _ in params]
    return StochSystem(("x",), params, [parse(text, ["x"], pn)])


@pytest.fixture(scope="module")
def cubic_cert():
    pce = expand_system(scalar("-x + x^3"), None, 0)
    return pce, roa.estimate_roa(pce, np.zeros(1))


@pytest.fixture(scope="module")
def stoch():
    # x' = -a x + x^3 with a ~ U(0.5, 1.5), p = 1
    sys = scalar("-a*x + x^3", (("a", ParamSpec.uniform(0.5, 1.5)),))
    pce = expand_system(sys, None, 1)
    return pce, roa.estimate_roa(pce, np.zeros(2))


def test_init_linear():
    pce = expand_system(scalar("-x"), None, 0)
    init = roa.init_lyapunov(pce, np.zeros(1))
    assert np.allclose(init.P, [[0.5]])
    assert init.c_star > 0


def test_init_not_hurwitz():
    pce = expand_system(scalar("x^3"), None, 0)
    with pytest.raises(SosInfeasibleError):
        roa.init_lyapunov(pce, np.zeros(1))


def test_one_dimensional_oracle(cubic_cert):
    # V' = 2 x^2 (x^2 - 1) / c: the true region is |x| < 1
    _, cert = cubic_cert
    assert cert.verified(1e-6)
    xs = np.linspace(-1.5, 1.5, 30001)
    inside = xs[cert.V.eval(xs[:, None]) <= 1.0]
    assert inside.min() > -1.0 and inside.max() < 1.0
    assert inside.min() <= -0.9 and inside.max() >= 0.9


def test_certificate_round_trip(cubic_cert):
    _, cert = cubic_cert
    back = roa.RoaCertificate.from_dict(json.loads(json.dumps(cert.to_dict())))
    assert back.V == cert.V and back.verified(1e-6)
    assert back.volume_proxy == pytest.approx(cert.volume_proxy)


def test_tampered_certificate_fails(cubic_cert):
    _, cert = cubic_cert
    d = cert.to_dict()
    d["V"] = [[m, c * 1.5] for m, c in d["V"]]
    bad = roa.RoaCertificate.from_dict(d)
    assert not bad.verified(1e-6)


def test_stochastic_certificate_holds_on_pce_flow(stoch):
    pce, cert = stoch
    assert cert.verified(1e-6) and cert.deg_V == 2
    rng = np.random.default_rng(0)
    pts = roa.sublevel_samples(cert, 200, rng)
    assert np.all(cert.V.eval(pts) <= 1.0 + 1e-12)
    vd = roa.vdot(cert.V, cert.fbar)
    nz = np.linalg.norm(pts, axis=1) > 1e-3
    assert np.all(vd.eval(pts[nz]) < 0)
    Yf, reasons, _, _ = sim.integrate_batch(pce, pts, 200.0, sim.IntegratorOptions(eq_tol=1e-9))
    assert np.all(np.linalg.norm(Yf, axis=1) < 1e-3)


def test_quartic_not_smaller(stoch):
    pce, cert = stoch
    c4 = roa.estimate_roa(pce, np.zeros(2), roa.RoaOptions(deg_V=4))
    assert c4.verified(1e-6) and c4.deg_V == 4
    assert c4.volume_proxy >= cert.volume_proxy * (1 - 1e-9)
    a2 = roa.slice_zero_variance(cert)
    a4 = roa.slice_zero_variance(c4)
    xs = np.linspace(-2, 2, 4001)[:, None]
    assert np.count_nonzero(a4.poly.eval(xs) <= 1) >= np.count_nonzero(a2.poly.eval(xs) <= 1)


def test_slice_of_quadratic_is_mean_block(stoch):
    pce, cert = stoch
    sl = roa.slice_zero_variance(cert)
    # x_ep = 0, so the slice keeps exactly the mean-mode terms of V
    G = cert.gram_V
    mean_coeff = cert.V.coeff((2, 0))
    assert sl.poly.coeff((2,)) == pytest.approx(mean_coeff)
    assert sl.diagnostics["q(0)"] == 0.0
    assert G.shape[0] >= 1


@pytest.fixture(scope="module")
def recovered(stoch):
    _, cert = stoch
    return {s: roa.recover_r0(cert, np.array([[s]])) for s in (0.0, 0.01, 0.05)}


def test_recover_zero_matches_slice(stoch, recovered):
    _, cert = stoch
    sl = roa.slice_zero_variance(cert)
    assert recovered[0.0].poly == sl.poly
    forced = roa.recover_r0(cert, np.zeros((1, 1)), roa.RecoverOptions(force_sos=True))
    # the SOS route can only certify a subset of the exact slice
    xs = np.linspace(-2, 2, 4001)[:, None]
    assert np.all(sl.poly.eval(xs)[forced.poly.eval(xs) <= 1] <= 1 + 1e-9)


def test_recover_shrinks_with_variance(recovered):
    widths = [1.0 / math.sqrt(recovered[s].poly.coeff((2,))) for s in (0.0, 0.01, 0.05)]
    assert widths[0] > widths[1] > widths[2] > 0


def test_recovered_sets_are_certified(stoch, recovered):
    _, cert = stoch
    for s in (0.01, 0.05):
        r = recovered[s]
        assert roa.r0_certified(cert, np.array([[s]]), r.poly)
        for part in r.parts.values():
            assert part.verify(1e-6)["passed"]


def test_recovered_boundary_starts_are_certified(stoch, recovered):
    # mean on the boundary of R0, variance modes realising sigma2 exactly
    pce, cert = stoch
    s = 0.05
    r = recovered[s]
    XJ = expand.admissible_variance_modes(np.array([[s]]), pce.family, pce.p)
    starts = []
    for m in (-1.0, 1.0):
        c = 1.0 / math.sqrt(r.poly.coeff((2,)))
        x = np.concatenate([[m * c + r.mean_center[0]], XJ[0]])
        assert expand.moments(x, pce.family, "covariance", n=1)[0, 0] == pytest.approx(s)
        # the containment identity holds to the Gram verification tolerance
        assert cert.V.eval(x - cert.x_ep) <= 1.0 + 1e-6
        starts.append(x)
    Yf, _, _, _ = sim.integrate_batch(pce, np.array(starts), 200.0, sim.IntegratorOptions(eq_tol=1e-9))
    assert np.all(np.linalg.norm(Yf - cert.x_ep, axis=1) < 1e-3)


def test_recover_rejects_bad_sigma(stoch):
    _, cert = stoch
    with pytest.raises(PcroaError):
        roa.recover_r0(cert, np.array([[-0.1]]))
    with pytest.raises(PcroaError):
        roa.recover_r0(cert, np.eye(2))


def test_recover_infeasible_variance(stoch):
    _, cert = stoch
    with pytest.raises(SosInfeasibleError):
        roa.recover_r0(cert, np.array([[5.0]]))


def test_max_initial_covariance(stoch, recovered):
    _, cert = stoch
    z0 = recovered[0.0].mean_vars
    tiny = Poly(z0, {(2,): 1.0 / 0.01})  # |x0| <= 0.1
    sig, hist = roa.max_initial_covariance(cert, tiny)
    assert np.linalg.eigvalsh(sig)[0] > 0
    assert roa.r0_certified(cert, sig * (1 - 1e-6), tiny)


def test_max_initial_covariance_full_slice(stoch, recovered):
    # the exact slice touches {V = 1} and the covariance multipliers only generate
    # multiples of the squared variance modes, so no certificate exists at zero covariance
    _, cert = stoch
    with pytest.raises(SosInfeasibleError) as exc:
        roa.max_initial_covariance(cert, recovered[0.0].poly)
    assert exc.value.code == "q0_too_large"


def test_boundary_and_area():
    q = Poly(("a", "b"), {(2, 0): 1.0 / 4.0, (0, 2): 1.0})  # ellipse with semi-axes 2 and 1
    B = roa.trace_boundary(q, np.array([1.0, -1.0]), npts=2000)
    assert np.allclose(q.eval(B - [1.0, -1.0]), 1.0, atol=1e-9)
    assert roa.polygon_area(B) == pytest.approx(2 * math.pi, rel=1e-4)
    assert roa.polygon_area([[0, 0], [1, 0], [1, 1], [0, 1]]) == pytest.approx(1.0)


@pytest.mark.parametrize("kw", [{"deg_V": 3}, {"deg_s1": 1}, {"deg_s2": -2}])
def test_options_validation(kw):
    with pytest.raises(PcroaError):
        roa.RoaOptions(**kw)


def test_default_degrees():
    assert roa.default_degrees(3, 2) == (2, 0)
    assert roa.default_degrees(3, 4) == (2, 2)
    assert roa.default_degrees(4, 4) == (4, 2)
