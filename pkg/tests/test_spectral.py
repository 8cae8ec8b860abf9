import numpy as np
import pytest

from oracles import dirichlet_hs_squared
from quasi_sl.analysis import random_contraction, random_unitary
from quasi_sl.errors import NearEigenvalueError, SpecError
from quasi_sl.quasisys import Problem, inner, l2_norm
from quasi_sl.spectral import apply_resolvent, char_det, find_eigenvalues, green_kernel, hs_norm
from quasi_sl.triplet import BoundaryMatrix, expand_presets, traces

PI = np.pi

# frozen from tests/oracles.py (mpmath shooting + bisection on the classical jump formulation)
DELTA_EIGENVALUES = [36.51357068815211, 39.47841760435743, 146.21186237371606, 157.91367041742973,
                     329.53253832257803, 355.3057584392169, 587.1040464951715, 631.6546816697189,
                     919.6383954855268, 986.9604401089358]
# frozen from tests/oracles.py (mpmath secant on the explicit Robin characteristic function)
ROBIN_EIGENVALUES = [0.5956497193106608 + 0.44912614732102385j, 2.346103493436137 + 0.7185607006092517j,
                     6.272247711799712 + 0.6714394581885987j, 12.259735847617844 + 0.6542791434230024j,
                     20.255522946915736 + 0.6472354551131757j, 30.253578470121905 + 0.6436986587770829j,
                     42.25251442437296 + 0.6416758628953099j, 56.251866482200235 + 0.6404114603481976j,
                     72.2514417416645 + 0.6395685820037421j, 90.25114783480221 + 0.6389786312627725j]
# frozen partial sums of sum 1/|n^2 - lam|^2
HS_SQUARED = {16j: 0.015401886206168959, 64j: 0.0020473061221476375}

ROBIN_K = np.diag([0.0, 1.0])


@pytest.fixture(scope="module")
def free_pi():
    return Problem.free([0, PI])


def test_dirichlet_and_neumann_determinant_zeros(free_pi):
    d = char_det(free_pi, np.eye(2), [4.0, 4.5])
    assert abs(d.det[0]) < 1e-9 * abs(d.det[1])
    n = char_det(free_pi, -np.eye(2), [0.0, 9.0, 2.0])
    assert abs(n.det[0]) < 1e-9 * abs(n.det[2]) and abs(n.det[1]) < 1e-9 * abs(n.det[2])


def test_small_dirichlet_search(free_pi):
    ev = find_eigenvalues(free_pi, np.eye(2), region=(0.5, 20.5, -1, 1))
    assert [round(e.lam.real, 9) for e in ev] == [1, 4, 9, 16]
    assert all(e.alg_mult == 1 and e.geo_mult == 1 for e in ev)
    assert ev.winding == 4 and ev.consistent()


def test_neumann_spectrum_includes_zero(free_pi):
    ev = find_eigenvalues(free_pi, -np.eye(2), region=(-0.5, 10, -1, 1))
    assert np.allclose([e.lam for e in ev], [0, 1, 4, 9], atol=1e-8)


def test_transmission_split_matches_single_interval():
    prob = Problem.free([0, PI / 2, PI])
    K = expand_presets(["dirichlet", "transmission", "dirichlet"], 2)
    ev = find_eigenvalues(prob, K, region=(0.5, 30.5, -1, 1))
    assert np.max(np.abs(np.array([e.lam for e in ev]) - np.arange(1, 6) ** 2)) < 1e-8 * 25
    assert ev.consistent()


def test_delta_potential_against_shooting_oracle():
    prob = Problem.from_spec([0, 1], [dict(deltas=[(0.5, 100.0)])])
    ev = find_eigenvalues(prob, np.eye(2), region=(1, 1000, -1, 1), max_count=10)
    got = np.array([e.lam.real for e in ev])
    assert len(got) == 10
    assert np.max(np.abs(got - DELTA_EIGENVALUES) / np.array(DELTA_EIGENVALUES)) < 1e-6


def test_robin_against_secant_oracle(free_pi):
    ev = find_eigenvalues(free_pi, ROBIN_K, "dissipative", region=(-5, 100, -5, 5))
    got = np.array([e.lam for e in ev])
    assert len(got) == 10
    assert np.max(np.abs(got - ROBIN_EIGENVALUES)) < 1e-6
    assert np.all(got.imag >= -1e-8)
    assert ev.consistent()


def test_eigenpair_residuals_and_orthogonality(free_pi):
    rng = np.random.default_rng(8)
    U = random_unitary(1, rng)
    ev = find_eigenvalues(free_pi, U, region=(-3, 30, -2, 2))
    assert len(ev) >= 4
    fns = []
    for e in ev:
        assert abs(e.lam.imag) <= 1e-8
        y = e.eigenfunction
        assert y.norm() == pytest.approx(1.0, rel=1e-10)
        resid = l2_norm(lambda t, y=y, lam=e.lam: y.lmax(t) - lam * y.y(t), free_pi, breaks=None)
        assert resid <= 1e-7
        bres = np.linalg.norm(BoundaryMatrix(U).residual(traces(y)))
        assert bres < 1e-8
        fns.append(y)
    for i in range(len(fns)):
        for j in range(i):
            assert abs(inner(fns[i], fns[j])) < 1e-7


def test_half_plane_confinement_random_contractions(free_pi):
    rng = np.random.default_rng(99)
    for trial in range(50):
        K = random_contraction(1, rng)
        variant = "dissipative" if trial % 2 == 0 else "accumulative"
        ev = find_eigenvalues(free_pi, K, variant, region=(-4, 12, -4, 4), root_functions=False)
        assert ev.consistent()
        for e in ev:
            if variant == "dissipative":
                assert e.lam.imag >= -1e-8
            else:
                assert e.lam.imag <= 1e-8


def test_eigenvalue_search_is_parallel_safe(free_pi):
    serial = find_eigenvalues(free_pi, ROBIN_K, region=(-5, 40, -5, 5), root_functions=False)
    threaded = find_eigenvalues(free_pi, ROBIN_K, region=(-5, 40, -5, 5), root_functions=False,
                                threads=4)
    assert [e.lam for e in serial] == [e.lam for e in threaded]


# ---------------------------------------------------------------------------
# resolvents


def test_zero_forcing_gives_zero(free_pi):
    y = apply_resolvent(free_pi, np.eye(2), lam=0.3j, h=None)
    assert y.norm() == 0


def test_dirichlet_resolvent_of_sine(free_pi):
    y = apply_resolvent(free_pi, np.eye(2), lam=0.0, h="sin(t)")
    t = np.linspace(0, PI, 17)
    assert np.max(np.abs(y.y(t) - np.sin(t))) < 1e-10
    assert y.ode_residual() < 1e-9


def test_resolvent_satisfies_boundary_condition():
    prob = Problem.from_spec([0, 1, 2], [dict(p="1+t", q="t", deltas=[(0.5, 2)]), dict(r="1")])
    rng = np.random.default_rng(4)
    K = random_contraction(2, rng)
    y = apply_resolvent(prob, K, lam=3 - 2j, h="cos(3*t)")
    assert np.linalg.norm(BoundaryMatrix(K).residual(traces(y))) < 1e-9
    assert y.residual_lmax() < 1e-8


def test_near_eigenvalue_is_refused(free_pi):
    with pytest.raises(NearEigenvalueError):
        apply_resolvent(free_pi, np.eye(2), lam=4.0, h="1")


def test_resolvent_identity():
    prob = Problem.from_spec([0, 1.5], [dict(p="1 + t^2/3", q="sin(t)")])
    K = BoundaryMatrix(np.diag([0.2j, 0.5]))
    lam, mu = 2 - 1j, -3 - 0.5j
    h = "exp(t) - t"
    r_lam = apply_resolvent(prob, K, lam=lam, h=h)
    r_mu = apply_resolvent(prob, K, lam=mu, h=h)
    both = apply_resolvent(prob, K, lam=lam, h=r_mu)
    diff = l2_norm(lambda t: r_lam.y(t) - r_mu.y(t) - (lam - mu) * both.y(t), prob)
    hn = l2_norm(lambda t: np.exp(t) - t, prob)
    assert diff <= 1e-7 * hn


def test_constant_kfun_matches_ordinary_resolvent(free_pi):
    K0 = np.diag([0.3, 0.6j])
    rng = np.random.default_rng(12)
    for _ in range(10):
        lam = complex(rng.uniform(-5, 30), -rng.uniform(0.2, 4))
        a = apply_resolvent(free_pi, lambda z: K0, "dissipative", lam, "t^2")
        b = apply_resolvent(free_pi, K0, "dissipative", lam, "t^2")
        assert l2_norm(lambda t: a.y(t) - b.y(t), free_pi) < 1e-9


def test_kfun_half_plane_and_norm_are_checked(free_pi):
    with pytest.raises(SpecError):
        apply_resolvent(free_pi, lambda z: np.zeros((2, 2)), "dissipative", 1 + 1j, "1")
    with pytest.raises(SpecError):
        apply_resolvent(free_pi, lambda z: 2 * np.eye(2), "dissipative", 1 - 1j, "1")
    y = apply_resolvent(free_pi, lambda z: np.exp(-1j * z) * np.eye(2) * 0.5, "dissipative", 1 - 1j, "1")
    assert y.residual_lmax() < 1e-8


# ---------------------------------------------------------------------------
# Green kernel


def test_green_kernel_spot_value(free_pi):
    G = green_kernel(free_pi, np.eye(2), lam=0.0, n=16)
    assert G(PI / 2, PI / 2)[0, 0] == pytest.approx(PI / 4, abs=1e-10)
    t, s = 0.4, 2.0
    assert G(t, s)[0, 0] == pytest.approx(t * (PI - s) / PI, abs=1e-10)
    assert G(s, t)[0, 0] == pytest.approx(t * (PI - s) / PI, abs=1e-10)


def test_hs_norm_at_zero(free_pi):
    hs = hs_norm(green_kernel(free_pi, np.eye(2), lam=0.0, n=64))
    assert hs ** 2 == pytest.approx(PI ** 4 / 90, abs=1e-10)


@pytest.mark.parametrize("lam", [16j, 64j])
def test_hs_norm_against_series_oracle(free_pi, lam):
    kern = green_kernel(free_pi, np.eye(2), lam=lam, n=64)
    # the kernel is a product of growing solutions, so accuracy drops with |Im sqrt(lam)|
    tol = max(1e-8, 10 * kern.accuracy)
    assert hs_norm(kern) ** 2 == pytest.approx(HS_SQUARED[lam], rel=tol)


def test_oracle_series_is_consistent_with_frozen_values():
    assert dirichlet_hs_squared(16j) == pytest.approx(HS_SQUARED[16j], rel=1e-14)


def test_hs_norm_decay_ratio(free_pi):
    # (sum 1/|n^2 - lam|^2)^(1/2) ~ c |lam|^(-3/4) on the imaginary axis; the ratio test
    # checks the observed exponent lies in the decaying range bounded by 1/2 and 1
    a = hs_norm(green_kernel(free_pi, np.eye(2), lam=4j, n=64))
    b = hs_norm(green_kernel(free_pi, np.eye(2), lam=16j, n=64))
    exponent = -np.log(b / a) / np.log(4)
    assert 0.5 <= exponent <= 1.0


def test_tensor_rule_converges_slowly(free_pi):
    kern = green_kernel(free_pi, np.eye(2), lam=0.0, n=64)
    err_tensor = abs(hs_norm(kern, "tensor") ** 2 - PI ** 4 / 90)
    err_split = abs(hs_norm(kern) ** 2 - PI ** 4 / 90)
    assert err_split < 1e-12 < err_tensor


def test_kernel_inverts_the_operator():
    prob = Problem.from_spec([0, 1, 2], [dict(p="1+t", q="t", deltas=[(0.5, 2)]), dict(r="1")])
    K = random_contraction(2, np.random.default_rng(6))
    lam = 1.5 - 2j
    kern = green_kernel(prob, K, lam=lam, n=48)
    y = apply_resolvent(prob, K, lam=lam, h="cos(t)")
    # y solves l[y] - lam*y = h, so y = (L - lam)^{-1} h
    via_kernel = kern.apply(np.cos)
    assert np.max(np.abs(via_kernel - y.y(kern.nodes))) < 1e-9
