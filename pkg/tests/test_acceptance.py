"""Acceptance criteria 1-10, each at its stated tolerance.

Every test records one ``PASS``/``FAIL`` line, printed immediately (visible
with ``-s``) and repeated in the terminal summary. Run just this file with
``pytest tests/test_acceptance.py -v``.
"""
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from oracles import delta_eigenvalues, fourier_sine_tail, robin_eigenvalues
from quasi_sl.analysis import (completeness_suite, dissipativity_suite, green_identity_suite,
                               random_contraction, random_unitary)
from quasi_sl.quasisys import Problem, l2_norm
from quasi_sl.spectral import apply_resolvent, find_eigenvalues, green_kernel, hs_norm
from quasi_sl.triplet import expand_presets

PI = np.pi
NAMES = {
    1: "Dirichlet spectrum",
    2: "multi-interval consistency",
    3: "distributional potential",
    4: "Green identity",
    5: "dissipativity sign",
    6: "half-plane spectrum",
    7: "Hilbert-Schmidt norm",
    8: "completeness evidence",
    9: "generalized-resolvent consistency",
    10: "argument-principle integrity",
}

# every eigenvalue search run by this module, for criterion 10
SEARCHES = {}


def record(n, passed, detail):
    line = f"criterion {n:2d} [{NAMES[n]}]: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE[n] = (passed, line)
    print(line)
    return passed


def search(key, *args, **kwargs):
    if key not in SEARCHES:
        SEARCHES[key] = find_eigenvalues(*args, **kwargs)
    return SEARCHES[key]


@pytest.fixture(scope="module")
def free_pi():
    return Problem.free([0, PI])


@pytest.fixture(scope="module")
def dirichlet20(free_pi):
    t0 = time.perf_counter()
    ev = search("dirichlet20", free_pi, np.eye(2), region=(0.5, 400.5, -1, 1), max_count=20,
                threads=1, root_functions=False)
    return ev, time.perf_counter() - t0


def test_criterion_01_dirichlet_spectrum(dirichlet20):
    ev, elapsed = dirichlet20
    lam = np.array([e.lam for e in ev])
    n2 = np.arange(1, 21) ** 2
    err = float(np.max(np.abs(lam - n2) / n2)) if len(lam) == 20 else np.inf
    ok = len(lam) == 20 and err <= 1e-8 and elapsed <= 10.0
    assert record(1, ok, f"{len(lam)} eigenvalues, max rel error {err:.2e} (tol 1e-8), "
                         f"{elapsed:.2f} s single-threaded (limit 10 s)")


def test_criterion_02_transmission_split(dirichlet20):
    prob = Problem.free([0, PI / 2, PI])
    K = expand_presets(["dirichlet", "transmission", "dirichlet"], 2)
    ev = search("transmission20", prob, K, region=(0.5, 400.5, -1, 1), max_count=20,
                root_functions=False)
    split = np.array([e.lam for e in ev])
    single = np.array([e.lam for e in dirichlet20[0]])
    ok = len(split) == len(single) == 20
    err = float(np.max(np.abs(split - single) / np.abs(single))) if ok else np.inf
    ok = ok and err <= 1e-8
    assert record(2, ok, f"{len(split)} eigenvalues, max rel deviation from single interval {err:.2e} "
                         "(tol 1e-8)")


def test_criterion_03_delta_potential():
    prob = Problem.from_spec([0, 1], [dict(deltas=[(0.5, 100.0)])])
    ev = search("delta", prob, np.eye(2), region=(1, 1000, -1, 1), max_count=10)
    got = np.array([e.lam for e in ev])
    oracle = np.array(delta_eigenvalues(c=100, count=10))
    ok = len(got) == 10
    err = float(np.max(np.abs(got - oracle) / oracle)) if ok else np.inf
    ok = ok and err <= 1e-6 and float(np.max(np.abs(got.imag))) <= 1e-8
    assert record(3, ok, f"{len(got)} eigenvalues vs shooting/bisection oracle, max rel error {err:.2e} "
                         "(tol 1e-6)")


def test_criterion_04_green_identity():
    prob = Problem.from_spec([0, 1, 2.5, 3], [
        dict(p="1 + t^2", q="sin(3*t)", r="t", deltas=[(0.4, 3.0)]),
        dict(p="-2 - cos(t)", q="t", r="1", deltas=[(1.5, -7.0), (2.0, 2.5)]),
        dict(p="exp(t)", Q="abs(t - 2.7)"),
    ])
    t0 = time.perf_counter()
    rep = green_identity_suite(prob, 200, seed=2024, tol=1e-8)
    elapsed = time.perf_counter() - t0
    ok = rep.passed and rep.n_samples == 200 and elapsed <= 30.0
    assert record(4, ok, f"200 random pairs, worst rel residual {rep.worst:.2e} (tol 1e-8), "
                         f"{elapsed:.1f} s (limit 30 s)")


def test_criterion_05_dissipativity_sign():
    prob = Problem.from_spec([0, 1, 2], [dict(p="1 + t", q="cos(2*t)", deltas=[(0.5, 4.0)]),
                                         dict(p="2", r="t")])
    rng = np.random.default_rng(5)
    worst, bad = np.inf, 0
    for _ in range(50):
        K = random_contraction(2, rng)
        assert np.linalg.norm(K, 2) < 1
        rep = dissipativity_suite(prob, K, "dissipative", 10, tol=1e-8, rng=rng)
        worst = min(worst, rep.worst)
        bad += rep.violations
    control = dissipativity_suite(prob, 1.5 * random_unitary(2, rng), "dissipative", 10, tol=1e-8, rng=rng)
    ok = bad == 0 and control.violations >= 1
    assert record(5, ok, f"50 contractions x 10 samples: min Im<Ly,y>/|y|^2 = {worst:.2e} (>= -1e-8), "
                         f"{bad} violations; norm-1.5 control: {control.violations}/10 violations")


def test_criterion_06_half_plane(free_pi):
    ev = search("robin", free_pi, np.diag([0.0, 1.0]), "dissipative", region=(-5, 100, -5, 5))
    robin = np.array([e.lam for e in ev])
    min_im = float(robin.imag.min()) if len(robin) else np.inf
    oracle_err = float(np.max(np.abs(robin - robin_eigenvalues(count=10)))) if len(robin) == 10 else np.inf
    rng = np.random.default_rng(6)
    sa_im = 0.0
    sa_count = 0
    for j in range(5):
        U = random_unitary(1, rng)
        sa = search(f"unitary{j}", free_pi, U, region=(-5, 100, -5, 5), root_functions=False)
        sa_count += len(sa)
        if len(sa):
            sa_im = max(sa_im, float(np.max(np.abs([e.lam.imag for e in sa]))))
    ok = len(robin) > 0 and min_im >= -1e-8 and sa_count > 0 and sa_im <= 1e-8
    assert record(6, ok, f"Robin: {len(robin)} eigenvalues, min Im {min_im:.3f} (>= -1e-8), "
                         f"secant oracle deviation {oracle_err:.1e}; 5 unitary K: {sa_count} eigenvalues, "
                         f"max |Im| {sa_im:.1e} (<= 1e-8)")


def test_criterion_07_hilbert_schmidt(free_pi):
    coarse = green_kernel(free_pi, np.eye(2), lam=0.0, n=64)
    fine = green_kernel(free_pi, np.eye(2), lam=0.0, n=128)
    hs64, hs128 = hs_norm(coarse), hs_norm(fine)
    exact = PI ** 4 / 90
    err = abs(hs64 ** 2 - exact)
    delta = abs(hs128 - hs64)
    tensor_err = abs(hs_norm(coarse, "tensor") ** 2 - exact)
    ok = err <= 1e-6 and abs(hs128 ** 2 - exact) <= 1e-6 and delta < 1e-7
    assert record(7, ok, f"hs_norm^2 = {hs64 ** 2:.15f} vs pi^4/90, error {err:.1e} (tol 1e-6); "
                         f"64->128 change {delta:.1e} (< 1e-7); plain tensor rule error {tensor_err:.1e}")


def test_criterion_08_completeness(free_pi):
    dirichlet = search("dirichlet50", free_pi, np.eye(2), region=(0.5, 2550.5, -1, 1), max_count=50)
    Ns = (5, 10, 20, 50)
    (one,) = completeness_suite(free_pi, np.eye(2), eigenpairs=dirichlet, Ns=Ns,
                                test_functions={"one": lambda t: np.ones_like(t, dtype=complex)})
    fourier_err = max(abs(r - fourier_sine_tail(n)) for r, n in zip(one.residuals, one.N))
    robin_ev = search("robin50", free_pi, np.diag([0.0, 1.0]), "dissipative",
                      region=(-5, 2500, -5, 5), max_count=50)
    reports = completeness_suite(free_pi, np.diag([0.0, 1.0]), eigenpairs=robin_ev, Ns=Ns)
    by_id = {r.test_id: r for r in reports}
    # smooth test function compatible with the Dirichlet end at pi; f = 1 and f = t do not vanish
    # there and decay only like N^(-1/2), so they are reported but not held to 1e-2
    rho50 = by_id["bump"].residuals[-1]
    monotone = all(r.monotone for r in reports)
    ok = (one.N == list(Ns) and fourier_err <= 1e-6 and by_id["bump"].N[-1] == 50
          and rho50 < 1e-2 and monotone)
    others = ", ".join(f"{k} {r.residuals[-1]:.2e}" for k, r in by_id.items() if k != "bump")
    assert record(8, ok, f"Dirichlet f=1 vs sine-series tail, max deviation {fourier_err:.1e} (tol 1e-6); "
                         f"Robin bump rho_50 = {rho50:.1e} (< 1e-2), all reports monotone: {monotone} "
                         f"[rho_50 for {others}]")


def test_criterion_09_generalized_resolvent(free_pi):
    prob = Problem.from_spec([0, 1, PI], [dict(q="t", deltas=[(0.5, 2.0)]), dict(p="1 + t/4")])
    K0 = random_contraction(2, np.random.default_rng(9))
    rng = np.random.default_rng(90)
    h = "cos(2*t) + t"
    worst_const = worst_kernel = 0.0
    for _ in range(10):
        lam = complex(rng.uniform(-5, 40), -rng.uniform(0.5, 5))
        path = apply_resolvent(prob, lambda z: K0, "dissipative", lam, h)
        ordinary = apply_resolvent(prob, K0, "dissipative", lam, h)
        worst_const = max(worst_const, l2_norm(lambda t: path.y(t) - ordinary.y(t), prob))
        # independent route to the ordinary resolvent: the Green kernel of L_K0
        kern = green_kernel(prob, K0, "dissipative", lam, n=48)
        via_kernel = kern.apply(lambda t: np.cos(2 * t) + t)
        diff = via_kernel - path.y(kern.nodes)
        worst_kernel = max(worst_kernel, float(np.sqrt(np.sum(kern.weights * np.abs(diff) ** 2))))
    lam, mu = 3.0 - 1.0j, -2.0 - 2.5j
    r_lam = apply_resolvent(prob, lambda z: K0, "dissipative", lam, h)
    r_mu = apply_resolvent(prob, lambda z: K0, "dissipative", mu, h)
    both = apply_resolvent(prob, lambda z: K0, "dissipative", lam, r_mu)
    ident = l2_norm(lambda t: r_lam.y(t) - r_mu.y(t) - (lam - mu) * both.y(t), prob)
    hnorm = l2_norm(lambda t: np.cos(2 * t) + t, prob)
    ok = worst_const <= 1e-9 and worst_kernel <= 1e-9 and ident <= 1e-7 * hnorm
    assert record(9, ok, f"10 lambdas: K(lam)=K0 path vs ordinary resolvent {worst_const:.1e}, "
                         f"vs Green kernel {worst_kernel:.1e} (tol 1e-9); resolvent identity "
                         f"{ident / hnorm:.1e} (tol 1e-7)")


def test_criterion_10_argument_principle(free_pi):
    # make sure every search of this module has run, even when this test runs alone
    search("dirichlet20", free_pi, np.eye(2), region=(0.5, 400.5, -1, 1), max_count=20,
           threads=1, root_functions=False)
    search("robin", free_pi, np.diag([0.0, 1.0]), "dissipative", region=(-5, 100, -5, 5))
    bad = []
    boxes = 0
    for key, ev in SEARCHES.items():
        total = sum(e.alg_mult for e in ev)
        region_ok = ev.winding == sum(b.winding for b in ev.boxes) == total
        leaf_ok = all(b.winding == b.found for b in ev.boxes)
        boxes += len(ev.boxes)
        if not (ev.consistent() and region_ok and leaf_ok):
            bad.append(key)
    ok = not bad and len(SEARCHES) >= 3
    assert record(10, ok, f"{len(SEARCHES)} searches, {boxes} leaf boxes: found multiplicity equals "
                          f"winding number in all boxes" + (f"; mismatches in {bad}" if bad else ""))
