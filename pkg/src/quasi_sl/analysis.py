"""Verification suites: Green identity, dissipativity sign, completeness residuals.

Completeness is evidenced, not proven: a report shows how well the first
``N`` root functions approximate a test function in L2, and the evidence is
the decay of that residual with ``N``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla

from . import propagate as _prop
from .errors import NearEigenvalueError
from .quasisys import (Problem, QuasiFunction, _merge_breaks, composite_rule, quadrature,
                       synthesize_domain_function)
from .spectral import apply_resolvent, as_boundary_matrix, find_eigenvalues
from .triplet import traces

log = logging.getLogger(__name__)

GRAM_COND_LIMIT = 1e12
RIDGE = 1e-14


@dataclass
class SuiteReport:
    """Outcome of one randomized suite.

    ``worst`` is the largest relative residual (Green identity) or the most
    negative sign-adjusted ``Im <Ly, y> / |y|^2`` (dissipativity).
    """

    name: str
    passed: bool
    worst: float
    tolerance: float
    n_samples: int
    violations: int = 0
    values: list = field(default_factory=list, repr=False)

    def to_dict(self, with_values: bool = False) -> dict:
        out = asdict(self)
        if not with_values:
            out.pop("values")
        return out


def _random_complex(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def random_domain_function(problem: Problem, rng, degree: int = 2, rtol=_prop.RTOL, atol=_prop.ATOL):
    """Domain function with random initial data and random polynomial ``l[y]``."""
    initial = [_random_complex(rng, 2) for _ in range(problem.m)]
    forcings = [_random_complex(rng, degree + 1) for _ in range(problem.m)]
    return synthesize_domain_function(problem, initial, forcings, rtol=rtol, atol=atol)


def green_form(f: QuasiFunction, g: QuasiFunction):
    """Both sides of the abstract Green identity and a scale for them.

    Returns ``(lhs, rhs, scale)`` with ``lhs = <l f, g> - <f, l g>`` and
    ``rhs = <G1 f, G2 g> - <G2 f, G1 g>``.
    """
    lhs = 0j
    nlf = nf = nlg = ng = 0.0
    for k, t, w in quadrature(f.problem, f, g):
        fy, gy = f.v(k, t)[:, 0], g.v(k, t)[:, 0]
        lf, lg = f.image(k, t), g.image(k, t)
        lhs += complex(w @ (lf * np.conj(gy) - fy * np.conj(lg)))
        nlf += float(w @ np.abs(lf) ** 2)
        nf += float(w @ np.abs(fy) ** 2)
        nlg += float(w @ np.abs(lg) ** 2)
        ng += float(w @ np.abs(gy) ** 2)
    tf, tg = traces(f), traces(g)
    rhs = complex(np.vdot(tg.gamma2, tf.gamma1) - np.vdot(tg.gamma1, tf.gamma2))
    scale = (math.sqrt(nlf * ng) + math.sqrt(nf * nlg)
             + np.linalg.norm(tf.gamma1) * np.linalg.norm(tg.gamma2)
             + np.linalg.norm(tf.gamma2) * np.linalg.norm(tg.gamma1))
    return lhs, rhs, float(scale)


def green_identity_suite(problem: Problem, n_samples: int = 200, *, seed=0, tol: float = 1e-8,
                         rtol=_prop.RTOL, atol=_prop.ATOL) -> SuiteReport:
    """Check ``<Lf, g> - <f, Lg> = <G1 f, G2 g> - <G2 f, G1 g>`` on random pairs."""
    rng = np.random.default_rng(seed)
    values = []
    for _ in range(n_samples):
        f = random_domain_function(problem, rng, rtol=rtol, atol=atol)
        g = random_domain_function(problem, rng, rtol=rtol, atol=atol)
        lhs, rhs, scale = green_form(f, g)
        values.append(abs(lhs - rhs) / max(scale, 1e-300))
    worst = max(values) if values else 0.0
    bad = sum(v > tol for v in values)
    return SuiteReport("green_identity", bad == 0, worst, tol, n_samples, bad, values)


def dissipation(y: QuasiFunction) -> tuple[float, float]:
    """``(Im <l[y], y>, |y|^2)`` by quadrature."""
    num = den = 0.0
    for k, t, w in quadrature(y.problem, y):
        yy = y.v(k, t)[:, 0]
        num += float(np.imag(w @ (y.image(k, t) * np.conj(yy))))
        den += float(w @ np.abs(yy) ** 2)
    return num, den


def random_contraction(m: int, rng, norm: float | None = None) -> np.ndarray:
    """Random ``2m x 2m`` complex matrix rescaled to the given (or a random) norm below 1."""
    A = _random_complex(rng, 2 * m, 2 * m)
    target = rng.uniform(0.05, 0.99) if norm is None else norm
    return A * (target / np.linalg.norm(A, 2))


def random_unitary(m: int, rng) -> np.ndarray:
    Q, R = np.linalg.qr(_random_complex(rng, 2 * m, 2 * m))
    return Q * (np.diag(R) / np.abs(np.diag(R)))


def dissipativity_suite(problem: Problem, K, variant=None, n_samples: int = 10, *, seed=0,
                        tol: float = 1e-8, rng=None, rtol=_prop.RTOL, atol=_prop.ATOL) -> SuiteReport:
    """Sign of ``Im <L_K y, y>`` on domain functions of the extension.

    Each sample is ``y = (L_K - lam)^{-1} h`` with random ``lam`` and random
    polynomial ``h``, so ``y`` satisfies the boundary condition. For the
    dissipative side the suite requires ``Im <Ly, y> >= -tol |y|^2``; for the
    accumulative side ``<= tol |y|^2``.
    """
    Kb = as_boundary_matrix(K, variant)
    rng = rng if rng is not None else np.random.default_rng(seed)
    values = []
    attempts = 0
    while len(values) < n_samples:
        attempts += 1
        if attempts > 20 * n_samples + 20:
            raise NearEigenvalueError(complex("nan"), float("inf"))
        # half-plane free of spectrum for contractions: below for (5), above for (6)
        lam = complex(rng.uniform(-5, 20), -Kb.sign * rng.uniform(0.5, 3.0))
        h = [_random_complex(rng, 3) for _ in range(problem.m)]
        try:
            y = apply_resolvent(problem, Kb, None, lam, h, rtol=rtol, atol=atol)
        except NearEigenvalueError:
            continue
        num, den = dissipation(y)
        values.append(Kb.sign * num / den)
    worst = min(values)
    bad = sum(v < -tol for v in values)
    return SuiteReport(f"dissipativity[{Kb.variant}]", bad == 0, worst, tol, n_samples, bad, values)


# ---------------------------------------------------------------------------
# Completeness


@dataclass
class CompletenessReport:
    """Least-squares residuals of one test function against root functions.

    Attributes:
        test_id: name of the test function.
        N: numbers of root functions used.
        residuals: ``rho_N = min_c |f - sum c_n y_n| / |f|`` for each N.
        gram_condition: condition number of the Gram matrix for each N.
        regularized: whether the ridge fallback was used for each N.
    """

    test_id: str
    N: list
    residuals: list
    gram_condition: list
    regularized: list
    available: int

    @property
    def monotone(self) -> bool:
        r = self.residuals
        return all(b <= a * (1 + 1e-12) + 1e-14 for a, b in zip(r, r[1:]))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["monotone"] = self.monotone
        return out


def default_test_functions(problem: Problem) -> dict[str, tuple[Callable, list]]:
    """``{id: (f, breakpoints)}``: 1, t, sign(t - mid) and a narrow Gaussian bump."""
    a, b = problem.a, problem.b
    mid = 0.5 * (a + b)
    width = (b - a) / 20.0
    return {
        "one": (lambda t: np.ones_like(t, dtype=complex), []),
        "t": (lambda t: np.asarray(t, dtype=complex), []),
        "sign": (lambda t: np.sign(t - mid).astype(complex), [mid]),
        "bump": (lambda t: np.exp(-0.5 * ((t - mid) / width) ** 2).astype(complex), []),
    }


def completeness_rule(problem: Problem, functions: Sequence[QuasiFunction], extra_breaks=(), order: int = 10):
    """Composite Gauss rule on the union of the root functions' dense-output meshes."""
    seen, nodes, weights = set(), [], []
    for k, sys in enumerate(problem.systems):
        lists = [sys.breakpoints, [b for b in extra_breaks]]
        for f in functions:
            traj = f.pieces[k].traj
            if id(traj) not in seen:
                seen.add(id(traj))
                lists.append(traj.grid)
        lo, hi = problem.bounds(k)
        lists.append(np.linspace(lo, hi, 17))
        t, w = composite_rule(_merge_breaks(lists, lo, hi), order)
        nodes.append((k, t))
        weights.append(w)
    return nodes, weights


def projection_residuals(Y: np.ndarray, f: np.ndarray, w: np.ndarray, Ns: Sequence[int]):
    """Weighted least-squares residuals of ``f`` against the first ``N`` columns of ``Y``.

    Uses a column-pivoted QR of ``W^{1/2} Y`` (equivalently a pivoted
    Cholesky factor of the Gram matrix). If the Gram condition exceeds
    ``1e12`` the coefficients come from the ridge-regularized normal
    equations instead.
    """
    sw = np.sqrt(w)
    A = sw[:, None] * Y
    bvec = sw * f
    fnorm = np.linalg.norm(bvec)
    res, conds, regs = [], [], []
    for N in Ns:
        An = A[:, :N]
        Q, R, _ = sla.qr(An, mode="economic", pivoting=True)
        sv = np.linalg.svd(R, compute_uv=False)
        cond_gram = float((sv[0] / sv[-1]) ** 2) if sv[-1] > 0 else float("inf")
        if cond_gram <= GRAM_COND_LIMIT:
            c = Q.conj().T @ bvec
            r = np.linalg.norm(bvec - Q @ c)
            regs.append(False)
        else:
            G = An.conj().T @ An
            G = G + RIDGE * np.trace(G).real * np.eye(N)
            c = np.linalg.solve(G, An.conj().T @ bvec)
            r = np.linalg.norm(bvec - An @ c)
            regs.append(True)
            log.warning("Gram matrix condition %.3g > %.0e for N=%d; using ridge solve", cond_gram,
                        GRAM_COND_LIMIT, N)
        res.append(float(r / fnorm))
        conds.append(cond_gram)
    return res, conds, regs


def completeness_suite(problem: Problem, K, variant=None, region=None, test_functions=None,
                       Ns: Sequence[int] = (5, 10, 20, 50), *, eigenpairs=None, rtol=_prop.RTOL,
                       atol=_prop.ATOL, threads: int = 1) -> list[CompletenessReport]:
    """Residuals ``rho_N`` of test functions against the first N root functions.

    Root functions are taken in the order returned by the eigenvalue search
    (ascending real part), all null vectors of an eigenvalue together.

    Args:
        region: eigenvalue search rectangle (ignored when ``eigenpairs`` given).
        test_functions: ``{id: f}`` or ``{id: (f, breakpoints)}``; defaults to
            :func:`default_test_functions`.
    """
    if eigenpairs is None:
        eigenpairs = find_eigenvalues(problem, K, variant, region, rtol=rtol, atol=atol, threads=threads)
    funcs = [y for e in eigenpairs for y in e.root_functions]
    if not funcs:
        raise ValueError("no root functions available")
    tests = test_functions if test_functions is not None else default_test_functions(problem)
    tests = {k: (v if isinstance(v, tuple) else (v, [])) for k, v in tests.items()}
    extra = sorted({b for _, br in tests.values() for b in br})
    nodes, weights = completeness_rule(problem, funcs, extra)
    w = np.concatenate(weights)
    Y = np.column_stack([np.concatenate([y.v(k, t)[:, 0] for k, t in nodes]) for y in funcs])
    tglob = np.concatenate([t for _, t in nodes])
    Ns_ok = [n for n in Ns if n <= len(funcs)]
    if len(Ns_ok) < len(Ns):
        log.warning("only %d root functions available; N > %d replaced by N = %d",
                    len(funcs), len(funcs), len(funcs))
        if len(funcs) not in Ns_ok:
            Ns_ok.append(len(funcs))
    reports = []
    for name, (fn, _) in tests.items():
        fv = np.asarray(fn(tglob), dtype=complex)
        res, conds, regs = projection_residuals(Y, fv, w, Ns_ok)
        reports.append(CompletenessReport(name, list(Ns_ok), res, conds, regs, len(funcs)))
    return reports


def fourier_sine_tail(N: int) -> float:
    """``rho_N`` for ``f = 1`` against the first N Dirichlet sine modes on ``[0, pi]``."""
    s = sum(1.0 / n ** 2 for n in range(1, N + 1, 2))
    return math.sqrt(max(1.0 - 8.0 / math.pi ** 2 * s, 0.0))
