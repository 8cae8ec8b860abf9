"""Multi-interval problems, Shin-Zettl matrices and quasi-functions.

On interval ``k`` the quasi-derivatives are::

    D0 y = y
    D1 y = p y' - (Q + i r) y
    D2 y = (D1 y)' + (Q - i r)/p D1 y + (Q^2 + r^2)/p y

and ``l[y] = -D2 y``.  With ``v = (y, D1 y)`` the equation ``l[y] = f``
becomes ``v' = A v + (0, -f)`` where::

    A = [[ (Q + i r)/p,       1/p        ],
         [ -(Q^2 + r^2)/p,   -(Q - i r)/p ]]

``v`` is absolutely continuous even when ``Q`` jumps, which is what makes
Dirac potentials tractable without special matching code.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

from . import propagate as _prop
from .coeffexpr import (BreakpointSet, Expr, PotentialSpec, Primitive, build_primitive,
                        constant, parse_expr)
from .errors import SingularCoefficientError, SpecError

log = logging.getLogger(__name__)

E_LAMBDA = np.array([[0, 0], [-1, 0]], dtype=complex)
P_FLOOR = 1e-300

_GL_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def gauss_legendre(n: int):
    if n not in _GL_CACHE:
        _GL_CACHE[n] = np.polynomial.legendre.leggauss(n)
    return _GL_CACHE[n]


def composite_rule(breaks, order: int = 10):
    """Nodes and weights of composite Gauss-Legendre on consecutive ``breaks``."""
    breaks = np.asarray(breaks, dtype=float)
    x, w = gauss_legendre(order)
    lo, hi = breaks[:-1], breaks[1:]
    half = 0.5 * (hi - lo)
    nodes = (lo[:, None] + half[:, None] * (x + 1.0)).ravel()
    weights = (half[:, None] * w).ravel()
    return nodes, weights


def _as_expr(value, default="0") -> Expr:
    if value is None:
        value = default
    if isinstance(value, Expr):
        return value
    if isinstance(value, (int, float)):
        return constant(value)
    return parse_expr(str(value))


@dataclass(frozen=True)
class IntervalCoefficients:
    p: Expr
    Q: Primitive
    r: Expr


class ShinZettlSystem:
    """The matrix function ``A_k(t)`` of one interval (independent of lambda).

    ``matrix(t, anchor)`` evaluates ``A`` on the open segment that starts at
    ``anchor``: the step part of ``Q`` is frozen at its value just right of
    ``anchor`` so that stage evaluations at a segment's right end use the
    left limit.
    """

    def __init__(self, k, lo, hi, p: Expr, Q: Primitive, r: Expr, breakpoints=()):
        self.k = k
        self.lo, self.hi = float(lo), float(hi)
        self.p, self.Q, self.r = p, Q, r
        self.breakpoints = BreakpointSet(
            list(Q.breakpoints) + list(breakpoints), self.hi - self.lo
        ).inside(self.lo, self.hi)
        self._constant = not (p.depends_on_t or r.depends_on_t or Q.has_smooth_part)
        self._const_cache: dict[float, np.ndarray] = {}

    def coefficients(self, t, anchor=None):
        t = np.asarray(t, dtype=float)
        p = np.broadcast_to(self.p(t), t.shape)
        if np.any(np.abs(p) < P_FLOOR):
            bad = np.ravel(t)[np.flatnonzero(np.abs(np.ravel(p)) < P_FLOOR)[0]]
            raise SingularCoefficientError(bad)
        if anchor is None:
            Q = self.Q(t)
        else:
            Q = self.Q.smooth_part(t) + self.Q.step_value_after(anchor)
        r = np.broadcast_to(self.r(t), t.shape)
        return p, np.broadcast_to(Q, t.shape), r

    def matrix(self, t, anchor=None):
        p, Q, r = self.coefficients(t, anchor)
        A = np.empty(np.shape(p) + (2, 2), dtype=complex)
        A[..., 0, 0] = (Q + 1j * r) / p
        A[..., 0, 1] = 1.0 / p
        A[..., 1, 0] = -(Q**2 + r**2) / p
        A[..., 1, 1] = -(Q - 1j * r) / p
        return A

    __call__ = matrix

    def constant_matrix(self, anchor):
        """``A`` on the segment starting at ``anchor`` when it is t-independent, else None."""
        if not self._constant:
            return None
        key = float(self.Q.step_value_after(anchor))
        if key not in self._const_cache:
            self._const_cache[key] = self.matrix(np.array([anchor]), anchor=anchor)[0]
        return self._const_cache[key]

    def trace(self, t):
        p, _, r = self.coefficients(t)
        return 2j * r / p


class Problem:
    """Partition ``a_0 < ... < a_m`` with coefficient triples per interval.

    Build one with :meth:`from_spec` (strings or numbers per coefficient) or
    :meth:`free`.
    """

    def __init__(self, partition: Sequence[float], intervals: Sequence[IntervalCoefficients],
                 breakpoints: Sequence[Sequence[float]] | None = None):
        part = tuple(float(a) for a in partition)
        if len(part) < 2:
            raise SpecError("partition needs at least two points (m >= 1)")
        if any(b <= a for a, b in zip(part, part[1:])):
            raise SpecError("partition must be strictly increasing")
        if len(intervals) != len(part) - 1:
            raise SpecError(
                f"{len(intervals)} coefficient sets for {len(part) - 1} intervals"
            )
        self.partition = part
        self.intervals = tuple(intervals)
        bps = breakpoints or [()] * self.m
        self.systems = tuple(
            ShinZettlSystem(k, part[k], part[k + 1], c.p, c.Q, c.r, bps[k])
            for k, c in enumerate(self.intervals)
        )

    @property
    def m(self) -> int:
        return len(self.partition) - 1

    @property
    def a(self) -> float:
        return self.partition[0]

    @property
    def b(self) -> float:
        return self.partition[-1]

    def bounds(self, k):
        return self.partition[k], self.partition[k + 1]

    def interval_of(self, t):
        """Interval index of each ``t`` (nodes belong to the interval on their right)."""
        idx = np.searchsorted(self.partition, np.asarray(t, dtype=float), side="right") - 1
        return np.clip(idx, 0, self.m - 1)

    @classmethod
    def from_spec(cls, partition, intervals, quad_tol=1e-13):
        """Build from per-interval dicts with keys p, q, deltas, Q, r, breakpoints.

        ``q`` is the density of the absolutely continuous part of the
        potential, ``deltas`` a list of ``(at, weight)``; alternatively ``Q``
        gives the antiderivative directly.  Missing coefficients default to
        ``p = 1``, ``q = 0``, ``r = 0``.
        """
        part = [float(a) for a in partition]
        if len(intervals) != len(part) - 1:
            raise SpecError(f"{len(intervals)} coefficient sets for {len(part) - 1} intervals")
        coeffs, bps = [], []
        for k, spec in enumerate(intervals):
            spec = dict(spec)
            kinks = [float(x) for x in spec.get("breakpoints", ())]
            # branch switches of abs/sign in any coefficient are located automatically
            for key in ("p", "q", "Q", "r"):
                if isinstance(spec.get(key), (str, Expr)):
                    kinks.extend(_as_expr(spec[key]).kinks(part[k], part[k + 1]))
            deltas = tuple((float(at), float(w)) for at, w in spec.get("deltas", ()))
            q = spec.get("q")
            direct = spec.get("Q")
            pot = PotentialSpec(
                ac_part=None if q is None else _as_expr(q),
                deltas=deltas,
                direct_Q=None if direct is None else _as_expr(direct),
            )
            Q = build_primitive(pot, (part[k], part[k + 1]), quad_tol, k=k,
                                extra_breakpoints=kinks)
            coeffs.append(IntervalCoefficients(_as_expr(spec.get("p"), "1"), Q,
                                               _as_expr(spec.get("r"), "0")))
            bps.append(kinks)
        return cls(part, coeffs, bps)

    @classmethod
    def free(cls, partition):
        """``p = 1``, ``q = 0``, ``r = 0`` on every interval."""
        return cls.from_spec(partition, [{}] * (len(partition) - 1))

    def check_integrability(self, n: int = 400) -> list[str]:
        """Numerical check of ``1/sqrt|p|, Q/sqrt|p|, r/sqrt|p|`` in L2.

        Quadrature cannot prove membership, so problems are reported as
        warnings (also emitted through :mod:`warnings`).
        """
        messages = []
        for sys in self.systems:
            for name, fn in (
                ("1/|p|", lambda t: 1.0 / np.abs(sys.p(t, check=False))),
                ("Q^2/|p|", lambda t: sys.Q(t) ** 2 / np.abs(sys.p(t, check=False))),
                ("r^2/|p|", lambda t: sys.r(t, check=False) ** 2 / np.abs(sys.p(t, check=False))),
            ):
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    val, err = integrate.quad(lambda s: float(fn(np.array(s))), sys.lo, sys.hi,
                                              limit=n, points=sys.breakpoints or None)
                if not np.isfinite(val) or err > 1e-6 * max(1.0, abs(val)):
                    messages.append(
                        f"interval {sys.k}: integral of {name} over [{sys.lo}, {sys.hi}] "
                        f"may diverge (value {val:.3e}, error estimate {err:.1e})"
                    )
        for msg in messages:
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
        return messages


def assemble_system(problem: Problem, k: int) -> ShinZettlSystem:
    return problem.systems[k]


def augmented_matrix(system: ShinZettlSystem, lam) -> Callable:
    """``t -> A_k(t) + lam * [[0, 0], [-1, 0]]``."""
    lam = complex(lam)
    return lambda t, anchor=None: system.matrix(t, anchor) + lam * E_LAMBDA


# ---------------------------------------------------------------------------
# Quasi-functions


@dataclass
class Piece:
    """``v(t) = traj(t, member) @ weights`` on one interval."""

    traj: _prop.Trajectory
    member: int
    weights: np.ndarray
    start: np.ndarray
    end: np.ndarray

    def __call__(self, t):
        return self.traj(t, self.member) @ self.weights

    def derivative(self, t):
        return self.traj.derivative(t, self.member) @ self.weights

    @property
    def mesh(self):
        return self.traj.grid


class QuasiFunction:
    """Element of Dom(L_max): per-interval dense trajectories of ``(y, D1 y)``.

    Attributes:
        problem: the owning :class:`Problem`.
        pieces: one :class:`Piece` per interval.
        image: callable ``(k, t) -> l[y](t)`` on interval ``k``.
        lam: spectral parameter when this is an eigenfunction or resolvent
            solution, else None.
    """

    def __init__(self, problem: Problem, pieces: Sequence[Piece], image, lam=None, extra_breaks=None):
        self.problem = problem
        self.pieces = list(pieces)
        self.image = image
        self.lam = lam
        self.extra_breaks = extra_breaks or [()] * problem.m

    def v(self, k, t):
        """``(y, D1 y)`` on interval ``k``, shape ``t.shape + (2,)``."""
        return self.pieces[k](t)

    def _global(self, t, comp):
        t = np.asarray(t, dtype=float)
        flat = np.atleast_1d(t).ravel()
        out = np.empty(flat.shape, dtype=complex)
        ks = self.problem.interval_of(flat)
        for k in np.unique(ks):
            sel = ks == k
            out[sel] = self.pieces[k](flat[sel])[:, comp]
        return out.reshape(t.shape) if t.ndim else out[0]

    def y(self, t):
        return self._global(t, 0)

    def d1(self, t):
        return self._global(t, 1)

    __call__ = y

    def lmax(self, t):
        """``l[y]`` at global points ``t``."""
        t = np.asarray(t, dtype=float)
        flat = np.atleast_1d(t).ravel()
        out = np.empty(flat.shape, dtype=complex)
        ks = self.problem.interval_of(flat)
        for k in np.unique(ks):
            sel = ks == k
            out[sel] = self.image(int(k), flat[sel])
        return out.reshape(t.shape) if t.ndim else out[0]

    def endpoint_values(self, k):
        """``(v(a_{k-1}+), v(a_k-))``."""
        piece = self.pieces[k]
        return piece.start, piece.end

    def mesh(self, k):
        return self.pieces[k].mesh

    def scaled(self, c) -> "QuasiFunction":
        c = complex(c)
        pieces = [Piece(p.traj, p.member, p.weights * c, p.start * c, p.end * c) for p in self.pieces]
        image = self.image
        return QuasiFunction(self.problem, pieces, lambda k, t: c * image(k, t), self.lam,
                             self.extra_breaks)

    def norm(self) -> float:
        return float(np.sqrt(inner(self, self).real))

    def normalized(self) -> "QuasiFunction":
        return self.scaled(1.0 / self.norm())

    def ode_residual(self, order: int = 10) -> float:
        """Relative L1 norm of ``v' - A v - (0, -l[y])`` over all intervals."""
        num = den = 0.0
        for k, sys in enumerate(self.problem.systems):
            breaks = _merge_breaks([self.mesh(k), sys.breakpoints, self.extra_breaks[k]],
                                   *self.problem.bounds(k))
            t, w = composite_rule(breaks, order)
            v = self.v(k, t)
            dv = self.pieces[k].derivative(t)
            rhs = np.einsum("nij,nj->ni", sys.matrix(t), v)
            rhs[:, 1] -= self.image(k, t)
            num += float(w @ np.abs(dv - rhs).sum(axis=1))
            den += float(w @ np.abs(dv).sum(axis=1)) + float(w @ np.abs(rhs).sum(axis=1))
        return num / max(den, 1e-300)

    def residual_lmax(self, order: int = 10) -> float:
        """Relative L2 distance between ``l[y]`` recomputed from the trajectory and ``image``."""
        num = den = 0.0
        for k, sys in enumerate(self.problem.systems):
            breaks = _merge_breaks([self.mesh(k), sys.breakpoints, self.extra_breaks[k]],
                                   *self.problem.bounds(k))
            t, w = composite_rule(breaks, order)
            v = self.v(k, t)
            dv = self.pieces[k].derivative(t)
            A = sys.matrix(t)
            recomputed = A[:, 1, 0] * v[:, 0] + A[:, 1, 1] * v[:, 1] - dv[:, 1]
            num += float(w @ np.abs(recomputed - self.image(k, t)) ** 2)
            den += float(w @ np.abs(v[:, 0]) ** 2)
        return float(np.sqrt(num / max(den, 1e-300)))


def _merge_breaks(lists, lo, hi):
    vals = np.concatenate([np.asarray(x, dtype=float).ravel() for x in lists] + [[lo, hi]])
    vals = np.unique(vals[(vals >= lo) & (vals <= hi)])
    span = hi - lo
    keep = np.concatenate([[True], np.diff(vals) > 1e-13 * span])
    vals = vals[keep]
    vals[-1] = hi
    return vals


def _sampler(obj):
    """Return ``(fn(k, t), mesh(k) or None)`` for a QuasiFunction or a callable of t."""
    if isinstance(obj, QuasiFunction):
        return (lambda k, t: obj.v(k, t)[:, 0]), obj.mesh
    if callable(obj):
        return (lambda k, t: np.broadcast_to(np.asarray(obj(t), dtype=complex), np.shape(t))), None
    raise TypeError(f"cannot integrate {type(obj).__name__}")


def quadrature(problem: Problem, *funcs, order: int = 10, breaks=None):
    """Composite Gauss rule on the union of the funcs' meshes (per interval).

    Returns a list of ``(k, nodes, weights)``.
    """
    rules = []
    samplers = [_sampler(f) for f in funcs]
    for k, sys in enumerate(problem.systems):
        lists = [sys.breakpoints]
        for f in funcs:
            if isinstance(f, QuasiFunction):
                lists.append(f.extra_breaks[k])
        for _, mesh in samplers:
            if mesh is not None:
                lists.append(mesh(k))
        if breaks is not None:
            lists.append(breaks[k] if isinstance(breaks, (list, tuple)) else breaks)
        lo, hi = problem.bounds(k)
        merged = _merge_breaks(lists, lo, hi)
        if len(merged) < 9:
            merged = _merge_breaks([merged, np.linspace(lo, hi, 9)], lo, hi)
        t, w = composite_rule(merged, order)
        rules.append((k, t, w))
    return rules


def inner(u, v, problem: Problem | None = None, order: int = 10, breaks=None) -> complex:
    """``<u, v> = integral of u * conj(v)`` over [a, b]."""
    if problem is None:
        problem = next(f.problem for f in (u, v) if isinstance(f, QuasiFunction))
    su, _ = _sampler(u)
    sv, _ = _sampler(v)
    total = 0j
    for k, t, w in quadrature(problem, u, v, order=order, breaks=breaks):
        total += complex(w @ (su(k, t) * np.conj(sv(k, t))))
    return total


def l2_norm(u, problem: Problem | None = None, order: int = 10, breaks=None) -> float:
    return float(np.sqrt(max(inner(u, u, problem, order, breaks).real, 0.0)))


def _forcing_on(forcing, k):
    """Normalize a per-interval forcing spec to a callable of t (or None)."""
    if forcing is None:
        return None
    if isinstance(forcing, (list, tuple)):
        forcing = forcing[k]
        if forcing is None:
            return None
    if isinstance(forcing, str):
        forcing = parse_expr(forcing)
    if isinstance(forcing, (int, float, complex)):
        value = complex(forcing)
        if value == 0:
            return None
        return lambda t: np.full(np.shape(t), value)
    if isinstance(forcing, np.ndarray) or (isinstance(forcing, Sequence) and not callable(forcing)):
        coeffs = np.asarray(forcing, dtype=complex)
        return lambda t: np.polyval(coeffs, t)
    return forcing


def synthesize_domain_function(problem: Problem, initial, forcings=None, *, lam=0.0,
                               rtol=_prop.RTOL, atol=_prop.ATOL, breakpoints=None) -> QuasiFunction:
    """Member of Dom(L_max) with ``v_k(a_{k-1}) = initial[k]`` and ``l[y] - lam*y = f_k``.

    Args:
        initial: sequence of m complex pairs.
        forcings: None, or per-interval list of callables / Exprs / strings /
            numbers / polynomial coefficient arrays (highest degree first).
        breakpoints: per-interval extra discontinuities of the forcings.
    """
    pieces, fns = [], []
    lam = complex(lam)
    for k, sys in enumerate(problem.systems):
        f = _forcing_on(forcings, k)
        fns.append(f)
        extra = breakpoints[k] if breakpoints else ()
        v0 = np.asarray(initial[k], dtype=complex).reshape(2, 1)
        res = _prop.propagate(sys, lam, v0, forcing=f, rtol=rtol, atol=atol, dense=True,
                              breakpoints=extra)
        w = np.array([1.0 + 0j])
        pieces.append(Piece(res.trajectory, 0, w, v0[:, 0].copy(), res.final[0, :, 0].copy()))

    def image(k, t, fns=fns, pieces=pieces):
        out = lam * pieces[k](t)[..., 0] if lam != 0 else np.zeros(np.shape(t), dtype=complex)
        if fns[k] is not None:
            out = out + fns[k](t)
        return out

    return QuasiFunction(problem, pieces, image, None if lam == 0 else lam,
                         [list(b) for b in breakpoints] if breakpoints else None)
