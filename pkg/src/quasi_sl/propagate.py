"""Adaptive propagation of the 2x2 linear systems ``v' = (A(t) + lam*E) v + F(t)``.

``E = [[0, 0], [-1, 0]]`` carries the spectral parameter; the forcing ``F``
is ``(0, -h(t))`` on the last state column.  A whole batch of spectral
parameters is integrated with one shared step sequence: ``A(t)`` is
evaluated once per stage for all of them, and the step size is chosen for
the worst member, so derivatives in ``lam`` taken inside one batch are
smooth.

The integrator is the Dormand-Prince 8(5,3) pair (tableau from
``scipy.integrate.DOP853``) with a proportional-integral step controller and
the 7th order continuous extension.  Steps never straddle a breakpoint of the
system or of the forcing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.integrate import DOP853

from .errors import PropagationError, StepUnderflowError

log = logging.getLogger(__name__)

RTOL = 1e-10
ATOL = 1e-12

_A = DOP853.A
_B = DOP853.B
_C = DOP853.C
_E3 = DOP853.E3
_E5 = DOP853.E5
_D = DOP853.D
_A_EXTRA = DOP853.A_EXTRA
_C_EXTRA = DOP853.C_EXTRA
_NS = DOP853.n_stages            # 12; stage index 12 is f at the new point
_ORDER = DOP853.error_estimator_order + 1

_SAFETY = 0.9
_ALPHA = 0.7 / _ORDER
_BETA = 0.4 / _ORDER
_MIN_FACTOR, _MAX_FACTOR = 0.2, 10.0


def _monomials(F):
    """Convert scipy's alternating Horner form to coefficients of x^0..x^7."""
    shape = F.shape[:1] + (8,) + F.shape[2:]
    poly = np.zeros(shape, dtype=F.dtype)
    for i in range(F.shape[1]):
        f = F[:, F.shape[1] - 1 - i]
        poly[:, 0] += f
        if i % 2 == 0:
            poly[:, 1:] = poly[:, :-1].copy()
            poly[:, 0] = 0
        else:
            shifted = np.zeros_like(poly)
            shifted[:, 1:] = poly[:, :-1]
            poly = poly - shifted
    return poly


class Trajectory:
    """Dense output of one propagation, piecewise polynomial of degree 7.

    ``traj(t)`` has shape ``t.shape + (N, 2, c)``; ``traj(t, member=j)``
    drops the batch axis.
    """

    def __init__(self, grid, y_old, poly, lo, hi):
        self.grid = np.asarray(grid, dtype=float)
        self.y_old = y_old
        self.poly = poly
        self.lo, self.hi = lo, hi

    @property
    def nsteps(self) -> int:
        return len(self.grid) - 1

    def _locate(self, t):
        t = np.asarray(t, dtype=float)
        idx = np.clip(np.searchsorted(self.grid, t, side="right") - 1, 0, self.nsteps - 1)
        h = self.grid[idx + 1] - self.grid[idx]
        return t, idx, (t - self.grid[idx]) / h, h

    def __call__(self, t, member=None):
        scalar = np.ndim(t) == 0
        t, idx, x, _ = self._locate(np.atleast_1d(t))
        sel = (idx, slice(None)) if member is None else (idx, slice(None), member)
        P = self.poly[sel]
        y0 = self.y_old[idx] if member is None else self.y_old[idx, member]
        xx = x.reshape(x.shape + (1,) * (P.ndim - 2))
        val = P[:, 7]
        for j in range(6, 0, -1):
            val = val * xx + P[:, j]
        out = y0 + val * xx
        return out[0] if scalar else out

    def derivative(self, t, member=None):
        scalar = np.ndim(t) == 0
        t, idx, x, h = self._locate(np.atleast_1d(t))
        sel = (idx, slice(None)) if member is None else (idx, slice(None), member)
        P = self.poly[sel]
        xx = x.reshape(x.shape + (1,) * (P.ndim - 2))
        val = 7 * P[:, 7]
        for j in range(6, 0, -1):
            val = val * xx + j * P[:, j]
        out = val / h.reshape(xx.shape)
        return out[0] if scalar else out


@dataclass
class Propagation:
    """Result of :func:`propagate`.

    Attributes:
        lam: spectral parameters, shape (N,).
        final: state at the right end, shape (N, 2, c).
        trajectory: dense output (None unless requested).
        nsteps, nrejected: accepted / rejected step counts.
    """

    lam: np.ndarray
    final: np.ndarray
    trajectory: Trajectory | None
    nsteps: int
    nrejected: int

    @property
    def matrix(self):
        """Final state with the batch axis dropped when N == 1."""
        return self.final[0] if len(self.lam) == 1 else self.final


def _rhs(A, lam, Z, hval):
    # internal layout: Z[i, col, member]
    out = np.empty_like(Z)
    out[0] = A[0, 0] * Z[0] + A[0, 1] * Z[1]
    out[1] = A[1, 0] * Z[0] + A[1, 1] * Z[1] - lam * Z[0]
    if hval is not None:
        out[1, -1] -= hval
    return out


def _stage_forcing(forcing, times, N):
    if forcing is None:
        return None
    vals = np.asarray(forcing(times), dtype=complex)
    if vals.ndim == 1:
        vals = np.broadcast_to(vals[:, None], (len(times), N))
    return vals


def propagate(system, lam, Y0=None, t0=None, t1=None, forcing=None, *, rtol=RTOL, atol=ATOL,
              dense=False, breakpoints=()) -> Propagation:
    """Integrate ``Y' = (A + lam*E) Y + F`` from ``t0`` to ``t1``.

    Args:
        system: object with ``lo``, ``hi``, ``breakpoints``, ``matrix(t, anchor)``
            and ``constant_matrix(anchor)`` (a :class:`~quasi_sl.quasisys.ShinZettlSystem`).
        lam: scalar or 1-D array of spectral parameters.
        Y0: initial state, shape (2, c) or (N, 2, c); identity by default.
        forcing: callable ``t -> h(t)`` (shape ``t.shape`` or ``t.shape + (N,)``)
            driving the last column.
        breakpoints: extra step endpoints (e.g. forcing discontinuities).

    Raises:
        StepUnderflowError: if the tolerances cannot be met.
        PropagationError: on overflow.
    """
    lam = np.atleast_1d(np.asarray(lam, dtype=complex)).ravel()
    N = len(lam)
    t0 = system.lo if t0 is None else float(t0)
    t1 = system.hi if t1 is None else float(t1)
    if t1 < t0:
        raise ValueError("propagation runs left to right only (t1 < t0)")
    if Y0 is None:
        Y0 = np.eye(2, dtype=complex)
    Y0 = np.broadcast_to(np.asarray(Y0, dtype=complex), (N,) + np.shape(Y0)[-2:])
    Y = np.ascontiguousarray(Y0.transpose(1, 2, 0))
    ncol = Y.shape[1]
    span = system.hi - system.lo
    stops = [t0] + sorted({b for b in list(system.breakpoints) + list(breakpoints)
                           if t0 + 1e-14 * span < b < t1 - 1e-14 * span}) + [t1]

    K = np.empty((_NS + 4, 2, ncol, N), dtype=complex)
    Kf = K.reshape(_NS + 4, -1)
    grid, y_olds, Fs = [t0], [], []
    nsteps = nrej = 0
    h = None
    lam_scale = float(np.max(np.abs(lam))) if N else 0.0

    for lo, hi in zip(stops[:-1], stops[1:]):
        if hi <= lo:
            continue
        A_const = system.constant_matrix(lo)

        def stage_A(times, lo=lo, A_const=A_const):
            if A_const is not None:
                return np.broadcast_to(A_const, (len(times), 2, 2))
            return system.matrix(times, anchor=lo)

        A0 = stage_A(np.array([lo]))[0]
        rate = float(np.abs(A0).sum(axis=1).max()) + lam_scale
        if h is None:
            h = 0.5 * rtol ** (1.0 / _ORDER) / np.sqrt(rate) if rate > 1 else 0.05 * (hi - lo)
            h = max(min(h, hi - lo), 1e-6 * (hi - lo))
        t = lo
        h0f = _stage_forcing(forcing, np.array([lo]), N)
        K[0] = _rhs(A0, lam, Y, None if h0f is None else h0f[0])
        err_old = 1e-4
        rejected_last = False
        while t < hi:
            if t + h >= hi - 1e-12 * (hi - lo):
                h = hi - t
            if h < 64 * np.finfo(float).eps * max(abs(t), span):
                raise StepUnderflowError("step size underflow (tolerances unreachable)", t)
            times = t + _C * h
            Amats = stage_A(times)
            hv = _stage_forcing(forcing, times, N)
            for s in range(1, _NS):
                Z = Y + h * (_A[s, :s] @ Kf[:s]).reshape(Y.shape)
                K[s] = _rhs(Amats[s], lam, Z, None if hv is None else hv[s])
            Ynew = Y + h * (_B @ Kf[:_NS]).reshape(Y.shape)
            K[_NS] = _rhs(Amats[_NS - 1], lam, Ynew, None if hv is None else hv[_NS - 1])
            if not np.all(np.isfinite(Ynew)):
                raise PropagationError("solution overflow (spectral parameter too large?)", t)
            scale = atol + rtol * np.maximum(np.abs(Y).max(axis=0), np.abs(Ynew).max(axis=0))
            err5 = (_E5 @ Kf[:_NS + 1]).reshape(Y.shape)
            err3 = (_E3 @ Kf[:_NS + 1]).reshape(Y.shape)
            e5 = (err5.real**2 + err5.imag**2).sum(axis=0) / scale**2
            e3 = (err3.real**2 + err3.imag**2).sum(axis=0) / scale**2
            den = e5 + 0.01 * e3
            with np.errstate(invalid="ignore", divide="ignore"):
                err = np.where(den > 0, h * e5 / np.sqrt(2.0 * den), 0.0)
            en = float(err.max())
            if en <= 1.0:
                if dense:
                    tex = t + _C_EXTRA * h
                    Aex = stage_A(tex)
                    hex_ = _stage_forcing(forcing, tex, N)
                    for j, a in enumerate(_A_EXTRA):
                        s = _NS + 1 + j
                        Z = Y + h * (a[:s] @ Kf[:s]).reshape(Y.shape)
                        K[s] = _rhs(Aex[j], lam, Z, None if hex_ is None else hex_[j])
                    F = np.empty((7,) + Y.shape, dtype=complex)
                    dy = Ynew - Y
                    F[0] = dy
                    F[1] = h * K[0] - dy
                    F[2] = 2 * dy - h * (K[_NS] + K[0])
                    F[3:] = h * (_D @ Kf).reshape((4,) + Y.shape)
                    y_olds.append(Y)
                    Fs.append(F)
                    grid.append(t + h if t + h < hi else hi)
                t = t + h if t + h < hi else hi
                Y = Ynew
                K[0] = K[_NS]
                nsteps += 1
                if en == 0.0:
                    factor = _MAX_FACTOR
                else:
                    factor = _SAFETY * en ** (-_ALPHA) * err_old ** _BETA
                factor = min(_MAX_FACTOR, max(_MIN_FACTOR, factor))
                if rejected_last:
                    factor = min(factor, 1.0)
                err_old = max(en, 1e-4)
                rejected_last = False
                h = h * factor
            else:
                nrej += 1
                rejected_last = True
                h = h * max(_MIN_FACTOR, _SAFETY * en ** (-1.0 / _ORDER))

    traj = None
    if dense:
        if not Fs:
            raise PropagationError("empty propagation interval", t0)
        # (S, 2, c, N) -> (S, N, 2, c)
        y_old = np.stack(y_olds).transpose(0, 3, 1, 2)
        F = np.stack(Fs).transpose(0, 1, 4, 2, 3)
        traj = Trajectory(grid, y_old, _monomials(F), t0, t1)
    log.debug("propagated %d parameters over [%g, %g]: %d steps, %d rejected",
              N, t0, t1, nsteps, nrej)
    return Propagation(lam, Y.transpose(2, 0, 1), traj, nsteps, nrej)


def fundamental_matrix(system, lam, t0=None, t1=None, *, rtol=RTOL, atol=ATOL, dense=False):
    """Fundamental matrix ``Phi(t1, t0; lam)`` with ``Phi(t0) = I``."""
    return propagate(system, lam, None, t0, t1, rtol=rtol, atol=atol, dense=dense)


def solve_inhomogeneous(system, lam, v0, forcing, t0=None, t1=None, *, rtol=RTOL, atol=ATOL,
                        dense=True, breakpoints=()):
    """Solve ``v' = (A + lam*E) v + (0, -h)`` with ``v(t0) = v0``.

    The state column is ``v``; ``result.final[..., 0]`` is ``v(t1)``.
    """
    v0 = np.asarray(v0, dtype=complex).reshape(-1, 2, 1) if np.ndim(v0) > 1 else \
        np.asarray(v0, dtype=complex).reshape(2, 1)
    return propagate(system, lam, v0, t0, t1, forcing, rtol=rtol, atol=atol, dense=dense,
                     breakpoints=breakpoints)
