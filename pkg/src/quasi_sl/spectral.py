"""Characteristic determinant, eigenvalue search, resolvents and Green kernels.

For each interval ``k`` the two basis solutions start from ``v(a_k) = e1``
and ``v(a_k) = e2`` and vanish on the other intervals. Their traces form
``G1(lam), G2(lam)`` and the boundary condition turns into the
characteristic matrix ``B(lam) = (K - I) G1 + s*i*(K + I) G2``.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import propagate as _prop
from .errors import (NearEigenvalueError, NewtonStagnationError, SpecError,
                     WindingError)
from .quasisys import (Piece, Problem, QuasiFunction, _forcing_on, composite_rule,
                       gauss_legendre)
from .triplet import BoundaryMatrix, variant_sign

log = logging.getLogger(__name__)

COND_LIMIT = 1e12
GEO_RANK_TOL = 1e-6
MAX_REFINE = 20


def cond_limit(rtol: float) -> float:
    """Largest acceptable cond(B) for a boundary solve at integrator tolerance ``rtol``.

    B carries relative errors of order ``rtol``, so past ``1e-2/rtol`` the
    correction coefficients have no correct digits left even though cond
    may still sit below :data:`COND_LIMIT` at an exact eigenvalue.
    """
    return min(COND_LIMIT, 1e-2 / max(rtol, np.finfo(float).eps))


def as_boundary_matrix(K, variant=None) -> BoundaryMatrix:
    if isinstance(K, BoundaryMatrix):
        return K if variant is None or variant_sign(variant) == K.sign else K.with_variant(variant)
    return BoundaryMatrix(np.asarray(K, dtype=complex), variant or "dissipative")


def _magnitude_groups(lams, size: int):
    """Index groups of similar ``|lam|`` so each batch shares a fitting step sequence."""
    lams = np.asarray(lams)
    bins = np.floor(np.log(np.maximum(np.abs(lams), 1.0)) / np.log(4.0)).astype(int)
    groups = []
    for b in np.unique(bins):
        idx = np.flatnonzero(bins == b)
        for start in range(0, len(idx), size):
            groups.append(idx[start:start + size])
    return groups


def basis_traces(finals: Sequence[np.ndarray]):
    """``(G1, G2)`` of shape ``(N, 2m, 2m)`` from per-interval ``Phi_k(a_{k+1})``."""
    m = len(finals)
    N = finals[0].shape[0]
    G1 = np.zeros((N, 2 * m, 2 * m), dtype=complex)
    G2 = np.zeros_like(G1)
    for k, Phi in enumerate(finals):
        i, j = 2 * k, 2 * k + 1
        G1[:, i, j] = 1.0
        G1[:, j, i] = -Phi[:, 1, 0]
        G1[:, j, j] = -Phi[:, 1, 1]
        G2[:, i, i] = 1.0
        G2[:, j, i] = Phi[:, 0, 0]
        G2[:, j, j] = Phi[:, 0, 1]
    return G1, G2


@dataclass
class CharMatrix:
    """Characteristic data at one or more spectral parameters.

    ``det = phase * exp(logabs)``; use the split form for large ``|lam|``.
    """

    lam: np.ndarray
    G1: np.ndarray
    G2: np.ndarray
    B: np.ndarray
    logabs: np.ndarray
    phase: np.ndarray

    @property
    def det(self):
        with np.errstate(over="ignore"):
            return self.phase * np.exp(self.logabs)


class CharFunction:
    """Batched, cached evaluation of ``det B(lam)`` for a fixed problem and ``K``.

    Args:
        problem: the :class:`~quasi_sl.quasisys.Problem`.
        K: boundary matrix (its variant fixes the sign).
        threads: worker threads for independent magnitude groups.
    """

    def __init__(self, problem: Problem, K: BoundaryMatrix, *, rtol=_prop.RTOL, atol=_prop.ATOL,
                 threads: int = 1, group_size: int = 1024):
        if K.m != problem.m:
            raise SpecError(f"boundary matrix is {2 * K.m}x{2 * K.m} but the problem has "
                            f"{problem.m} interval(s)")
        self.problem = problem
        self.K = K
        self.M1, self.M2 = K.coefficient_matrices()
        self.rtol, self.atol = rtol, atol
        self.threads = max(1, int(threads or 1))
        self.group_size = group_size
        self._cache: dict[complex, tuple[float, complex]] = {}
        self.evaluations = 0

    def finals(self, lams) -> list[np.ndarray]:
        lams = np.atleast_1d(np.asarray(lams, dtype=complex))
        out = [np.empty((len(lams), 2, 2), dtype=complex) for _ in self.problem.systems]
        groups = _magnitude_groups(lams, self.group_size)

        def run(idx):
            return idx, [_prop.propagate(sys, lams[idx], rtol=self.rtol, atol=self.atol).final
                         for sys in self.problem.systems]

        if self.threads > 1 and len(groups) > 1:
            with ThreadPoolExecutor(self.threads) as pool:
                results = list(pool.map(run, groups))
        else:
            results = [run(g) for g in groups]
        for idx, finals in results:
            for k, F in enumerate(finals):
                out[k][idx] = F
        self.evaluations += len(lams)
        return out

    def matrices(self, lams) -> CharMatrix:
        lams = np.atleast_1d(np.asarray(lams, dtype=complex))
        G1, G2 = basis_traces(self.finals(lams))
        B = self.M1 @ G1 + self.M2 @ G2
        phase, logabs = np.linalg.slogdet(B)
        return CharMatrix(lams, G1, G2, B, logabs, phase)

    def logdet(self, lams):
        """``(log|det B|, det B / |det B|)`` with caching by exact ``lam``."""
        lams = np.atleast_1d(np.asarray(lams, dtype=complex))
        missing = [z for z in dict.fromkeys(lams.tolist()) if z not in self._cache]
        if missing:
            cm = self.matrices(np.array(missing))
            for z, la, ph in zip(missing, cm.logabs, cm.phase):
                self._cache[z] = (float(la), complex(ph))
        la = np.array([self._cache[z][0] for z in lams.tolist()])
        ph = np.array([self._cache[z][1] for z in lams.tolist()])
        return la, ph


def char_det(problem: Problem, K, lam, variant=None, *, rtol=_prop.RTOL, atol=_prop.ATOL) -> CharMatrix:
    """Characteristic matrix ``B(lam)`` and its determinant.

    Zeros of the determinant are exactly the eigenvalues of the operator
    defined by ``K`` and the variant.
    """
    return CharFunction(problem, as_boundary_matrix(K, variant), rtol=rtol, atol=atol).matrices(lam)


def _equilibrate(B, G1, G2):
    """Scale columns by the norms of the stacked basis traces ``[G1; G2]``.

    Those never vanish (the basis solutions are independent), unlike the
    columns of ``B`` itself at an eigenvalue.
    """
    scale = np.sqrt(np.linalg.norm(G1, axis=-2) ** 2 + np.linalg.norm(G2, axis=-2) ** 2)
    scale = np.where(scale > 0, scale, 1.0)
    return B / scale[..., None, :], scale


# ---------------------------------------------------------------------------
# Argument principle


class _Line:
    """Samples of ``det B`` along one horizontal or vertical line."""

    def __init__(self, horizontal: bool, coord: float):
        self.horizontal = horizontal
        self.coord = coord
        self.pos = np.empty(0)
        self.logabs = np.empty(0)
        self.phase = np.empty(0, dtype=complex)
        self.covered: list[tuple[float, float]] = []

    def lam(self, x):
        x = np.asarray(x, dtype=float)
        return x + 1j * self.coord if self.horizontal else self.coord + 1j * x

    def add(self, x, la, ph):
        pos = np.concatenate([self.pos, x])
        order = np.argsort(pos, kind="stable")
        pos = pos[order]
        keep = np.concatenate([[True], np.diff(pos) > 0])
        self.pos = pos[keep]
        self.logabs = np.concatenate([self.logabs, la])[order][keep]
        self.phase = np.concatenate([self.phase, ph])[order][keep]

    def uncovered(self, lo, hi):
        gaps, start = [], lo
        for a, b in sorted(self.covered):
            if b <= start or a >= hi:
                continue
            if a > start:
                gaps.append((start, a))
            start = max(start, b)
        if start < hi:
            gaps.append((start, hi))
        return gaps

    def window(self, lo, hi):
        i = int(np.searchsorted(self.pos, lo, "left"))
        j = int(np.searchsorted(self.pos, hi, "right"))
        return i, j


@dataclass(frozen=True)
class Box:
    re_min: float
    re_max: float
    im_min: float
    im_max: float

    @property
    def center(self) -> complex:
        return complex(0.5 * (self.re_min + self.re_max), 0.5 * (self.im_min + self.im_max))

    @property
    def width(self) -> float:
        return self.re_max - self.re_min

    @property
    def height(self) -> float:
        return self.im_max - self.im_min

    def contains(self, z: complex, slack: float = 0.0) -> bool:
        return (self.re_min - slack <= z.real <= self.re_max + slack
                and self.im_min - slack <= z.imag <= self.im_max + slack)

    def edges(self):
        """``(horizontal, coord, lo, hi, orientation)`` counter-clockwise."""
        return [(True, self.im_min, self.re_min, self.re_max, 1),
                (False, self.re_max, self.im_min, self.im_max, 1),
                (True, self.im_max, self.re_min, self.re_max, -1),
                (False, self.re_min, self.im_min, self.im_max, -1)]

    def split(self, fraction: float):
        if self.width >= self.height:
            c = self.re_min + fraction * self.width
            return Box(self.re_min, c, self.im_min, self.im_max), Box(c, self.re_max, self.im_min, self.im_max)
        c = self.im_min + fraction * self.height
        return Box(self.re_min, self.re_max, self.im_min, c), Box(self.re_min, self.re_max, c, self.im_max)

    def as_tuple(self):
        return (self.re_min, self.re_max, self.im_min, self.im_max)


class _SegmentFailure(Exception):
    def __init__(self, segments):
        super().__init__(f"{len(segments)} unresolved contour segment(s)")
        self.segments = segments


class ArgumentPrinciple:
    """Winding numbers of ``det B`` over rectangles with shared line samples.

    Samples live on lines keyed by their exact coordinate, so two boxes
    sharing an edge see identical samples and windings add up exactly.
    """

    def __init__(self, charfun: CharFunction, time_scale: float, min_samples: int = 16):
        self.f = charfun
        self.dsqrt = math.pi / (8.0 * max(time_scale, 1e-12))
        self.min_samples = min_samples
        self.lines: dict[tuple[bool, float], _Line] = {}

    def line(self, horizontal, coord) -> _Line:
        key = (bool(horizontal), float(coord))
        if key not in self.lines:
            self.lines[key] = _Line(*key)
        return self.lines[key]

    def _seed_points(self, line, lo, hi):
        hmax = (hi - lo) / self.min_samples
        pts, x = [lo], lo
        while x < hi:
            root = abs(np.sqrt(complex(line.lam(x))))
            step = min(hmax, max(2.0 * root * self.dsqrt, self.dsqrt ** 2))
            x = x + step
            pts.append(min(x, hi))
        return pts

    def prepare(self, segments):
        """Sample and refine segments ``(horizontal, coord, lo, hi)`` jointly.

        Raises:
            _SegmentFailure: listing the segments still unresolved after
                ``MAX_REFINE`` refinement rounds (or passing through a zero).
        """
        pending = {}
        for horizontal, coord, lo, hi in segments:
            line = self.line(horizontal, coord)
            pts = [lo, hi]
            for a, b in line.uncovered(lo, hi):
                pts += self._seed_points(line, a, b)
            pending.setdefault(id(line), (line, []))[1].extend(pts)
        self._evaluate(pending)
        for horizontal, coord, lo, hi in segments:
            self.line(horizontal, coord).covered.append((lo, hi))

        active = list(dict.fromkeys(segments))
        dead = []
        for _ in range(MAX_REFINE + 1):
            pending, failed = {}, []
            for seg in active:
                line = self.line(seg[0], seg[1])
                i, j = line.window(seg[2], seg[3])
                la, ph, pos = line.logabs[i:j], line.phase[i:j], line.pos[i:j]
                if not np.all(np.isfinite(la)):
                    dead.append(seg)
                    continue
                darg = np.angle(ph[1:] * np.conj(ph[:-1]))
                bad = (np.abs(darg) > 0.5 * math.pi) | (np.abs(np.diff(la)) > 2.0)
                if bad.any():
                    mids = 0.5 * (pos[:-1][bad] + pos[1:][bad])
                    fresh = mids[(mids > pos[:-1][bad]) & (mids < pos[1:][bad])]
                    if len(fresh) < bad.sum():
                        failed.append(seg)
                        continue
                    pending.setdefault(id(line), (line, []))[1].extend(fresh.tolist())
                    failed.append(seg)
            if not pending:
                break
            self._evaluate(pending)
            active = failed
        else:
            raise _SegmentFailure(active + dead)
        if failed or dead:
            raise _SegmentFailure(failed + dead)

    def _evaluate(self, pending):
        lams, owners = [], []
        for line, pts in pending.values():
            pts = np.unique(np.asarray(pts, dtype=float))
            pts = pts[~np.isin(pts, line.pos)]
            if len(pts):
                lams.append(line.lam(pts))
                owners.append((line, pts))
        if not owners:
            return
        la, ph = self.f.logdet(np.concatenate(lams))
        start = 0
        for line, pts in owners:
            n = len(pts)
            line.add(pts, la[start:start + n], ph[start:start + n])
            start += n

    def segment(self, horizontal, coord, lo, hi):
        """Phase change and moment contribution along a prepared segment."""
        line = self.line(horizontal, coord)
        i, j = line.window(lo, hi)
        if j - i < 2 or line.pos[i] != lo or line.pos[j - 1] != hi:
            raise WindingError(f"segment [{lo}, {hi}] on line {coord} is not sampled")
        ph, la = line.phase[i:j], line.logabs[i:j]
        darg = np.angle(ph[1:] * np.conj(ph[:-1]))
        dlog = np.diff(la) + 1j * darg
        mid = line.lam(0.5 * (line.pos[i:j - 1] + line.pos[i + 1:j]))
        return float(darg.sum()), complex(np.sum(mid * dlog))

    def box(self, box: Box):
        """``(winding, moment)`` with moment ``~ sum of zeros inside``."""
        total, moment = 0.0, 0j
        for horizontal, coord, lo, hi, sgn in box.edges():
            d, mo = self.segment(horizontal, coord, lo, hi)
            total += sgn * d
            moment += sgn * mo
        w = total / (2 * math.pi)
        n = int(round(w))
        if abs(w - n) > 1e-6:
            raise WindingError(f"non-integer winding {w:.6g} on box {box.as_tuple()}")
        return n, moment / (2j * math.pi)


def time_scale(problem: Problem) -> float:
    """``sum_k integral 1/sqrt|p_k|``: the length in the oscillation variable."""
    total = 0.0
    for k, sys in enumerate(problem.systems):
        lo, hi = problem.bounds(k)
        breaks = np.unique(np.concatenate([[lo, hi], np.asarray(sys.breakpoints, dtype=float),
                                           np.linspace(lo, hi, 33)]))
        t, w = composite_rule(breaks, 10)
        try:
            p = np.real(sys.coefficients(t).p)
            total += float(w @ (1.0 / np.sqrt(np.maximum(np.abs(p), 1e-300))))
        except Exception:  # noqa: BLE001 - fall back to the plain length
            total += hi - lo
    return total


@dataclass
class Eigenpair:
    """Eigenvalue with multiplicities and normalized root functions."""

    lam: complex
    alg_mult: int
    geo_mult: int
    residual: float
    root_functions: list = field(default_factory=list)
    coefficients: np.ndarray | None = None
    jordan_suspected: bool = False

    @property
    def eigenfunction(self) -> QuasiFunction | None:
        return self.root_functions[0] if self.root_functions else None


@dataclass
class BoxRecord:
    box: Box
    winding: int
    found: int


class EigenList(list):
    """List of :class:`Eigenpair` plus the argument-principle bookkeeping.

    Attributes:
        region: the (possibly perturbed) search rectangle.
        winding: winding number of ``det B`` along the region boundary.
        boxes: leaf boxes with their winding numbers and the multiplicity
            found inside.
    """

    region: Box
    winding: int
    boxes: list
    evaluations: int

    @property
    def total_multiplicity(self) -> int:
        return sum(e.alg_mult for e in self)

    def consistent(self) -> bool:
        return (self.total_multiplicity == self.winding
                and all(b.winding == b.found for b in self.boxes)
                and sum(b.winding for b in self.boxes) == self.winding)


_CUTS = (0.5 + 0.0371, 0.5 - 0.0629, 0.5 + 0.1113, 0.5 - 0.1487)


def find_eigenvalues(problem: Problem, K, variant=None, region=(0.0, 1.0, -1.0, 1.0), max_count=None, *,
                     rtol=_prop.RTOL, atol=_prop.ATOL, threads: int = 1, root_functions: bool = True,
                     newton_tol: float = 1e-12) -> EigenList:
    """Eigenvalues inside a rectangle by argument principle and Newton.

    Args:
        region: ``(re_min, re_max, im_min, im_max)``.
        max_count: truncate the (sorted) result to this many eigenvalues;
            the winding bookkeeping still covers the whole region.
        root_functions: also build the normalized eigenfunctions.

    Raises:
        WindingError: if the contour cannot be resolved.
        NewtonStagnationError: if a root cannot be polished.
    """
    K = as_boundary_matrix(K, variant)
    f = CharFunction(problem, K, rtol=rtol, atol=atol, threads=threads)
    ap = ArgumentPrinciple(f, time_scale(problem))
    box0 = Box(*map(float, region))
    if not (box0.width > 0 and box0.height > 0):
        raise SpecError(f"search region must have positive width and height, got {region}")
    scale = max(1.0, abs(box0.re_min), abs(box0.re_max), abs(box0.im_min), abs(box0.im_max))

    for attempt in range(4):
        try:
            ap.prepare([e[:4] for e in box0.edges()])
            break
        except _SegmentFailure:
            if attempt == 3:
                raise WindingError(f"cannot resolve the phase of det B on the boundary of {region}") from None
            d = 1e-6 * scale * 10 ** attempt
            box0 = Box(box0.re_min - d, box0.re_max + d, box0.im_min - d, box0.im_max + d)
            log.info("region boundary too close to an eigenvalue; enlarged by %g", d)
    region_winding, _ = ap.box(box0)
    log.info("region winding number %d", region_winding)
    min_size = 1e-9 * scale

    leaves: dict[Box, tuple[int, complex]] = {}
    queue = [(box0, region_winding, False)]
    roots: dict[Box, tuple[complex, int]] = {}
    for _ in range(200):
        if not queue:
            break
        _subdivide(ap, queue, leaves, min_size)
        queue = []
        todo = [(b, w, mo) for b, (w, mo) in leaves.items() if w > 0 and b not in roots]
        polished, failed = _newton(f, todo, newton_tol)
        roots.update(polished)
        for b in failed:
            w = leaves.pop(b)[0]
            if max(b.width, b.height) < min_size:
                raise NewtonStagnationError(f"Newton iteration stagnates in box {b.as_tuple()}")
            queue.append((b, w, True))
        # some refinement may have touched shared edges: recheck all leaves
        for b in list(leaves):
            w, mo = ap.box(b)
            if w != leaves[b][0]:
                leaves.pop(b)
                roots.pop(b, None)
                queue.append((b, w, False))
    else:
        raise WindingError("box subdivision did not settle")

    pairs = _assemble_pairs(f, [(z, w) for z, w in roots.values()])
    pairs.sort(key=lambda e: (e.lam.real, e.lam.imag))
    if root_functions and pairs:
        _attach_root_functions(problem, pairs, rtol, atol)

    out = EigenList(pairs if max_count is None else pairs[:int(max_count)])
    if max_count is not None and len(pairs) > max_count:
        log.warning("region holds %d eigenvalues; returning the first %d", len(pairs), max_count)
    out.region = box0
    out.winding = ap.box(box0)[0]
    out.boxes = [BoxRecord(b, w, roots[b][1] if b in roots else 0) for b, (w, _) in
                 sorted(leaves.items(), key=lambda kv: kv[0].as_tuple())]
    out.evaluations = f.evaluations
    return out


def _subdivide(ap: ArgumentPrinciple, queue, leaves, min_size):
    """Breadth-first splitting until every box has winding 0 or 1.

    ``queue`` holds ``(box, winding, force)``; ``force`` splits a box even if
    its winding is 1 (used when Newton fails inside it).
    """
    level = list(queue)
    while level:
        splitting = []
        for b, w, force in level:
            small = max(b.width, b.height) < min_size
            if small or w == 0 or (w == 1 and not force):
                leaves[b] = (w, ap.box(b)[1])
            else:
                splitting.append((b, w))
        tries = {b: 0 for b, _ in splitting}
        children = []
        while splitting:
            splits = {b: b.split(_CUTS[tries[b]]) for b, _ in splitting}
            segments = [e[:4] for pair in splits.values() for c in pair for e in c.edges()]
            failed = set()
            try:
                ap.prepare(segments)
            except _SegmentFailure as exc:
                bad_lines = {(sg[0], sg[1]) for sg in exc.segments}
                for b, _ in splitting:
                    lines = {(e[0], e[1]) for c in splits[b] for e in c.edges()}
                    if lines & bad_lines:
                        failed.add(b)
                if not failed:
                    raise WindingError("unresolved contour segment") from None
            for b, _ in splitting:
                if b in failed:
                    tries[b] += 1
                    if tries[b] >= len(_CUTS):
                        raise WindingError(f"cannot place a resolvable cut in box {b.as_tuple()}")
                else:
                    children.extend(splits[b])
            splitting = [(b, w) for b, w in splitting if b in failed]
        level = [(c, ap.box(c)[0], False) for c in children]


def _newton(f: CharFunction, todo, tol, max_iter: int = 60):
    """Polish one root per box starting from the contour moment."""
    if not todo:
        return {}, []
    boxes = [b for b, _, _ in todo]
    mult = np.array([w for _, w, _ in todo], dtype=float)
    z = np.array([mo / w for _, w, mo in todo], dtype=complex)
    for i, b in enumerate(boxes):
        if not b.contains(z[i]):
            z[i] = b.center
    done = np.zeros(len(z), dtype=bool)
    failed = np.zeros(len(z), dtype=bool)
    last = np.full(len(z), np.inf)
    for _ in range(max_iter):
        act = np.flatnonzero(~done & ~failed)
        if not len(act):
            break
        za = z[act]
        scale = np.maximum(1.0, np.abs(za))
        h = 1e-6 * np.minimum(scale, np.array([max(boxes[i].width, boxes[i].height) for i in act]))
        la, ph = f.logdet(np.concatenate([za, za + h, za - h]))
        n = len(act)
        la0, lap, lam_ = la[:n], la[n:2 * n], la[2 * n:]
        ph0, php, phm = ph[:n], ph[n:2 * n], ph[2 * n:]
        exact = ~np.isfinite(la0)
        with np.errstate(over="ignore", invalid="ignore"):
            rp = np.exp(lap - la0) * php * np.conj(ph0)
            rm = np.exp(lam_ - la0) * phm * np.conj(ph0)
            delta = mult[act] * 2 * h / (rp - rm)
        delta[exact] = 0.0
        z[act] = za - np.where(np.isfinite(delta), delta, 0.0)
        size = np.abs(delta)
        for j, i in enumerate(act):
            if not np.isfinite(size[j]) or not boxes[i].contains(z[i], 1e-9 * scale[j]):
                failed[i] = True
            elif size[j] <= tol * scale[j] or (size[j] >= last[i] and size[j] <= 1e3 * tol * scale[j]):
                done[i] = True
            last[i] = size[j]
    polished, bad = {}, []
    for i, b in enumerate(boxes):
        if done[i]:
            polished[b] = (complex(z[i]), int(mult[i]))
        else:
            bad.append(b)
    return polished, bad


def _assemble_pairs(f: CharFunction, roots):
    if not roots:
        return []
    lams = np.array([z for z, _ in roots])
    cm = f.matrices(lams)
    Bn, scale = _equilibrate(cm.B, cm.G1, cm.G2)
    out = []
    for i, (z, w) in enumerate(roots):
        _, s, vh = np.linalg.svd(Bn[i])
        geo = max(1, int(np.sum(s <= GEO_RANK_TOL * s[0])))
        geo = min(geo, w)
        null = vh[-geo:].conj().T / scale[i][:, None]
        null = null / np.linalg.norm(null, axis=0)
        residual = float(s[-1] / s[0])
        out.append(Eigenpair(complex(z), int(w), geo, residual, coefficients=null,
                             jordan_suspected=w > geo))
    return out


def _attach_root_functions(problem: Problem, pairs, rtol, atol):
    lams = np.array([e.lam for e in pairs])
    built = [[None] * problem.m for _ in pairs]
    for idx in _magnitude_groups(lams, 256):
        for k, sys in enumerate(problem.systems):
            res = _prop.propagate(sys, lams[idx], rtol=rtol, atol=atol, dense=True)
            for j, i in enumerate(idx):
                built[i][k] = (res.trajectory, j, res.final[j])
    for i, e in enumerate(pairs):
        fns = []
        for col in e.coefficients.T:
            pieces = []
            for k in range(problem.m):
                traj, member, final = built[i][k]
                w = col[2 * k:2 * k + 2].astype(complex)
                pieces.append(Piece(traj, member, w, w.copy(), final @ w))
            lam = e.lam
            qf = QuasiFunction(problem, pieces, _eigen_image(pieces, lam), lam)
            qf = qf.normalized()
            # deterministic phase: largest trace coefficient real positive
            j = int(np.argmax(np.abs(col)))
            qf = qf.scaled(abs(col[j]) / col[j])
            fns.append(qf)
        e.root_functions = fns


def _eigen_image(pieces, lam):
    return lambda k, t: lam * pieces[k](t)[..., 0]


# ---------------------------------------------------------------------------
# Resolvent


def _resolve_kmatrix(Kfun, variant, lam, problem: Problem) -> BoundaryMatrix:
    if isinstance(Kfun, BoundaryMatrix) or not callable(Kfun):
        K = as_boundary_matrix(Kfun, variant)
    else:
        K = as_boundary_matrix(np.asarray(Kfun(lam), dtype=complex), variant or "dissipative")
        if not K.is_contraction:
            raise SpecError(f"K(lambda) has norm {K.norm:.16g} > 1 at lambda = {lam}")
        if K.sign > 0 and not lam.imag < 0:
            raise SpecError("a lambda-dependent K with the dissipative-side condition needs Im lambda < 0")
        if K.sign < 0 and not lam.imag > 0:
            raise SpecError("a lambda-dependent K with the accumulative-side condition needs Im lambda > 0")
    if K.m != problem.m:
        raise SpecError(f"boundary matrix is {2 * K.m}x{2 * K.m} but the problem has {problem.m} interval(s)")
    return K


def _forcing_for(h, k):
    if isinstance(h, QuasiFunction):
        return lambda t, h=h, k=k: h.v(k, t)[..., 0]
    if isinstance(h, (list, tuple)) and h and all(isinstance(x, QuasiFunction) for x in h):
        return _forcing_for(h[k], k)
    return _forcing_on(h, k)


def apply_resolvent(problem: Problem, Kfun, variant=None, lam=0j, h=None, *, rtol=_prop.RTOL,
                    atol=_prop.ATOL, breakpoints=None) -> QuasiFunction:
    """Solve ``l[y] = lam*y + h`` under the boundary condition for ``K(lam)``.

    Args:
        Kfun: a constant matrix / :class:`BoundaryMatrix`, or a callable
            ``lam -> K(lam)``. A callable must return contractions and is only
            accepted in the half-plane matching the variant (Im lam < 0 for the
            dissipative side, Im lam > 0 for the accumulative side).
        h: forcing (callable of t, Expr/string, number, polynomial
            coefficients, QuasiFunction, or a per-interval list of these).
        breakpoints: per-interval discontinuities of ``h``.

    Raises:
        NearEigenvalueError: if ``B(lam)`` is numerically singular.
    """
    lam = complex(lam)
    K = _resolve_kmatrix(Kfun, variant, lam, problem)
    M1, M2 = K.coefficient_matrices()
    m = problem.m
    trajs, finals, fns = [], [], []
    for k, sys in enumerate(problem.systems):
        f = _forcing_for(h, k)
        fns.append(f)
        Y0 = np.zeros((2, 3), dtype=complex)
        Y0[:, :2] = np.eye(2)
        extra = breakpoints[k] if breakpoints else ()
        res = _prop.propagate(sys, lam, Y0, forcing=f, rtol=rtol, atol=atol, dense=True,
                              breakpoints=extra)
        trajs.append(res.trajectory)
        finals.append(res.final[0])
    G1, G2 = basis_traces([F[None, :, :2] for F in finals])
    B = M1 @ G1[0] + M2 @ G2[0]
    g1p = np.zeros(2 * m, dtype=complex)
    g2p = np.zeros(2 * m, dtype=complex)
    for k, F in enumerate(finals):
        g1p[2 * k + 1] = -F[1, 2]
        g2p[2 * k + 1] = F[0, 2]
    Bn, scale = _equilibrate(B, G1[0], G2[0])
    cond = float(np.linalg.cond(Bn))
    if not np.isfinite(cond) or cond > cond_limit(rtol):
        raise NearEigenvalueError(lam, cond)
    c = np.linalg.solve(Bn, -(M1 @ g1p + M2 @ g2p)) / scale
    pieces = []
    for k in range(m):
        w = np.array([c[2 * k], c[2 * k + 1], 1.0], dtype=complex)
        start = np.array([c[2 * k], c[2 * k + 1]])
        pieces.append(Piece(trajs[k], 0, w, start, finals[k] @ w))

    def image(k, t, pieces=pieces, fns=fns):
        out = lam * pieces[k](t)[..., 0]
        if fns[k] is not None:
            out = out + fns[k](t)
        return out

    y = QuasiFunction(problem, pieces, image, lam,
                      [list(b) for b in breakpoints] if breakpoints else None)
    y.condition = cond
    return y


# ---------------------------------------------------------------------------
# Green kernel


@dataclass
class GreenKernel:
    """Kernel of ``(L - lam)^{-1}`` with its construction data.

    Attributes:
        nodes, weights: concatenated Gauss-Legendre panel rules (panels are
            the intervals split at coefficient breakpoints).
        values: kernel on the tensor grid, ``values[i, j] = G(t_i, s_j)``.
        panels: ``(k, lo, hi, slice)`` per panel.
        accuracy: rough relative accuracy, ``rtol * growth**2`` with
            ``growth`` the largest basis-solution entry; the kernel is formed
            from products of basis solutions, so it degrades quickly once
            ``|Im sqrt(lam)|`` times the interval length is large.
    """

    problem: Problem
    K: BoundaryMatrix
    lam: complex
    n: int
    nodes: np.ndarray
    weights: np.ndarray
    values: np.ndarray
    panels: list
    trajectories: list
    C: list  # C[j] is 2m x 2
    accuracy: float = 0.0

    def rows(self, k, t):
        """``Y_t = (y1, y2)(t)`` and ``U_t = (y2, -y1)(t) / W(t)`` on interval ``k``."""
        Phi = self.trajectories[k](np.atleast_1d(np.asarray(t, dtype=float)), 0)
        W = Phi[:, 0, 0] * Phi[:, 1, 1] - Phi[:, 0, 1] * Phi[:, 1, 0]
        Y = Phi[:, 0, :]
        U = np.stack([Phi[:, 0, 1], -Phi[:, 0, 0]], axis=1) / W[:, None]
        return Y, U

    def block(self, k, j, t, s, branch=None):
        """Kernel for ``t`` in interval ``k``, ``s`` in interval ``j`` (tensor form).

        ``branch`` ("lower": s < t, "upper": s > t) selects one smooth branch
        of the diagonal block instead of the true piecewise kernel.
        """
        Yt, _ = self.rows(k, t)
        _, Us = self.rows(j, s)
        out = Yt @ self.C[j][2 * k:2 * k + 2] @ Us.T
        if k == j:
            direct = Yt @ Us.T
            if branch == "lower":
                out = out + direct
            elif branch is None:
                out = out + np.where(np.asarray(s)[None, :] < np.asarray(t)[:, None], direct, 0)
        return out

    def __call__(self, t, s):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        s = np.atleast_1d(np.asarray(s, dtype=float))
        kt = self.problem.interval_of(t)
        ks = self.problem.interval_of(s)
        out = np.empty((len(t), len(s)), dtype=complex)
        for k in np.unique(kt):
            for j in np.unique(ks):
                it, js = kt == k, ks == j
                out[np.ix_(it, js)] = self.block(int(k), int(j), t[it], s[js])
        return out

    def apply(self, h):
        """``int G(t_i, s) h(s) ds`` at the grid nodes.

        Off-diagonal panels use the tensor rule. On a diagonal panel the
        kernel has a kink at ``s = t_i``, so that row is integrated over
        ``[a, t_i]`` and ``[t_i, b]`` separately.
        """
        def hvals(s):
            return np.broadcast_to(np.asarray(h(s), dtype=complex), np.shape(s))

        out = self.values @ (self.weights * hvals(self.nodes))
        x, w = gauss_legendre(self.n)
        x, w = 0.5 * (x + 1), 0.5 * w
        for k, lo, hi, sl in self.panels:
            t = self.nodes[sl]
            out[sl] -= self.values[sl, sl] @ (self.weights[sl] * hvals(t))
            for branch, a, b in (("lower", np.full_like(t, lo), t), ("upper", t, np.full_like(t, hi))):
                L = b - a
                s = a[:, None] + L[:, None] * x[None, :]
                tt = np.repeat(t, self.n)
                vals = _pointwise(self, k, tt, s.ravel(), branch).reshape(s.shape)
                out[sl] += (vals * hvals(s.ravel()).reshape(s.shape) * w).sum(axis=1) * L
        return out


def green_kernel(problem: Problem, K, variant=None, lam=0j, n: int = 64, *, rtol=_prop.RTOL,
                 atol=_prop.ATOL) -> GreenKernel:
    """Green kernel of ``(L - lam)^{-1}`` sampled on Gauss-Legendre panels.

    Raises:
        NearEigenvalueError: if ``lam`` is (numerically) an eigenvalue.
    """
    lam = complex(lam)
    Kb = as_boundary_matrix(K, variant)
    if Kb.m != problem.m:
        raise SpecError(f"boundary matrix is {2 * Kb.m}x{2 * Kb.m} but the problem has {problem.m} interval(s)")
    M1, M2 = Kb.coefficient_matrices()
    trajs, finals = [], []
    for sys in problem.systems:
        res = _prop.propagate(sys, lam, rtol=rtol, atol=atol, dense=True)
        trajs.append(res.trajectory)
        finals.append(res.final[0])
    G1, G2 = basis_traces([F[None] for F in finals])
    B = M1 @ G1[0] + M2 @ G2[0]
    Bn, scale = _equilibrate(B, G1[0], G2[0])
    cond = float(np.linalg.cond(Bn))
    if not np.isfinite(cond) or cond > cond_limit(rtol):
        raise NearEigenvalueError(lam, cond)
    # the kernel is a difference of products of growing basis solutions
    growth = max(float(np.abs(F).max()) for F in finals)
    accuracy = max(rtol, np.finfo(float).eps) * growth ** 2
    if accuracy > 1e-6:
        log.warning("Green kernel at lambda=%s: basis growth %.3g limits relative accuracy to ~%.1e",
                    lam, growth, accuracy)
    C = []
    for j, F in enumerate(finals):
        R = (np.outer(M1[:, 2 * j + 1], -F[1, :]) + np.outer(M2[:, 2 * j + 1], F[0, :]))
        C.append(-np.linalg.solve(Bn, R) / scale[:, None])
    x, w = gauss_legendre(n)
    nodes, weights, panels = [], [], []
    start = 0
    for k, sys in enumerate(problem.systems):
        lo, hi = problem.bounds(k)
        cuts = [lo] + list(sys.breakpoints) + [hi]
        for a, b in zip(cuts[:-1], cuts[1:]):
            nodes.append(a + 0.5 * (b - a) * (x + 1))
            weights.append(0.5 * (b - a) * w)
            panels.append((k, a, b, slice(start, start + n)))
            start += n
    nodes = np.concatenate(nodes)
    weights = np.concatenate(weights)
    kern = GreenKernel(problem, Kb, lam, n, nodes, weights, np.empty(0), panels, trajs, C, accuracy)
    kern.values = kern(nodes, nodes)
    return kern


def hs_norm(kernel: GreenKernel, method: str = "split") -> float:
    """Hilbert-Schmidt norm ``(int int |G|^2)^{1/2}``.

    Args:
        method: ``"tensor"`` takes the plain tensor Gauss rule on the sampled
            grid, which converges only algebraically because of the kink on the
            diagonal. ``"split"`` (default) integrates each diagonal panel as two
            triangles through a collapsed (Duffy) map, on which the kernel is
            smooth, and keeps the tensor rule elsewhere.
    """
    W = np.outer(kernel.weights, kernel.weights)
    if method == "tensor":
        return float(np.sqrt(np.sum(W * np.abs(kernel.values) ** 2)))
    if method != "split":
        raise ValueError(f"unknown method {method!r}")
    G2 = W * np.abs(kernel.values) ** 2
    x, w = gauss_legendre(kernel.n)
    x = 0.5 * (x + 1)
    w = 0.5 * w
    X, Yq = np.meshgrid(x, x, indexing="ij")
    Wq = np.outer(w, w) * X
    total = 0.0
    for k, lo, hi, sl in kernel.panels:
        G2[sl, sl] = 0.0
        L = hi - lo
        u = lo + L * X.ravel()
        v = lo + L * (X * Yq).ravel()
        # lower triangle s < t: t = u, s = v; upper: s = u, t = v
        for branch, (t, s) in (("lower", (u, v)), ("upper", (v, u))):
            vals = _pointwise(kernel, k, t, s, branch)
            total += float(np.sum(Wq.ravel() * L * L * np.abs(vals) ** 2))
    total += float(G2.sum())
    return float(np.sqrt(total))


def _pointwise(kernel: GreenKernel, k, t, s, branch):
    Yt, _ = kernel.rows(k, t)
    _, Us = kernel.rows(k, s)
    M = kernel.C[k][2 * k:2 * k + 2]
    if branch == "lower":
        M = M + np.eye(2)
    return np.einsum("ni,ij,nj->n", Yt, M, Us)
