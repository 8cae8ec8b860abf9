"""Boundary triplet: trace maps, boundary matrices and their classification.

Trace coordinates are interval-major. For interval ``k`` (0-based) on
``[a_k, a_{k+1}]``::

    G1[2k] = D1 y(a_k+)      G1[2k+1] = -D1 y(a_{k+1}-)
    G2[2k] =    y(a_k+)      G2[2k+1] =     y(a_{k+1}-)

Boundary conditions are ``(K - I) G1 + s*i*(K + I) G2 = 0`` with ``s = +1``
(variant ``"dissipative"``) or ``s = -1`` (variant ``"accumulative"``).
"""
from __future__ import annotations

import cmath
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as sla

from . import propagate as _prop
from .errors import SpecError, TraceRelationError
from .quasisys import Problem, QuasiFunction, synthesize_domain_function

CONTRACTION_TOL = 1e-12
UNITARY_TOL = 1e-12
LOCALITY_TOL = 1e-12

VARIANTS = {"dissipative": 1, "accumulative": -1}

SELF_ADJOINT = "self-adjoint"
DISSIPATIVE = "maximal dissipative"
ACCUMULATIVE = "maximal accumulative"
UNCLASSIFIED = "none"


def variant_sign(variant) -> int:
    """+1 for the dissipative-side condition, -1 for the accumulative side."""
    if isinstance(variant, (int, np.integer)) and variant in (1, -1):
        return int(variant)
    try:
        return VARIANTS[str(variant).lower()]
    except KeyError:
        raise SpecError(f"unknown boundary variant {variant!r}; expected one of {sorted(VARIANTS)}") from None


@dataclass(frozen=True)
class TraceVector:
    gamma1: np.ndarray
    gamma2: np.ndarray

    @property
    def m(self) -> int:
        return len(self.gamma1) // 2


def traces(y: QuasiFunction) -> TraceVector:
    """Read ``(G1 y, G2 y)`` from the endpoint values of each interval."""
    m = y.problem.m
    g1 = np.empty(2 * m, dtype=complex)
    g2 = np.empty(2 * m, dtype=complex)
    for k in range(m):
        start, end = y.endpoint_values(k)
        g1[2 * k], g1[2 * k + 1] = start[1], -end[1]
        g2[2 * k], g2[2 * k + 1] = start[0], end[0]
    return TraceVector(g1, g2)


# ---------------------------------------------------------------------------
# Node bookkeeping


@dataclass(frozen=True)
class NodePermutation:
    """Map from interval-major to node-major coordinates.

    Node ``a_0`` owns coordinate 0, interior node ``a_j`` owns the right trace
    of interval ``j-1`` followed by the left trace of interval ``j``, and
    ``a_m`` owns the last coordinate. With the trace ordering used here this
    is the identity map; it is kept explicit so the block structure is not
    implicit in index arithmetic.
    """

    m: int

    @property
    def perm(self) -> np.ndarray:
        # node-major position i holds interval-major coordinate perm[i]
        order = [0]
        for j in range(1, self.m):
            order += [2 * j - 1, 2 * j]
        order.append(2 * self.m - 1)
        return np.array(order)

    @property
    def block_sizes(self) -> list[int]:
        return [1] + [2] * (self.m - 1) + [1]

    def block_slices(self) -> list[slice]:
        out, start = [], 0
        for size in self.block_sizes:
            out.append(slice(start, start + size))
            start += size
        return out

    def to_nodes(self, K):
        p = self.perm
        return np.asarray(K)[np.ix_(p, p)]

    def from_nodes(self, K):
        inv = np.argsort(self.perm)
        return np.asarray(K)[np.ix_(inv, inv)]

    def vector_to_nodes(self, v):
        return np.asarray(v)[self.perm]


@dataclass(frozen=True)
class LocalityReport:
    local: bool
    offblock_max: float
    blocks: list | None = None


def locality_check(K, permutation: NodePermutation | None = None, tol: float = LOCALITY_TOL) -> LocalityReport:
    """Test whether ``K`` only couples traces sitting at the same node."""
    K = K.K if isinstance(K, BoundaryMatrix) else np.asarray(K, dtype=complex)
    n = K.shape[0]
    permutation = permutation or NodePermutation(n // 2)
    Kn = permutation.to_nodes(K)
    mask = np.ones(Kn.shape, dtype=bool)
    slices = permutation.block_slices()
    for sl in slices:
        mask[sl, sl] = False
    off = float(np.abs(Kn[mask]).max()) if mask.any() else 0.0
    if off > tol:
        return LocalityReport(False, off)
    return LocalityReport(True, off, [Kn[sl, sl].copy() for sl in slices])


# ---------------------------------------------------------------------------
# Boundary matrices


@dataclass(frozen=True)
class BoundaryMatrix:
    """A ``2m x 2m`` matrix ``K`` together with the sign variant.

    Classification data are recomputed from ``K`` at construction.
    """

    K: np.ndarray
    variant: str = "dissipative"
    norm: float = field(init=False)
    unitarity_defect: float = field(init=False)
    locality: LocalityReport = field(init=False)

    def __post_init__(self):
        K = np.array(self.K, dtype=complex)
        if K.ndim != 2 or K.shape[0] != K.shape[1] or K.shape[0] % 2:
            raise SpecError(f"boundary matrix must be square of even size, got shape {K.shape}")
        variant_sign(self.variant)
        K.setflags(write=False)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "variant", str(self.variant).lower()
                           if not isinstance(self.variant, (int, np.integer))
                           else ("dissipative" if self.variant == 1 else "accumulative"))
        object.__setattr__(self, "norm", float(np.linalg.norm(K, 2)))
        defect = float(np.linalg.norm(K.conj().T @ K - np.eye(len(K)), 2))
        object.__setattr__(self, "unitarity_defect", defect)
        object.__setattr__(self, "locality", locality_check(K))

    @property
    def m(self) -> int:
        return self.K.shape[0] // 2

    @property
    def sign(self) -> int:
        return variant_sign(self.variant)

    @property
    def is_contraction(self) -> bool:
        return self.norm <= 1 + CONTRACTION_TOL

    @property
    def is_unitary(self) -> bool:
        return self.unitarity_defect <= UNITARY_TOL

    @property
    def contraction_defect(self) -> float:
        return self.norm - 1.0

    def classify(self) -> str:
        return classify(self)

    def coefficient_matrices(self):
        """``(K - I, s*i*(K + I))``: the condition reads ``M1 G1 + M2 G2 = 0``."""
        eye = np.eye(len(self.K))
        return self.K - eye, self.sign * 1j * (self.K + eye)

    def residual(self, tv: TraceVector) -> np.ndarray:
        M1, M2 = self.coefficient_matrices()
        return M1 @ tv.gamma1 + M2 @ tv.gamma2

    def with_variant(self, variant) -> "BoundaryMatrix":
        return BoundaryMatrix(self.K, variant)

    def report(self) -> dict:
        out = {
            "norm": self.norm,
            "unitarity_defect": self.unitarity_defect,
            "class": self.classify(),
            "variant": self.variant,
            "local": self.locality.local,
        }
        if self.locality.local:
            out["blocks"] = [_encode_matrix(b) for b in self.locality.blocks]
        return out


def _encode_matrix(M):
    return [[[float(z.real), float(z.imag)] for z in row] for row in np.asarray(M)]


def classify(K: BoundaryMatrix, m: int | None = None) -> str:
    """Self-adjoint, maximal dissipative, maximal accumulative, or none."""
    if m is not None and K.m != m:
        raise SpecError(f"boundary matrix is {2 * K.m}x{2 * K.m} but the problem needs {2 * m}x{2 * m}")
    if K.is_unitary:
        return SELF_ADJOINT
    if K.is_contraction:
        return DISSIPATIVE if K.sign > 0 else ACCUMULATIVE
    return UNCLASSIFIED


def admissible_subspace(K: BoundaryMatrix):
    """Basis of trace pairs satisfying the boundary condition.

    Returns a list of ``2m`` pairs ``(g1, g2)`` spanning the null space of
    ``[K - I, s*i*(K + I)]``.
    """
    M1, M2 = K.coefficient_matrices()
    N = sla.null_space(np.hstack([M1, M2]))
    n = len(K.K)
    return [(N[:n, j], N[n:, j]) for j in range(N.shape[1])]


def from_trace_relation(basis: Sequence, variant="dissipative", tol: float = 1e-10) -> BoundaryMatrix:
    """Recover ``K`` from a spanning set of admissible trace pairs.

    Solves ``K (g1 + s*i*g2) = g1 - s*i*g2`` column by column.

    Raises:
        TraceRelationError: if the pairs do not determine ``K`` (rank below
            ``2m``) or are mutually inconsistent.
    """
    s = variant_sign(variant)
    if not len(basis):
        raise TraceRelationError("empty trace relation")
    g1 = np.column_stack([np.asarray(b[0], dtype=complex) for b in basis])
    g2 = np.column_stack([np.asarray(b[1], dtype=complex) for b in basis])
    n = g1.shape[0]
    if g1.shape != g2.shape or n % 2:
        raise TraceRelationError("trace pairs must be vectors of a common even length")
    U = g1 + s * 1j * g2
    V = g1 - s * 1j * g2
    sv = np.linalg.svd(U, compute_uv=False)
    rank = int(np.sum(sv > tol * max(sv[0], 1e-300)))
    if rank < n:
        raise TraceRelationError(
            f"relation is underdetermined: g1 + i*g2 spans {rank} of {n} dimensions")
    # K U = V  <=>  U^T K^T = V^T
    KT, *_ = np.linalg.lstsq(U.T, V.T, rcond=None)
    K = KT.T
    mismatch = np.linalg.norm(K @ U - V) / max(np.linalg.norm(V), np.linalg.norm(U))
    if mismatch > tol:
        raise TraceRelationError(f"relation is inconsistent (relative mismatch {mismatch:.3g})")
    return BoundaryMatrix(K, variant)


# ---------------------------------------------------------------------------
# Presets

_ROBIN = re.compile(r"^\s*robin\s*\(\s*([^)]*)\s*\)\s*$", re.I)


def _number(x):
    if isinstance(x, (list, tuple)) and len(x) == 2 and all(isinstance(v, (int, float)) for v in x):
        return complex(x[0], x[1])
    if isinstance(x, (int, float, complex)):
        return complex(x)
    if isinstance(x, str):
        from .coeffexpr import parse_expr
        return complex(parse_expr(x, allow_complex=True)(0.0))
    raise SpecError(f"cannot read matrix entry {x!r}")


def parse_matrix(rows) -> np.ndarray:
    """Matrix from nested lists whose entries are numbers, ``[re, im]`` pairs or strings."""
    try:
        M = np.array([[_number(x) for x in row] for row in rows], dtype=complex)
    except TypeError:
        raise SpecError(f"matrix must be a list of rows, got {rows!r}") from None
    if M.ndim != 2:
        raise SpecError("matrix rows have unequal lengths")
    return M


def node_block(preset, size: int) -> np.ndarray:
    """Block for one node from a preset name or an explicit matrix."""
    if isinstance(preset, str):
        name = preset.strip().lower()
        if name == "dirichlet":
            return np.eye(size, dtype=complex)
        if name == "neumann":
            return -np.eye(size, dtype=complex)
        if name == "transmission":
            if size != 2:
                raise SpecError("'transmission' applies to interior nodes only")
            return np.array([[0, -1], [-1, 0]], dtype=complex)
        match = _ROBIN.match(preset)
        if match:
            from .coeffexpr import parse_expr
            theta = parse_expr(match.group(1))(0.0)
            return cmath.exp(1j * float(theta)) * np.eye(size, dtype=complex)
        raise SpecError(f"unknown boundary preset {preset!r}")
    if isinstance(preset, (int, float, complex)) or (
            isinstance(preset, (list, tuple)) and len(preset) == 2 and all(isinstance(v, (int, float)) for v in preset)
            and size == 1):
        return np.array([[_number(preset)]], dtype=complex)
    block = parse_matrix(preset)
    if block.shape != (size, size):
        raise SpecError(f"node block must be {size}x{size}, got {block.shape[0]}x{block.shape[1]}")
    return block


def expand_presets(presets, m: int) -> np.ndarray:
    """Assemble the interval-major ``K`` from node-major presets.

    Args:
        presets: a single preset applied to every node, or a list of ``m + 1``
            entries (one per node ``a_0..a_m``).
        m: number of intervals.
    """
    perm = NodePermutation(m)
    sizes = perm.block_sizes
    if isinstance(presets, str):
        presets = [presets] * (m + 1)
    if len(presets) != m + 1:
        raise SpecError(f"expected {m + 1} node presets for {m} interval(s), got {len(presets)}")
    Kn = sla.block_diag(*[node_block(p, s) for p, s in zip(presets, sizes)])
    return perm.from_nodes(Kn)


# ---------------------------------------------------------------------------
# Surjectivity


def domain_function_with_traces(problem: Problem, g1, g2, *, rtol=_prop.RTOL, atol=_prop.ATOL) -> QuasiFunction:
    """Domain function attaining prescribed traces ``(g1, g2)``.

    On each interval the left data fix the initial state and a forcing
    ``alpha + beta*x`` (``x`` the normalized position) is chosen so the right
    end values match.
    """
    g1 = np.asarray(g1, dtype=complex)
    g2 = np.asarray(g2, dtype=complex)
    initial, forcings = [], []
    for k, sys in enumerate(problem.systems):
        lo, hi = problem.bounds(k)
        v0 = np.array([g2[2 * k], g1[2 * k]])
        target = np.array([g2[2 * k + 1], -g1[2 * k + 1]])
        free = _prop.propagate(sys, 0.0, v0.reshape(2, 1), rtol=rtol, atol=atol).final[0, :, 0]
        cols = []
        for f in (lambda t: np.ones_like(t), lambda t, lo=lo, hi=hi: (t - lo) / (hi - lo)):
            cols.append(_prop.propagate(sys, 0.0, np.zeros((2, 1)), forcing=f,
                                        rtol=rtol, atol=atol).final[0, :, 0])
        G = np.column_stack(cols)
        alpha, beta = np.linalg.solve(G, target - free)
        initial.append(v0)
        forcings.append(lambda t, a=alpha, b=beta, lo=lo, hi=hi: a + b * (t - lo) / (hi - lo))
    return synthesize_domain_function(problem, initial, forcings, rtol=rtol, atol=atol)
