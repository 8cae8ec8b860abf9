"""Coefficient expressions and antiderivatives of distributional potentials.

Coefficients ``p``, ``r`` and the absolutely continuous part of ``q`` are
written as small arithmetic expressions in the variable ``t``::

    expr   := term (('+'|'-') term)*
    term   := factor (('*'|'/') factor)*
    factor := '-' factor | power
    power  := atom ('^' factor)?
    atom   := number | ident | ident '(' expr ')' | '(' expr ')'

``^`` is right-associative and binds tighter than unary minus, so ``-t^2``
is ``-(t^2)`` while ``t^-1`` is ``t^(-1)``.

A potential ``q`` enters the quasi-derivatives only through an antiderivative
``Q`` with ``Q' = q`` in the sense of distributions.  :func:`build_primitive`
produces ``Q`` for an absolutely continuous density plus finitely many Dirac
masses, normalized so that ``Q`` vanishes at the left end of its interval and
right-continuous at every jump.  Shifting ``Q`` by a constant changes the
quasi-derivative ``D1 y = p y' - (Q + i r) y`` and therefore the traces, so
the normalization is part of the problem definition.
"""

from __future__ import annotations

import math
import re
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import integrate, optimize

from .errors import ExprEvalError, ExprSyntaxError, QuadratureError, SpecError

__all__ = [
    "Expr",
    "parse_expr",
    "BreakpointSet",
    "PotentialSpec",
    "Primitive",
    "build_primitive",
]

# ---------------------------------------------------------------------------
# AST

FUNCTIONS: dict[str, Callable] = {
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "sign": np.sign,
}
CONSTANTS = {"pi": math.pi, "e": math.e}

# binding strength used by the printer
_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4, "atom": 5}


@dataclass(frozen=True)
class Num:
    value: float
    pos: int = 0


@dataclass(frozen=True)
class Name:
    """Either the variable ``t`` or a named constant (``pi``, ``e``, ``i``)."""

    name: str
    pos: int = 0


@dataclass(frozen=True)
class Neg:
    operand: object
    pos: int = 0


@dataclass(frozen=True)
class BinOp:
    op: str
    left: object
    right: object
    pos: int = 0


@dataclass(frozen=True)
class Call:
    func: str
    arg: object
    pos: int = 0


def _prec(node) -> int:
    if isinstance(node, BinOp):
        return _PREC[node.op]
    if isinstance(node, Neg):
        return _PREC["neg"]
    return _PREC["atom"]


def _format(node) -> str:
    if isinstance(node, Num):
        return repr(float(node.value))
    if isinstance(node, Name):
        return node.name
    if isinstance(node, Call):
        return f"{node.func}({_format(node.arg)})"
    if isinstance(node, Neg):
        inner = _format(node.operand)
        if _prec(node.operand) < _PREC["neg"]:
            inner = f"({inner})"
        return f"-{inner}"
    p = _PREC[node.op]
    left, right = _format(node.left), _format(node.right)
    if node.op == "^":
        if _prec(node.left) <= p:
            left = f"({left})"
        if _prec(node.right) < _PREC["neg"]:
            right = f"({right})"
        return f"{left}^{right}"
    if _prec(node.left) < p:
        left = f"({left})"
    if _prec(node.right) <= p:
        right = f"({right})"
    return f"{left} {node.op} {right}"


def _compile(node, consts):
    """Turn an AST into a vectorized closure ``t -> ndarray``."""
    if isinstance(node, Num):
        v = node.value
        return lambda t: v
    if isinstance(node, Name):
        if node.name == "t":
            return lambda t: t
        v = consts[node.name]
        return lambda t: v
    if isinstance(node, Neg):
        f = _compile(node.operand, consts)
        return lambda t: -f(t)
    if isinstance(node, Call):
        g = FUNCTIONS[node.func]
        f = _compile(node.arg, consts)
        return lambda t: g(f(t))
    a, b = _compile(node.left, consts), _compile(node.right, consts)
    op = node.op
    if op == "+":
        return lambda t: a(t) + b(t)
    if op == "-":
        return lambda t: a(t) - b(t)
    if op == "*":
        return lambda t: a(t) * b(t)
    if op == "/":
        return lambda t: np.divide(a(t), b(t))
    return lambda t: np.power(a(t), b(t))


def _walk(node):
    yield node
    for child in ("operand", "left", "right", "arg"):
        sub = getattr(node, child, None)
        if sub is not None:
            yield from _walk(sub)


# ---------------------------------------------------------------------------
# Parser

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)|(?P<op>[-+*/^(),]))"
)


def _byte_offset(src: str, idx: int) -> int:
    return len(src[:idx].encode("utf-8"))


def _tokenize(src: str):
    tokens = []
    idx = 0
    while True:
        while idx < len(src) and src[idx].isspace():
            idx += 1
        if idx >= len(src):
            break
        m = _TOKEN.match(src, idx)
        if m is None or m.end() == idx:
            raise ExprSyntaxError(f"unexpected character {src[idx]!r}", _byte_offset(src, idx))
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), _byte_offset(src, start)))
        idx = m.end()
    tokens.append(("end", "", len(src.encode("utf-8"))))
    return tokens


class _Parser:
    def __init__(self, src: str, allow_complex: bool):
        self.tokens = _tokenize(src)
        self.i = 0
        self.allow_complex = allow_complex

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, text, pos = self.take()
        if text != value or kind != "op":
            found = "end of input" if kind == "end" else repr(text)
            raise ExprSyntaxError(f"expected {value!r}, found {found}", pos)

    def parse(self):
        node = self.expr()
        kind, text, pos = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected token {text!r}", pos)
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            _, op, pos = self.take()
            node = BinOp(op, node, self.term(), pos)
        return node

    def term(self):
        node = self.factor()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            _, op, pos = self.take()
            node = BinOp(op, node, self.factor(), pos)
        return node

    def factor(self):
        kind, text, pos = self.peek()
        if kind == "op" and text == "-":
            self.take()
            return Neg(self.factor(), pos)
        return self.power()

    def power(self):
        base = self.atom()
        kind, text, pos = self.peek()
        if kind == "op" and text == "^":
            self.take()
            return BinOp("^", base, self.factor(), pos)
        return base

    def atom(self):
        kind, text, pos = self.take()
        if kind == "num":
            return Num(float(text), pos)
        if kind == "ident":
            is_call = self.peek()[1] == "(" and self.peek()[0] == "op"
            if text in FUNCTIONS:
                if not is_call:
                    raise ExprSyntaxError(f"function {text!r} takes exactly 1 argument", pos)
                self.take()
                arg = self.expr()
                if self.peek()[1] == ",":
                    raise ExprSyntaxError(
                        f"arity mismatch: {text!r} takes exactly 1 argument", self.peek()[2]
                    )
                self.expect(")")
                return Call(text, arg, pos)
            if text == "t" or text in CONSTANTS or text == "i":
                if text == "i" and not self.allow_complex:
                    raise ExprSyntaxError(
                        "imaginary unit 'i' is not allowed in real coefficient expressions", pos
                    )
                if is_call:
                    raise ExprSyntaxError(f"arity mismatch: {text!r} is not a function", pos)
                return Name(text, pos)
            raise ExprSyntaxError(f"unknown identifier {text!r}", pos)
        if kind == "op" and text == "(":
            node = self.expr()
            self.expect(")")
            return node
        found = "end of input" if kind == "end" else repr(text)
        raise ExprSyntaxError(f"unexpected {found}", pos)


class Expr:
    """Parsed coefficient expression, evaluated elementwise on numpy arrays.

    Instances are immutable; ``expr(t)`` returns an array with the shape of
    ``t`` (real unless the expression uses ``i``) and raises
    :class:`ExprEvalError` on non-finite values.
    """

    __slots__ = ("source", "node", "_fn", "depends_on_t", "is_complex")

    def __init__(self, node, source: str = ""):
        self.node = node
        self.source = source
        names = {n.name for n in _walk(node) if isinstance(n, Name)}
        self.depends_on_t = "t" in names
        self.is_complex = "i" in names
        consts = dict(CONSTANTS, i=1j)
        self._fn = _compile(node, consts)

    def __repr__(self):
        return f"Expr({self.pretty()!r})"

    def pretty(self) -> str:
        return _format(self.node)

    def __call__(self, t, check: bool = True):
        t_arr = np.asarray(t, dtype=float)
        dtype = complex if self.is_complex else float
        with np.errstate(all="ignore"):
            val = self._fn(t_arr.astype(dtype) if self.is_complex else t_arr)
            val = np.broadcast_to(np.asarray(val, dtype=dtype), t_arr.shape)
        if check and not np.all(np.isfinite(val)):
            bad = np.flatnonzero(~np.isfinite(np.ravel(val)))[0]
            where = float(np.ravel(t_arr)[bad]) if t_arr.ndim else float(t_arr)
            raise ExprEvalError(f"non-finite value of {self.pretty()!r} at t={where!r}")
        return val if t_arr.ndim else val[()]

    def kinks(self, lo: float, hi: float, samples: int = 1025) -> list[float]:
        """Interior points of ``(lo, hi)`` where ``abs`` or ``sign`` switch branch.

        Roots of each such argument are bracketed on a uniform grid and
        polished with Brent's method; a root that touches zero without a
        sign change between grid points is missed.
        """
        if not self.depends_on_t:
            return []
        t = np.linspace(lo, hi, samples)
        found = []
        for node in _walk(self.node):
            if not (isinstance(node, Call) and node.func in ("abs", "sign")):
                continue
            arg = Expr(node.arg)
            if not arg.depends_on_t or arg.is_complex:
                continue
            g = arg(t, check=False)
            if not np.all(np.isfinite(g)):
                continue
            found.extend(t[1:-1][g[1:-1] == 0].tolist())
            for j in np.flatnonzero(g[:-1] * g[1:] < 0):
                found.append(optimize.brentq(lambda x: float(arg(x, check=False)), t[j], t[j + 1],
                                             xtol=1e-15 * max(1.0, abs(hi)), rtol=4 * np.finfo(float).eps))
        span = hi - lo
        return sorted(x for x in set(found) if lo + 1e-12 * span < x < hi - 1e-12 * span)

    def constant_value(self):
        """Value of a t-independent expression (error if it depends on t)."""
        if self.depends_on_t:
            raise ExprEvalError(f"{self.pretty()!r} depends on t")
        return self(0.0)


def parse_expr(src: str, allow_complex: bool = False) -> Expr:
    """Parse ``src`` into an :class:`Expr`.

    Raises:
        ExprSyntaxError: on syntax errors, unknown identifiers and arity
            mismatches; ``err.pos`` is the byte offset of the offending token.
    """
    if not isinstance(src, str):
        raise ExprSyntaxError(f"expression must be a string, got {type(src).__name__}")
    return Expr(_Parser(src, allow_complex).parse(), src)


def constant(value: float) -> Expr:
    return Expr(Num(float(value)), repr(float(value)))


# ---------------------------------------------------------------------------
# Potentials and primitives


class BreakpointSet(tuple):
    """Sorted interior points where coefficients jump or lose smoothness."""

    def __new__(cls, points: Sequence[float] = (), span: float = 1.0):
        tol = 1e-14 * abs(span)
        pts = []
        for x in sorted(float(p) for p in points):
            if not pts or x - pts[-1] > tol:
                pts.append(x)
        return super().__new__(cls, pts)

    def merged(self, other: Sequence[float], span: float = 1.0) -> "BreakpointSet":
        return BreakpointSet(tuple(self) + tuple(other), span)

    def inside(self, lo: float, hi: float) -> list[float]:
        """Points strictly inside (lo, hi)."""
        return [x for x in self if lo < x < hi]


@dataclass(frozen=True)
class PotentialSpec:
    """Distributional potential on one interval.

    Either ``ac_part`` and/or ``deltas`` (density plus point masses ``(at,
    weight)``) or ``direct_Q`` (the antiderivative itself) is given.
    """

    ac_part: Expr | None = None
    deltas: tuple[tuple[float, float], ...] = ()
    direct_Q: Expr | None = None

    def validate(self, interval: tuple[float, float]) -> None:
        lo, hi = interval
        if self.direct_Q is not None and (self.ac_part is not None or self.deltas):
            raise SpecError("give either q (ac part and deltas) or Q, not both")
        locs = [float(at) for at, _ in self.deltas]
        for at in locs:
            if not lo < at < hi:
                raise SpecError(
                    f"delta at t={at!r} is not strictly inside ({lo!r}, {hi!r}); "
                    "point interactions at partition nodes belong in a transmission-type "
                    "block of the boundary matrix K"
                )
        if len(set(locs)) != len(locs):
            raise SpecError("delta locations must be pairwise distinct")
        for expr in (self.ac_part, self.direct_Q):
            if expr is not None and expr.is_complex:
                raise SpecError("potential must be real-valued")


class Primitive:
    """Antiderivative ``Q`` of a potential on ``[lo, hi]`` with ``Q(lo) = 0``.

    ``Q(t) = smooth(t) + sum(c_i for t_i <= t)``.  The smooth part is known
    exactly at cached anchors and filled in between by 16-point
    Gauss-Legendre quadrature from the nearest anchor to the left.

    Attributes:
        k: interval index.
        jumps: sorted tuple of ``(t_i, c_i)``.
        breakpoints: jump locations plus user-declared kinks.
    """

    _GL_X, _GL_W = np.polynomial.legendre.leggauss(16)

    def __init__(self, k, lo, hi, jumps=(), density=None, anchors=None, anchor_values=None,
                 direct=None, breakpoints=()):
        self.k = k
        self.lo, self.hi = float(lo), float(hi)
        self.jumps = tuple(sorted((float(a), float(c)) for a, c in jumps))
        self._jump_t = np.array([a for a, _ in self.jumps])
        self._jump_cum = np.concatenate([[0.0], np.cumsum([c for _, c in self.jumps])])
        self.density = density
        self.direct = direct
        self._anchors = None if anchors is None else np.asarray(anchors, dtype=float)
        self._anchor_vals = None if anchor_values is None else np.asarray(anchor_values, dtype=float)
        self._direct_shift = float(direct(self.lo)) if direct is not None else 0.0
        self.breakpoints = BreakpointSet(
            [a for a, _ in self.jumps] + list(breakpoints), self.hi - self.lo
        )

    @property
    def has_smooth_part(self) -> bool:
        if self.direct is not None:
            return self.direct.depends_on_t
        return self.density is not None

    def smooth_part(self, t):
        t = np.asarray(t, dtype=float)
        if self.direct is not None:
            return self.direct(t) - self._direct_shift
        if self.density is None:
            return np.zeros_like(t)
        idx = np.clip(np.searchsorted(self._anchors, t, side="right") - 1, 0, len(self._anchors) - 1)
        left = self._anchors[idx]
        half = 0.5 * (t - left)
        nodes = left[..., None] + half[..., None] * (self._GL_X + 1.0)
        vals = self.density(nodes)
        return self._anchor_vals[idx] + half * (vals @ self._GL_W)

    def step_part(self, t, side: str = "right"):
        """Sum of jumps at or left of ``t`` (strictly left when side='left')."""
        t = np.asarray(t, dtype=float)
        if not self.jumps:
            return np.zeros_like(t)
        return self._jump_cum[np.searchsorted(self._jump_t, t, side=side)]

    def __call__(self, t):
        return self.smooth_part(t) + self.step_part(t)

    def left_limit(self, t):
        return self.smooth_part(t) + self.step_part(t, side="left")

    def step_value_after(self, t0: float) -> float:
        """Constant step contribution on the open segment starting at ``t0``."""
        return float(self.step_part(t0))


def build_primitive(spec: PotentialSpec, interval, quad_tol: float = 1e-13, k: int = 0,
                    extra_breakpoints=()) -> Primitive:
    """Antiderivative of ``spec`` on ``interval`` (normalized to vanish at its left end).

    Anchors are placed on a uniform grid of 64 interior points plus all
    breakpoints; anchor values come from adaptive Gauss-Kronrod quadrature
    (``scipy.integrate.quad``).  Panels on which the 16-point Gauss rule
    disagrees with the adaptive value by more than ``quad_tol`` are bisected.

    Raises:
        SpecError: invalid spec (e.g. a delta on an endpoint).
        QuadratureError: adaptive quadrature did not converge.
    """
    lo, hi = map(float, interval)
    if not hi > lo:
        raise SpecError(f"empty interval [{lo}, {hi}]")
    spec.validate((lo, hi))
    kinks = BreakpointSet(list(extra_breakpoints) + [a for a, _ in spec.deltas], hi - lo)
    if spec.direct_Q is not None:
        return Primitive(k, lo, hi, direct=spec.direct_Q, breakpoints=kinks)
    density = spec.ac_part
    if density is None or (not density.depends_on_t and density.constant_value() == 0):
        return Primitive(k, lo, hi, jumps=spec.deltas, breakpoints=kinks)

    def piece(a, b):
        with warnings.catch_warnings():
            warnings.simplefilter("error", integrate.IntegrationWarning)
            try:
                val, _ = integrate.quad(lambda s: float(density(s)), a, b,
                                        epsabs=quad_tol, epsrel=quad_tol, limit=200)
            except integrate.IntegrationWarning as exc:
                raise QuadratureError(f"quadrature failed on [{a}, {b}]: {exc}") from exc
        return val

    def gauss(a, b):
        half = 0.5 * (b - a)
        return half * float(density(a + half * (Primitive._GL_X + 1.0)) @ Primitive._GL_W)

    grid = sorted(set(np.linspace(lo, hi, 66)[:-1].tolist()) | set(kinks.inside(lo, hi)))
    edges = grid + [hi]
    anchors, values = [], []
    acc = 0.0
    stack = [(edges[i], edges[i + 1]) for i in range(len(edges) - 1)][::-1]
    while stack:
        a, b = stack.pop()
        exact = piece(a, b)
        if abs(gauss(a, b) - exact) > quad_tol and (b - a) > 1e-9 * (hi - lo):
            mid = 0.5 * (a + b)
            stack.extend([(mid, b), (a, mid)])
            continue
        anchors.append(a)
        values.append(acc)
        acc += exact
    return Primitive(k, lo, hi, jumps=spec.deltas, density=density, anchors=anchors,
                     anchor_values=values, breakpoints=kinks)
