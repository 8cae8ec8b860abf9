"""JSON configuration documents: validation and conversion to library objects.

Example::

    {
      "partition": [0, "pi"],
      "intervals": [{"p": "1", "q": {"ac": "0", "deltas": [{"at": 1.0, "weight": 5}]}, "r": "0"}],
      "boundary": {"variant": "dissipative", "presets": ["dirichlet", "dirichlet"]},
      "search": {"re_min": 0.5, "re_max": 20.5, "im_min": -1, "im_max": 1, "max_count": 10},
      "tolerances": {"rel": 1e-10, "abs": 1e-12}
    }

``boundary`` may instead give ``"K"``: a ``2m x 2m`` array whose entries are
``[re, im]`` pairs (plain numbers are accepted too).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from . import propagate as _prop
from .coeffexpr import parse_expr
from .errors import ExprError, QuasiSLError, SpecError
from .quasisys import Problem
from .triplet import VARIANTS, BoundaryMatrix, expand_presets, parse_matrix


class ConfigError(SpecError):
    """Invalid configuration; ``issues`` lists path-qualified messages."""

    def __init__(self, issues):
        self.issues = list(issues)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.issues))


@dataclass
class Config:
    problem: Problem
    boundary: BoundaryMatrix
    region: tuple | None
    max_count: int | None
    rtol: float = _prop.RTOL
    atol: float = _prop.ATOL
    raw: dict = field(default_factory=dict, repr=False)

    def with_tolerances(self, rtol=None, atol=None) -> "Config":
        return Config(self.problem, self.boundary, self.region, self.max_count,
                      self.rtol if rtol is None else rtol, self.atol if atol is None else atol, self.raw)


def _real(value, path, issues):
    if isinstance(value, bool):
        issues.append(f"{path}: expected a number, got {value!r}")
        return None
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        try:
            expr = parse_expr(value)
            if expr.depends_on_t:
                raise SpecError("must not depend on t")
            return float(expr(0.0))
        except (ExprError, SpecError) as exc:
            issues.append(f"{path}: {exc}")
            return None
    issues.append(f"{path}: expected a number, got {value!r}")
    return None


def _expr(value, path, issues):
    if value is None:
        return None
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return str(value)
    if not isinstance(value, str):
        issues.append(f"{path}: expected an expression string, got {value!r}")
        return None
    try:
        parse_expr(value)
    except ExprError as exc:
        issues.append(f"{path}: {exc}")
        return None
    return value


def _interval(doc, path, issues, lo, hi):
    if not isinstance(doc, dict):
        issues.append(f"{path}: expected an object")
        return None
    unknown = set(doc) - {"p", "q", "Q", "r", "breakpoints"}
    if unknown:
        issues.append(f"{path}: unknown key(s) {sorted(unknown)}")
    out = {"p": _expr(doc.get("p", "1"), f"{path}.p", issues),
           "r": _expr(doc.get("r", "0"), f"{path}.r", issues)}
    q, Q = doc.get("q"), doc.get("Q")
    if q is not None and Q is not None:
        issues.append(f"{path}: give either q or Q, not both")
    if Q is not None:
        out["Q"] = _expr(Q, f"{path}.Q", issues)
    if q is not None:
        if isinstance(q, (str, int, float)) and not isinstance(q, bool):
            out["q"] = _expr(q, f"{path}.q", issues)
        elif isinstance(q, dict):
            if set(q) - {"ac", "deltas"}:
                issues.append(f"{path}.q: unknown key(s) {sorted(set(q) - {'ac', 'deltas'})}")
            if q.get("ac") is not None:
                out["q"] = _expr(q["ac"], f"{path}.q.ac", issues)
            deltas = []
            for j, d in enumerate(q.get("deltas", []) or []):
                dp = f"{path}.q.deltas[{j}]"
                if not isinstance(d, dict) or set(d) != {"at", "weight"}:
                    issues.append(f"{dp}: expected {{at, weight}}")
                    continue
                at = _real(d["at"], f"{dp}.at", issues)
                w = _real(d["weight"], f"{dp}.weight", issues)
                if at is not None and lo is not None and hi is not None and not lo < at < hi:
                    issues.append(f"{dp}.at: {at} is not strictly inside ({lo}, {hi}); put node "
                                  "interactions into the boundary matrix instead")
                if at is not None and w is not None:
                    deltas.append((at, w))
            out["deltas"] = deltas
        else:
            issues.append(f"{path}.q: expected an expression string or an object")
    bps = []
    for j, b in enumerate(doc.get("breakpoints", []) or []):
        v = _real(b, f"{path}.breakpoints[{j}]", issues)
        if v is not None:
            bps.append(v)
    out["breakpoints"] = bps
    return out


def parse_config(doc: dict) -> Config:
    """Validate a configuration document and build the problem objects.

    Raises:
        ConfigError: listing every problem found, before any computation.
    """
    issues: list[str] = []
    if not isinstance(doc, dict):
        raise ConfigError(["$: expected a JSON object"])
    unknown = set(doc) - {"partition", "intervals", "boundary", "search", "tolerances"}
    if unknown:
        issues.append(f"$: unknown key(s) {sorted(unknown)}")
    part_doc = doc.get("partition")
    partition = []
    if not isinstance(part_doc, list) or len(part_doc) < 2:
        issues.append("partition: expected an array of at least two reals")
    else:
        partition = [_real(v, f"partition[{i}]", issues) for i, v in enumerate(part_doc)]
        vals = [v for v in partition if v is not None]
        if len(vals) == len(partition) and any(b <= a for a, b in zip(vals, vals[1:])):
            issues.append("partition: must be strictly increasing")
    m = max(len(partition) - 1, 0)

    intervals_doc = doc.get("intervals")
    intervals = []
    if not isinstance(intervals_doc, list):
        issues.append("intervals: expected an array")
    else:
        if m and len(intervals_doc) != m:
            issues.append(f"intervals: expected {m} entries (partition length - 1), got {len(intervals_doc)}")
        for k, iv in enumerate(intervals_doc):
            lo = partition[k] if k < len(partition) else None
            hi = partition[k + 1] if k + 1 < len(partition) else None
            intervals.append(_interval(iv, f"intervals[{k}]", issues, lo, hi))

    bdoc = doc.get("boundary")
    K = None
    variant = "dissipative"
    if not isinstance(bdoc, dict):
        issues.append("boundary: expected an object")
    else:
        variant = str(bdoc.get("variant", "dissipative")).lower()
        if variant not in VARIANTS:
            issues.append(f"boundary.variant: expected one of {sorted(VARIANTS)}, got {variant!r}")
        if ("K" in bdoc) == ("presets" in bdoc):
            issues.append("boundary: give exactly one of K or presets")
        elif "K" in bdoc:
            try:
                K = parse_matrix(bdoc["K"])
                if m and K.shape != (2 * m, 2 * m):
                    issues.append(f"boundary.K: expected {2 * m}x{2 * m}, got {K.shape[0]}x{K.shape[1]}")
                    K = None
            except QuasiSLError as exc:
                issues.append(f"boundary.K: {exc}")
        elif m:
            try:
                K = expand_presets(bdoc["presets"], m)
            except QuasiSLError as exc:
                issues.append(f"boundary.presets: {exc}")

    region, max_count = None, None
    sdoc = doc.get("search")
    if sdoc is not None:
        if not isinstance(sdoc, dict):
            issues.append("search: expected an object")
        else:
            region = tuple(_real(sdoc.get(key), f"search.{key}", issues)
                           for key in ("re_min", "re_max", "im_min", "im_max"))
            if None not in region and not (region[0] < region[1] and region[2] < region[3]):
                issues.append("search: need re_min < re_max and im_min < im_max")
            if sdoc.get("max_count") is not None:
                mc = sdoc["max_count"]
                if not isinstance(mc, int) or isinstance(mc, bool) or mc < 1:
                    issues.append("search.max_count: expected a positive integer")
                else:
                    max_count = mc

    rtol, atol = _prop.RTOL, _prop.ATOL
    tdoc = doc.get("tolerances") or {}
    if not isinstance(tdoc, dict):
        issues.append("tolerances: expected an object")
    else:
        if "rel" in tdoc:
            rtol = _real(tdoc["rel"], "tolerances.rel", issues)
        if "abs" in tdoc:
            atol = _real(tdoc["abs"], "tolerances.abs", issues)
        for name, v in (("rel", rtol), ("abs", atol)):
            if v is not None and not v > 0:
                issues.append(f"tolerances.{name}: must be positive")

    if issues:
        raise ConfigError(issues)
    try:
        problem = Problem.from_spec(partition, intervals)
    except QuasiSLError as exc:
        raise ConfigError([f"intervals: {exc}"]) from exc
    return Config(problem, BoundaryMatrix(K, variant), region, max_count, rtol, atol, doc)


def load_config(path) -> Config:
    """Read and validate a JSON configuration file."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError([f"$: cannot read {path}: {exc.strerror}"]) from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"$: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}"]) from exc
    return parse_config(doc)


def explicit_form(doc: dict) -> dict:
    """Copy of ``doc`` with boundary presets replaced by the explicit K matrix."""
    cfg = parse_config(doc)
    out = json.loads(json.dumps(doc))
    out["boundary"] = {"variant": cfg.boundary.variant,
                       "K": [[[z.real, z.imag] for z in row] for row in cfg.boundary.K.tolist()]}
    return out
