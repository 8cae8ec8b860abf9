"""Multi-interval Sturm-Liouville operators with distributional coefficients.

The differential expression is regularized through quasi-derivatives,
``D1 y = p y' - (Q + i r) y``, which turns ``l[y] = lam*y`` into a first-order
2x2 system with integrable coefficients. Boundary conditions are written
through a ``2m x 2m`` matrix ``K`` acting on the traces of ``(y, D1 y)`` at
the partition nodes.
"""
from .coeffexpr import BreakpointSet, Expr, PotentialSpec, Primitive, build_primitive, parse_expr
from .errors import (NearEigenvalueError, NewtonStagnationError, PropagationError, QuasiSLError,
                     SingularCoefficientError, SpecError, StepUnderflowError, TraceRelationError,
                     WindingError)
from .propagate import fundamental_matrix, solve_inhomogeneous
from .quasisys import (Problem, QuasiFunction, ShinZettlSystem, assemble_system, augmented_matrix,
                       inner, l2_norm, synthesize_domain_function)
from .triplet import (BoundaryMatrix, NodePermutation, TraceVector, admissible_subspace, classify,
                      domain_function_with_traces, expand_presets, from_trace_relation,
                      locality_check, traces)
from .spectral import (CharMatrix, Eigenpair, GreenKernel, apply_resolvent, char_det,
                       find_eigenvalues, green_kernel, hs_norm)
from .analysis import (CompletenessReport, SuiteReport, completeness_suite, dissipativity_suite,
                       green_identity_suite)

__version__ = "0.1.0"

__all__ = [
    "BreakpointSet",
    "Expr",
    "PotentialSpec",
    "Primitive",
    "build_primitive",
    "parse_expr",
    "NearEigenvalueError",
    "NewtonStagnationError",
    "PropagationError",
    "QuasiSLError",
    "SingularCoefficientError",
    "SpecError",
    "StepUnderflowError",
    "TraceRelationError",
    "WindingError",
    "fundamental_matrix",
    "solve_inhomogeneous",
    "Problem",
    "QuasiFunction",
    "ShinZettlSystem",
    "assemble_system",
    "augmented_matrix",
    "inner",
    "l2_norm",
    "synthesize_domain_function",
    "BoundaryMatrix",
    "NodePermutation",
    "TraceVector",
    "admissible_subspace",
    "classify",
    "domain_function_with_traces",
    "expand_presets",
    "from_trace_relation",
    "locality_check",
    "traces",
    "CharMatrix",
    "Eigenpair",
    "GreenKernel",
    "apply_resolvent",
    "char_det",
    "find_eigenvalues",
    "green_kernel",
    "hs_norm",
    "CompletenessReport",
    "SuiteReport",
    "completeness_suite",
    "dissipativity_suite",
    "green_identity_suite",
]
