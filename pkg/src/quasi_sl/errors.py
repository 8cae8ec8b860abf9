"""Exception hierarchy shared by all quasi_sl modules."""


class QuasiSLError(Exception):
    """Base class for every error raised by the package."""


class ExprError(QuasiSLError):
    """Parse or evaluation failure of a coefficient expression.

    Attributes:
        pos: byte offset into the source text, or None when not applicable.
    """

    def __init__(self, message, pos=None):
        self.pos = pos
        if pos is not None:
            message = f"{message} (at offset {pos})"
        super().__init__(message)


class ExprSyntaxError(ExprError):
    pass


class ExprEvalError(ExprError):
    pass


class SpecError(QuasiSLError, ValueError):
    """Invalid problem data (bad partition, delta on a node, wrong K size)."""


class SingularCoefficientError(QuasiSLError):
    def __init__(self, t):
        self.t = float(t)
        super().__init__(f"leading coefficient p vanishes (|p| < 1e-300) at t={self.t!r}")


class QuadratureError(QuasiSLError):
    pass


class PropagationError(QuasiSLError):
    """Integrator failure; ``t`` is where it happened."""

    def __init__(self, message, t=None):
        self.t = t
        if t is not None:
            message = f"{message} at t={t!r}"
        super().__init__(message)


class StepUnderflowError(PropagationError):
    pass


class WindingError(QuasiSLError):
    pass


class NewtonStagnationError(QuasiSLError):
    pass


class NearEigenvalueError(QuasiSLError):
    """The boundary system B(lambda) is numerically singular."""

    def __init__(self, lam, cond):
        self.lam = lam
        self.cond = cond
        super().__init__(f"lambda={lam!r} is (near) an eigenvalue: cond(B)={cond:.3e}")


class TraceRelationError(QuasiSLError, ValueError):
    pass
