"""Exception hierarchy shared by every stage of the laboratory."""


class SRError(Exception):
    """Base class for all numerical and structural failures."""


# structures
class SpecError(SRError):
    """Malformed FrameSpec document (unknown key, bad shape, degree too high)."""


class FrameDependent(SRError):
    pass


class NotBracketGenerating(SRError):
    pass


class DerivativeMismatch(SRError):
    pass


class NoSpan(SRError):
    pass


# integration
class OutOfChart(SRError):
    pass


class LeftChart(OutOfChart):
    pass


class StepBudget(SRError):
    pass


# geodesy
class NoConvergence(SRError):
    pass


class SingularJacobian(SRError):
    pass


class InvalidRatio(SRError):
    pass


# flag
class StencilOutOfRange(SRError):
    pass


class ControlRecoveryFailed(SRError):
    pass


class NoAmpleFound(SRError):
    pass


# counterexample
class PoorFit(SRError):
    pass


class NoBracket(SRError):
    pass


class ChartOverflow(SRError):
    pass


class SmoothnessLost(SRError):
    pass


class SampleBudget(SRError):
    pass


class UnsupportedCurvature(SRError):
    pass


class DegenerateDimension(SRError):
    pass


class PipelineError(SRError):
    """A stage of the end-to-end construction failed.

    ``stage`` names the failing step, ``cause`` is the underlying exception.
    """

    def __init__(self, stage, cause, diagnostics=None):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause
        self.diagnostics = diagnostics or {}
