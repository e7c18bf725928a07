"""Exception hierarchy.

Two families: violations of the model hypotheses (the harness exits with
code 1) and numerical failures such as leakage, unconverged quadrature or
ill-conditioned solves (exit code 2).
"""


class QDiffError(Exception):
    """Base class for every error raised by the package."""


class AssumptionViolation(QDiffError):
    code = "AssumptionViolation"


class SymmetryViolation(AssumptionViolation):
    code = "SymmetryViolation"


class DegenerateHopping(AssumptionViolation):
    code = "DegenerateHopping"


class SmallerPeriod(AssumptionViolation):
    code = "SmallerPeriod"


class DegeneratePotential(AssumptionViolation):
    code = "DegeneratePotential"


class NotErgodic(AssumptionViolation):
    code = "NotErgodic"


class NumericalError(QDiffError):
    code = "NumericalError"


class BoxLeakage(NumericalError):
    code = "BoxLeakage"


class NormDrift(NumericalError):
    code = "NormDrift"


class QuadratureNotConverged(NumericalError):
    code = "QuadratureNotConverged"


class SingularRestriction(NumericalError):
    code = "SingularRestriction"


class DegenerateZero(NumericalError):
    code = "DegenerateZero"


class BranchCollision(NumericalError):
    code = "BranchCollision"


class GapTooSmall(NumericalError):
    code = "GapTooSmall"


class NotPositiveDefinite(NumericalError):
    code = "NotPositiveDefinite"


class FitUnstable(NumericalError):
    code = "FitUnstable"


class ConfigError(QDiffError):
    code = "ConfigError"
