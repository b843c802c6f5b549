"""Exception types shared across the toolkit."""


class SgrGmmError(Exception):
    """Base class for all toolkit errors."""


class NonFiniteInput(SgrGmmError):
    """A matrix or vector argument contains NaN or Inf entries."""


class DimMismatch(SgrGmmError):
    """Operands have incompatible dimensions."""


class BadEpsilon(SgrGmmError):
    """Contamination fraction outside the admissible range [0, 1/3)."""


class AllZero(SgrGmmError):
    """Every entry of a vector that must carry mass is zero."""


class Infeasible(SgrGmmError):
    """The capped simplex is empty for the requested cap."""


class EmptyInput(SgrGmmError):
    """An operation received an empty point set."""


class EmptyCloud(SgrGmmError):
    """A gradient cloud with zero observations."""


class IndexOutOfRange(SgrGmmError):
    """An observation index set contains entries outside [0, N)."""


class StepSizeOutOfRange(SgrGmmError):
    """Multiplicative-weights step sizes violate 0 < eta * nu <= 1/2."""


class LineSearchFailed(SgrGmmError):
    """Line search could not find an acceptable step.

    Returned as a status by the optimizer rather than raised; raised only
    if the caller asks for strict behaviour.
    """


class NonFiniteObjective(SgrGmmError):
    """The objective or gradient evaluated to NaN/Inf during a fit."""


class KMismatch(SgrGmmError):
    """Two mixture parameter sets have different component counts."""


class NonpositiveLambda(SgrGmmError):
    """Identification strength lambda* must be strictly positive."""


class NonFiniteProbe(SgrGmmError):
    """Finite-difference probing produced non-finite values."""


class ConfigError(SgrGmmError):
    """An experiment configuration is malformed or incomplete."""
