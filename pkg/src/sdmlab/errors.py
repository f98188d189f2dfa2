"""Exception hierarchy shared by every module.

Everything derives from :class:`SdmLabError` so the CLI can map a failure to an
exit code without knowing which subsystem raised it.
"""


class SdmLabError(Exception):
    pass


class ValidationError(SdmLabError, ValueError):
    """Bad input: shapes, probabilities, configuration."""


class NumericalError(SdmLabError, ArithmeticError):
    """A numerical contract failed (non-finite loss, unattainable solve)."""


# --- tables / MDPs -----------------------------------------------------------

class DimensionMismatch(ValidationError):
    pass


class NonStochasticRow(ValidationError):
    pass


class NegativeProbability(ValidationError):
    pass


class NotIrreducible(ValidationError):
    pass


class Periodic(ValidationError):
    pass


# --- divergences -------------------------------------------------------------

class SupportViolation(ValidationError):
    pass


class EmptyDictionary(ValidationError):
    pass


class NegativeBound(ValidationError):
    pass


# --- data --------------------------------------------------------------------

class EmptyDataset(ValidationError):
    pass


class CoverageError(ValidationError):
    pass


class KindMismatch(ValidationError):
    pass


class InvalidSplit(ValidationError):
    pass


class ParseError(ValidationError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


# --- neural tier -------------------------------------------------------------

class ShapeMismatch(ValidationError):
    pass


class NonFiniteLoss(NumericalError):
    pass


class TooFewSamples(ValidationError):
    pass


class UntrainedEnsemble(ValidationError):
    pass


class EmptyAfterTerminalFilter(ValidationError):
    pass


class EmptyBatch(ValidationError):
    pass


# --- cli ---------------------------------------------------------------------

class ConfigError(ValidationError):
    def __init__(self, message, key=None):
        if key is not None:
            message = f"{key}: {message}"
        super().__init__(message)
        self.key = key


class UnknownCommand(ValidationError):
    pass
