"""Exception hierarchy.

Validation problems derive from ``ValidationError`` (CLI exit code 2) and
numeric breakdowns from ``NumericError`` (exit code 3).
"""


class MetccError(Exception):
    pass


class ValidationError(MetccError, ValueError):
    pass


class NumericError(MetccError, ArithmeticError):
    pass


# dataio
class MalformedFile(ValidationError):
    pass


class NonFiniteValue(ValidationError):
    pass


class DuplicateId(ValidationError):
    pass


class MissingColumn(ValidationError):
    pass


class UnknownLabelValue(ValidationError):
    pass


class NegativeAge(ValidationError):
    pass


class UnknownGroup(ValidationError):
    pass


class AllFeaturesDropped(ValidationError):
    pass


class ZeroVarianceSample(ValidationError):
    def __init__(self, sample_id):
        super().__init__(f"sample {sample_id!r} has zero variance across its features")
        self.sample_id = sample_id


class EmptyIntersection(ValidationError):
    pass


# synthgen
class InfeasibleConfig(ValidationError):
    pass


# pca / hcp / metric
class RankTooHigh(ValidationError):
    pass


class DegenerateData(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class SingularUpdate(NumericError):
    def __init__(self, block):
        super().__init__(f"singular ridge system in block {block!r} with zero penalty")
        self.block = block


class SingleClassInput(ValidationError):
    pass


class DivergenceDetected(NumericError):
    def __init__(self, message, trace=()):
        super().__init__(message)
        self.trace = list(trace)


# eval / pipeline
class ClassTooSmall(ValidationError):
    pass


class EmptyTrainSet(ValidationError):
    pass


class SingleClass(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class IncompleteGrid(ValidationError):
    def __init__(self, missing):
        super().__init__("missing report cells: " + ", ".join("/".join(m) for m in missing))
        self.missing = list(missing)
