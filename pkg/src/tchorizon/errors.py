"""Exception types raised across the package."""


class HorizonError(ValueError):
    """Base class for all domain errors."""


class VerticalLine(HorizonError):
    pass


class SlopeSingularity(HorizonError):
    pass


class DegenerateProjection(HorizonError):
    pass


class BadCalibration(HorizonError):
    pass


class InvalidPose(HorizonError):
    pass


class UnknownSequence(HorizonError, KeyError):
    pass


class EmptyInput(HorizonError):
    pass


class ZeroVector(HorizonError):
    pass


class TooShort(HorizonError):
    pass


class BadAlpha(HorizonError):
    pass


class FrameMismatch(HorizonError):
    pass


class ShapeMismatch(HorizonError):
    pass


class NotScalar(HorizonError):
    pass


class NonFinite(HorizonError):
    """A tensor operation produced NaN or Inf."""


class DivergedLoss(HorizonError):
    def __init__(self, epoch: int, value: float):
        super().__init__(f"loss diverged at epoch {epoch}: {value!r}")
        self.epoch = epoch
        self.value = value
