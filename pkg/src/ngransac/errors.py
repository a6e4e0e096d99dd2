"""Exception hierarchy shared by all modules."""


class NGRansacError(Exception):
    """Base class for every error raised by this package."""


class DegenerateModel(NGRansacError):
    pass


class ZeroVariance(NGRansacError):
    pass


class CheiralityAmbiguous(NGRansacError):
    pass


class DegenerateMinimalSet(NGRansacError):
    pass


class RankDeficient(NGRansacError):
    pass


class InsufficientSupport(NGRansacError):
    pass


class ResampleBudgetExceeded(NGRansacError):
    pass


class SetTooSmall(NGRansacError):
    pass


class ShapeMismatch(NGRansacError):
    pass


class VersionMismatch(NGRansacError):
    pass


class CorruptModel(NGRansacError):
    pass


class MissingGroundTruth(NGRansacError):
    pass


class NonFiniteLoss(NGRansacError):
    pass


class NoInliers(NGRansacError):
    pass


class EmptyInput(NGRansacError):
    pass
