"""Exception hierarchy shared by every epifuse module."""


class EpifuseError(Exception):
    """Base class; ``code`` is the machine-readable name used by the CLI."""

    @property
    def code(self) -> str:
        return type(self).__name__


class ZeroDepth(EpifuseError):
    pass


class BehindCamera(EpifuseError):
    pass


class DegenerateBaseline(EpifuseError):
    pass


class DegenerateLine(EpifuseError):
    pass


class DegenerateDenominator(EpifuseError):
    pass


class NoConvergence(EpifuseError):
    pass


class AllZero(EpifuseError):
    pass


class InsufficientViews(EpifuseError):
    pass


class AllZeroWeights(EpifuseError):
    pass


class ShapeMismatch(EpifuseError):
    pass


class NonFiniteLoss(EpifuseError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value


class DegenerateSolution(EpifuseError):
    pass


class InsufficientConfidentViews(EpifuseError):
    pass


class NoConsensus(EpifuseError):
    pass


class TooFewVisibleViews(EpifuseError):
    pass


class FormatVersionMismatch(EpifuseError):
    pass


class TruncatedPayload(EpifuseError):
    pass


class EmptySet(EpifuseError):
    pass


class ConfigInvalid(EpifuseError):
    pass


class DatasetMissing(EpifuseError):
    pass


class CheckpointMissing(EpifuseError):
    pass
