"""Exception types raised across the pipeline.

The CLI maps each family onto a distinct exit status (see ``floodseg.cli``).
"""


class FloodSegError(Exception):
    """Base class for all pipeline errors."""


class ContractError(FloodSegError, ValueError):
    """An argument violates a documented precondition (shape, range, size)."""


class DataError(FloodSegError):
    """Problems with the dataset on disk or its contents."""


class UnpairedFilesError(DataError):
    def __init__(self, offenders):
        self.offenders = sorted(str(o) for o in offenders)
        shown = ", ".join(self.offenders[:10])
        more = f" (+{len(self.offenders) - 10} more)" if len(self.offenders) > 10 else ""
        super().__init__(f"{len(self.offenders)} image(s) without a matching mask: {shown}{more}")


class EmptyIndexError(DataError):
    pass


class InvalidLabelError(DataError, ValueError):
    pass


class InvalidOffsetError(FloodSegError, ValueError):
    """Per-class alpha offsets pushed a derived alpha below zero."""


class DivergenceError(FloodSegError, ArithmeticError):
    """Training produced a non-finite loss."""


class CheckpointError(FloodSegError):
    """Checkpoint blob failed its integrity check or does not fit the model config."""


class BackboneLoadError(FloodSegError):
    pass
