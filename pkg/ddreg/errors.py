"""
Exceptions raised by ddreg.

Everything derives from `ValueError` so callers that only care about bad input
can keep catching the builtin, while the CLI can tell validation problems
(exit code 1) apart from runtime failures (exit code 2).
"""

from typing import Optional


class DdregError(ValueError):
    """Base class for all ddreg validation errors"""


class GridMismatchError(DdregError):
    """Two objects that must share a grid do not"""


class ShapeError(DdregError):
    """An array or tensor has an unusable shape"""


class NonFiniteError(DdregError):
    """Input contains NaN or infinite values"""


class EmptyMaskError(DdregError):
    """A label map contains no labelled voxels, the sample is unusable"""


class LabelNotFoundError(DdregError):
    """A requested label is not present in a non-empty label map"""


class TpsFitError(DdregError):
    """The thin-plate-spline system is singular or ill-conditioned"""


class ConfigurationError(DdregError):
    """A configuration is internally inconsistent"""


class DatasetError(DdregError):
    """A dataset or pair manifest is empty or malformed"""


class UsageError(DdregError):
    """Command-line arguments could not be parsed"""


class CheckpointMismatchError(DdregError):
    """A checkpoint does not fit the requested network configuration"""

    def __init__(self, message: str, tensors: Optional[list] = None):
        super().__init__(message)
        self.tensors = tensors or []


class NonFiniteLossError(DdregError):
    """A loss term evaluated to NaN or infinity during training"""

    def __init__(self, term: str, sample: Optional[int] = None, value: float = float("nan")):
        where = f" at sample {sample}" if sample is not None else ""
        super().__init__(f"Loss term {term!r} is not finite ({value}){where}")
        self.term = term
        self.sample = sample
        self.value = value
