"""Ghost-dil-NetVLAD place recognition: cost model, checkpoints, descriptors and search."""

from ._gdnv import (
    DataError,
    Index,
    Model,
    NumericalError,
    compare,
    cost,
    gradcheck,
)

__all__ = ["DataError", "Index", "Model", "NumericalError", "compare", "cost", "gradcheck"]
