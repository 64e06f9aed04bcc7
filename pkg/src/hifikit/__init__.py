"""Loss-free scoring of network components by how much of a layer's output
they can reconstruct, with pruning, class unlearning and error bounds built
on top."""

__version__ = "0.1.0"

from . import analysis, data, fidelity, model, modify, numerics, selection  # noqa: E402
from .errors import HiFiError  # noqa: E402

__all__ = ["analysis", "data", "fidelity", "model", "modify", "numerics", "selection", "HiFiError", "__version__"]
