"""Variational inference for non-linear latent force models with masked local IAFs."""

import os as _os

# LFM_THREADS caps BLAS worker threads; it must be set before numpy loads.
if "LFM_THREADS" in _os.environ:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["LFM_THREADS"])

from lfmflow.errors import (  # noqa: E402
    ConfigError,
    DataError,
    LFMError,
    NumericalError,
    ShapeError,
    SimulationError,
    TraceError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "LFMError",
    "NumericalError",
    "ShapeError",
    "SimulationError",
    "TraceError",
]
