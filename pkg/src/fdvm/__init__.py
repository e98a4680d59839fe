"""FDVM: dual-path frequency-domain exposure correction.

The package is self-contained: a float64 autodiff tensor core, Fourier
amplitude/phase decomposition, a selective state-space scan, the dual-path
C-SSM network, exposure-degradation data synthesis, L1/Adam training with
binary checkpoints, PSNR/SSIM evaluation and a CLI tying them together.
"""

import os

# FDVM_THREADS caps BLAS/OpenMP parallelism. Must happen before numpy's
# first import, which is why it lives at the top of the package init.
_threads = os.environ.get("FDVM_THREADS")
if _threads and _threads.isdigit():
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)
del os, _threads

from . import degrade, metrics, model, spectral, ssm, tensor, train  # noqa: E402
from .errors import (ConfigError, ContractError, DomainError, FdvmError,  # noqa: E402
                     FormatError, InputError, NumericError, ShapeError)
from .tensor import Graph, Tensor, backward  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "degrade", "metrics", "model", "spectral", "ssm", "tensor", "train",
    "Tensor", "Graph", "backward",
    "FdvmError", "ShapeError", "DomainError", "ContractError", "ConfigError",
    "FormatError", "InputError", "NumericError",
    "__version__",
]
