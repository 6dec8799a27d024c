"""CNN-Mamba segmentation engine.

Core pieces: a numpy-backed autodiff tensor, selective state-space scan
kernels (sequential oracle + parallel), the four-direction 2D scan, gated
SSM decoder blocks with multi-scale skip fusion, and the training /
evaluation toolchain around them.
"""

from .tensor import (Tensor, Parameter, no_grad, set_seed, set_deterministic,
                     finite_diff_grad, REAL32, REAL64)
from .errors import (EngineError, DimensionError, ContractError, DataError,
                     FormatError, ConfigError)

__version__ = "0.1.0"
