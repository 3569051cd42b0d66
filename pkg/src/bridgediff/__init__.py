"""bridgediff: desk-scale Brownian-bridge diffusion for paired
image-to-image translation, with a Gaussian conditional-diffusion baseline.
"""

import os

__version__ = "0.1.0"

# The hot loop is many small GEMMs; multithreaded BLAS loses to thread
# overhead there. Default to one BLAS thread unless told otherwise.
_blas_threads = os.environ.get("BRIDGEDIFF_BLAS_THREADS", "1")
if _blas_threads != "0":
    try:
        from threadpoolctl import threadpool_limits
        _blas_limit = threadpool_limits(limits=int(_blas_threads), user_api="blas")
    except Exception:
        pass

from .rng import Rng
from .tensor import Tensor

__all__ = ["Rng", "Tensor", "__version__"]
