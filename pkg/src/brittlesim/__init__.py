"""Learned perturbation proposals for brittle simulators.

Setting ``BRITTLESIM_THREADS`` before import caps the BLAS/OpenMP thread
pools numpy will use.
"""

import os as _os

_threads = _os.environ.get("BRITTLESIM_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
