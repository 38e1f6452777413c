"""groupseg: hierarchical vision backbone with learned grouping-based
downsampling, whose composed assignments give segmentation directly from the
backbone."""

import os

# cap BLAS worker threads before numpy spins up its pools
_threads = os.environ.get("NSVT_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)
del os, _threads

__version__ = "0.1.0"
