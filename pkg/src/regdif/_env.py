"""Pin BLAS thread counts before numpy loads.

Multi-threaded BLAS kernels can change summation order with the thread
count, which would break the bit-identical-output guarantee across
``--jobs`` settings. Only defaults are set; variables already present in
the environment win.
"""

import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, "1")
