"""Shared test configuration.

BLAS pools are capped before numpy loads (the suite runs thousands of
small matrix products where multithreaded kernels are slower), and the
expensive trained-model fixtures live here so the acceptance criteria can
share training runs.
"""

import os
import sys

for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

sys.path.insert(0, os.path.dirname(__file__))
