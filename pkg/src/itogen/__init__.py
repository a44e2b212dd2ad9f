"""Drift/diffusion learning for Ito processes with Neural Jump ODEs, and
generative Euler-Maruyama sampling from the learned coefficients."""

import os as _os
import sys as _sys

# the workload is thousands of small matrix products; multithreaded BLAS
# roughly doubles wall time on them, so default to single-threaded kernels
# unless the user configured the pools or numpy is already loaded
if "numpy" not in _sys.modules:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                 "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, "1")

from .errors import (ConfigError, DataError, EstimationDomainError,
                     ItogenError, SimulationDivergenceError,
                     TrainingDivergenceError)
from .sde import (ObservationSequence, PathDataset, SdeSpec, load_dataset,
                  observe, save_dataset, simulate, simulate_exact_gbm,
                  simulate_exact_ou, split)

__version__ = "0.1.0"
