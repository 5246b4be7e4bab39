"""shiftlab: desk-scale benchmarking of pretraining strategies under
distribution shift.

The package is a plain numpy library: a tiny autodiff engine, convnet
encoders, contrastive pretraining, synthetic shifted datasets, an evaluation
protocol with statistics, an annotation-cost model, and deterministic
reporting.  See README.md for the tour and demos/ for narrative scripts.
"""

import os

# cap BLAS threads before numpy spins up its pools: work units are small, and
# oversubscription across protocol worker processes only slows things down
for _v in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_v, "1")

from . import (
    augment,
    checkpoint,
    config,
    contrastive,
    cost,
    datasynth,
    models,
    optim,
    pipeline,
    report,
    stats,
    svg,
)
from .tensor import (
    GradTape,
    Tensor,
    backward,
    cosine_similarity,
    finite_difference_check,
)

__version__ = "0.1.0"
