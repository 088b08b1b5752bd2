"""Margin measurement lab: exact input-space classification margins for
small ReLU MLPs trained on clean or deliberately corrupted image data.

Importing the package pins BLAS to a single thread (before numpy loads a
threadpool) so that all numeric results are independent of machine core
count and of the process-level worker count used to parallelize work.
"""

import os

for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

__version__ = "0.1.0"

from . import data, model, solver, geometry, analytics, synth, manifest  # noqa: E402,F401
