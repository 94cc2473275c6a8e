"""Goal-conditioned fabric folding with a fully-convolutional Q-network.

The package is a small simulator (``sim``), a numpy Q-network (``qfcn``),
the rotate-and-scale action space (``actions``), offline data and
hindsight relabelling (``dataset``), the DQN trainer (``trainer``) and the
evaluation harness (``evaluation``).
"""

import os as _os

# FOLDCRAFT_THREADS caps BLAS worker threads.  It has to be applied before
# numpy is first imported to take effect.
_threads = _os.environ.get("FOLDCRAFT_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
