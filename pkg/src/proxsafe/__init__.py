"""Neural signed-distance targets and safe robust proximity control."""
import os

# the TBB layer shipped in some images is too old for numba and only warns
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

__version__ = "0.1.0"
