"""Long-context sparse-attention encoders for clinical-style text."""
from .threads import cap_blas_threads as _cap

_cap()

__version__ = "0.1.0"
