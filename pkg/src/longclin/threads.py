"""Worker-thread cap from the ``LCE_THREADS`` environment variable."""
from __future__ import annotations

import os

ENV_VAR = "LCE_THREADS"
_BLAS_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def worker_count() -> int:
    raw = os.environ.get(ENV_VAR, "")
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{ENV_VAR} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"{ENV_VAR} must be a positive integer, got {raw!r}")
    return n


def cap_blas_threads() -> None:
    """Propagate the cap to BLAS; only effective before numpy is first imported."""
    raw = os.environ.get(ENV_VAR)
    if raw:
        for var in _BLAS_VARS:
            os.environ.setdefault(var, raw)
