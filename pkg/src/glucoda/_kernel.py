"""Integration kernel selection: compiled extension if available, else pure Python.

Set GLUCODA_PURE_PYTHON=1 to force the fallback (used by the parity tests and
the kernel benchmark).
"""

from __future__ import annotations

import os

import numpy as np

if os.environ.get("GLUCODA_PURE_PYTHON"):
    from . import _purepy as _impl
else:
    try:
        from . import _core as _impl  # type: ignore[attr-defined]
    except ImportError:
        from . import _purepy as _impl

advance = _impl.advance
STATUS_OK = _impl.STATUS_OK
STATUS_INSULIN_DOMAIN = _impl.STATUS_INSULIN_DOMAIN
STATUS_STEP_UNDERFLOW = _impl.STATUS_STEP_UNDERFLOW
STATUS_STEP_LIMIT = _impl.STATUS_STEP_LIMIT


def kernel_name() -> str:
    return _impl.KERNEL_NAME


def advance_batch(Y, P, t0, t1, nut_t, nut_m, drip_t, drip_r, bol_t, bol_a,
                  rel_tol, abs_tol, max_step, init_step):
    """Advance N particles; always returns numpy (Y_out, statuses, t_errs)."""
    out, statuses, terrs = _impl.advance_batch(
        Y, P, t0, t1, nut_t, nut_m, drip_t, drip_r, bol_t, bol_a,
        rel_tol, abs_tol, max_step, init_step)
    return (np.asarray(out, dtype=np.float64),
            np.asarray(statuses, dtype=np.int64),
            np.asarray(terrs, dtype=np.float64))
