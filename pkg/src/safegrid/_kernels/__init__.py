"""Kernel backend selection: compiled extension if built, numpy fallback otherwise.

Set SAFEGRID_PURE=1 to force the pure-python backend (used by the benchmark
and the backend-equivalence tests).
"""

import os

if os.environ.get("SAFEGRID_PURE"):
    from safegrid._kernels import _ref as _impl
else:
    try:
        from safegrid._kernels import _fast as _impl  # type: ignore[attr-defined]
    except ImportError:
        from safegrid._kernels import _ref as _impl

BACKEND = _impl.BACKEND
conformal_pvalues = _impl.conformal_pvalues
step_up_kstar = _impl.step_up_kstar
panel_reject_counts = _impl.panel_reject_counts

__all__ = ["BACKEND", "conformal_pvalues", "step_up_kstar", "panel_reject_counts"]
