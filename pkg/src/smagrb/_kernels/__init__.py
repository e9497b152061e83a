"""Element-level assembly kernels with a compiled fast path.

The compiled Cython module ``_speedups`` is preferred when it imported
cleanly; otherwise the pure-numpy ``fallback`` module provides the same
functions.  Setting the environment variable ``SMAGRB_PURE_PYTHON=1``
before import forces the fallback, which the parity tests and the kernel
benchmark use to compare both implementations.

All kernels take pre-gathered per-element arrays and return per-element
local matrices or quadrature-point fields; sparsity handling lives one
layer up in :mod:`smagrb.assembly`.
"""

import os

from . import fallback

_FORCE_FALLBACK = os.environ.get("SMAGRB_PURE_PYTHON", "") == "1"

if _FORCE_FALLBACK:
    _impl = fallback
    BACKEND = "fallback"
else:
    try:
        from . import _speedups as _impl

        BACKEND = "compiled"
    except ImportError:
        _impl = fallback
        BACKEND = "fallback"


def _select(name):
    fn = getattr(_impl, name, None)
    return fn if fn is not None else getattr(fallback, name)


field_gradients = _select("field_gradients")
field_values = _select("field_values")
frobenius_norm = _select("frobenius_norm")
weighted_stiffness_local = _select("weighted_stiffness_local")
weighted_mass_local = _select("weighted_mass_local")
convection_local = _select("convection_local")
convection_dual_local = _select("convection_dual_local")
rank_one_viscosity_local = _select("rank_one_viscosity_local")
divergence_local = _select("divergence_local")

__all__ = [
    "BACKEND",
    "field_gradients",
    "field_values",
    "frobenius_norm",
    "weighted_stiffness_local",
    "weighted_mass_local",
    "convection_local",
    "convection_dual_local",
    "rank_one_viscosity_local",
    "divergence_local",
]
