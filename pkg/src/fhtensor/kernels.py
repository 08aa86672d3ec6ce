"""Backend selection for the per-transition kernels.

The compiled extension is used when it imports; set ``FHTENSOR_PURE_PYTHON=1``
to force the NumPy fallback.  ``BACKEND`` names the active one.
"""
import os

from fhtensor import _pykernels

SBCGD = 0
BCTD = 1

_ck = None
if os.environ.get("FHTENSOR_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from fhtensor import _ckernels as _ck
    except ImportError:
        _ck = None

_impl = _ck if _ck is not None else _pykernels
BACKEND = "cython" if _ck is not None else "python"

entry = _impl.entry
action_values = _impl.action_values
greedy_action = _impl.greedy_action
transition_update = _impl.transition_update
normalize = _impl.normalize


def get_backend(name):
    """Return the kernel module called ``name`` ("cython" or "python")."""
    if name == "python":
        return _pykernels
    if name == "cython":
        if _ck is None:
            try:
                from fhtensor import _ckernels
            except ImportError as exc:
                raise ImportError("compiled kernels are not built") from exc
            return _ckernels
        return _ck
    raise ValueError(f"unknown backend {name!r}")
