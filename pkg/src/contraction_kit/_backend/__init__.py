"""Kernel backend selection.

The hot kernels (symmetric Jacobi eigensolver, tanh-MLP forward/JVP/VJP,
sampled definiteness hinge) exist twice: a Cython extension built at install
time and a pure NumPy fallback.  The extension is used when importable;
``CONTRACTION_KIT_BACKEND=pure|compiled`` forces a choice (raising if the
forced backend is unavailable).
"""

import os

from . import pure

_COMPILED = None
try:
    from . import _kernels as _COMPILED  # type: ignore[attr-defined]
except ImportError:
    _COMPILED = None

_forced = os.environ.get("CONTRACTION_KIT_BACKEND", "").strip().lower()
if _forced == "pure":
    kernels = pure
elif _forced == "compiled":
    if _COMPILED is None:
        raise ImportError(
            "CONTRACTION_KIT_BACKEND=compiled but the extension is not built"
        )
    kernels = _COMPILED
elif _forced == "":
    kernels = _COMPILED if _COMPILED is not None else pure
else:
    raise ImportError(f"unknown CONTRACTION_KIT_BACKEND value: {_forced!r}")

BACKEND_NAME = kernels.BACKEND_NAME


def available_backends():
    """Names of the kernel backends importable in this environment."""
    names = ["pure"]
    if _COMPILED is not None:
        names.insert(0, "compiled")
    return names


def get_kernels(name=None):
    """Return a kernel module by name (default: the selected one)."""
    if name is None:
        return kernels
    if name == "pure":
        return pure
    if name == "compiled":
        if _COMPILED is None:
            raise ValueError("compiled backend is not available")
        return _COMPILED
    raise ValueError(f"unknown backend name: {name!r}")
