"""Kernel backend selection.

The compiled Cython module is used when it imports; setting
``MGPKAD_PURE_PYTHON=1`` forces the numpy fallback.
"""

from __future__ import annotations

import os

from . import _pykernels

_kernels = _pykernels
BACKEND = "python"

if os.environ.get("MGPKAD_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels  # type: ignore[attr-defined]
    except ImportError:  # pragma: no cover - depends on build
        pass
    else:
        _kernels = _ckernels
        BACKEND = "cython"

bspline_basis = _kernels.bspline_basis
bspline_basis_deriv = _kernels.bspline_basis_deriv
kdtree_query = _kernels.kdtree_query
mc_triangles = _kernels.mc_triangles


def kernels(name: str):
    """Return the kernel module for ``"cython"`` or ``"python"``."""
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _ckernels  # type: ignore[attr-defined]

        return _ckernels
    raise ValueError(f"unknown backend {name!r}")
