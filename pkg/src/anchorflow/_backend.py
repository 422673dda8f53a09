"""Kernel backend selection.

The compiled extension is preferred; set ``ANCHORFLOW_PURE=1`` to force the
NumPy fallback.
"""
from __future__ import annotations

import os

from . import _fallback

NAME = "python"
kernels = _fallback

if os.environ.get("ANCHORFLOW_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        kernels = _compiled
        NAME = "compiled"


def use(name: str) -> None:
    """Switch backend at runtime (``"compiled"`` or ``"python"``)."""
    global kernels, NAME
    if name == "python":
        kernels, NAME = _fallback, "python"
    elif name == "compiled":
        from . import _kernels as _compiled

        kernels, NAME = _compiled, "compiled"
    else:
        raise ValueError(f"unknown backend {name!r}")
