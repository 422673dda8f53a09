"""Anchor-guided GRPO for flow-matching policies on a synthetic retouching task."""
from ._backend import NAME as backend

__version__ = "0.1.0"

__all__ = ["backend", "__version__"]
