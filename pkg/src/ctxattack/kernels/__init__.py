"""Kernel backend selection.

The compiled extension is preferred when present; the pure-numpy reference
is the fallback. Set CTXATTACK_KERNEL=numpy or =cython to force a backend
(forcing cython raises if the extension is missing).
"""

import os

_requested = os.environ.get("CTXATTACK_KERNEL", "auto")

if _requested not in ("auto", "cython", "numpy"):
    raise ValueError(f"CTXATTACK_KERNEL must be auto, cython, or numpy, got {_requested!r}")

if _requested == "numpy":
    from ._reference import BACKEND_NAME, cell_features, cell_logits, loss_and_grad
else:
    try:
        from ._core import BACKEND_NAME, cell_features, cell_logits, loss_and_grad
    except ImportError:
        if _requested == "cython":
            raise
        from ._reference import BACKEND_NAME, cell_features, cell_logits, loss_and_grad

__all__ = ["BACKEND_NAME", "cell_features", "cell_logits", "loss_and_grad"]
