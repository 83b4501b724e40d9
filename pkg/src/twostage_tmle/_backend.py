"""Backend selection for the IRLS kernel.

The compiled Cython kernel is preferred when its extension module built;
otherwise the pure-numpy fallback is used. ``TWOSTAGE_TMLE_BACKEND`` forces
the choice: ``compiled`` raises if the extension is unavailable, ``python``
skips it (useful for the backend-parity tests and the benchmark).
"""

from __future__ import annotations

import os

_requested = os.environ.get("TWOSTAGE_TMLE_BACKEND", "").strip().lower()

if _requested not in ("", "compiled", "python"):
    raise RuntimeError(
        f"TWOSTAGE_TMLE_BACKEND={_requested!r}: expected 'compiled' or 'python'"
    )

if _requested == "python":
    from . import _irls_py as _impl

    BACKEND = "python"
else:
    try:
        from ._core import irls_kernel as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        if _requested == "compiled":
            raise
        from . import _irls_py as _impl  # type: ignore[no-redef]

        BACKEND = "python"

irls = _impl.irls
LINK_LOGIT = _impl.LINK_LOGIT
LINK_LOG = _impl.LINK_LOG


def backend_name() -> str:
    """Name of the active kernel backend ('compiled' or 'python')."""
    return BACKEND
