"""Kernel backend selection.

The compiled extension is preferred when present; DIOMP_KERNELS=py forces
the numpy fallback and DIOMP_KERNELS=cy demands the extension (ImportError
if it is missing). Both backends produce bitwise-identical results, so the
choice never affects correctness, only speed.
"""

from __future__ import annotations

import os

from . import reference

_choice = os.environ.get("DIOMP_KERNELS", "auto").lower()

if _choice == "py":
    _impl = reference
    BACKEND = "py"
else:
    try:
        from . import _core as _impl   # type: ignore[no-redef]
        BACKEND = "cy"
    except ImportError:
        if _choice == "cy":
            raise
        _impl = reference
        BACKEND = "py"

stencil_update = _impl.stencil_update
matmul_f64 = _impl.matmul_f64


def backends() -> dict[str, object]:
    """All importable backends, keyed by name (used by the benchmark)."""
    out = {"py": reference}
    try:
        from . import _core
        out["cy"] = _core
    except ImportError:
        pass
    return out
