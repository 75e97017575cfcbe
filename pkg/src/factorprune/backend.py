"""Kernel backend selection.

Imports the compiled extension when available, otherwise the numpy
fallback. Set FACTORPRUNE_PURE_PYTHON=1 to force the fallback (used by
tests and the kernel benchmark).
"""

import os

if os.environ.get("FACTORPRUNE_PURE_PYTHON"):
    from . import _slowops as kernels

    COMPILED = False
else:
    try:
        from . import _fastops as kernels  # type: ignore[no-redef]

        COMPILED = True
    except ImportError:
        from . import _slowops as kernels  # type: ignore[no-redef]

        COMPILED = False


def backend_name():
    return "compiled" if COMPILED else "numpy"
