"""Backend selection for the tabular hot loop.

The Cython extension is used when it is importable and
``FAIRDICE_PURE_PYTHON`` is unset; otherwise the numpy fallback.
"""

import os

from fairdice import _tabular_py

ALPHA_FAIR = _tabular_py.ALPHA_FAIR
PIECEWISE_LOG = _tabular_py.PIECEWISE_LOG

_impl = _tabular_py
BACKEND = "python"
if not os.environ.get("FAIRDICE_PURE_PYTHON"):
    try:
        from fairdice import _tabular_ext as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        _impl = _tabular_py

loss_and_grad = _impl.loss_and_grad
adam_solve = _impl.adam_solve
