"""Backend selection for the training round loop.

The compiled extension is used when it imports; set ``METASTAB_PURE=1`` to
force the numpy implementation.
"""
import os

from . import _fallback

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

BACKENDS = {"python": _fallback.run_rounds}
if _compiled is not None:
    BACKENDS["cython"] = _compiled.run_rounds

if os.environ.get("METASTAB_PURE", "") == "1" or _compiled is None:
    BACKEND = "python"
else:
    BACKEND = "cython"

run_rounds = BACKENDS[BACKEND]


def get_backend(name: str | None = None):
    if name is None:
        return run_rounds
    if name not in BACKENDS:
        raise KeyError(f"backend {name!r} unavailable; have {sorted(BACKENDS)}")
    return BACKENDS[name]
