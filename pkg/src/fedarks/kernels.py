"""Backend selection for the hot kernels.

The compiled extension ``fedarks._kernels`` is used when it imports; the
NumPy module ``fedarks._kernels_py`` is used otherwise.  Set
``FEDARKS_KERNELS=python`` to force the fallback or ``FEDARKS_KERNELS=ext``
to make a missing extension an error.
"""

import os

from . import _kernels_py

_choice = os.environ.get("FEDARKS_KERNELS", "auto").lower()

if _choice == "python":
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        if _choice == "ext":
            raise
        _impl = _kernels_py

BACKEND = "ext" if _impl is not _kernels_py else "python"


def available_backends():
    """Mapping of backend name to kernel module, for tests and benchmarks."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels

        out["ext"] = _kernels
    except ImportError:
        pass
    return out


weighted_sum = _impl.weighted_sum
pairwise_sqdist = _impl.pairwise_sqdist
batch_hard_mine = _impl.batch_hard_mine
rank_queries = _impl.rank_queries
