"""Ranking kernels: compiled extension when available, NumPy fallback otherwise.

The per-user metric and rerank loops dominate sweep evaluation (users x tasks
x methods calls), so they are implemented twice: a Cython extension built at
install time and a pure-NumPy twin.  Selection happens here at import;
set ``PARAGON_PURE_PY=1`` to force the fallback.  ``benchmarks/bench_kernels.py``
compares the two.
"""

import os

from . import _py

if os.environ.get("PARAGON_PURE_PY"):
    _impl = _py
    IMPL = "python"
else:
    try:
        from . import _ext as _impl  # type: ignore[attr-defined]
        IMPL = "compiled"
    except ImportError:
        _impl = _py
        IMPL = "python"

alpha_dcg_at_k = _impl.alpha_dcg_at_k
ideal_alpha_dcg_at_k = _impl.ideal_alpha_dcg_at_k
jaccard_matrix = _impl.jaccard_matrix
mmr_select = _impl.mmr_select

IMPLEMENTATIONS = {"python": _py}
try:
    from . import _ext

    IMPLEMENTATIONS["compiled"] = _ext
except ImportError:
    pass
