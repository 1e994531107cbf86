"""Kernel backend selection.

The compiled extension is used when it was built; set ``TWIN_GRAPH_AD_PURE=1``
to force the numpy fallback. Both backends expose the same three functions.
"""
import os

from . import _kernels_py as python_impl

try:
    from . import _kernels as compiled_impl
except ImportError:  # extension not built
    compiled_impl = None

if compiled_impl is not None and not os.environ.get("TWIN_GRAPH_AD_PURE"):
    _impl = compiled_impl
    BACKEND = "compiled"
else:
    _impl = python_impl
    BACKEND = "python"

scatter_add_rows = _impl.scatter_add_rows
accumulate = _impl.accumulate
seq_similarity = _impl.seq_similarity
pair_scores_forward = _impl.pair_scores_forward
pair_scores_backward = _impl.pair_scores_backward
