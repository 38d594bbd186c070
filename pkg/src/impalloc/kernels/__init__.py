"""Hot-loop kernels with a compiled core and a numpy fallback.

The compiled extension is picked at import time when it is importable;
setting ``IMPALLOC_PURE=1`` forces the fallback. Both backends expose the
same three functions and are checked against each other in the tests.
"""

import os

from . import _pykernels as python

BACKEND = "python"
compiled = None

if os.environ.get("IMPALLOC_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as compiled
    except ImportError:  # extension not built
        compiled = None

if compiled is not None:
    auction_pass = compiled.auction_pass
    msvv_pass = compiled.msvv_pass
    transport_ssp = compiled.transport_ssp
    rule_assignment = compiled.rule_assignment
    BACKEND = "cython"
else:
    auction_pass = python.auction_pass
    msvv_pass = python.msvv_pass
    transport_ssp = python.transport_ssp
    rule_assignment = python.rule_assignment

__all__ = ["BACKEND", "auction_pass", "msvv_pass", "transport_ssp", "rule_assignment", "python", "compiled"]
