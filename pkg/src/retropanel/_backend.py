"""Select the compiled kernels when available, else the numpy fallback.

Set ``RETROPANEL_PURE_PYTHON=1`` to force the fallback.
"""

import logging
import os

from . import _kernels_py

logger = logging.getLogger(__name__)

HAS_COMPILED = False
kernels = _kernels_py

if os.environ.get("RETROPANEL_PURE_PYTHON", "").strip() not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # pragma: no cover - depends on the build
        logger.debug("compiled kernels unavailable, using numpy fallback")
    else:
        kernels = _compiled
        HAS_COMPILED = True

BACKEND = "cython" if HAS_COMPILED else "python"

fe_sweeps = kernels.fe_sweeps
twoway_demean = kernels.twoway_demean
scm_eg = kernels.scm_eg
