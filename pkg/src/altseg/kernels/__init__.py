"""Backend selection for the hot numeric kernels.

The environment variable ``ALTSEG_KERNELS`` picks the implementation:

  * ``auto`` (default): numba if it imports, else pure numpy
  * ``numba``: require the jitted kernels, fail loudly if numba is missing
  * ``numpy``: force the pure-numpy fallback

Both backends expose the same functions with the same semantics; see
``benchmarks/bench_kernels.py`` for a side-by-side timing comparison.
"""

import os

_choice = os.environ.get("ALTSEG_KERNELS", "auto").strip().lower()

if _choice in ("auto", "numba"):
    try:
        from altseg.kernels import numba_backend as _impl
    except ImportError:
        if _choice == "numba":
            raise
        from altseg.kernels import numpy_backend as _impl
elif _choice == "numpy":
    from altseg.kernels import numpy_backend as _impl
else:
    raise RuntimeError(
        f"ALTSEG_KERNELS={_choice!r} not understood; use auto, numba or numpy"
    )

BACKEND = _impl.BACKEND

conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
bilinear_forward = _impl.bilinear_forward
bilinear_backward = _impl.bilinear_backward
local_attn_forward = _impl.local_attn_forward
local_attn_backward = _impl.local_attn_backward
global_attn_forward = _impl.global_attn_forward
global_attn_backward = _impl.global_attn_backward
sad_search = _impl.sad_search
