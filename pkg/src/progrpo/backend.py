"""Kernel backend selection.

The compiled Cython extension is preferred when importable; otherwise the
numpy fallback is used. PROGRPO_BACKEND={compiled,numpy} forces the choice
(forcing "compiled" raises if the extension is missing rather than silently
degrading).
"""

import os

_forced = os.environ.get("PROGRPO_BACKEND", "").strip().lower()

if _forced == "numpy":
    from . import _kernels_np as _impl

    BACKEND = "numpy"
elif _forced == "compiled":
    from . import _kernels as _impl  # type: ignore[attr-defined]

    BACKEND = "compiled"
elif _forced == "":
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "compiled"
    except ImportError:
        from . import _kernels_np as _impl

        BACKEND = "numpy"
else:
    raise ValueError(f"unknown PROGRPO_BACKEND value: {_forced!r}")

mlp_forward = _impl.mlp_forward
mlp_backward = _impl.mlp_backward
