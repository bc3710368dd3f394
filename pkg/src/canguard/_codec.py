"""Codec lane selection: compiled kernel when importable, else pure Python.

Set ``CANGUARD_PURE=1`` to force the fallback lane (used by the benchmark
and the lane-parity tests).
"""

import os

from . import _codec_py

if os.environ.get("CANGUARD_PURE"):
    impl = _codec_py
    BACKEND = "python"
else:
    try:
        from . import _codec_c as impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        impl = _codec_py
        BACKEND = "python"
