"""Process-level tuning for the small-array workload of the numpy engine."""

from __future__ import annotations

import ctypes
import ctypes.util
import logging

log = logging.getLogger(__name__)

# glibc mallopt parameter ids
_M_TRIM_THRESHOLD = -1
_M_TOP_PAD = -2
_M_MMAP_THRESHOLD = -3

_tuned = False


def tune_allocator(mmap_threshold: int = 64 << 20) -> bool:
    """Keep mid-sized temporaries on the heap instead of fresh mmap pages.

    glibc serves allocations above 128 KiB with mmap and returns them on free,
    so every elementwise op on a (160, 192) float64 array page-faults. Raising
    the threshold makes training steps several times cheaper in elementwise
    work. Returns False (and changes nothing) off glibc.
    """
    global _tuned
    if _tuned:
        return True
    name = ctypes.util.find_library("c")
    try:
        libc = ctypes.CDLL(name)
        mallopt = libc.mallopt
    except (OSError, AttributeError, TypeError):
        log.debug("mallopt unavailable; allocator left as is")
        return False
    ok = mallopt(_M_MMAP_THRESHOLD, mmap_threshold) == 1
    ok = mallopt(_M_TRIM_THRESHOLD, 2 * mmap_threshold) == 1 and ok
    ok = mallopt(_M_TOP_PAD, mmap_threshold) == 1 and ok
    _tuned = ok
    return ok
