"""Allocator hint for training workloads.

The tape engine cycles many large short-lived arrays per step. With glibc
defaults those exceed the mmap threshold, so every step returns pages to the
kernel and faults them back in, which dominates runtime on small machines.
Raising the mmap/trim thresholds keeps the blocks on the recycled heap.
Entry points opt in explicitly; importing the library changes nothing.
"""

from __future__ import annotations

import ctypes
import ctypes.util

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3


def raise_malloc_thresholds(limit: int = 1 << 30) -> bool:
    """Best effort; returns False on non-glibc platforms."""
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c"), use_errno=True)
        ok1 = libc.mallopt(_M_MMAP_THRESHOLD, limit)
        ok2 = libc.mallopt(_M_TRIM_THRESHOLD, limit)
        return bool(ok1 and ok2)
    except (OSError, AttributeError, TypeError):
        return False
