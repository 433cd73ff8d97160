"""Shared test setup: recycle large tape arrays on the heap (speed only)."""

from radiart._alloc import raise_malloc_thresholds

raise_malloc_thresholds()
