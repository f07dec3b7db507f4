"""Seed derivation and thread control shared by every stage."""
from __future__ import annotations

import contextlib
import hashlib
import os

import numpy as np
from threadpoolctl import threadpool_limits


def derive_seed(master: int, *parts: object) -> int:
    """Stable 63-bit seed from a master seed and a purpose path, e.g. ``(7, "init", "gap-head-small")``."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(master)).encode())
    for p in parts:
        h.update(b"\x1f")
        h.update(str(p).encode())
    return int.from_bytes(h.digest(), "little") >> 1


def derive_rng(master: int, *parts: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *parts))


def worker_count() -> int:
    """Worker cap from ``$CAMSEG_THREADS`` (default 1, the deterministic single-threaded mode)."""
    raw = os.environ.get("CAMSEG_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"CAMSEG_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"CAMSEG_THREADS must be a positive integer, got {raw!r}")
    return n


@contextlib.contextmanager
def blas_threads(n: int | None = None):
    """Pin BLAS thread pools so reductions happen in a fixed order."""
    with threadpool_limits(limits=worker_count() if n is None else n):
        yield
