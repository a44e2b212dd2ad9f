"""Shared helpers: seed derivation and chunked parallel map."""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from typing import Callable

import numpy as np


def derive_seed(base: int, label: str) -> int:
    """Stable 63-bit sub-seed for a named pipeline stage.

    Hash-based so stages draw from unrelated streams even when the user
    supplies small consecutive global seeds.
    """
    digest = hashlib.sha256(f"{int(base)}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def path_rng(seed: int, path_index: int) -> np.random.Generator:
    """Counter-based per-path substream; independent of generation order."""
    key = np.array([np.uint64(seed), np.uint64(path_index)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def run_chunked(fn: Callable[[int, int], None], n: int, threads: int = 1,
                min_chunk: int = 64) -> None:
    """Apply fn(start, stop) over [0, n) in disjoint chunks.

    Callers write to disjoint output slices, so threading is safe and the
    result is independent of scheduling order.
    """
    threads = max(1, int(threads))
    if threads == 1 or n <= min_chunk:
        fn(0, n)
        return
    chunk = max(min_chunk, (n + threads - 1) // threads)
    bounds = [(s, min(s + chunk, n)) for s in range(0, n, chunk)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(lambda b: fn(*b), bounds))
