"""Reproducible random streams and block-parallel execution.

Every estimator splits its work into fixed-size blocks. Each block draws
from its own counter-based Philox stream keyed by ``(seed, tag, block)``,
so the numbers produced do not depend on how blocks are spread over
worker processes.
"""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = ["make_rng", "spawn", "block_sizes", "map_blocks", "run_blocks", "resolve_seed", "tag_key"]

SEED_ENV = "KESTENLAB_SEED"
BLOCK = 1 << 14


def tag_key(tag: str) -> int:
    """Stable 32-bit integer for a text tag."""
    return int.from_bytes(hashlib.sha256(tag.encode()).digest()[:4], "little")


def make_rng(seed: int, *key: int | str) -> np.random.Generator:
    """Philox generator for ``seed`` and an optional key path."""
    spawn_key = tuple(tag_key(k) if isinstance(k, str) else int(k) for k in key)
    ss = np.random.SeedSequence(int(seed), spawn_key=spawn_key)
    return np.random.Generator(np.random.Philox(ss))


def spawn(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """``n`` independent child generators derived from ``rng``'s seed sequence."""
    return rng.spawn(n)


def block_sizes(n_total: int, block: int = BLOCK) -> list[int]:
    """Split ``n_total`` into consecutive blocks of at most ``block`` items."""
    n_total = int(n_total)
    if n_total <= 0:
        return []
    full, rest = divmod(n_total, block)
    return [block] * full + ([rest] if rest else [])


def map_blocks(func: Callable, tasks: Sequence[tuple], workers: int = 1) -> list:
    """Evaluate ``func(*task)`` for every task, preserving order.

    With ``workers > 1`` a process pool is used; ``func`` and the tasks
    must then be picklable.
    """
    if workers <= 1 or len(tasks) <= 1:
        return [func(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(func, *t) for t in tasks]
        return [f.result() for f in futures]


def run_blocks(func: Callable, sizes: Sequence[int], rng: np.random.Generator, workers: int = 1, args: tuple = ()) -> list:
    """Call ``func(size, child_rng, *args)`` for each block size in order.

    Child generators are spawned from ``rng`` before any work starts, so
    the result list is the same for every ``workers`` value.
    """
    children = spawn(rng, len(sizes))
    return map_blocks(func, [(m, g) + tuple(args) for m, g in zip(sizes, children)], workers)


def resolve_seed(seed: int | None, default: int = 0) -> int:
    """Seed from the environment override, else ``seed``, else ``default``."""
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        return int(env)
    return default if seed is None else int(seed)


def concat(parts: Iterable[np.ndarray]) -> np.ndarray:
    parts = list(parts)
    return np.concatenate(parts) if parts else np.empty(0)
