"""Worker-count handling and reductions whose result does not depend on it."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

THREADS_ENV = "VOXFIT_NUM_THREADS"

# Leaf size of the summation tree. Fixed, so results never depend on how
# work was split between threads.
SUM_BLOCK = 1024


def num_workers(requested=None):
    """Resolve the worker count: explicit argument, then env var, then 1."""
    if requested is None:
        env = os.environ.get(THREADS_ENV)
        if env:
            try:
                requested = int(env)
            except ValueError:
                requested = 1
        else:
            requested = 1
    return max(1, int(requested))


def tree_sum(partials):
    """Sum a sequence of floats (or equal-shape arrays) pairwise, in order."""
    level = list(partials)
    if not level:
        return 0.0
    while len(level) > 1:
        nxt = [level[i] + level[i + 1] for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0]


def pairwise_sum(values):
    """Deterministic sum of all entries: fixed blocks, then a pairwise tree."""
    flat = np.ascontiguousarray(values, dtype=np.float64).ravel()
    if flat.size <= SUM_BLOCK:
        return float(np.sum(flat))
    partials = [float(np.sum(flat[i:i + SUM_BLOCK]))
                for i in range(0, flat.size, SUM_BLOCK)]
    return float(tree_sum(partials))


def map_blocks(fn, blocks, workers=None):
    """Apply ``fn`` to each block, returning results in block order."""
    workers = num_workers(workers)
    if workers == 1 or len(blocks) == 1:
        return [fn(b) for b in blocks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, blocks))
