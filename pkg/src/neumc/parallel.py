"""Deterministic chunked execution of path ensembles.

Work is split into fixed-size chunks of paths regardless of worker count;
each chunk draws from its own child RNG stream and returns small partial
reductions.  Partials are combined in chunk-index order, so the final
numbers are bit-identical for 1 or N workers.

Workers are forked processes.  The task callable is published through a
module global immediately before the pool is created, so forked children
inherit it without pickling (closures over numpy arrays are fine).
"""
from __future__ import annotations

import multiprocessing
from concurrent.futures import ProcessPoolExecutor

_ACTIVE_TASK = None


def _run_chunk(args):
    index, n_in_chunk = args
    return _ACTIVE_TASK(index, n_in_chunk)


def chunk_sizes(total: int, chunk: int):
    """Fixed chunk layout: every chunk has ``chunk`` paths except the last."""
    sizes = []
    done = 0
    while done < total:
        n = min(chunk, total - done)
        sizes.append(n)
        done += n
    return sizes


def map_chunks(task, total: int, chunk: int, workers: int = 1):
    """Run ``task(chunk_index, n_in_chunk)`` for every chunk; return results
    ordered by chunk index.

    ``task`` must derive all randomness from its chunk index (child seeds),
    never from shared state.
    """
    global _ACTIVE_TASK
    sizes = chunk_sizes(total, chunk)
    jobs = list(enumerate(sizes))
    if workers <= 1 or len(jobs) == 1:
        return [task(i, n) for i, n in jobs]
    _ACTIVE_TASK = task
    try:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            results = list(pool.map(_run_chunk, jobs))
    finally:
        _ACTIVE_TASK = None
    return results
