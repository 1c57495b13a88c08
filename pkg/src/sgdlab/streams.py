"""Reproducible random streams for trajectory ensembles.

Trajectories are grouped into fixed blocks of lanes. Each block owns a
Philox generator keyed by ``(root_seed, block_index)``, so the draws of a
trajectory depend only on the root seed, its index and the ensemble size,
never on how blocks are scheduled across threads.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

BLOCK_LANES = 1024


def block_layout(n_traj: int, lanes: int = BLOCK_LANES) -> list:
    """``(start, stop)`` index ranges of the trajectory blocks."""
    b = min(lanes, n_traj)
    return [(s, min(s + b, n_traj)) for s in range(0, n_traj, b)]


def block_generator(root_seed: int, block: int, tag: int = 0) -> np.random.Generator:
    """Counter-based generator for one block; ``tag`` separates experiment phases."""
    ss = np.random.SeedSequence([int(root_seed), int(tag), int(block)])
    return np.random.Generator(np.random.Philox(ss))


def map_blocks(fn, n_traj: int, root_seed: int, tag: int = 0, n_jobs: int = 1,
               lanes: int = BLOCK_LANES) -> list:
    """Apply ``fn(start, stop, rng)`` to every block and return results in block order."""
    layout = block_layout(n_traj, lanes)
    jobs = [(a, b, block_generator(root_seed, k, tag)) for k, (a, b) in enumerate(layout)]
    if n_jobs <= 1 or len(jobs) == 1:
        return [fn(*j) for j in jobs]
    with ThreadPoolExecutor(max_workers=n_jobs) as ex:
        return list(ex.map(lambda j: fn(*j), jobs))
