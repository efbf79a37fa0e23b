"""Deterministic random-stream management.

Every stochastic stage of the pipeline derives its generators from one
master seed through named substreams, so results are bit-for-bit
reproducible no matter how the work is scheduled across processes.

Substream rule
--------------
A substream is ``SeedSequence(master_seed, spawn_key=(STAGE_TAG, *indices))``.
Stage tags are the module constants below; indices identify the unit of
work (block of Monte Carlo paths, bootstrap resample, replication, ...).
Workers never share a generator: each unit of work builds its own stream
from ``(stage, index)``, and per-unit outputs are reduced in index order,
which makes the result independent of worker count and scheduling.

Monte Carlo paths and simulated patients are striped into fixed-size
blocks (``PATH_BLOCK`` / ``PATIENT_BLOCK``) so the inner loops stay
vectorised; the block size is a constant, never a function of the job
count, so the draws are identical whether one worker or eight process
the blocks.
"""

from __future__ import annotations

import numpy as np

# Stage tags (stable identifiers; changing one changes every downstream draw).
STAGE_PATHS = 1        # Monte Carlo g-computation paths, indexed by path block
STAGE_BOOTSTRAP = 2    # bootstrap resamples, indexed by resample
STAGE_PARTITION = 3    # partition assignment draw (single stream)
STAGE_PATIENTS = 4     # simulated patients, indexed by patient block
STAGE_REPLICATION = 5  # simulation-study replications, indexed by replication
STAGE_HOLDOUT = 6      # goodness-of-fit holdout split (single stream)
STAGE_STUDY_ARM = 7    # per-arm analysis streams inside one replication

PATH_BLOCK = 1024
PATIENT_BLOCK = 256


def substream(master_seed: int, stage: int, *indices: int) -> np.random.Generator:
    """Generator for one unit of work, derived from the master seed.

    The same ``(master_seed, stage, indices)`` always yields the same
    stream; distinct tuples yield statistically independent streams.
    """
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(stage), *map(int, indices)))
    return np.random.default_rng(ss)


def child_seed(master_seed: int, stage: int, *indices: int) -> int:
    """A derived integer seed, for handing a whole sub-pipeline its own master."""
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(stage), *map(int, indices)))
    return int(ss.generate_state(2, dtype=np.uint64)[0])


def blocks(n: int, block: int) -> list[tuple[int, int, int]]:
    """Split ``range(n)`` into fixed-size blocks: (block_index, start, stop)."""
    if n < 0:
        raise ValueError("n must be non-negative")
    out = []
    start = 0
    b = 0
    while start < n:
        stop = min(start + block, n)
        out.append((b, start, stop))
        start = stop
        b += 1
    return out
