"""Seed splitting.

Every random draw in a run comes from ``stream(seed, name, *extra)``, which
seeds a fresh PCG64 generator from the entropy tuple ``(seed, STREAMS[name],
*extra)``. Streams never share state, so adding draws to one stage cannot
shift the numbers another stage sees. ``extra`` carries per-item indices
(sample id, epoch, ...) where a stage needs independent sub-streams.
"""

from __future__ import annotations

import numpy as np

STREAMS = {
    # synthetic corpus
    "corpus-attributes": 1,
    "corpus-render": 2,
    "corpus-captions": 3,
    # dual encoders
    "encoder-init": 10,
    "encoder-batches": 11,
    # perturbation generators and attack training
    "generator-init": 20,
    "noise-seed": 21,
    "attack-order": 22,
    "attack-candidates": 23,
    "augment-noise": 24,
    "reference-set": 25,
    # baselines and evaluation
    "random-noise-uap": 30,
    "oracle-trials": 40,
}


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), STREAMS[name], *(int(e) for e in extra)])
