"""
Seeding. Every random draw in the package comes from a numpy Generator
derived from the run seed; torch is seeded too so that any torch-side
randomness is reproducible.
"""
import logging

import numpy as np
import torch

logger = logging.getLogger(__name__)


def seed_everything(seed: int, deterministic: bool = False) -> np.random.Generator:
    """Seed torch and return the root numpy Generator for ``seed``.

    With ``deterministic`` torch is restricted to deterministic kernels and a
    single intra-op thread, so reductions run in a fixed order.
    """
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
        logger.debug("Deterministic mode: one torch thread, deterministic kernels")
    return np.random.default_rng(seed)
