"""
Seed derivation and global random state control
"""

import logging
import random

import numpy as np
import torch

logger = logging.getLogger(__name__)


def derive_seed(*keys):
    """Stable 32-bit seed from a tuple of non-negative integers.

    SeedSequence hashing is platform independent, so the same keys give the
    same seed everywhere.
    """
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def make_rng(*keys):
    return np.random.default_rng(derive_seed(*keys))


def seed_everything(seed, determinism="strict"):
    """Seed python, numpy and torch; in strict mode also force deterministic kernels"""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)

    if determinism == "strict":
        torch.use_deterministic_algorithms(True, warn_only=True)
        if torch.backends.cudnn.is_available():
            torch.backends.cudnn.benchmark = False
            torch.backends.cudnn.deterministic = True
    else:
        torch.use_deterministic_algorithms(False)
        if torch.backends.cudnn.is_available():
            torch.backends.cudnn.benchmark = True

    logger.debug("Seeded run with %d (determinism=%s)", seed, determinism)


def torch_generator(seed):
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen
