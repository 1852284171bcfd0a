import numpy as np
import torch


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Counter-based generator keyed by (seed, *keys); independent of call order."""
    ss = np.random.SeedSequence([int(seed), *[int(k) for k in keys]])
    return np.random.Generator(np.random.Philox(ss))


def seed_torch(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
