"""Root-seed splitting so each subsystem draws from its own reproducible stream."""
import numpy as np

STREAMS = {"init": 0, "noise": 1, "dropout": 2, "shuffle": 3, "mask": 4, "data": 5}


def derive_rng(seed: int, stream: str, *keys: int) -> np.random.Generator:
    """Generator determined only by ``(seed, stream, *keys)``."""
    return np.random.default_rng([int(seed), STREAMS[stream], *map(int, keys)])
