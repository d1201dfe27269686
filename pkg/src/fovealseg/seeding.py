"""One integer seed fanned out into independent named streams."""
import zlib

import numpy as np
import torch


def _key(k) -> int:
    return k if isinstance(k, int) else zlib.crc32(str(k).encode())


def seed_sequence(seed: int, *keys) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), *(_key(k) for k in keys)])


def rng(seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, *keys))


def int_seed(seed: int, *keys) -> int:
    return int(seed_sequence(seed, *keys).generate_state(1, dtype=np.uint32)[0])


def torch_generator(seed: int, *keys) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int_seed(seed, *keys))
    return g
