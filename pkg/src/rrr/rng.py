"""Named random substreams derived from one master seed.

Each feature draws from its own stream so that toggling one component
(e.g. SmoothGrad noise) never shifts the randomness seen by another.
"""
import zlib

import numpy as np
import torch


def substream_seed(master: int, name: str) -> int:
    ss = np.random.SeedSequence([int(master) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def numpy_rng(master: int, name: str) -> np.random.Generator:
    return np.random.default_rng(substream_seed(master, name))


def torch_generator(master: int, name: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(substream_seed(master, name))
    return g
