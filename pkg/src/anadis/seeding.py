"""Named deterministic random streams.

A run owns a single integer seed. Every consumer of randomness derives its
own stream from (seed, name), so adding or removing one consumer never
perturbs the draws seen by the others. Names are hashed with a stable CRC,
not Python's salted ``hash``, so streams are identical across processes.
"""

from __future__ import annotations

import zlib

import numpy as np
import torch

__all__ = ["stream", "stream_seed", "torch_generator", "seed_torch"]


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, name: str) -> np.random.Generator:
    """Return the numpy generator for the stream `name` under `seed`."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), _name_key(name)]))


def stream_seed(seed: int, name: str) -> int:
    """A stable 63-bit integer seed for handing to non-numpy RNGs."""
    ss = np.random.SeedSequence([int(seed), _name_key(name)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def torch_generator(seed: int, name: str) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(stream_seed(seed, name))
    return gen


def seed_torch(seed: int, name: str) -> None:
    """Seed torch's global RNG (dropout masks etc.) from a named stream."""
    torch.manual_seed(stream_seed(seed, name))
