"""Named random streams derived from one global seed.

Each subsystem (anatomy, drops, noise, init, schedule, condition) draws from
its own stream so that changing one stage never shifts another's draws.
"""

from __future__ import annotations

import contextlib
import zlib
from typing import Iterator

import numpy as np
import torch


def _label_words(labels: tuple[object, ...]) -> list[int]:
    words: list[int] = []
    for label in labels:
        if isinstance(label, (int, np.integer)) and not isinstance(label, bool):
            words.append(int(label) & 0xFFFFFFFF)
        else:
            words.append(zlib.crc32(str(label).encode()))
    return words


def derive_seed(seed: int, *labels: object) -> int:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *_label_words(labels)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def rng_stream(seed: int, *labels: object) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *_label_words(labels)]))


def epoch_seed(global_seed: int, epoch: int) -> int:
    return derive_seed(global_seed, "schedule", epoch)


@contextlib.contextmanager
def torch_seeded(seed: int, *labels: object) -> Iterator[None]:
    """Run a block under a private torch CPU RNG state, restoring the outer one."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, *labels))
        yield
