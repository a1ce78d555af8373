"""Modality-consistent batch scheduling.

Samples are grouped by (dataset id, availability), each group is padded to a
multiple of the batch size by duplicating random members, shuffled and cut
into batches, and the batches of all groups are shuffled together.  Every
batch therefore shares a single key, so one set of encoder streams and one
conditioning identifier serve the whole batch.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from pmmsynth.datamodel import ModalityMask
from pmmsynth.errors import ConfigError, ValidationError


@dataclass(frozen=True)
class GroupKey:
    dataset_id: int
    availability: ModalityMask

    def __lt__(self, other: "GroupKey") -> bool:
        return (self.dataset_id, self.availability.bits) < (other.dataset_id, other.availability.bits)


@dataclass(frozen=True)
class Batch:
    key: GroupKey
    refs: tuple[str, ...]


@dataclass(frozen=True)
class BatchPlan:
    batches: tuple[Batch, ...]
    batch_size: int
    epoch_seed: int

    def __len__(self) -> int:
        return len(self.batches)

    def __iter__(self):
        return iter(self.batches)

    def batch_counts(self) -> Counter:
        return Counter(b.key for b in self.batches)

    def to_lines(self, epoch: int) -> list[str]:
        return [
            ",".join(
                [str(epoch), str(i), str(b.key.dataset_id), b.key.availability.to_string(), *b.refs]
            )
            for i, b in enumerate(self.batches)
        ]

    def dump(self, path: str | Path, epoch: int, append: bool = False) -> None:
        with open(path, "a" if append else "w") as fh:
            for line in self.to_lines(epoch):
                fh.write(line + "\n")


def _sample_key(s: Any) -> GroupKey:
    return GroupKey(int(s.dataset_id), s.availability)


def group_samples(samples: Iterable[Any]) -> dict[GroupKey, list[str]]:
    """Partition samples by (dataset_id, availability).

    Members are listed in (case_id, slice_index) order so that the grouping
    is independent of the order samples were handed in.
    """
    members: dict[GroupKey, list[Any]] = {}
    for s in samples:
        members.setdefault(_sample_key(s), []).append(s)
    return {
        key: [s.sample_id for s in sorted(group, key=lambda s: s.sort_key)]
        for key, group in sorted(members.items())
    }


def pad_group(group: Sequence[str], batch_size: int, rng: np.random.Generator) -> list[str]:
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}", field="batch_size")
    if len(group) == 0:
        raise ValidationError("cannot pad an empty group")
    deficit = (-len(group)) % batch_size
    extra = rng.integers(0, len(group), size=deficit) if deficit else []
    return list(group) + [group[int(i)] for i in extra]


def build_epoch_plan(groups: Mapping[GroupKey, Sequence[str]], batch_size: int, epoch_seed: int) -> BatchPlan:
    if not groups:
        raise ConfigError("no sample groups to schedule", field="corpus")
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}", field="batch_size")
    rng = np.random.default_rng(epoch_seed)
    batches: list[Batch] = []
    for key in sorted(groups):
        padded = pad_group(groups[key], batch_size, rng)
        order = rng.permutation(len(padded))
        shuffled = [padded[i] for i in order]
        for start in range(0, len(shuffled), batch_size):
            batches.append(Batch(key, tuple(shuffled[start : start + batch_size])))
    order = rng.permutation(len(batches))
    return BatchPlan(tuple(batches[i] for i in order), batch_size, epoch_seed)


def plan_violations(plan: BatchPlan, groups: Mapping[GroupKey, Sequence[str]]) -> list[str]:
    """Check every plan invariant against the groups it was built from."""
    out: list[str] = []
    owner = {ref: key for key, refs in groups.items() for ref in refs}
    seen: Counter = Counter()
    for idx, b in enumerate(plan.batches):
        if len(b.refs) != plan.batch_size:
            out.append(f"batch {idx} has {len(b.refs)} entries, expected {plan.batch_size}")
        for ref in b.refs:
            if owner.get(ref) != b.key:
                out.append(f"batch {idx}: {ref} does not belong to group {b.key}")
        seen.update(b.refs)
    missing = set(owner) - set(seen)
    if missing:
        out.append(f"{len(missing)} samples never scheduled")
    counts = plan.batch_counts()
    for key, refs in groups.items():
        expected = math.ceil(len(refs) / plan.batch_size)
        if counts.get(key, 0) != expected:
            out.append(f"group {key}: {counts.get(key, 0)} batches, expected {expected}")
        padding = counts.get(key, 0) * plan.batch_size - len(refs)
        if not 0 <= padding < plan.batch_size:
            out.append(f"group {key}: padding {padding} not below batch size")
    return out
