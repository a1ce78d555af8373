from __future__ import annotations

import numpy as np
import pytest

from pmmsynth.datamodel import DatasetRegistry, ModalityMask, MultiModalSample
from pmmsynth.phantom import PhantomSpec, generate_phantom_corpus


def make_registry(*coverages: str) -> DatasetRegistry:
    return DatasetRegistry.from_dict(
        {"datasets": [{"name": f"ds{i}", "coverage": ModalityMask.from_string(c).names()} for i, c in enumerate(coverages)]}
    )


def make_sample(bits: str, dataset_id: int = 0, case: str = "case0000", slice_index: int = 0, size: int = 16, seed: int = 0):
    mask = ModalityMask.from_string(bits)
    rng = np.random.default_rng(seed)
    images = rng.uniform(0.05, 1.0, size=(6, size, size)).astype(np.float32)
    images *= mask.as_array()[:, None, None]
    return MultiModalSample(images, mask, dataset_id, case, slice_index)


TINY_SPEC = {
    "global_seed": 5,
    "datasets": [
        {
            "name": "alpha",
            "coverage": ["T1", "T2", "T1C", "FLAIR"],
            "case_count": 4,
            "slices_per_case": 3,
            "image_size": 16,
            "missingness_rate": 0.0,
            "intensity_profile": {"gamma": 1.0, "gain": 0.9, "bias": 0.05, "noise_sigma": 0.01},
        },
        {
            "name": "beta",
            "coverage": ["T1", "T2", "FLAIR", "ADC"],
            "case_count": 4,
            "slices_per_case": 3,
            "image_size": 16,
            "missingness_rate": 0.3,
            "intensity_profile": {"gamma": 1.4, "gain": 0.7, "bias": 0.2, "noise_sigma": 0.02},
        },
    ],
}


@pytest.fixture
def tiny_spec() -> PhantomSpec:
    return PhantomSpec.from_dict(TINY_SPEC)


@pytest.fixture
def tiny_corpus(tmp_path, tiny_spec):
    root = tmp_path / "corpus"
    generate_phantom_corpus(tiny_spec, root)
    return root


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
