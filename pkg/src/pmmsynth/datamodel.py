"""Modality vocabulary, dataset registry and the on-disk sample layout.

Every mask, network stream and file in the package indexes modalities with
the fixed ordering ``T1, T2, T1C, FLAIR, DWI, ADC``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import yaml

from pmmsynth.errors import (
    ConfigError,
    SampleValidationError,
    ValidationError,
    VocabularyError,
)


class Modality(IntEnum):
    T1 = 0
    T2 = 1
    T1C = 2
    FLAIR = 3
    DWI = 4
    ADC = 5

    @classmethod
    def parse(cls, name: str | int | "Modality") -> "Modality":
        if isinstance(name, Modality):
            return name
        if isinstance(name, (int, np.integer)):
            if not 0 <= int(name) < N_MODALITIES:
                raise VocabularyError(f"modality index out of range: {name}")
            return cls(int(name))
        try:
            return cls[str(name).strip().upper()]
        except KeyError:
            raise VocabularyError(
                f"unknown modality {name!r}; expected one of {', '.join(MODALITY_NAMES)}"
            ) from None


MODALITY_NAMES: tuple[str, ...] = tuple(m.name for m in Modality)
N_MODALITIES = len(MODALITY_NAMES)


@dataclass(frozen=True)
class ModalityMask:
    """Six binary flags over the fixed modality ordering."""

    bits: tuple[int, ...]

    def __post_init__(self) -> None:
        bits = tuple(int(b) for b in self.bits)
        if len(bits) != N_MODALITIES:
            raise ValidationError(f"mask needs {N_MODALITIES} bits, got {len(bits)}")
        if any(b not in (0, 1) for b in bits):
            raise ValidationError(f"mask bits must be 0 or 1, got {bits}")
        object.__setattr__(self, "bits", bits)

    @classmethod
    def from_names(cls, names: Iterable[str | Modality]) -> "ModalityMask":
        return make_mask(names)

    @classmethod
    def from_string(cls, text: str) -> "ModalityMask":
        """Parse either a bit string (``"110100"``) or ``T1+T2`` style names."""
        text = text.strip()
        if len(text) == N_MODALITIES and set(text) <= {"0", "1"}:
            return cls(tuple(int(c) for c in text))
        if not text:
            return cls.empty()
        return make_mask([p for p in text.replace(",", "+").split("+") if p])

    @classmethod
    def empty(cls) -> "ModalityMask":
        return cls((0,) * N_MODALITIES)

    @classmethod
    def full(cls) -> "ModalityMask":
        return cls((1,) * N_MODALITIES)

    def __iter__(self):
        return iter(self.bits)

    def __getitem__(self, i: int) -> int:
        return self.bits[i]

    def __len__(self) -> int:
        return N_MODALITIES

    def __or__(self, other: "ModalityMask") -> "ModalityMask":
        return ModalityMask(tuple(a | b for a, b in zip(self.bits, other.bits)))

    def __and__(self, other: "ModalityMask") -> "ModalityMask":
        return ModalityMask(tuple(a & b for a, b in zip(self.bits, other.bits)))

    def dominated_by(self, other: "ModalityMask") -> bool:
        return all(a <= b for a, b in zip(self.bits, other.bits))

    @property
    def count(self) -> int:
        return sum(self.bits)

    @property
    def indices(self) -> tuple[int, ...]:
        return tuple(i for i, b in enumerate(self.bits) if b)

    @property
    def modalities(self) -> tuple[Modality, ...]:
        return tuple(Modality(i) for i in self.indices)

    def names(self) -> list[str]:
        return [MODALITY_NAMES[i] for i in self.indices]

    def to_string(self) -> str:
        return "".join(str(b) for b in self.bits)

    def label(self) -> str:
        return "+".join(self.names()) or "-"

    def as_array(self) -> np.ndarray:
        return np.asarray(self.bits, dtype=np.float32)

    def __str__(self) -> str:
        return self.to_string()


def make_mask(modality_names: Iterable[str | Modality]) -> ModalityMask:
    seen: set[Modality] = set()
    for name in modality_names:
        mod = Modality.parse(name)
        if mod in seen:
            raise ValidationError(f"duplicate modality {mod.name}")
        seen.add(mod)
    return ModalityMask(tuple(int(Modality(i) in seen) for i in range(N_MODALITIES)))


@dataclass(frozen=True)
class IntensityProfile:
    """Per-dataset intensity transform used by the phantom renderer."""

    gamma: float = 1.0
    gain: float = 1.0
    bias: float = 0.0
    noise_sigma: float = 0.0

    def __post_init__(self) -> None:
        if not self.gamma > 0:
            raise ValidationError(f"intensity_profile.gamma must be > 0, got {self.gamma}")
        if not self.noise_sigma >= 0:
            raise ValidationError(
                f"intensity_profile.noise_sigma must be >= 0, got {self.noise_sigma}"
            )

    def to_dict(self) -> dict[str, float]:
        return {
            "gamma": float(self.gamma),
            "gain": float(self.gain),
            "bias": float(self.bias),
            "noise_sigma": float(self.noise_sigma),
        }


@dataclass(frozen=True)
class DatasetDescriptor:
    identifier: int
    name: str
    coverage: ModalityMask
    intensity_profile: IntensityProfile = field(default_factory=IntensityProfile)
    case_count: int = 0
    slices_per_case: int = 1
    image_size: int = 32
    missingness_rate: float = 0.0

    def __post_init__(self) -> None:
        if self.coverage.count < 1:
            raise ValidationError(f"dataset {self.name!r}: coverage has no modality")
        if not 0.0 <= self.missingness_rate < 1.0:
            raise ValidationError(
                f"dataset {self.name!r}: missingness_rate must be in [0, 1)"
            )

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "coverage": self.coverage.names(),
            "case_count": self.case_count,
            "slices_per_case": self.slices_per_case,
            "image_size": self.image_size,
            "missingness_rate": float(self.missingness_rate),
            "intensity_profile": self.intensity_profile.to_dict(),
        }


@dataclass(frozen=True)
class DatasetRegistry:
    datasets: tuple[DatasetDescriptor, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "datasets", tuple(self.datasets))
        ids = [d.identifier for d in self.datasets]
        if ids != list(range(len(ids))):
            raise ValidationError(f"dataset identifiers must be 0..N-1 in order, got {ids}")
        names = [d.name for d in self.datasets]
        if len(set(names)) != len(names):
            raise ValidationError(f"duplicate dataset names in registry: {names}")

    def __len__(self) -> int:
        return len(self.datasets)

    @property
    def union_coverage(self) -> ModalityMask:
        return union_coverage(self)

    def by_id(self, dataset_id: int) -> DatasetDescriptor:
        if not 0 <= dataset_id < len(self.datasets):
            raise ValidationError(f"unknown dataset id {dataset_id}")
        return self.datasets[dataset_id]

    def by_name(self, name: str) -> DatasetDescriptor:
        for d in self.datasets:
            if d.name == name:
                return d
        raise ValidationError(f"unknown dataset {name!r}")

    def id_map(self) -> dict[str, int]:
        return {d.name: d.identifier for d in self.datasets}

    def to_dict(self) -> dict[str, Any]:
        return {"datasets": [d.to_dict() for d in self.datasets]}

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "DatasetRegistry":
        entries = doc.get("datasets") if isinstance(doc, Mapping) else None
        if not isinstance(entries, list):
            raise ConfigError("registry document needs a 'datasets' list", field="datasets")
        datasets = []
        for idx, entry in enumerate(entries):
            datasets.append(_descriptor_from_dict(idx, entry))
        registry = cls(tuple(datasets))
        union_coverage(registry)
        return registry

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _descriptor_from_dict(idx: int, entry: Any) -> DatasetDescriptor:
    where = f"datasets[{idx}]"
    if not isinstance(entry, Mapping):
        raise ConfigError(f"{where} must be a mapping", field=where)
    if "name" not in entry:
        raise ConfigError(f"{where}.name is required", field=f"{where}.name")
    if "coverage" not in entry:
        raise ConfigError(f"{where}.coverage is required", field=f"{where}.coverage")
    try:
        coverage = make_mask(entry["coverage"])
        profile = IntensityProfile(**dict(entry.get("intensity_profile") or {}))
        return DatasetDescriptor(
            identifier=idx,
            name=str(entry["name"]),
            coverage=coverage,
            intensity_profile=profile,
            case_count=int(entry.get("case_count", 0)),
            slices_per_case=int(entry.get("slices_per_case", 1)),
            image_size=int(entry.get("image_size", 32)),
            missingness_rate=float(entry.get("missingness_rate", 0.0)),
        )
    except (ValidationError, TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}", field=where) from exc


def union_coverage(registry: DatasetRegistry) -> ModalityMask:
    if len(registry.datasets) == 0:
        raise ConfigError("registry is empty", field="datasets")
    out = ModalityMask.empty()
    for d in registry.datasets:
        out = out | d.coverage
    return out


def load_registry(path: str | Path) -> DatasetRegistry:
    """Read a registry (or phantom spec) YAML/JSON document."""
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return DatasetRegistry.from_dict(doc or {})


def save_registry(registry: DatasetRegistry, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(registry.to_dict(), sort_keys=False))


@dataclass(frozen=True, eq=False)
class MultiModalSample:
    images: np.ndarray
    availability: ModalityMask
    dataset_id: int
    case_id: str
    slice_index: int

    @property
    def sample_id(self) -> str:
        return f"{self.dataset_id}/{self.case_id}/{self.slice_index}"

    @property
    def sort_key(self) -> tuple[int, str, int]:
        return (self.dataset_id, self.case_id, self.slice_index)

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.images.shape[1:])  # type: ignore[return-value]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MultiModalSample):
            return NotImplemented
        return (
            self.availability == other.availability
            and self.dataset_id == other.dataset_id
            and self.case_id == other.case_id
            and self.slice_index == other.slice_index
            and self.images.shape == other.images.shape
            and np.array_equal(self.images, other.images)
        )

    __hash__ = None  # type: ignore[assignment]


def sample_problems(sample: MultiModalSample, registry: DatasetRegistry) -> list[str]:
    """Return one message per violated sample invariant (empty when valid)."""
    problems: list[str] = []
    img = np.asarray(sample.images)
    if img.ndim != 3 or img.shape[0] != N_MODALITIES:
        return [f"images must have shape (6, H, W), got {img.shape}"]
    if not 0 <= sample.dataset_id < len(registry.datasets):
        problems.append(f"unknown dataset {sample.dataset_id}")
    elif not sample.availability.dominated_by(registry.datasets[sample.dataset_id].coverage):
        problems.append(
            f"availability {sample.availability} not covered by dataset "
            f"{registry.datasets[sample.dataset_id].name!r}"
        )
    if not np.all(np.isfinite(img)):
        problems.append("non-finite intensities")
    elif img.size and (img.min() < 0.0 or img.max() > 1.0):
        problems.append("intensities outside [0, 1]")
    for i in range(N_MODALITIES):
        nonzero = bool(np.any(img[i] != 0))
        if not sample.availability[i] and nonzero:
            problems.append(f"nonzero masked channel {i}")
        elif sample.availability[i] and not nonzero:
            problems.append(f"available channel {i} is all-zero")
    return problems


def validate_sample(sample: MultiModalSample, registry: DatasetRegistry) -> MultiModalSample:
    problems = sample_problems(sample, registry)
    if problems:
        raise SampleValidationError(sample.sample_id, problems)
    return sample


# -----------------------------------------------------------------------------
# on-disk layout: <root>/<dataset>/<case>/<slice>/<MODALITY>.bin + meta.json
# -----------------------------------------------------------------------------
_RASTER_DTYPE = np.dtype("<f4")


def write_raster(path: Path, image: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(image, dtype=_RASTER_DTYPE).tobytes())


def read_raster(path: Path, shape: Sequence[int]) -> np.ndarray:
    data = np.frombuffer(path.read_bytes(), dtype=_RASTER_DTYPE)
    if data.size != int(np.prod(shape)):
        raise ValidationError(f"{path}: expected {tuple(shape)} floats, found {data.size}")
    return data.reshape(tuple(shape)).astype(np.float32)


def slice_dir(root: Path, dataset_name: str, case_id: str, slice_index: int) -> Path:
    return Path(root) / dataset_name / case_id / f"{slice_index:03d}"


def save_sample(sample: MultiModalSample, directory: Path, dataset_name: str) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    h, w = sample.shape
    for i in sample.availability.indices:
        write_raster(directory / f"{MODALITY_NAMES[i]}.bin", sample.images[i])
    meta = {
        "shape": [h, w],
        "availability": list(sample.availability.bits),
        "dataset": dataset_name,
        "case_id": sample.case_id,
        "slice_index": sample.slice_index,
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return directory


def load_sample(directory: Path, registry: DatasetRegistry, validate: bool = True) -> MultiModalSample:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    h, w = meta["shape"]
    avail = ModalityMask(tuple(meta["availability"]))
    images = np.zeros((N_MODALITIES, h, w), dtype=np.float32)
    for i in range(N_MODALITIES):
        f = directory / f"{MODALITY_NAMES[i]}.bin"
        if f.exists():
            if not avail[i]:
                raise SampleValidationError(str(directory), [f"raster for unavailable channel {i}"])
            images[i] = read_raster(f, (h, w))
        elif avail[i]:
            raise SampleValidationError(str(directory), [f"missing raster for channel {i}"])
    sample = MultiModalSample(
        images=images,
        availability=avail,
        dataset_id=registry.by_name(meta["dataset"]).identifier,
        case_id=str(meta["case_id"]),
        slice_index=int(meta["slice_index"]),
    )
    return validate_sample(sample, registry) if validate else sample


REGISTRY_FILENAME = "registry.yaml"


def iter_slice_dirs(root: Path, registry: DatasetRegistry) -> list[Path]:
    """Slice directories in stable (dataset order, case, slice) enumeration order."""
    out: list[Path] = []
    for d in registry.datasets:
        ds_root = Path(root) / d.name
        if not ds_root.is_dir():
            continue
        for case in sorted(p for p in ds_root.iterdir() if p.is_dir()):
            out.extend(sorted(p for p in case.iterdir() if (p / "meta.json").is_file()))
    return out


def load_corpus(root: str | Path, registry: DatasetRegistry | None = None) -> tuple[DatasetRegistry, list[MultiModalSample]]:
    root = Path(root)
    if registry is None:
        reg_path = root / REGISTRY_FILENAME
        if not reg_path.is_file():
            raise ConfigError(f"no {REGISTRY_FILENAME} under {root}", field="corpus")
        registry = load_registry(reg_path)
    samples = [load_sample(p, registry) for p in iter_slice_dirs(root, registry)]
    if not samples:
        raise ConfigError(f"corpus {root} holds no samples", field="corpus")
    return registry, samples
