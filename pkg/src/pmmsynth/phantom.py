"""Deterministic multi-dataset phantom corpus.

Every modality is an analytic transform of one latent anatomy per slice, and
every dataset applies its own gamma/gain/bias/noise profile on top, which
gives both missing-modality patterns and cross-dataset intensity shift with
exact ground truth.
"""

from __future__ import annotations

import hashlib
import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml
from scipy import ndimage

from pmmsynth.datamodel import (
    MODALITY_NAMES,
    N_MODALITIES,
    REGISTRY_FILENAME,
    DatasetDescriptor,
    DatasetRegistry,
    IntensityProfile,
    Modality,
    ModalityMask,
    MultiModalSample,
    save_registry,
    save_sample,
    slice_dir,
    validate_sample,
)
from pmmsynth.errors import ConfigError, PMMSynthError
from pmmsynth.seeding import rng_stream

MANIFEST_FILENAME = "phantom_manifest.json"

# exponent applied on top of the dataset gamma, one per modality
MODALITY_EXPONENT: dict[Modality, float] = {
    Modality.T1: 1.0,
    Modality.T2: 0.5,
    Modality.T1C: 1.3,
    Modality.FLAIR: 0.8,
    Modality.DWI: 1.7,
    Modality.ADC: 0.35,
}

# additive intensity inside lesion inclusions
LESION_CONTRAST: dict[Modality, float] = {
    Modality.T1: -0.10,
    Modality.T2: 0.20,
    Modality.T1C: 0.35,
    Modality.FLAIR: 0.25,
    Modality.DWI: 0.30,
    Modality.ADC: -0.20,
}

# FLAIR darkens the fluid compartment; other modalities leave it alone
FLUID_CONTRAST: dict[Modality, float] = {Modality.FLAIR: -0.6}


@dataclass(frozen=True)
class Ellipse:
    center: tuple[float, float]  # (row, col) in pixels
    radii: tuple[float, float]
    angle: float = 0.0

    def mask(self, size: int, soften: float = 0.0) -> np.ndarray:
        rr, cc = np.mgrid[0:size, 0:size].astype(np.float64)
        dr, dc = rr - self.center[0], cc - self.center[1]
        ca, sa = np.cos(self.angle), np.sin(self.angle)
        u = (dr * ca + dc * sa) / self.radii[0]
        v = (-dr * sa + dc * ca) / self.radii[1]
        m = (u * u + v * v <= 1.0).astype(np.float64)
        if soften > 0:
            m = ndimage.gaussian_filter(m, soften)
        return m

    def to_dict(self) -> dict[str, Any]:
        return {
            "center": [float(c) for c in self.center],
            "radii": [float(r) for r in self.radii],
            "angle": float(self.angle),
        }


@dataclass(frozen=True, eq=False)
class LatentAnatomy:
    base: np.ndarray
    lesions: tuple[Ellipse, ...] = ()
    fluid: Ellipse | None = None

    @property
    def size(self) -> int:
        return self.base.shape[0]

    def lesion_mask(self) -> np.ndarray:
        m = np.zeros_like(self.base)
        for e in self.lesions:
            m = np.maximum(m, e.mask(self.size, soften=0.7))
        return m

    def fluid_mask(self) -> np.ndarray:
        if self.fluid is None:
            return np.zeros_like(self.base)
        return self.fluid.mask(self.size, soften=0.7)


def make_anatomy(size: int, rng: np.random.Generator) -> LatentAnatomy:
    """Smooth random blobs inside an elliptical head, with 0-2 lesions and one fluid region."""
    rr, cc = np.mgrid[0:size, 0:size].astype(np.float64)
    c0 = (size - 1) / 2.0
    head = Ellipse((c0, c0), (0.44 * size, 0.38 * size)).mask(size, soften=0.8)
    field_ = np.full((size, size), 0.35)
    for _ in range(int(rng.integers(4, 8))):
        r0, c1 = c0 + rng.uniform(-0.3, 0.3, size=2) * size
        sig = rng.uniform(0.06, 0.18) * size
        amp = rng.uniform(-0.15, 0.35)
        field_ += amp * np.exp(-((rr - r0) ** 2 + (cc - c1) ** 2) / (2 * sig * sig))
    fluid = Ellipse(
        (c0 + rng.uniform(-0.05, 0.05) * size, c0 + rng.uniform(-0.05, 0.05) * size),
        tuple(rng.uniform(0.06, 0.11, size=2) * size),
        float(rng.uniform(0, np.pi)),
    )
    fmask = fluid.mask(size, soften=0.7)
    field_ = field_ * (1 - fmask) + 0.85 * fmask
    lesions = []
    for _ in range(int(rng.integers(0, 3))):
        ang = rng.uniform(0, 2 * np.pi)
        dist = rng.uniform(0.12, 0.25) * size
        lesions.append(
            Ellipse(
                (c0 + dist * np.sin(ang), c0 + dist * np.cos(ang)),
                tuple(rng.uniform(0.05, 0.1, size=2) * size),
                float(rng.uniform(0, np.pi)),
            )
        )
    anatomy = LatentAnatomy(np.zeros((size, size)), tuple(lesions), fluid)
    field_ = field_ + 0.15 * anatomy.lesion_mask()
    base = np.clip(field_ * head, 0.0, 1.0)
    return LatentAnatomy(base, tuple(lesions), fluid)


def render_modality(
    anatomy: LatentAnatomy,
    modality: Modality | str | int,
    profile: IntensityProfile,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """``clip(gain * base**(gamma*g_k) + bias + contrast_k + noise, 0, 1)``."""
    mod = Modality.parse(modality)
    img = profile.gain * np.power(anatomy.base, profile.gamma * MODALITY_EXPONENT[mod]) + profile.bias
    if anatomy.lesions:
        img = img + LESION_CONTRAST[mod] * anatomy.lesion_mask()
    if anatomy.fluid is not None and mod in FLUID_CONTRAST:
        img = img + FLUID_CONTRAST[mod] * anatomy.fluid_mask()
    if profile.noise_sigma > 0:
        if rng is None:
            raise ValueError("noise_sigma > 0 needs an rng stream")
        img = img + rng.normal(0.0, profile.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


@dataclass(frozen=True)
class PhantomSpec:
    registry: DatasetRegistry
    global_seed: int = 0
    min_available: int = 2

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "PhantomSpec":
        if not isinstance(doc, Mapping):
            raise ConfigError("phantom spec must be a mapping")
        registry = DatasetRegistry.from_dict(doc)
        for d in registry.datasets:
            where = f"datasets[{d.identifier}]"
            if d.case_count < 1:
                raise ConfigError(f"{where}.case_count must be >= 1", field=f"{where}.case_count")
            if d.slices_per_case < 1:
                raise ConfigError(f"{where}.slices_per_case must be >= 1", field=f"{where}.slices_per_case")
            if d.image_size < 8:
                raise ConfigError(f"{where}.image_size must be >= 8", field=f"{where}.image_size")
        try:
            seed = int(doc.get("global_seed", 0))
        except (TypeError, ValueError):
            raise ConfigError("global_seed must be an integer", field="global_seed") from None
        extra = set(doc) - {"global_seed", "datasets", "min_available"}
        if extra:
            raise ConfigError(f"unknown phantom spec fields: {sorted(extra)}", field=sorted(extra)[0])
        return cls(registry, seed, int(doc.get("min_available", 2)))

    @classmethod
    def load(cls, path: str | Path) -> "PhantomSpec":
        try:
            doc = yaml.safe_load(Path(path).read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        return cls.from_dict(doc or {})

    def to_dict(self) -> dict[str, Any]:
        return {
            "global_seed": self.global_seed,
            "min_available": self.min_available,
            **self.registry.to_dict(),
        }


def draw_availability(
    coverage: ModalityMask, rate: float, rng: np.random.Generator, min_available: int = 2
) -> tuple[ModalityMask, list[list[str]]]:
    """Drop each covered modality with probability ``rate``; redraw until enough survive.

    Returns the mask and every attempt's dropped names (last one is the kept decision).
    """
    need = min(min_available, coverage.count)
    attempts: list[list[str]] = []
    while True:
        drops = rng.random(N_MODALITIES) < rate
        bits = tuple(int(c and not d) for c, d in zip(coverage.bits, drops))
        attempts.append([MODALITY_NAMES[i] for i in coverage.indices if drops[i]])
        if sum(bits) >= need:
            return ModalityMask(bits), attempts


def render_slice(
    spec: PhantomSpec, dataset: DatasetDescriptor, case: int, slice_index: int, availability: ModalityMask
) -> tuple[np.ndarray, LatentAnatomy]:
    anatomy = make_anatomy(
        dataset.image_size, rng_stream(spec.global_seed, "anatomy", dataset.name, case, slice_index)
    )
    images = np.zeros((N_MODALITIES, dataset.image_size, dataset.image_size), dtype=np.float32)
    for i in availability.indices:
        noise = rng_stream(spec.global_seed, "noise", dataset.name, case, slice_index, i)
        images[i] = render_modality(anatomy, Modality(i), dataset.intensity_profile, noise)
    return images, anatomy


def generate_phantom_corpus(spec: PhantomSpec, out_dir: str | Path, overwrite: bool = False) -> dict[str, Any]:
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise PMMSynthError(f"{out} is not empty; pass overwrite to replace it")
        shutil.rmtree(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PMMSynthError(f"cannot create {out}: {exc}") from exc

    registry = spec.registry
    manifest: dict[str, Any] = {
        "spec": spec.to_dict(),
        "global_seed": spec.global_seed,
        "registry_hash": registry.digest(),
        "status": "running",
        "cases": [],
    }
    _write_manifest(out, manifest)
    cases = manifest["cases"]
    for ds in registry.datasets:
        for c in range(ds.case_count):
            case_id = f"case{c:04d}"
            avail, attempts = draw_availability(
                ds.coverage, ds.missingness_rate, rng_stream(spec.global_seed, "drops", ds.name, c), spec.min_available
            )
            slices = []
            for s in range(ds.slices_per_case):
                images, anatomy = render_slice(spec, ds, c, s, avail)
                sample = MultiModalSample(images, avail, ds.identifier, case_id, s)
                validate_sample(sample, registry)
                save_sample(sample, slice_dir(out, ds.name, case_id, s), ds.name)
                slices.append(
                    {
                        "slice_index": s,
                        "lesions": [e.to_dict() for e in anatomy.lesions],
                        "fluid": anatomy.fluid.to_dict() if anatomy.fluid else None,
                    }
                )
            cases.append(
                {
                    "dataset": ds.name,
                    "case_id": case_id,
                    "availability": list(avail.bits),
                    "dropped": attempts[-1],
                    "drop_attempts": attempts,
                    "slices": slices,
                }
            )
    save_registry(registry, out / REGISTRY_FILENAME)
    manifest["status"] = "complete"
    _write_manifest(out, manifest)
    return manifest


def _write_manifest(out: Path, manifest: dict[str, Any]) -> None:
    (out / MANIFEST_FILENAME).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def directory_digest(root: str | Path) -> str:
    """sha256 over every file's relative path and bytes, in sorted order."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(q for q in root.rglob("*") if q.is_file()):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(b"\0")
        h.update(p.read_bytes())
    return h.hexdigest()
