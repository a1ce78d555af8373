"""Unified synthesis backbone with dataset-conditioned feature modulation.

Layout (per resolution level ``l``)::

    X, SC ──> common encoder ───────────────┐
    x_i   ──> encoder_i (sources only) ──> cat ──> gated fusion ──> decoder_j (every covered j)

Every convolutional block of the generator runs conv -> instance norm ->
modulation -> LeakyReLU, where the modulation is ``F * (gamma + 1) + beta``
with ``gamma, beta`` predicted from an embedding of the dataset identifier.
The last layer of each per-block predictor starts at zero, so a fresh model
behaves exactly like the unmodulated backbone.

Each named component is initialised from its own seed derived from
``init_seed`` and the component's path, so adding or removing streams (or the
modulation layers) never changes the initial weights of anything else.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from pmmsynth.datamodel import MODALITY_NAMES, N_MODALITIES, DatasetRegistry, Modality, ModalityMask
from pmmsynth.errors import ConditioningError, ConfigError, InvalidTaskError, ResumeError, ShapeError
from pmmsynth.seeding import torch_seeded


@dataclass(frozen=True)
class NetworkConfig:
    n_datasets: int
    coverage: tuple[int, ...] = (1,) * N_MODALITIES
    depth: int = 3
    base_channels: int = 16
    id_dim: int = 64
    pfm_hidden: int = 64
    pfm_enabled: bool = True
    disc_stages: int = 3
    disc_channels: int = 16
    init_seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "coverage", tuple(int(b) for b in self.coverage))
        if self.n_datasets < 1:
            raise ConfigError("n_datasets must be >= 1", field="n_datasets")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1", field="depth")
        if self.id_dim % 2:
            raise ConfigError("id_dim must be even", field="id_dim")
        if not any(self.coverage):
            raise ConfigError("coverage has no modality", field="coverage")

    @property
    def coverage_mask(self) -> ModalityMask:
        return ModalityMask(self.coverage)

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def for_registry(cls, registry: DatasetRegistry, **kw: Any) -> "NetworkConfig":
        return cls(n_datasets=len(registry), coverage=registry.union_coverage.bits, **kw)


# -----------------------------------------------------------------------------
# dataset conditioning
# -----------------------------------------------------------------------------
def sinusoidal_code(n: Tensor | int | Sequence[int], dim: int) -> Tensor:
    """Interleaved ``[sin(n w_0), cos(n w_0), sin(n w_1), ...]`` with ``w_j = 10000^(-2j/dim)``."""
    n = torch.as_tensor(n, dtype=torch.float64).reshape(-1, 1)
    j = torch.arange(dim // 2, dtype=torch.float64)
    freqs = torch.exp(-math.log(10000.0) * 2.0 * j / dim)
    angles = n * freqs
    code = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1).reshape(n.shape[0], dim)
    return code.to(torch.get_default_dtype())


class DatasetEncoder(nn.Module):
    """Sinusoidal code of the dataset identifier followed by a two-layer MLP."""

    def __init__(self, n_datasets: int, dim: int):
        super().__init__()
        self.n_datasets = n_datasets
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, n: Tensor | int | Sequence[int]) -> Tensor:
        ids = torch.as_tensor(n).reshape(-1)
        if ids.numel() == 0 or ids.min() < 0 or ids.max() >= self.n_datasets:
            raise ConditioningError(
                f"dataset identifier {ids.tolist()} outside 0..{self.n_datasets - 1}"
            )
        code = sinusoidal_code(ids, self.dim).to(self.mlp[0].weight.dtype)
        return self.mlp(code)


def encode_dataset_id(n: int, d_id: int, embed_mlp: DatasetEncoder) -> Tensor:
    if embed_mlp.dim != d_id:
        raise ShapeError(f"embedding MLP expects dim {embed_mlp.dim}, got {d_id}")
    return embed_mlp(n)[0]


def pfm_modulate(features: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """``F * (gamma + 1) + beta`` per channel, broadcast over space.

    ``features`` is ``(B, C, h, w)`` or ``(C, h, w)``; ``gamma``/``beta`` are
    ``(B, C)`` or ``(C,)``.
    """
    c = features.shape[-3]
    if gamma.shape[-1] != c or beta.shape[-1] != c:
        raise ShapeError(f"modulation has {gamma.shape[-1]} channels, features have {c}")
    return features * (gamma[..., None, None] + 1) + beta[..., None, None]


class PFMBlock(nn.Module):
    """Per-block predictor of (gamma, beta) from the dataset embedding."""

    def __init__(self, channels: int, id_dim: int, hidden: int):
        super().__init__()
        self.channels = channels
        self.mlp = nn.Sequential(nn.Linear(id_dim, hidden), nn.SiLU(), nn.Linear(hidden, 2 * channels))
        nn.init.zeros_(self.mlp[-1].weight)
        nn.init.zeros_(self.mlp[-1].bias)

    def params(self, emb: Tensor) -> tuple[Tensor, Tensor]:
        out = self.mlp(emb)
        gamma, beta = out.chunk(2, dim=-1)
        return gamma, beta

    def forward(self, features: Tensor, emb: Tensor) -> Tensor:
        gamma, beta = self.params(emb)
        return pfm_modulate(features, gamma, beta)


class ConvBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1, pfm: PFMBlock | None = None):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.norm = nn.InstanceNorm2d(cout, affine=False)
        self.pfm = pfm

    def forward(self, x: Tensor, emb: Tensor | None) -> Tensor:
        h = self.norm(self.conv(x))
        if self.pfm is not None:
            h = self.pfm(h, emb)
        return F.leaky_relu(h, 0.2)


class _Builder:
    """Creates blocks with per-path seeded initialisation."""

    def __init__(self, cfg: NetworkConfig):
        self.cfg = cfg

    def block(self, path: str, cin: int, cout: int, stride: int = 1) -> ConvBlock:
        pfm = None
        if self.cfg.pfm_enabled:
            with torch_seeded(self.cfg.init_seed, "pfm", path):
                pfm = PFMBlock(cout, self.cfg.id_dim, self.cfg.pfm_hidden)
        with torch_seeded(self.cfg.init_seed, path):
            blk = ConvBlock(cin, cout, stride)
        blk.pfm = pfm
        return blk


class Encoder(nn.Module):
    def __init__(self, path: str, in_channels: int, build: _Builder):
        super().__init__()
        cfg = build.cfg
        self.blocks = nn.ModuleList(
            build.block(
                f"{path}.{lvl}",
                in_channels if lvl == 0 else cfg.channels(lvl - 1),
                cfg.channels(lvl),
                stride=1 if lvl == 0 else 2,
            )
            for lvl in range(cfg.depth)
        )

    def forward(self, x: Tensor, emb: Tensor | None) -> list[Tensor]:
        feats = []
        for blk in self.blocks:
            x = blk(x, emb)
            feats.append(x)
        return feats


class FusionLevel(nn.Module):
    """Masked-softmax gating over the available streams at one resolution."""

    def __init__(self, channels: int):
        super().__init__()
        self.transform = nn.Conv2d(2 * channels, channels, 1)
        self.gate = nn.Conv2d(2 * channels, 1, 1)

    def forward(self, streams: Sequence[Tensor]) -> Tensor:
        if not streams:
            raise InvalidTaskError("fusion needs at least one stream")
        stacked = torch.stack(list(streams), dim=0)  # (S, B, 2C, h, w)
        s, b = stacked.shape[:2]
        flat = stacked.flatten(0, 1)
        values = self.transform(flat).unflatten(0, (s, b))
        weights = torch.softmax(self.gate(flat).unflatten(0, (s, b)), dim=0)
        return (weights * values).sum(dim=0)


def fuse_features(
    per_modality_features: Mapping[int, Tensor], source_mask: ModalityMask, fusion: FusionLevel
) -> Tensor:
    """Fuse the streams of the set source bits; ordering of the mapping is irrelevant."""
    if source_mask.count == 0:
        raise InvalidTaskError("no source streams to fuse")
    keys = {int(k) for k in per_modality_features}
    if keys != set(source_mask.indices):
        raise InvalidTaskError(
            f"supplied streams {sorted(keys)} do not match source mask {source_mask}"
        )
    return fusion([per_modality_features[k] for k in sorted(per_modality_features)])


class Decoder(nn.Module):
    def __init__(self, path: str, build: _Builder):
        super().__init__()
        cfg = build.cfg
        top = cfg.depth - 1
        self.bottom = build.block(f"{path}.bottom", cfg.channels(top), cfg.channels(top))
        self.ups = nn.ModuleList(
            build.block(f"{path}.up{lvl}", cfg.channels(lvl + 1) + cfg.channels(lvl), cfg.channels(lvl))
            for lvl in range(top - 1, -1, -1)
        )
        with torch_seeded(cfg.init_seed, path, "head"):
            self.head = nn.Conv2d(cfg.channels(0), 1, 1)

    def forward(self, fused: Sequence[Tensor], emb: Tensor | None) -> Tensor:
        h = self.bottom(fused[-1], emb)
        for blk, skip in zip(self.ups, reversed(fused[:-1])):
            h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = blk(torch.cat([h, skip], dim=1), emb)
        return torch.sigmoid(self.head(h))


class Generator(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        build = _Builder(cfg)
        self.covered = cfg.coverage_mask
        if cfg.pfm_enabled:
            with torch_seeded(cfg.init_seed, "pfm", "embed"):
                self.embed = DatasetEncoder(cfg.n_datasets, cfg.id_dim)
        else:
            self.embed = None
        # common stream sees the masked images plus the condition bits
        self.common = Encoder("common", 2 * N_MODALITIES, build)
        self.encoders = nn.ModuleDict(
            {MODALITY_NAMES[i]: Encoder(f"enc.{MODALITY_NAMES[i]}", 1, build) for i in self.covered.indices}
        )
        fusion = []
        for lvl in range(cfg.depth):
            with torch_seeded(cfg.init_seed, "fuse", lvl):
                fusion.append(FusionLevel(cfg.channels(lvl)))
        self.fusion = nn.ModuleList(fusion)
        self.decoders = nn.ModuleDict(
            {MODALITY_NAMES[i]: Decoder(f"dec.{MODALITY_NAMES[i]}", build) for i in self.covered.indices}
        )

    def embedding(self, dataset_id: Tensor | int | Sequence[int], batch: int) -> Tensor | None:
        ids = torch.as_tensor(dataset_id).reshape(-1)
        if ids.numel() == 1 and batch > 1:
            ids = ids.expand(batch)
        if ids.numel() != batch:
            raise ShapeError(f"{ids.numel()} dataset ids for a batch of {batch}")
        if ids.min() < 0 or ids.max() >= self.cfg.n_datasets:
            raise ConditioningError(f"dataset identifier {ids.tolist()} outside 0..{self.cfg.n_datasets - 1}")
        if self.embed is None:
            return None
        return self.embed(ids)

    def forward(
        self,
        x: Tensor,
        source_mask: ModalityMask,
        dataset_id: Tensor | int | Sequence[int],
        outputs: ModalityMask | None = None,
    ) -> Tensor:
        """Return all six channels; ``outputs`` optionally limits which decoders run."""
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        if x.dim() != 4 or x.shape[1] != N_MODALITIES:
            raise ShapeError(f"expected (B, 6, H, W) input, got {tuple(x.shape)}")
        if source_mask.count == 0:
            raise InvalidTaskError("source mask is empty")
        if not source_mask.dominated_by(self.covered):
            raise InvalidTaskError(f"sources {source_mask.label()} outside coverage {self.covered.label()}")
        outputs = self.covered if outputs is None else outputs & self.covered
        b = x.shape[0]
        emb = self.embedding(dataset_id, b)
        cond = x.new_tensor(source_mask.bits)[None, :, None, None].expand(b, -1, *x.shape[-2:])
        common = self.common(torch.cat([x, cond], dim=1), emb)
        streams = {i: self.encoders[MODALITY_NAMES[i]](x[:, i : i + 1], emb) for i in source_mask.indices}
        fused = [
            fuse_features({i: torch.cat([common[lvl], f[lvl]], dim=1) for i, f in streams.items()}, source_mask, fl)
            for lvl, fl in enumerate(self.fusion)
        ]
        out = [
            self.decoders[MODALITY_NAMES[i]](fused, emb) if outputs[i] else x.new_zeros(b, 1, *x.shape[-2:])
            for i in range(N_MODALITIES)
        ]
        y = torch.cat(out, dim=1)
        return y[0] if squeeze else y


def forward_generator(x: Tensor, source_mask: ModalityMask, n: int, state: Generator) -> Tensor:
    return state(x, source_mask, n)


# -----------------------------------------------------------------------------
# discriminators
# -----------------------------------------------------------------------------
class PatchDiscriminator(nn.Module):
    """Stride-2 conv stages then a 3x3 head: an ``H/2^k x W/2^k`` realism map."""

    def __init__(self, stages: int = 3, channels: int = 16):
        super().__init__()
        layers: list[nn.Module] = []
        cin = 1
        for s in range(stages):
            cout = channels * 2**s
            layers += [nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            cin = cout
        layers.append(nn.Conv2d(cin, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)
        self.stages = stages

    def forward(self, image: Tensor) -> Tensor:
        return self.net(image)


class DiscriminatorBank(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        self.covered = cfg.coverage_mask
        nets = {}
        for i in self.covered.indices:
            with torch_seeded(cfg.init_seed, "dis", MODALITY_NAMES[i]):
                nets[MODALITY_NAMES[i]] = PatchDiscriminator(cfg.disc_stages, cfg.disc_channels)
        self.nets = nn.ModuleDict(nets)

    def __getitem__(self, modality: Modality | str | int) -> PatchDiscriminator:
        mod = Modality.parse(modality)
        if not self.covered[mod]:
            raise ConfigError(f"no discriminator for {mod.name}: outside coverage", field="modality")
        return self.nets[mod.name]

    def forward(self, modality: Modality | str | int, image: Tensor) -> Tensor:
        return discriminate(modality, image, self)


def discriminate(i: Modality | str | int, image: Tensor, bank: DiscriminatorBank) -> Tensor:
    """Realism map of one modality image; accepts ``(H, W)``, ``(B, H, W)`` or ``(B, 1, H, W)``."""
    net = bank[i]
    if image.dim() == 2:
        return net(image[None, None])[0, 0]
    if image.dim() == 3:
        return net(image[:, None])[:, 0]
    return net(image)


# -----------------------------------------------------------------------------
# checkpoint container
# -----------------------------------------------------------------------------
def save_checkpoint(
    path: str | Path,
    generator: Generator,
    bank: DiscriminatorBank,
    registry: DatasetRegistry,
    **extra: Any,
) -> None:
    payload = {
        "arch": generator.cfg.to_dict(),
        "generator": generator.state_dict(),
        "discriminators": bank.state_dict(),
        "dataset_ids": registry.id_map(),
        "registry": registry.to_dict(),
        "registry_hash": registry.digest(),
        **extra,
    }
    torch.save(payload, Path(path))


def load_checkpoint(
    path: str | Path, expected_registry_hash: str | None = None
) -> tuple[Generator, DiscriminatorBank, DatasetRegistry, dict[str, Any]]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if expected_registry_hash is not None and payload["registry_hash"] != expected_registry_hash:
        raise ResumeError(
            f"checkpoint registry hash {payload['registry_hash'][:12]} does not match {expected_registry_hash[:12]}"
        )
    registry = DatasetRegistry.from_dict(payload["registry"])
    if registry.digest() != payload["registry_hash"]:
        raise ResumeError("checkpoint registry does not match its recorded hash")
    cfg = NetworkConfig(**payload["arch"])
    gen = Generator(cfg)
    gen.load_state_dict(payload["generator"])
    bank = DiscriminatorBank(cfg)
    bank.load_state_dict(payload["discriminators"])
    gen.eval()
    bank.eval()
    return gen, bank, registry, payload
