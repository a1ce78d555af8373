"""Training loop, learning-rate schedule, evaluation and ablation runs."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import torch

from pmmsynth import __version__
from pmmsynth.config import AblationConfig, TrainConfig
from pmmsynth.datamodel import (
    MODALITY_NAMES,
    DatasetRegistry,
    Modality,
    ModalityMask,
    MultiModalSample,
)
from pmmsynth.errors import ConfigError, InvalidTaskError, ResumeError, ScheduleError
from pmmsynth.losses import discriminator_loss, generator_loss, mask_input, sample_condition
from pmmsynth.metrics import MetricRow, evaluate_task, write_metrics_csv
from pmmsynth.network import (
    DiscriminatorBank,
    Generator,
    NetworkConfig,
    load_checkpoint,
    save_checkpoint,
)
from pmmsynth.scheduler import build_epoch_plan, group_samples
from pmmsynth.seeding import epoch_seed, rng_stream

log = logging.getLogger(__name__)

LOSS_LOG_FIELDS = ["epoch", "step", "dataset_id", "availability", "condition", "syn", "rec", "adv", "d_loss"]


def lr_at_epoch(e: int, config: TrainConfig) -> float:
    if not 0 <= e < config.epochs:
        raise ScheduleError(f"epoch {e} outside 0..{config.epochs - 1}")
    plateau = config.lr_plateau_epochs
    if config.lr_schedule == "decay_to_plateau":
        return config.lr0 * max(0.0, (plateau - e) / plateau) if plateau else config.lr0
    if e < plateau:
        return config.lr0
    return config.lr0 * (config.epochs - e) / (config.epochs - plateau)


# -----------------------------------------------------------------------------
# corpus helpers
# -----------------------------------------------------------------------------
def split_corpus(
    samples: Sequence[MultiModalSample], test_fraction: float
) -> tuple[list[MultiModalSample], list[MultiModalSample]]:
    """Hold out the last ``ceil(fraction * cases)`` cases of each dataset."""
    cases: dict[int, list[str]] = {}
    for s in samples:
        lst = cases.setdefault(s.dataset_id, [])
        if s.case_id not in lst:
            lst.append(s.case_id)
    held: set[tuple[int, str]] = set()
    for ds, ids in cases.items():
        ids = sorted(ids)
        k = math.ceil(test_fraction * len(ids)) if test_fraction > 0 else 0
        k = min(k, len(ids) - 1)
        held.update((ds, c) for c in ids[len(ids) - k :] if k > 0)
    train = [s for s in samples if (s.dataset_id, s.case_id) not in held]
    test = [s for s in samples if (s.dataset_id, s.case_id) in held]
    return train, test


def corpus_digest(samples: Iterable[MultiModalSample]) -> str:
    h = hashlib.sha256()
    for s in sorted(samples, key=lambda s: s.sort_key):
        h.update(s.sample_id.encode())
        h.update(s.availability.to_string().encode())
        h.update(np.ascontiguousarray(s.images, dtype="<f4").tobytes())
    return h.hexdigest()


def parse_task(text: str) -> tuple[ModalityMask, Modality]:
    """``"T1+T2->FLAIR"`` (or with the arrow character) -> (sources, target)."""
    norm = text.replace("→", "->")
    if "->" not in norm:
        raise InvalidTaskError(f"task {text!r} must look like SRC[+SRC]->TARGET")
    src, tgt = norm.split("->", 1)
    sources = ModalityMask.from_string(src)
    target = Modality.parse(tgt.strip())
    if sources.count == 0:
        raise InvalidTaskError(f"task {text!r} has no source")
    if sources[target]:
        raise InvalidTaskError(f"task {text!r}: {target.name} is both source and target")
    return sources, target


def default_tasks(coverage: ModalityMask) -> list[str]:
    """Two one-to-one and two many-to-one tasks over a dataset's coverage."""
    idx = [MODALITY_NAMES[i] for i in coverage.indices]
    if len(idx) < 2:
        return []
    if len(idx) == 2:
        return [f"{idx[0]}->{idx[1]}", f"{idx[1]}->{idx[0]}"]
    return [
        f"{idx[0]}->{idx[1]}",
        f"{idx[1]}->{idx[-1]}",
        f"{idx[0]}+{idx[1]}->{idx[2]}",
        f"{'+'.join(idx[:-1])}->{idx[-1]}",
    ]


class GeneratorSynthesizer:
    """Adapts a generator to the numpy ``(x, sources, dataset_id) -> y_hat`` interface."""

    def __init__(self, generator: Generator):
        self.generator = generator.eval()

    @torch.no_grad()
    def __call__(self, x: np.ndarray, sources: ModalityMask, dataset_id: int) -> np.ndarray:
        t = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))
        return self.generator(t, sources, dataset_id).numpy()


def evaluate_model(
    generator: Generator,
    registry: DatasetRegistry,
    samples: Sequence[MultiModalSample],
    tasks: Sequence[str] | None = None,
) -> list[MetricRow]:
    """One row per (dataset, task); tasks a dataset cannot serve are left out."""
    synth = GeneratorSynthesizer(generator)
    rows = []
    for ds in registry.datasets:
        ds_samples = [s for s in samples if s.dataset_id == ds.identifier]
        if not ds_samples:
            continue
        for task in tasks or default_tasks(ds.coverage):
            sources, target = parse_task(task)
            if not (sources | ModalityMask.from_names([target])).dominated_by(ds.coverage):
                continue
            try:
                rows.append(evaluate_task(synth, ds_samples, sources, target, ds.name))
            except InvalidTaskError:
                log.info("task %s has no evaluable slice in %s", task, ds.name)
    return rows


# -----------------------------------------------------------------------------
# training
# -----------------------------------------------------------------------------
@dataclass
class TrainResult:
    generator: Generator
    discriminators: DiscriminatorBank
    manifest: dict[str, Any]
    train_samples: list[MultiModalSample] = field(default_factory=list)
    test_samples: list[MultiModalSample] = field(default_factory=list)


def network_config(config: TrainConfig, registry: DatasetRegistry) -> NetworkConfig:
    return NetworkConfig.for_registry(
        registry,
        pfm_enabled=config.pfm_enabled,
        init_seed=config.seeds.resolved()["init"],
        **config.network.model_dump(),
    )


class _GradAudit:
    """Records whether any unavailable output channel ever received gradient."""

    def __init__(self) -> None:
        self.checked = 0
        self.violations = 0

    def watch(self, y_hat: torch.Tensor, m: ModalityMask) -> None:
        closed = [i for i in range(len(m.bits)) if not m[i]]
        if not closed or not y_hat.requires_grad:
            return

        def hook(grad: torch.Tensor) -> None:
            self.checked += 1
            if torch.count_nonzero(grad[:, closed]) > 0:
                self.violations += 1

        y_hat.register_hook(hook)


def _write_json(path: Path, doc: dict[str, Any]) -> None:
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(doc, indent=1, sort_keys=True, default=str) + "\n")
    tmp.replace(path)


def train(
    config: TrainConfig,
    registry: DatasetRegistry,
    samples: Sequence[MultiModalSample],
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
) -> TrainResult:
    if config.threads:
        torch.set_num_threads(config.threads)
    seeds = config.seeds.resolved()
    train_set, test_set = split_corpus(samples, config.test_fraction)
    trainable = [s for s in train_set if s.availability.count >= 2]
    skipped = len(train_set) - len(trainable)
    if not trainable:
        raise ConfigError("no training sample has two or more modalities", field="corpus")
    by_id = {s.sample_id: s for s in trainable}
    groups = group_samples(trainable)
    batch_size = config.effective_batch_size

    gen = Generator(network_config(config, registry))
    bank = DiscriminatorBank(gen.cfg)
    opt_g = torch.optim.Adam(gen.parameters(), lr=config.lr0, betas=config.betas)
    opt_d = torch.optim.Adam(bank.parameters(), lr=config.lr0, betas=config.betas)
    weights = config.weights.to_weights()

    corpus_hash = corpus_digest(samples)
    manifest: dict[str, Any] = {
        "version": __version__,
        "config": config.model_dump(mode="json", by_alias=True),
        "seeds": seeds,
        "effective_batch_size": batch_size,
        "registry_hash": registry.digest(),
        "dataset_ids": registry.id_map(),
        "corpus_hash": corpus_hash,
        "split": {
            "train": len(train_set),
            "test": len(test_set),
            "test_cases": sorted({f"{s.dataset_id}/{s.case_id}" for s in test_set}),
        },
        "groups": {f"{k.dataset_id}:{k.availability}": len(v) for k, v in groups.items()},
        "epochs": [],
        "status": "running",
    }
    start_epoch = 0
    if resume is not None:
        _, _, _, payload = load_checkpoint(resume, expected_registry_hash=registry.digest())
        if payload.get("corpus_hash") != corpus_hash:
            raise ResumeError("checkpoint was trained on a different corpus")
        gen.load_state_dict(payload["generator"])
        bank.load_state_dict(payload["discriminators"])
        opt_g.load_state_dict(payload["optimizer_g"])
        opt_d.load_state_dict(payload["optimizer_d"])
        start_epoch = int(payload["epoch"]) + 1
        manifest["epochs"] = list(payload.get("epoch_summaries", []))
        manifest["resumed_from"] = str(resume)

    out = Path(out_dir) if out_dir is not None else None
    loss_fh = None
    loss_writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "checkpoints").mkdir(exist_ok=True)
        _write_json(out / "manifest.json", manifest)
        loss_fh = open(out / "losses.csv", "a" if resume else "w", newline="")
        loss_writer = csv.writer(loss_fh, lineterminator="\n")
        if not resume:
            loss_writer.writerow(LOSS_LOG_FIELDS)

    audit = _GradAudit() if config.audit_gradients else None

    def disc(i: int, img: torch.Tensor) -> torch.Tensor:
        return bank[i](img)

    def save(path: Path, epoch: int) -> None:
        save_checkpoint(
            path,
            gen,
            bank,
            registry,
            optimizer_g=opt_g.state_dict(),
            optimizer_d=opt_d.state_dict(),
            epoch=epoch,
            config=manifest["config"],
            corpus_hash=corpus_hash,
            epoch_summaries=manifest["epochs"],
        )

    try:
        for epoch in range(start_epoch, config.epochs):
            lr = lr_at_epoch(epoch, config)
            for opt in (opt_g, opt_d):
                for g in opt.param_groups:
                    g["lr"] = lr
            plan = build_epoch_plan(groups, batch_size, epoch_seed(seeds["schedule"], epoch))
            cond_rng = rng_stream(seeds["condition"], "epoch", epoch)
            gen.train()
            bank.train()
            sums = np.zeros(5)
            t0 = time.perf_counter()
            seen: set[str] = set()
            for step, batch in enumerate(plan):
                m = batch.key.availability
                n = batch.key.dataset_id
                seen.update(batch.refs)
                y = torch.from_numpy(np.stack([by_id[r].images for r in batch.refs]))
                sc = sample_condition(m, cond_rng)
                x = mask_input(y, sc, m)

                y_hat = gen(x, sc, n, outputs=m)
                if audit is not None:
                    audit.watch(y_hat, m)
                gated = [i for i in range(len(m.bits)) if m[i] and not sc[i]]
                d_out = {i: bank[i](y_hat[:, i : i + 1]) for i in gated}
                rep = generator_loss(y_hat, y, m, sc, d_out, weights)
                opt_g.zero_grad(set_to_none=True)
                rep.total.backward()
                opt_g.step()

                d_rep = discriminator_loss(y_hat, y, m, sc, disc)
                opt_d.zero_grad(set_to_none=True)
                if d_rep.total.requires_grad:
                    d_rep.total.backward()
                    opt_d.step()

                vals = [t.item() for t in (rep.total, rep.syn, rep.rec, rep.adv, d_rep.total)]
                sums += vals
                if loss_writer is not None:
                    loss_writer.writerow(
                        [epoch, step, n, m.to_string(), sc.to_string()] + [f"{v:.6g}" for v in vals[1:]]
                    )
            elapsed = time.perf_counter() - t0
            steps = max(len(plan), 1)
            summary = {
                "epoch": epoch,
                "lr": lr,
                "steps": len(plan),
                "loss_g": sums[0] / steps,
                "syn": sums[1] / steps,
                "rec": sums[2] / steps,
                "adv": sums[3] / steps,
                "loss_d": sums[4] / steps,
                "wall_clock_s": elapsed,
                "processed": len(seen),
                "padding_duplicates": len(plan) * batch_size - len(trainable),
                "skipped_single_modality": skipped,
            }
            manifest["epochs"].append(summary)
            log.info(
                "epoch %d lr %.2e  L_G %.4f  L_D %.4f  (%.1fs, %d steps)",
                epoch, lr, summary["loss_g"], summary["loss_d"], elapsed, len(plan),
            )
            if skipped:
                log.info("epoch %d: skipped %d single-modality samples", epoch, skipped)
            if out is not None:
                if loss_fh is not None:
                    loss_fh.flush()
                if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                    save(out / "checkpoints" / f"epoch_{epoch:04d}.pt", epoch)
                _write_json(out / "manifest.json", manifest)
    finally:
        if loss_fh is not None:
            loss_fh.close()

    if audit is not None:
        manifest["grad_audit"] = {"checked": audit.checked, "violations": audit.violations}
    manifest["status"] = "complete"
    if out is not None:
        save(out / "checkpoints" / "final.pt", config.epochs - 1)
        _write_json(out / "manifest.json", manifest)
    gen.eval()
    bank.eval()
    return TrainResult(gen, bank, manifest, train_set, test_set)


# -----------------------------------------------------------------------------
# ablation
# -----------------------------------------------------------------------------
ARM_FLAGS = {
    "full": {"pfm_enabled": True, "mcbs_enabled": True},
    "no_pfm": {"pfm_enabled": False, "mcbs_enabled": True},
    "no_mcbs": {"pfm_enabled": True, "mcbs_enabled": False},
}

ABLATION_FIELDS = ["arm", "seed", "dataset", "task", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std", "count", "epoch_wall_clock_s"]


def run_ablation(
    config: AblationConfig,
    registry: DatasetRegistry,
    samples: Sequence[MultiModalSample],
    out_dir: str | Path | None = None,
) -> dict[str, Any]:
    if len(set(config.arms)) < 2:
        raise ConfigError("an ablation needs at least two arms", field="arms")
    out = Path(out_dir) if out_dir is not None else None
    rows: list[dict[str, Any]] = []
    for seed in config.seeds:
        for arm in config.arms:
            doc = config.train.model_dump(by_alias=True)
            doc.update(ARM_FLAGS[arm])
            doc["seeds"] = {"global": seed}
            cfg = TrainConfig.model_validate(doc)
            arm_dir = out / f"{arm}_seed{seed}" if out is not None else None
            result = train(cfg, registry, samples, arm_dir)
            split = {"test": result.test_samples, "train": result.train_samples, "all": list(samples)}[config.split]
            wall = float(np.mean([e["wall_clock_s"] for e in result.manifest["epochs"]]))
            for r in evaluate_model(result.generator, registry, split, config.tasks or None):
                rows.append(
                    {
                        "arm": arm,
                        "seed": seed,
                        "dataset": r.dataset,
                        "task": r.task,
                        "psnr_mean": r.psnr_mean,
                        "psnr_std": r.psnr_std,
                        "ssim_mean": r.ssim_mean,
                        "ssim_std": r.ssim_std,
                        "count": r.count,
                        "epoch_wall_clock_s": wall,
                    }
                )
            log.info("ablation arm %s seed %d done", arm, seed)

    summary = summarize_ablation(rows)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "ablation_report.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS, lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
        _write_json(out / "ablation_summary.json", summary)
    return {"rows": rows, "summary": summary}


def summarize_ablation(rows: Sequence[dict[str, Any]]) -> dict[str, Any]:
    """Task-averaged PSNR/SSIM per (arm, seed, dataset) and mean epoch wall-clock per arm."""
    means: dict[str, dict[str, dict[str, dict[str, float]]]] = {}
    groups: dict[tuple[str, int, str], list[dict[str, Any]]] = {}
    for r in rows:
        groups.setdefault((r["arm"], r["seed"], r["dataset"]), []).append(r)
    for (arm, seed, ds), rs in sorted(groups.items()):
        means.setdefault(arm, {}).setdefault(str(seed), {})[ds] = {
            "psnr": float(np.mean([r["psnr_mean"] for r in rs])),
            "ssim": float(np.mean([r["ssim_mean"] for r in rs])),
        }
    wall: dict[str, float] = {}
    for arm in {r["arm"] for r in rows}:
        vals = {(r["seed"]): r["epoch_wall_clock_s"] for r in rows if r["arm"] == arm}
        wall[arm] = float(np.mean(list(vals.values())))
    return {"task_mean": means, "epoch_wall_clock_s": wall}
