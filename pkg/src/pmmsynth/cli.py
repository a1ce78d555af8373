"""Command-line entry point: ``pmmsynth <subcommand> ...``.

Exit codes: 0 success, 2 validation error, 3 runtime error. Failures print a
single JSON error record on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import shutil
import sys
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from pmmsynth import __version__
from pmmsynth.config import AblationConfig, TrainConfig, apply_overrides, load_config
from pmmsynth.datamodel import (
    REGISTRY_FILENAME,
    DatasetRegistry,
    ModalityMask,
    MultiModalSample,
    iter_slice_dirs,
    load_corpus,
    load_registry,
    load_sample,
    save_sample,
    validate_sample,
)
from pmmsynth.errors import ConfigError, InvalidTaskError, PMMSynthError, SampleValidationError, ValidationError
from pmmsynth.metrics import montage, write_metrics_csv, zero_baseline_psnr
from pmmsynth.network import load_checkpoint
from pmmsynth.phantom import PhantomSpec, generate_phantom_corpus
from pmmsynth.trainer import (
    GeneratorSynthesizer,
    default_tasks,
    evaluate_model,
    parse_task,
    run_ablation,
    split_corpus,
    train,
)

log = logging.getLogger("pmmsynth")

INVOCATION_FILENAME = "invocation.json"


class OutputExistsError(ValidationError):
    pass


# -----------------------------------------------------------------------------
# helpers
# -----------------------------------------------------------------------------
def _config_dir():
    return resources.files("pmmsynth") / "configs"


def shipped_configs() -> list[str]:
    return sorted(p.name for p in _config_dir().iterdir() if p.name.endswith(".yaml"))


def resolve_config(value: str) -> Path:
    """A filesystem path, or the name of a config shipped with the package."""
    path = Path(value)
    if path.is_file():
        return path
    name = value if value.endswith(".yaml") else f"{value}.yaml"
    ref = _config_dir() / name
    if ref.is_file():
        return Path(str(ref))
    raise ConfigError(f"config {value!r} not found (shipped: {', '.join(shipped_configs())})", field="config")


def prepare_out_dir(out: Path, overwrite: bool, keep: bool = False) -> Path:
    if out.exists() and not out.is_dir():
        raise OutputExistsError(f"{out} exists and is not a directory")
    if out.is_dir() and any(out.iterdir()) and not keep:
        if not overwrite:
            raise OutputExistsError(f"{out} is not empty; pass --overwrite to replace it")
        shutil.rmtree(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PMMSynthError(f"cannot create {out}: {exc}") from exc
    return out


def write_invocation(out: Path, command: str, **details: Any) -> None:
    doc = {"command": command, "version": __version__, **details}
    (out / INVOCATION_FILENAME).write_text(json.dumps(doc, indent=1, sort_keys=True, default=str) + "\n")


def parse_overrides(pairs: Sequence[str]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {pair!r} must look like key=value", field=pair)
        out[key.strip()] = yaml.safe_load(raw)
    return out


def parse_modalities(text: str) -> ModalityMask:
    names = [t for t in text.replace("+", ",").split(",") if t.strip()]
    return ModalityMask.from_names([n.strip() for n in names])


def on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return value == "on"


def require_corpus(path: str | None) -> Path:
    if not path:
        raise ConfigError("no corpus given (set `corpus` in the config or pass --corpus)", field="corpus")
    root = Path(path)
    if not (root / REGISTRY_FILENAME).is_file():
        raise ConfigError(f"corpus {root} not found or has no {REGISTRY_FILENAME}", field="corpus")
    return root


def emit(doc: dict[str, Any]) -> None:
    print(json.dumps(doc, sort_keys=True, default=str))


def task_baselines(registry: DatasetRegistry, samples: Sequence[MultiModalSample], tasks: Sequence[str] | None) -> dict[str, dict[str, float]]:
    """Zero-image PSNR for each (dataset, task) on the slices that task is scored on."""
    out: dict[str, dict[str, float]] = {}
    for ds in registry.datasets:
        for task in tasks or default_tasks(ds.coverage):
            sources, target = parse_task(task)
            usable = [
                s for s in samples
                if s.dataset_id == ds.identifier and sources.dominated_by(s.availability) and s.availability[target]
            ]
            if usable:
                out.setdefault(ds.name, {})[f"{sources.label()}→{target.name}"] = zero_baseline_psnr(usable, target)
    return out


# -----------------------------------------------------------------------------
# subcommands
# -----------------------------------------------------------------------------
def cmd_generate_phantom(args: argparse.Namespace) -> dict[str, Any]:
    spec = PhantomSpec.load(resolve_config(args.spec))
    out = Path(args.out)
    if out.is_dir() and any(out.iterdir()) and not args.overwrite:
        raise OutputExistsError(f"{out} is not empty; pass --overwrite to replace it")
    manifest = generate_phantom_corpus(spec, out, overwrite=args.overwrite)
    n = sum(len(c["slices"]) for c in manifest["cases"])
    return {"corpus": str(out), "samples": n, "registry_hash": manifest["registry_hash"]}


def cmd_validate_corpus(args: argparse.Namespace) -> dict[str, Any]:
    root = require_corpus(args.corpus)
    registry = load_registry(root / REGISTRY_FILENAME)
    dirs = iter_slice_dirs(root, registry)
    invalid = []
    for d in dirs:
        try:
            load_sample(d, registry)
        except SampleValidationError as exc:
            invalid.append({"sample": str(d.relative_to(root)), "problems": exc.problems})
        except (OSError, ValueError) as exc:
            invalid.append({"sample": str(d.relative_to(root)), "problems": [str(exc)]})
    report = {"corpus": str(root), "samples": len(dirs), "invalid": invalid, "registry_hash": registry.digest()}
    if not dirs:
        raise ConfigError(f"corpus {root} holds no samples", field="corpus")
    if invalid:
        emit(report)
        raise SampleValidationError(invalid[0]["sample"], invalid[0]["problems"])
    return report


def _train_config(args: argparse.Namespace) -> TrainConfig:
    cfg = load_config(resolve_config(args.config), TrainConfig)
    overrides = parse_overrides(args.set)
    if args.corpus:
        overrides["corpus"] = args.corpus
    for flag, key in (("pfm", "pfm_enabled"), ("mcbs", "mcbs_enabled"), ("epochs", "epochs"), ("batch_size", "batch_size"), ("seed", "seeds.global")):
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = value
    if "epochs" in overrides and "lr_plateau_epochs" not in overrides:
        overrides["lr_plateau_epochs"] = min(cfg.lr_plateau_epochs, overrides["epochs"])
    return apply_overrides(cfg, overrides)


def cmd_train(args: argparse.Namespace) -> dict[str, Any]:
    cfg = _train_config(args)
    corpus = require_corpus(cfg.corpus)
    out = prepare_out_dir(Path(args.out), args.overwrite, keep=args.resume is not None)
    write_invocation(out, "train", config=cfg.model_dump(mode="json", by_alias=True), resume=args.resume)
    registry, samples = load_corpus(corpus)
    result = train(cfg, registry, samples, out, resume=args.resume)
    tasks = cfg.eval_tasks or None
    rows = evaluate_model(result.generator, registry, result.test_samples, tasks)
    write_metrics_csv(rows, out / "metrics.csv", extra={"split": "test"})
    baselines = task_baselines(registry, result.test_samples, tasks)
    epochs = result.manifest["epochs"]
    evaluation = {
        "split": "test",
        "rows": [dataclasses.asdict(r) for r in rows],
        "zero_baseline_psnr": baselines,
    }
    (out / "evaluation.json").write_text(json.dumps(evaluation, indent=1, sort_keys=True) + "\n")
    return {
        "out": str(out),
        "epochs": len(epochs),
        "loss_g_first": epochs[0]["loss_g"] if epochs else None,
        "loss_g_last": epochs[-1]["loss_g"] if epochs else None,
        "grad_audit": result.manifest.get("grad_audit"),
    }


def cmd_ablate(args: argparse.Namespace) -> dict[str, Any]:
    cfg = load_config(resolve_config(args.config), AblationConfig)
    overrides = parse_overrides(args.set)
    if args.corpus:
        overrides["train.corpus"] = args.corpus
    cfg = apply_overrides(cfg, overrides)
    corpus = require_corpus(cfg.train.corpus)
    out = prepare_out_dir(Path(args.out), args.overwrite)
    write_invocation(out, "ablate", config=cfg.model_dump(mode="json", by_alias=True))
    registry, samples = load_corpus(corpus)
    res = run_ablation(cfg, registry, samples, out)
    return {"out": str(out), "summary": res["summary"]}


def _split(samples: Sequence[MultiModalSample], split: str, test_fraction: float) -> list[MultiModalSample]:
    if split == "all":
        return list(samples)
    train_set, test_set = split_corpus(samples, test_fraction)
    return test_set if split == "test" else train_set


def cmd_evaluate(args: argparse.Namespace) -> dict[str, Any]:
    if args.tasks is not None and not [t for t in args.tasks if t.strip()]:
        raise InvalidTaskError("empty task list")
    tasks = [t for t in args.tasks if t.strip()] if args.tasks is not None else None
    for t in tasks or []:
        parse_task(t)
    corpus = require_corpus(args.corpus)
    out = prepare_out_dir(Path(args.out), args.overwrite)
    write_invocation(out, "evaluate", checkpoint=args.checkpoint, corpus=str(corpus), split=args.split, tasks=tasks)
    registry, samples = load_corpus(corpus)
    gen, _, _, payload = load_checkpoint(args.checkpoint, expected_registry_hash=registry.digest())
    fraction = float(payload.get("config", {}).get("test_fraction", 0.25))
    subset = _split(samples, args.split, fraction)
    rows = evaluate_model(gen, registry, subset, tasks)
    if not rows:
        raise InvalidTaskError("no task could be evaluated on this split")
    write_metrics_csv(rows, out / "metrics.csv", extra={"split": args.split})
    return {"out": str(out), "rows": len(rows)}


def cmd_synthesize(args: argparse.Namespace) -> dict[str, Any]:
    sources = parse_modalities(args.sources)
    targets = parse_modalities(args.targets)
    if sources.count == 0 or targets.count == 0:
        raise InvalidTaskError("sources and targets must both be non-empty")
    if (sources & targets).count:
        raise InvalidTaskError(f"{(sources & targets).label()} requested as both source and target")
    gen, _, registry, _ = load_checkpoint(args.checkpoint)
    sample = load_sample(Path(args.input), registry)
    if not sources.dominated_by(sample.availability):
        raise InvalidTaskError(f"sources {sources.label()} not all available in {args.input}")
    covered = ModalityMask(gen.cfg.coverage)
    if not targets.dominated_by(covered):
        raise InvalidTaskError(f"model has no decoder for {(targets & ModalityMask(tuple(1 - b for b in covered.bits))).label()}")

    out = prepare_out_dir(Path(args.out), args.overwrite)
    write_invocation(out, "synthesize", checkpoint=args.checkpoint, input=args.input, sources=sources.names(), targets=targets.names())
    x = sample.images * sources.as_array()[:, None, None]
    pred = GeneratorSynthesizer(gen)(x[None], sources, sample.dataset_id)[0]
    written = sources | targets
    images = np.where(targets.as_array()[:, None, None] > 0, np.clip(pred, 0.0, 1.0), x).astype(np.float32)
    result = MultiModalSample(images, written, sample.dataset_id, sample.case_id, sample.slice_index)
    # synthesized channels may lie outside the source dataset's own coverage
    view = DatasetRegistry(tuple(dataclasses.replace(d, coverage=d.coverage | covered) for d in registry.datasets))
    validate_sample(result, view)
    save_sample(result, out, registry.by_id(sample.dataset_id).name)
    if not args.no_montage:
        # rows: sources, synthesized targets, ground truth where the input had it
        width = max(sources.count, targets.count)
        blank = np.zeros_like(images[0])

        def row(planes: list[np.ndarray]) -> list[np.ndarray]:
            return planes + [blank] * (width - len(planes))

        rows = [row([images[i] for i in sources.indices]), row([images[i] for i in targets.indices])]
        if any(sample.availability[i] for i in targets.indices):
            rows.append(row([sample.images[i] for i in targets.indices]))
        montage(rows, out / "montage.png")
    return {"out": str(out), "sources": sources.names(), "targets": targets.names()}


# -----------------------------------------------------------------------------
# argument parsing
# -----------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pmmsynth", description="Multi-dataset MRI modality synthesis on phantom data.")
    p.add_argument("--version", action="version", version=f"pmmsynth {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-phantom", help="render a synthetic multi-dataset corpus")
    g.add_argument("--spec", required=True, help="phantom spec YAML (path or shipped name, e.g. phantom_smoke)")
    g.add_argument("--out", required=True, help="corpus directory")
    g.add_argument("--overwrite", action="store_true", help="replace a non-empty output directory")
    g.set_defaults(func=cmd_generate_phantom)

    v = sub.add_parser("validate-corpus", help="check every slice of a corpus against its registry")
    v.add_argument("--corpus", required=True)
    v.set_defaults(func=cmd_validate_corpus)

    t = sub.add_parser("train", help="train a generator and discriminators")
    t.add_argument("--config", required=True, help="train config YAML (path or shipped name, e.g. train_smoke)")
    t.add_argument("--corpus", help="corpus directory (overrides the config)")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--pfm", type=on_off, help="on/off: dataset-conditioned feature modulation")
    t.add_argument("--mcbs", type=on_off, help="on/off: grouped batches (off forces batch size 1)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--seed", type=int, help="global seed")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted config override, repeatable")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--overwrite", action="store_true")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="train matched-seed arms and compare them")
    a.add_argument("--config", required=True, help="ablation config YAML (path or shipped name, e.g. ablate_pfm)")
    a.add_argument("--corpus", help="corpus directory (overrides train.corpus)")
    a.add_argument("--out", required=True)
    a.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted override, e.g. train.epochs=4")
    a.add_argument("--overwrite", action="store_true")
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("synthesize", help="synthesize target modalities for one slice")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True, help="slice directory in corpus layout")
    s.add_argument("--sources", required=True, help="comma-separated modality names")
    s.add_argument("--targets", required=True, help="comma-separated modality names")
    s.add_argument("--out", required=True)
    s.add_argument("--no-montage", action="store_true")
    s.add_argument("--overwrite", action="store_true")
    s.set_defaults(func=cmd_synthesize)

    e = sub.add_parser("evaluate", help="score a checkpoint on a corpus split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--split", choices=["test", "train", "all"], default="test")
    e.add_argument("--tasks", nargs="*", help="tasks like T1+T2->FLAIR; omitted: four per dataset")
    e.add_argument("--out", required=True)
    e.add_argument("--overwrite", action="store_true")
    e.set_defaults(func=cmd_evaluate)
    return p


def error_record(exc: BaseException, code: int) -> dict[str, Any]:
    rec: dict[str, Any] = {"status": "error", "error": type(exc).__name__, "message": str(exc), "exit_code": code}
    if getattr(exc, "field", None):
        rec["field"] = exc.field
    return rec


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        result = args.func(args)
    except PMMSynthError as exc:
        print(json.dumps(error_record(exc, exc.exit_code)), file=sys.stderr)
        return exc.exit_code
    except (OSError, RuntimeError) as exc:
        log.debug("runtime failure", exc_info=True)
        print(json.dumps(error_record(exc, 3)), file=sys.stderr)
        return 3
    emit({"status": "ok", "command": args.command, **result})
    return 0


if __name__ == "__main__":
    sys.exit(main())
