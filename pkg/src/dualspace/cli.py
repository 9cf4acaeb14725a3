"""Command-line orchestrator.

Subcommands: extract | train | evaluate | diagnose | report. Every command
reads an optional config file plus flag overrides (see `config`); reports and
cache entries are deterministic for a fixed config + seeds, with wall-clock
timing kept in a separate sidecar file. Cache root resolution: --cache-dir /
config, then the DUALSPACE_CACHE environment variable, then ./cache.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import benchmark, density, diagnostics, distillation
from .backbone import IdentityBackbone, VitBackbone, load_backbone, make_mock_backbone, preprocess
from .cache import FeatureCache, cache_key
from .config import RunConfig, build_run_config, parse_int_list
from .datasets import get_dataset
from .exceptions import ConfigError, DataError, NumericalError

logger = logging.getLogger(__name__)

CACHE_ENV_VAR = "DUALSPACE_CACHE"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


# ---------------------------------------------------------------------------
# shared resolution helpers

def _make_backbone(cfg: RunConfig):
    if cfg.backbone == "mock":
        return make_mock_backbone(seed=cfg.backbone_seed)
    if cfg.backbone == "identity":
        size = cfg.dataset_args.get("image_size", 32)
        return IdentityBackbone(image_size=size)
    return load_backbone(cfg.backbone)


def _make_dataset(cfg: RunConfig):
    return get_dataset(cfg.dataset, **cfg.dataset_args)


def _train_config(cfg: RunConfig) -> distillation.TrainConfig:
    try:
        return distillation.TrainConfig(**cfg.train_args)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad train.* options: {exc}") from exc


def _cache_root(cfg: RunConfig) -> Path:
    return Path(cfg.cache_dir or os.environ.get(CACHE_ENV_VAR) or "cache")


def _output_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output dir {out}: {exc}") from exc
    return out


def _variants(cfg: RunConfig) -> list[benchmark.Variant]:
    names = cfg.variants if cfg.variants else [cfg.variant]
    try:
        parsed = [benchmark.parse_variant(name) for name in names]
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.energy is not None:
        parsed = [replace(v, energy=cfg.energy) for v in parsed]
    return parsed


def _prep_params(spec) -> dict:
    return {"resolution": spec.input_resolution,
            "pixel_mean": list(spec.pixel_mean),
            "pixel_std": list(spec.pixel_std)}


def _block_indices(cfg: RunConfig, backbone) -> list[int]:
    if cfg.blocks is not None:
        return cfg.blocks
    m = _variants(cfg)[0].m
    return distillation.default_block_indices(backbone.spec.num_blocks, m)


# ---------------------------------------------------------------------------
# extract

def cmd_extract(cfg: RunConfig) -> dict:
    """Preprocess + penultimate features + block outputs into the cache;
    idempotent via content-addressed keys."""
    ds = _make_dataset(cfg)
    backbone = _make_backbone(cfg)
    cache = FeatureCache(_cache_root(cfg))
    prep = _prep_params(backbone.spec)
    has_blocks = isinstance(backbone, VitBackbone)
    blocks = _block_indices(cfg, backbone) if has_blocks else []

    summary = {"extracted": [], "cached": []}
    train, test = ds.load()
    for tag, batch in (("train", train), ("test", test)):
        prepped = preprocess(batch, backbone.spec)
        jobs = [("penultimate", None)] + [(f"block{j}", j) for j in blocks]
        for kind, j in jobs:
            key = cache_key(backbone.spec.identifier, dict(prep, kind=kind), prepped.ids)
            if cache.get(key) is not None:
                summary["cached"].append(key)
                continue
            if j is None:
                values = backbone.extract_pretrained(prepped, split_tag=tag).values
            else:
                values = backbone.block_outputs(prepped, [j])[0].activations
            cache.put(key, values.astype(np.float32), {
                "backbone": backbone.spec.identifier, "dataset": ds.name,
                "split_tag": tag, "kind": kind,
            })
            summary["extracted"].append(key)
    print(f"extract: {len(summary['extracted'])} entries written, "
          f"{len(summary['cached'])} cache hits -> {cache.root}")
    return summary


# ---------------------------------------------------------------------------
# train

def _checkpoint_dir(cfg: RunConfig) -> Path:
    return _output_dir(cfg) / f"students-{cfg.dataset}-{cfg.setting}-p{cfg.pivot_class}"


def cmd_train(cfg: RunConfig) -> Path:
    """Train the student ensemble for one pivot class; resume skips blocks
    whose weight files already exist."""
    ds = _make_dataset(cfg)
    backbone = _make_backbone(cfg)
    if not isinstance(backbone, VitBackbone):
        raise ConfigError("student training needs a transformer backbone, not 'identity'")
    blocks = _block_indices(cfg, backbone)
    train_cfg = replace(_train_config(cfg), seed=cfg.seed)

    train_raw, test_raw = ds.load()
    split = benchmark._split_batches(train_raw, test_raw, cfg.setting, cfg.pivot_class)
    prepped = preprocess(train_raw, backbone.spec)
    rows = benchmark._rows_for_ids(prepped, split.train_ids)
    normal_batch = prepped.subset(rows, drop_labels=True)

    ckpt = _checkpoint_dir(cfg)
    ckpt.mkdir(parents=True, exist_ok=True)
    done = [j for j in blocks if (ckpt / f"block_{j:02d}.npz").exists()]
    todo = [j for j in blocks if j not in done]

    merged_weights: dict[int, dict] = {}
    merged_log: dict = {"per_block": {}}
    if done:
        print(f"train: resuming, skipping completed blocks {done}")
        old_manifest = ckpt / "manifest.json"
        old_log = {}
        if old_manifest.exists():
            old_log = json.loads(old_manifest.read_text()).get(
                "training_log", {}).get("per_block", {})
        from . import nn
        for j in done:
            arrays = np.load(ckpt / f"block_{j:02d}.npz")
            merged_weights[j] = {name: arrays[name] for name in nn.BLOCK_PARAM_NAMES}
            merged_log["per_block"][str(j)] = old_log.get(str(j), {"resumed": True})

    if todo:
        ensemble = distillation.train_students([normal_batch], backbone, todo, train_cfg)
        for j, weights in zip(ensemble.block_indices, ensemble.student_weights):
            merged_weights[j] = weights
        merged_log["per_block"].update(ensemble.training_log["per_block"])
        merged_log["normality"] = ensemble.training_log.get("normality", {})

    ordered = sorted(merged_weights)
    merged = distillation.StudentEnsemble(
        block_indices=ordered,
        student_weights=[merged_weights[j] for j in ordered],
        training_log=merged_log, config_snapshot=train_cfg,
        backbone_id=backbone.spec.identifier)
    distillation.save_ensemble(merged, ckpt)

    with open(ckpt / "loss_curves.csv", "w") as fh:
        fh.write("block,epoch,loss\n")
        for j, log in sorted(merged_log["per_block"].items(), key=lambda kv: int(kv[0])):
            for epoch, loss in enumerate(log.get("epoch_losses", [])):
                fh.write(f"{j},{epoch},{loss!r}\n")

    print(f"train: blocks trained={todo} skipped={done} -> {ckpt}")
    return ckpt


# ---------------------------------------------------------------------------
# evaluate

def cmd_evaluate(cfg: RunConfig) -> dict:
    ds = _make_dataset(cfg)
    backbone = _make_backbone(cfg)
    variants = _variants(cfg)
    base = benchmark.PipelineConfig(
        backbone=backbone, variant=variants[0], train=_train_config(cfg),
        whiten_finetuned=cfg.whiten_finetuned, base_seed=cfg.seed)
    reports = benchmark.ablation_runner(ds, cfg.setting, variants, base, cfg.trials)

    out = _output_dir(cfg)
    paths = {"json": out / "report.json", "csv": out / "report.csv",
             "timing": out / "report.timing.json"}
    benchmark.write_report_json(reports, paths["json"])
    benchmark.write_report_csv(reports, paths["csv"])
    benchmark.write_timing_json(reports, paths["timing"])
    for r in reports:
        print(f"evaluate[{cfg.setting}] {r.variant}: mean AUROC {r.mean_auroc:.4f} "
              f"(+/- {r.std_across_trials:.4f} over {len(r.trials)} trial(s))")
    print(f"evaluate: wrote {paths['json']} and {paths['csv']}")
    return {name: str(p) for name, p in paths.items()}


# ---------------------------------------------------------------------------
# diagnose

def cmd_diagnose(cfg: RunConfig) -> dict:
    out = _output_dir(cfg)
    if cfg.demo == "toy":
        result = diagnostics.toy_confusion_demo(cfg.seed)
        doc = {k: result[k] for k in ("unimodal_auroc", "multimodal_auroc", "narrative")}
        path = out / "toy_confusion.json"
        path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
        _save_toy_plot(result, out / "toy_confusion.png")
        print(result["narrative"])
        return {"json": str(path)}

    if cfg.demo == "inflation":
        num_classes = cfg.dataset_args.get("num_classes", 20)
        result = diagnostics.auroc_inflation_demo(num_classes, confused_class=1,
                                                  seed=cfg.seed)
        path = out / "auroc_inflation.json"
        path.write_text(json.dumps(result, sort_keys=True, indent=2) + "\n")
        print(result["narrative"])
        return {"json": str(path)}

    # default: confusion report over cached (or freshly extracted) features
    ds = _make_dataset(cfg)
    backbone = _make_backbone(cfg)
    cache = FeatureCache(_cache_root(cfg))
    _, test = ds.load()
    prepped = preprocess(test, backbone.spec)
    key = cache_key(backbone.spec.identifier,
                    dict(_prep_params(backbone.spec), kind="penultimate"), prepped.ids)
    values = cache.get(key)
    if values is None:
        values = backbone.extract_pretrained(prepped, split_tag="test").values
        cache.put(key, values.astype(np.float32), {
            "backbone": backbone.spec.identifier, "dataset": ds.name,
            "split_tag": "test", "kind": "penultimate"})
    features = density.FeatureMatrix(values, density.SPACE_PRETRAINED,
                                     {"backbone": backbone.spec.identifier})
    report = diagnostics.confusion_report(features, test.labels, cfg.flag_threshold)
    doc = {
        "pairwise_confusion": report.pairwise_confusion.tolist(),
        "flagged_pairs": [list(p) for p in report.flagged_pairs],
        "threshold": report.threshold,
    }
    json_path = out / "confusion.json"
    json_path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")
    png_path = out / "confusion.png"
    diagnostics.save_confusion_plot(report, test.labels, png_path)
    print(f"diagnose: flagged pairs {report.flagged_pairs} -> {json_path}")
    return {"json": str(json_path), "plot": str(png_path)}


def _save_toy_plot(result: dict, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    markers = ("s", "o", "^", "D")
    fig, ax = plt.subplots(figsize=(5.5, 5))
    for c, name in enumerate(diagnostics.TOY_CLASS_NAMES):
        pts = result["points"][result["labels"] == c]
        ax.scatter(pts[:, 0], pts[:, 1], marker=markers[c], s=18, alpha=0.7, label=name)
    ax.legend(fontsize=8)
    ax.set_title(
        f"unimodal AUROC {result['unimodal_auroc']:.3f} vs "
        f"multimodal {result['multimodal_auroc']:.3f}", fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# report

def cmd_report(path: str, csv_out: str | None) -> None:
    reports = benchmark.load_report_json(path)
    for r in reports:
        print(f"{r['dataset']} [{r['setting']}] {r['variant']}: "
              f"mean AUROC {r['mean_auroc']:.4f} (+/- {r['std_across_trials']:.4f})")
        for pivot, value in sorted(r["per_class_auroc"].items(), key=lambda kv: int(kv[0])):
            print(f"  pivot {pivot}: {value:.4f}")
    if csv_out:
        import csv as csv_mod
        with open(csv_out, "w", newline="") as fh:
            writer = csv_mod.writer(fh)
            writer.writerow(["dataset", "setting", "variant", "pivot_class", "auroc"])
            for r in reports:
                for pivot, value in sorted(r["per_class_auroc"].items(),
                                           key=lambda kv: int(kv[0])):
                    writer.writerow([r["dataset"], r["setting"], r["variant"],
                                     pivot, f"{value:.6f}"])
        print(f"report: wrote {csv_out}")


# ---------------------------------------------------------------------------
# argument parsing

def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="config file (key = value lines)")
    sub.add_argument("--dataset")
    sub.add_argument("--setting", choices=["unimodal", "multimodal"])
    sub.add_argument("--variant")
    sub.add_argument("--seed", type=int)
    sub.add_argument("--trials", type=int)
    sub.add_argument("--blocks", help="student block indices, e.g. '2,3'")
    sub.add_argument("--energy", type=float, help="whitening threshold (0.85/0.90/0.95)")
    sub.add_argument("--backbone", help="mock | identity | weights path prefix")
    sub.add_argument("--pivot", type=int, dest="pivot_class")
    sub.add_argument("--cache-dir", dest="cache_dir")
    sub.add_argument("--output-dir", dest="output_dir")
    sub.add_argument("--demo", choices=["confusion", "toy", "inflation"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualspace",
        description="Dual feature-space semantic anomaly detection pipeline.")
    subs = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("extract", "cache penultimate features and block outputs"),
        ("train", "train per-block students for one pivot class"),
        ("evaluate", "run experiments / ablations and write reports"),
        ("diagnose", "pretraining-confusion diagnostics and demos"),
    ]:
        _add_common(subs.add_parser(name, help=help_text))
    rep = subs.add_parser("report", help="render an existing report JSON")
    rep.add_argument("path")
    rep.add_argument("--csv", dest="csv_out")
    return parser


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {key: getattr(args, key, None) for key in (
        "dataset", "setting", "variant", "seed", "trials", "energy",
        "backbone", "pivot_class", "cache_dir", "output_dir", "demo")}
    if getattr(args, "blocks", None) is not None:
        overrides["blocks"] = parse_int_list(args.blocks)
    return build_run_config(getattr(args, "config", None), overrides)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            cmd_report(args.path, args.csv_out)
        else:
            cfg = _config_from_args(args)
            {"extract": cmd_extract, "train": cmd_train,
             "evaluate": cmd_evaluate, "diagnose": cmd_diagnose}[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError, ValueError, IndexError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
