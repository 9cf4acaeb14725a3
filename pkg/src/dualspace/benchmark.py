"""Benchmark harness: split protocols, AUROC, experiment runner, ablations.

Two evaluation settings:
    unimodal    - one class is normal; training sees only that class, every
                  other test sample is an anomaly (test anomaly fraction
                  (K-1)/K for K balanced classes).
    multimodal  - one class is abnormal; training sees all other classes with
                  their labels discarded, only the held-out class is an
                  anomaly at test time (fraction 1/K).

AUROC is the probability that a random anomaly gets a lower normality score
than a random normal sample, ties credited one half; computed via the
O(n log n) midrank statistic.

Seed discipline: each trial has one master seed (base_seed + trial); student
training and GMM init seeds fan out from (master, pivot_class, role) so that
pivot runs are independent and reproducible in isolation.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import density
from .backbone import ImageBatch, preprocess
from .datasets import DatasetHandle
from .distillation import TrainConfig, default_block_indices, discrepancy_features, train_students
from .exceptions import DataError

SETTINGS = ("unimodal", "multimodal")


# ---------------------------------------------------------------------------
# splits

@dataclass
class EvalSplit:
    setting: str
    pivot_class: int
    train_ids: np.ndarray
    test_ids: np.ndarray
    anomaly_labels: np.ndarray  # aligned to test_ids, 1 = anomalous


def _split_batches(train: ImageBatch, test: ImageBatch, setting: str,
                   pivot_class: int) -> EvalSplit:
    if setting not in SETTINGS:
        raise ValueError(f"unknown setting {setting!r}")
    if train.labels is None or test.labels is None:
        raise DataError("splits need labeled train and test batches")
    if setting == "unimodal":
        train_mask = train.labels == pivot_class
        anomaly = (test.labels != pivot_class).astype(np.int8)
    else:
        train_mask = train.labels != pivot_class
        anomaly = (test.labels == pivot_class).astype(np.int8)
    if not np.any(train_mask):
        raise ValueError(f"pivot class {pivot_class} leaves zero training samples "
                         f"({setting})")
    return EvalSplit(setting=setting, pivot_class=int(pivot_class),
                     train_ids=train.ids[train_mask].copy(),
                     test_ids=test.ids.copy(), anomaly_labels=anomaly)


def make_unimodal_split(ds: DatasetHandle, normal_class: int) -> EvalSplit:
    train, test = ds.load()
    return _split_batches(train, test, "unimodal", normal_class)


def make_multimodal_split(ds: DatasetHandle, abnormal_class: int) -> EvalSplit:
    train, test = ds.load()
    return _split_batches(train, test, "multimodal", abnormal_class)


def _rows_for_ids(batch: ImageBatch, ids: np.ndarray) -> np.ndarray:
    index = {s: i for i, s in enumerate(batch.ids.tolist())}
    try:
        return np.asarray([index[s] for s in ids.tolist()], dtype=np.intp)
    except KeyError as exc:
        raise DataError(f"split id {exc.args[0]!r} not present in batch") from exc


# ---------------------------------------------------------------------------
# metric

def auroc(scores, labels) -> float:
    """AUROC of normality scores against binary anomaly labels (1 = anomaly).

    Equals the Mann-Whitney statistic: P(anomaly scored below normal) with
    half credit for ties. Raises on single-class labels.
    """
    values = scores.values if isinstance(scores, density.ScoreVector) else np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.int8).reshape(-1)
    if values.shape[0] != y.shape[0]:
        raise ValueError(f"scores ({values.shape[0]}) and labels ({y.shape[0]}) differ in length")
    n_anom = int(y.sum())
    n_norm = y.size - n_anom
    if n_anom == 0 or n_norm == 0:
        raise ValueError("AUROC undefined: labels contain a single class")
    ranks = rankdata(values)  # midranks
    u = ranks[y == 0].sum() - n_norm * (n_norm + 1) / 2.0
    return float(u / (n_norm * n_anom))


# ---------------------------------------------------------------------------
# variants

@dataclass(frozen=True)
class Variant:
    family: str                 # pretrained-only | finetuned-only | combined
    m: int | None = None        # teacher-student blocks (finetuned/combined)
    scorer: str = "gaussian"    # gaussian | knn | gmm
    scorer_param: int = 2       # k for knn / components for gmm
    energy: float = 0.90        # whitening explained-variance threshold

    def __post_init__(self):
        if self.family not in ("pretrained-only", "finetuned-only", "combined"):
            raise ValueError(f"unknown variant family {self.family!r}")
        if self.scorer not in ("gaussian", "knn", "gmm"):
            raise ValueError(f"unknown scorer {self.scorer!r}")
        if not 0.0 < self.energy <= 1.0:
            raise ValueError(f"energy must be in (0, 1], got {self.energy}")

    @property
    def name(self) -> str:
        fam = self.family if self.m is None else f"{self.family}(m={self.m})"
        sc = self.scorer if self.scorer == "gaussian" else f"{self.scorer}(k={self.scorer_param})"
        return f"{fam}, {sc}, {self.energy:.2f}"


def parse_variant(text) -> Variant:
    """Parse 'family[(m=N)], scorer[(k=N)], energy' with trailing parts optional,
    e.g. 'combined(m=10), gmm(k=2), 0.95' or 'pretrained-only'."""
    if isinstance(text, Variant):
        return text
    parts = [p.strip() for p in str(text).split(",") if p.strip()]
    if not parts:
        raise ValueError("empty variant name")

    def split_param(token, key):
        if "(" not in token:
            return token, None
        head, _, inside = token.partition("(")
        inside = inside.rstrip(")")
        k, _, v = inside.partition("=")
        if k.strip() != key or not v.strip():
            raise ValueError(f"malformed variant token {token!r}")
        return head.strip(), int(v)

    family, m = split_param(parts[0], "m")
    scorer, sp = "gaussian", None
    energy = 0.90
    for part in parts[1:]:
        try:
            energy = float(part)
            continue
        except ValueError:
            pass
        scorer, sp = split_param(part, "k")
    kwargs = dict(family=family, m=m, scorer=scorer, energy=energy)
    if sp is not None:
        kwargs["scorer_param"] = sp
    return Variant(**kwargs)


def table3_variants(m_values=(1, 5, 10), scorer: str = "gaussian",
                    energy: float = 0.90) -> list[Variant]:
    """The block-count ablation layout: pretrained-only, then finetuned-only
    and combined at each m (7 rows for three m values)."""
    rows = [Variant("pretrained-only", scorer=scorer, energy=energy)]
    rows += [Variant("finetuned-only", m=m, scorer=scorer, energy=energy) for m in m_values]
    rows += [Variant("combined", m=m, scorer=scorer, energy=energy) for m in m_values]
    return rows


# ---------------------------------------------------------------------------
# pipeline

@dataclass
class PipelineConfig:
    backbone: object
    variant: Variant
    train: TrainConfig = field(default_factory=TrainConfig)
    whiten_finetuned: bool = False
    reg_lambda: float = 0.0
    base_seed: int = 0

    def snapshot(self) -> dict:
        return {
            "backbone": self.backbone.spec.identifier,
            "variant": self.variant.name,
            "train": asdict(self.train),
            "whiten_finetuned": self.whiten_finetuned,
            "reg_lambda": self.reg_lambda,
            "base_seed": self.base_seed,
        }


def _fanout_seed(master: int, pivot: int, role: int) -> int:
    return int(np.random.SeedSequence([master, pivot, role]).generate_state(1)[0])


def _score_space(train_fm, test_fm, variant: Variant, cfg: PipelineConfig,
                 seed: int, whiten: bool):
    if whiten:
        w = density.fit_whitener(train_fm, variant.energy)
        train_fm = density.apply_whitener(w, train_fm)
        test_fm = density.apply_whitener(w, test_fm)
    if variant.scorer == "gaussian":
        model = density.fit_gaussian(train_fm, cfg.reg_lambda)
        return density.gaussian_log_likelihood(model, test_fm)
    if variant.scorer == "gmm":
        model = density.fit_gmm(train_fm, k=variant.scorer_param, seed=seed,
                                reg_lambda=cfg.reg_lambda)
        return density.gmm_log_likelihood(model, test_fm)
    return density.knn_score(train_fm, test_fm, k=variant.scorer_param)


def score_pipeline(train_batch: ImageBatch, test_batch: ImageBatch,
                   cfg: PipelineConfig, master_seed: int, pivot: int) -> density.ScoreVector:
    """Score a preprocessed test batch against a preprocessed normal-only
    training batch under the configured variant."""
    variant = cfg.variant
    zp_scores = zf_scores = None

    if variant.family in ("pretrained-only", "combined"):
        zp_train = cfg.backbone.extract_pretrained(train_batch, split_tag="train")
        zp_test = cfg.backbone.extract_pretrained(test_batch, split_tag="test")
        zp_scores = _score_space(zp_train, zp_test, variant, cfg,
                                 _fanout_seed(master_seed, pivot, 2), whiten=True)

    if variant.family in ("finetuned-only", "combined"):
        blocks = default_block_indices(cfg.backbone.spec.num_blocks, variant.m)
        train_cfg = replace(cfg.train, seed=_fanout_seed(master_seed, pivot, 1))
        ensemble = train_students([train_batch], cfg.backbone, blocks, train_cfg)
        zf_train = discrepancy_features(train_batch, cfg.backbone, ensemble).to_features()
        zf_test = discrepancy_features(test_batch, cfg.backbone, ensemble).to_features()
        zf_scores = _score_space(zf_train, zf_test, variant, cfg,
                                 _fanout_seed(master_seed, pivot, 3),
                                 whiten=cfg.whiten_finetuned)

    if variant.family == "pretrained-only":
        return zp_scores
    if variant.family == "finetuned-only":
        return zf_scores
    return density.combined_score(zp_scores, zf_scores)


# ---------------------------------------------------------------------------
# experiment runner

@dataclass
class ExperimentReport:
    dataset: str
    setting: str
    variant: str
    per_class_auroc: dict[int, float]   # pivot -> mean AUROC across trials
    mean_auroc: float
    trials: list[float]                 # per-trial mean across pivots
    std_across_trials: float
    config: dict
    timing: float                       # seconds; kept out of the report JSON

    def to_dict(self, include_timing: bool = False) -> dict:
        doc = {
            "dataset": self.dataset,
            "setting": self.setting,
            "variant": self.variant,
            "per_class_auroc": {str(k): v for k, v in sorted(self.per_class_auroc.items())},
            "mean_auroc": self.mean_auroc,
            "trials": self.trials,
            "std_across_trials": self.std_across_trials,
            "config": self.config,
        }
        if include_timing:
            doc["timing"] = self.timing
        return doc


def run_experiment(ds: DatasetHandle, setting: str, pipeline_config: PipelineConfig,
                   trials: int = 1) -> ExperimentReport:
    """Full evaluation: for every pivot class build the split, fit the
    configured pipeline on the (label-free) normal training samples, score
    the whole test set, and aggregate AUROC across pivots and trials."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    t_start = time.perf_counter()
    train_raw, test_raw = ds.load()
    spec = pipeline_config.backbone.spec
    train_prep = preprocess(train_raw, spec)
    test_prep = preprocess(test_raw, spec)

    per_class: dict[int, list[float]] = {c: [] for c in range(ds.num_classes)}
    trial_means: list[float] = []
    for t in range(trials):
        master = pipeline_config.base_seed + t
        pivot_scores = []
        for pivot in range(ds.num_classes):
            try:
                split = _split_batches(train_raw, test_raw, setting, pivot)
                rows = _rows_for_ids(train_prep, split.train_ids)
                train_batch = train_prep.subset(rows, drop_labels=True)
                scores = score_pipeline(train_batch, test_prep, pipeline_config,
                                        master, pivot)
                value = auroc(scores, split.anomaly_labels)
            except Exception as exc:
                raise type(exc)(f"[pivot_class={pivot}] {exc}") from exc
            per_class[pivot].append(value)
            pivot_scores.append(value)
        trial_means.append(float(np.mean(pivot_scores)))

    per_class_mean = {c: float(np.mean(v)) for c, v in per_class.items()}
    std = float(np.std(trial_means, ddof=1)) if trials > 1 else 0.0
    return ExperimentReport(
        dataset=ds.name, setting=setting, variant=pipeline_config.variant.name,
        per_class_auroc=per_class_mean,
        mean_auroc=float(np.mean(list(per_class_mean.values()))),
        trials=trial_means, std_across_trials=std,
        config=dict(pipeline_config.snapshot(), setting=setting, trials=trials,
                    trial_seeds=[pipeline_config.base_seed + t for t in range(trials)]),
        timing=time.perf_counter() - t_start)


def ablation_runner(ds: DatasetHandle, setting: str, variants,
                    pipeline_config: PipelineConfig, trials: int = 1) -> list[ExperimentReport]:
    """One experiment per variant (names or Variant objects); unknown variant
    names raise before anything runs."""
    parsed = [parse_variant(v) for v in variants]
    reports = []
    for variant in parsed:
        cfg = replace(pipeline_config, variant=variant)
        reports.append(run_experiment(ds, setting, cfg, trials))
    return reports


# ---------------------------------------------------------------------------
# report files

def write_report_json(reports: list[ExperimentReport], path) -> None:
    """Deterministic report file: sorted keys, no wall-clock content."""
    doc = {"reports": [r.to_dict() for r in reports]}
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def write_timing_json(reports: list[ExperimentReport], path) -> None:
    doc = {"timing_seconds": {r.variant: r.timing for r in reports}}
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


def write_report_csv(reports: list[ExperimentReport], path) -> None:
    """Flat table, one row per (variant, pivot class)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dataset", "setting", "variant", "pivot_class",
                         "auroc", "mean_auroc", "std_across_trials"])
        for r in reports:
            for pivot in sorted(r.per_class_auroc):
                writer.writerow([r.dataset, r.setting, r.variant, pivot,
                                 f"{r.per_class_auroc[pivot]:.6f}",
                                 f"{r.mean_auroc:.6f}",
                                 f"{r.std_across_trials:.6f}"])


def load_report_json(path) -> list[dict]:
    return json.loads(Path(path).read_text())["reports"]
