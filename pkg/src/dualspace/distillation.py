"""Per-block teacher-student distillation on normal data.

Each mirrored block gets its own student, architecturally identical to the
teacher block, trained to regress the teacher's tapped output from the raw
stream entering that block. Training minimizes the batch-mean of the squared
Euclidean distance over all activation elements; the teacher stays frozen
throughout. Blocks are fully independent: each owns its parameters and a
seed derived from (config.seed, block_index), so training order cannot
change any result.

The discrepancy feature of a sample is, per block, the squared Euclidean norm
of (teacher output - student output) summed over all tokens and channels
("sum" mode, the default); "mean" mode divides by the element count, which
only rescales each column.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from . import nn
from .backbone import ImageBatch, VitBackbone
from .density import FeatureMatrix, SPACE_FINETUNED
from .exceptions import NumericalError

logger = logging.getLogger(__name__)

_CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-4
    optimizer_name: str = "adam"
    seed: int = 0
    early_stop_patience: int | None = 5
    init_mode: str = "random"          # "random" | "copy"
    dropout_rate: float = 0.0
    discrepancy_norm: str = "sum"      # "sum" | "mean"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs, batch_size, learning_rate must be positive")
        if self.optimizer_name != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer_name!r}")
        if self.init_mode not in ("random", "copy"):
            raise ValueError(f"unknown init_mode {self.init_mode!r}")
        if self.discrepancy_norm not in ("sum", "mean"):
            raise ValueError(f"unknown discrepancy_norm {self.discrepancy_norm!r}")


@dataclass
class StudentEnsemble:
    block_indices: list[int]
    student_weights: list[dict]
    training_log: dict
    config_snapshot: TrainConfig
    backbone_id: str

    @property
    def m(self) -> int:
        return len(self.block_indices)


@dataclass
class DiscrepancyMatrix:
    values: np.ndarray          # (n, m), entry >= 0
    block_indices: list[int]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.block_indices):
            raise ValueError("discrepancy matrix must be (n, m) with m = len(block_indices)")
        if self.values.size and self.values.min() < 0.0:
            raise ValueError("discrepancy entries must be non-negative")

    def to_features(self, meta: dict | None = None) -> FeatureMatrix:
        return FeatureMatrix(self.values, SPACE_FINETUNED, dict(meta or {}))


def default_block_indices(num_blocks: int, m: int | None = None) -> list[int]:
    """Last-m block cut. With m unspecified: last min(10, num_blocks - 2)
    blocks (the earliest blocks carry low-level signal that does not help)."""
    if m is None:
        m = min(10, max(1, num_blocks - 2))
    if not 1 <= m <= num_blocks:
        raise ValueError(f"m must be in [1, {num_blocks}], got {m}")
    return list(range(num_blocks - m, num_blocks))


def _block_seed(base_seed: int, block_index: int) -> np.random.Generator:
    # entropy is position-independent so per-block streams never couple
    return np.random.default_rng(np.random.SeedSequence([base_seed, block_index]))


def _collect_stream(normal_batch_stream, backbone: VitBackbone) -> np.ndarray:
    pixels = []
    for batch in normal_batch_stream:
        backbone._check_preprocessed(batch)
        pixels.append(batch.pixels)
    if not pixels:
        raise ValueError("empty training stream")
    return np.concatenate(pixels, axis=0)


def train_students(normal_batch_stream, backbone: VitBackbone, block_indices,
                   config: TrainConfig) -> StudentEnsemble:
    """Train one student per requested teacher block, independently.

    The stream must contain only normal-class, already preprocessed batches.
    Teacher activations are computed once up front (the teacher is frozen, so
    they are constants of the run). Raises NumericalError on non-finite loss.
    """
    block_indices = list(block_indices)
    if block_indices != sorted(set(block_indices)):
        raise ValueError("block_indices must be strictly increasing")
    for j in block_indices:
        if not 0 <= j < backbone.spec.num_blocks:
            raise IndexError(f"block index {j} out of range")

    pixels = _collect_stream(normal_batch_stream, backbone)
    n = pixels.shape[0]
    io = backbone.forward_collect(pixels, tap_indices=block_indices,
                                  input_indices=block_indices)
    tap_ln = backbone.spec.tap_mode == "resid_ln"

    students: list[dict] = []
    per_block_log: dict = {}
    for j in block_indices:
        rng = _block_seed(config.seed, j)
        inp, target = io["inputs"][j], io["taps"][j]
        if config.init_mode == "copy":
            params = nn.copy_params(backbone.block_params[j])
        else:
            params = nn.init_block_params(rng, backbone.spec.embed_dim,
                                          backbone.spec.num_heads,
                                          backbone.spec.mlp_ratio)
        opt = nn.Adam(params, lr=config.learning_rate)

        epoch_losses = []
        best = np.inf
        stall = 0
        stopped_early = False
        for epoch in range(config.epochs):
            order = rng.permutation(n)
            total_sq = 0.0
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                nb = idx.size
                pred_raw, fcache = nn.block_forward(
                    inp[idx], params, backbone.spec.num_heads,
                    dropout_rate=config.dropout_rate, rng=rng)
                if tap_ln:
                    pred, scache = nn.standardize_forward(pred_raw)
                else:
                    pred = pred_raw
                diff = pred - target[idx]
                batch_sq = float(np.sum(diff * diff))
                if not np.isfinite(batch_sq):
                    raise NumericalError(
                        f"non-finite loss at block {j}, epoch {epoch}: check "
                        f"learning rate / data scale")
                total_sq += batch_sq
                dpred = (2.0 / nb) * diff
                if tap_ln:
                    dpred = nn.standardize_backward(dpred, scache)
                _, grads = nn.block_backward(dpred, fcache, params)
                opt.step(grads)
            epoch_loss = total_sq / n
            epoch_losses.append(epoch_loss)
            if epoch_loss < best * (1.0 - 1e-9):
                best = epoch_loss
                stall = 0
            else:
                stall += 1
            if (config.early_stop_patience is not None
                    and stall >= config.early_stop_patience):
                stopped_early = True
                break

        students.append(params)
        per_block_log[str(j)] = {
            "epoch_losses": epoch_losses,
            "stopped_early": stopped_early,
            "seed_entropy": [config.seed, j],
        }
        logger.info("block %d: loss %.6g -> %.6g over %d epochs%s", j,
                    epoch_losses[0], epoch_losses[-1], len(epoch_losses),
                    " (early stop)" if stopped_early else "")

    ensemble = StudentEnsemble(block_indices=block_indices, student_weights=students,
                               training_log={"per_block": per_block_log},
                               config_snapshot=config,
                               backbone_id=backbone.spec.identifier)

    # Gaussian-compatibility diagnostic on the training discrepancies:
    # reported in the log, never asserted.
    train_batch = ImageBatch(pixels, np.arange(n))
    disc = discrepancy_features(train_batch, backbone, ensemble)
    normality = {}
    for col, j in enumerate(block_indices):
        column = disc.values[:, col]
        normality[str(j)] = {
            "skew": float(stats.skew(column)),
            "excess_kurtosis": float(stats.kurtosis(column)),
        }
    ensemble.training_log["normality"] = normality
    return ensemble


def discrepancy_features(batch: ImageBatch, backbone: VitBackbone,
                         ensemble: StudentEnsemble) -> DiscrepancyMatrix:
    """Per-sample, per-block squared-norm teacher-student discrepancies."""
    if ensemble.backbone_id != backbone.spec.identifier:
        raise ValueError(
            f"ensemble was trained against backbone {ensemble.backbone_id!r}, "
            f"got {backbone.spec.identifier!r}")
    backbone._check_preprocessed(batch)
    io = backbone.forward_collect(batch.pixels, tap_indices=ensemble.block_indices,
                                  input_indices=ensemble.block_indices)
    tap_ln = backbone.spec.tap_mode == "resid_ln"

    n = len(batch)
    values = np.empty((n, ensemble.m))
    for col, (j, params) in enumerate(zip(ensemble.block_indices,
                                          ensemble.student_weights)):
        pred = nn.block_forward(io["inputs"][j], params, backbone.spec.num_heads)[0]
        if pred.shape != io["taps"][j].shape:
            raise ValueError(f"teacher/student shape mismatch at block {j}")
        if tap_ln:
            pred = nn.standardize_forward(pred)[0]
        diff = pred - io["taps"][j]
        col_vals = np.sum(diff * diff, axis=(1, 2))
        if ensemble.config_snapshot.discrepancy_norm == "mean":
            col_vals = col_vals / (diff.shape[1] * diff.shape[2])
        values[:, col] = col_vals
    return DiscrepancyMatrix(values, list(ensemble.block_indices))


# ---------------------------------------------------------------------------
# checkpointing: one weight file per block + JSON manifest

def save_ensemble(ensemble: StudentEnsemble, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for j, params in zip(ensemble.block_indices, ensemble.student_weights):
        np.savez(directory / f"block_{j:02d}.npz", **params)
    manifest = {
        "version": _CHECKPOINT_VERSION,
        "block_indices": ensemble.block_indices,
        "backbone_id": ensemble.backbone_id,
        "config_snapshot": asdict(ensemble.config_snapshot),
        "training_log": ensemble.training_log,
    }
    (directory / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def load_ensemble(directory) -> StudentEnsemble:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("version") != _CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
    weights = []
    for j in manifest["block_indices"]:
        arrays = np.load(directory / f"block_{j:02d}.npz")
        weights.append({name: arrays[name] for name in nn.BLOCK_PARAM_NAMES})
    return StudentEnsemble(
        block_indices=list(manifest["block_indices"]),
        student_weights=weights,
        training_log=manifest["training_log"],
        config_snapshot=TrainConfig(**manifest["config_snapshot"]),
        backbone_id=manifest["backbone_id"],
    )
