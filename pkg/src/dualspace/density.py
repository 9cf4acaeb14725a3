"""Density modeling and normality scoring.

Feature matrices from either space (pretrained embeddings or per-block
teacher-student discrepancies) are modeled here: PCA whitening with an
explained-variance cutoff, a single full-covariance Gaussian, a GMM fit by
EM, and a kNN scorer for ablations. All likelihood arithmetic happens in log
space; the dual-space score is the sum of the two log-likelihoods, which is
the log of the product of the densities.

Conventions:
    - Scores are log-scores: higher = more normal.
    - Gaussian and GMM covariances are maximum-likelihood (1/n) estimates, so
      a 1-component GMM reproduces the single Gaussian exactly.
    - The whitener uses the unbiased (1/(n-1)) covariance; whitened training
      data then has unbiased empirical covariance ~= identity.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

from .exceptions import NumericalError

logger = logging.getLogger(__name__)

SPACE_PRETRAINED = "pretrained"
SPACE_FINETUNED = "finetuned"
SPACE_COMBINED = "combined"

_LOG_2PI = np.log(2.0 * np.pi)
_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# data containers

@dataclass
class FeatureMatrix:
    """n x d per-sample features with provenance metadata."""

    values: np.ndarray
    space_tag: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"expected 2-D feature array, got shape {self.values.shape}")
        if self.values.shape[0] < 1:
            raise ValueError("feature matrix needs at least one row")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature matrix contains non-finite entries")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass
class ScoreVector:
    """Per-sample log-scores; higher = more normal."""

    values: np.ndarray
    space_tag: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("score vector contains non-finite entries")

    def __len__(self) -> int:
        return self.values.size


@dataclass
class WhitenTransform:
    """Centering + projection onto leading principal axes scaled to unit variance."""

    mean: np.ndarray
    projection: np.ndarray   # (d, r), columns = eigvecs / sqrt(eigval)
    eigenvalues: np.ndarray  # (r,), descending
    energy_threshold: float

    @property
    def input_dim(self) -> int:
        return self.projection.shape[0]

    @property
    def rank(self) -> int:
        return self.projection.shape[1]


@dataclass
class GaussianModel:
    """Full-covariance Gaussian with cached Cholesky factor and log-determinant."""

    mean: np.ndarray
    covariance: np.ndarray
    chol_lower: np.ndarray
    log_det: float
    reg_lambda: float

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass
class GMMModel:
    weights: np.ndarray       # (k,), positive, sums to 1
    means: np.ndarray         # (k, d)
    covariances: np.ndarray   # (k, d, d), regularized
    chols: np.ndarray         # (k, d, d) lower triangular
    log_dets: np.ndarray      # (k,)
    reg_lambdas: np.ndarray   # (k,)
    n_iter: int
    final_log_likelihood: float
    ll_history: list[float]

    @property
    def k(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]


# ---------------------------------------------------------------------------
# whitening

def fit_whitener(train: FeatureMatrix, energy_threshold: float) -> WhitenTransform:
    """Fit a whitening transform keeping the minimal number of principal
    components whose eigenvalue mass reaches `energy_threshold`.

    Zero (and numerically negative) eigenvalues are dropped, so rank-deficient
    inputs never produce non-finite scalings.
    """
    if not 0.0 < energy_threshold <= 1.0:
        raise ValueError(f"energy threshold must be in (0, 1], got {energy_threshold}")
    if train.n < 2:
        raise ValueError("whitening needs at least 2 samples")

    x = train.values
    mean = x.mean(axis=0)
    cov = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    evecs = evecs[:, order]

    positive = evals > max(evals[0], 0.0) * 1e-12
    if not np.any(positive):
        raise ValueError("all eigenvalues are zero: constant training data cannot be whitened")
    evals = evals[positive]
    evecs = evecs[:, positive]

    ratios = np.cumsum(evals) / np.sum(evals)
    r = int(np.searchsorted(ratios, energy_threshold - 1e-12) + 1)
    projection = evecs[:, :r] / np.sqrt(evals[:r])
    return WhitenTransform(mean=mean, projection=projection,
                           eigenvalues=evals[:r].copy(),
                           energy_threshold=float(energy_threshold))


def apply_whitener(w: WhitenTransform, x: FeatureMatrix) -> FeatureMatrix:
    if x.dim != w.input_dim:
        raise ValueError(f"whitener expects dim {w.input_dim}, got {x.dim}")
    values = (x.values - w.mean) @ w.projection
    meta = dict(x.meta, whitened=True, whiten_rank=w.rank)
    return FeatureMatrix(values, x.space_tag, meta)


# ---------------------------------------------------------------------------
# single Gaussian

def _regularize_and_factor(cov: np.ndarray, reg_lambda: float):
    """Diagonal-load `cov` until its Cholesky factorization succeeds.

    Starts at the caller's reg_lambda; on failure escalates by decades from
    1e-6, logging each escalation. Returns (cov_reg, chol_lower, log_det, reg).
    """
    cov = 0.5 * (cov + cov.T)
    d = cov.shape[0]
    reg = float(reg_lambda)
    for _ in range(60):
        cov_reg = cov + reg * np.eye(d) if reg > 0.0 else cov
        try:
            chol = np.linalg.cholesky(cov_reg)
        except np.linalg.LinAlgError:
            next_reg = 1e-6 if reg < 1e-6 else reg * 10.0
            logger.warning("covariance factorization failed at reg_lambda=%g; escalating to %g",
                           reg, next_reg)
            reg = next_reg
            continue
        log_det = 2.0 * float(np.sum(np.log(np.diag(chol))))
        return cov_reg, chol, log_det, reg
    raise NumericalError("covariance could not be made positive definite by diagonal loading")


def fit_gaussian(train: FeatureMatrix, reg_lambda: float = 0.0) -> GaussianModel:
    """Maximum-likelihood Gaussian fit: sample mean and (1/n) covariance plus
    reg_lambda on the diagonal, factorization cached."""
    if train.n < 2:
        raise ValueError("Gaussian fit needs at least 2 samples")
    x = train.values
    mean = x.mean(axis=0)
    xc = x - mean
    cov = (xc.T @ xc) / train.n
    cov_reg, chol, log_det, reg = _regularize_and_factor(np.atleast_2d(cov), reg_lambda)
    return GaussianModel(mean=mean, covariance=cov_reg, chol_lower=chol,
                         log_det=log_det, reg_lambda=reg)


def _gauss_log_density(x: np.ndarray, mean: np.ndarray, chol: np.ndarray,
                       log_det: float) -> np.ndarray:
    d = mean.size
    z = solve_triangular(chol, (x - mean).T, lower=True)
    quad = np.sum(z * z, axis=0)
    return -0.5 * (d * _LOG_2PI + log_det + quad)


def gaussian_log_likelihood(model: GaussianModel, x: FeatureMatrix) -> ScoreVector:
    if x.dim != model.dim:
        raise ValueError(f"model dim {model.dim} != feature dim {x.dim}")
    ll = _gauss_log_density(x.values, model.mean, model.chol_lower, model.log_det)
    return ScoreVector(ll, x.space_tag)


# ---------------------------------------------------------------------------
# GMM via EM

def _kmeanspp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = None
    for _ in range(k - 1):
        new = cdist(x, centers[-1][None, :], "sqeuclidean")[:, 0]
        d2 = new if d2 is None else np.minimum(d2, new)
        total = d2.sum()
        if total <= 0.0:
            centers.append(x[rng.integers(n)])
            continue
        centers.append(x[rng.choice(n, p=d2 / total)])
    return np.asarray(centers)


def fit_gmm(train: FeatureMatrix, k: int, seed: int, reg_lambda: float = 0.0,
            max_iter: int = 200, tol: float = 1e-9) -> GMMModel:
    """EM fit of a k-component full-covariance mixture.

    The per-iteration training log-likelihood is non-decreasing (up to the
    tiny diagonal loading shared with `fit_gaussian`); with k=1 the result is
    exactly the single-Gaussian fit, same regularization path included.
    Components whose weight collapses below 1e-12 are pruned and logged.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if train.n < max(k, 2):
        raise ValueError(f"need at least max(k, 2)={max(k, 2)} samples, got {train.n}")

    x = train.values
    n, d = x.shape
    rng = np.random.default_rng(seed)

    means = np.atleast_2d(_kmeanspp_init(x, k, rng))
    base_cov = np.atleast_2d((x - x.mean(axis=0)).T @ (x - x.mean(axis=0))) / n
    covs, chols, log_dets, regs = [], [], [], []
    for _ in range(k):
        c, l, ld, rg = _regularize_and_factor(base_cov.copy(), reg_lambda)
        covs.append(c); chols.append(l); log_dets.append(ld); regs.append(rg)
    weights = np.full(k, 1.0 / k)

    ll_history: list[float] = []
    prev_ll = None
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        k_live = weights.size
        log_comp = np.empty((n, k_live))
        for c in range(k_live):
            log_comp[:, c] = np.log(weights[c]) + _gauss_log_density(
                x, means[c], chols[c], log_dets[c])
        log_norm = logsumexp(log_comp, axis=1)
        ll = float(log_norm.sum())
        ll_history.append(ll)
        if prev_ll is not None and abs(ll - prev_ll) <= tol * max(1.0, abs(prev_ll)):
            break
        prev_ll = ll

        resp = np.exp(log_comp - log_norm[:, None])
        nk = resp.sum(axis=0)
        alive = (nk / n) >= 1e-12
        if not np.all(alive):
            logger.warning("pruning %d degenerate GMM component(s) with weight < 1e-12",
                           int(np.sum(~alive)))
            resp = resp[:, alive]
            nk = nk[alive]
        weights = nk / nk.sum()

        means = (resp.T @ x) / nk[:, None]
        covs, chols, log_dets, regs = [], [], [], []
        for c in range(weights.size):
            xc = x - means[c]
            cov_c = (resp[:, c][:, None] * xc).T @ xc / nk[c]
            cc, lc, ldc, rgc = _regularize_and_factor(np.atleast_2d(cov_c), reg_lambda)
            covs.append(cc); chols.append(lc); log_dets.append(ldc); regs.append(rgc)

    return GMMModel(weights=np.asarray(weights), means=np.asarray(means),
                    covariances=np.asarray(covs), chols=np.asarray(chols),
                    log_dets=np.asarray(log_dets), reg_lambdas=np.asarray(regs),
                    n_iter=n_iter, final_log_likelihood=ll_history[-1],
                    ll_history=ll_history)


def gmm_log_likelihood(model: GMMModel, x: FeatureMatrix) -> ScoreVector:
    if x.dim != model.dim:
        raise ValueError(f"model dim {model.dim} != feature dim {x.dim}")
    log_comp = np.empty((x.n, model.k))
    for c in range(model.k):
        log_comp[:, c] = np.log(model.weights[c]) + _gauss_log_density(
            x.values, model.means[c], model.chols[c], model.log_dets[c])
    return ScoreVector(logsumexp(log_comp, axis=1), x.space_tag)


# ---------------------------------------------------------------------------
# kNN scorer

def knn_score(train: FeatureMatrix, test: FeatureMatrix, k: int) -> ScoreVector:
    """Negative mean Euclidean distance to the k nearest training points.

    Negated so that higher = more normal, like the log-likelihood scores.
    """
    if train.n < 1:
        raise ValueError("empty training set")
    if not 1 <= k <= train.n:
        raise ValueError(f"k must be in [1, {train.n}], got {k}")
    if test.dim != train.dim:
        raise ValueError(f"train dim {train.dim} != test dim {test.dim}")
    dists = cdist(test.values, train.values)
    if k < train.n:
        dists = np.partition(dists, k - 1, axis=1)[:, :k]
    return ScoreVector(-dists.mean(axis=1), test.space_tag)


# ---------------------------------------------------------------------------
# dual-space combination

def combined_score(zp_scores: ScoreVector, zf_scores: ScoreVector) -> ScoreVector:
    """Sum of the two log-score vectors (log of the product of densities)."""
    if len(zp_scores) != len(zf_scores):
        raise ValueError(f"score length mismatch: {len(zp_scores)} vs {len(zf_scores)}")
    return ScoreVector(zp_scores.values + zf_scores.values, SPACE_COMBINED)


# ---------------------------------------------------------------------------
# serialization: JSON manifest + npz arrays

def save_model(model, prefix) -> None:
    """Write `{prefix}.json` (manifest) and `{prefix}.npz` (arrays)."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(model, WhitenTransform):
        kind = "whitener"
        arrays = {"mean": model.mean, "projection": model.projection,
                  "eigenvalues": model.eigenvalues}
        manifest = {"energy_threshold": model.energy_threshold}
    elif isinstance(model, GaussianModel):
        kind = "gaussian"
        arrays = {"mean": model.mean, "covariance": model.covariance,
                  "chol_lower": model.chol_lower}
        manifest = {"log_det": model.log_det, "reg_lambda": model.reg_lambda}
    elif isinstance(model, GMMModel):
        kind = "gmm"
        arrays = {"weights": model.weights, "means": model.means,
                  "covariances": model.covariances, "chols": model.chols,
                  "log_dets": model.log_dets, "reg_lambdas": model.reg_lambdas}
        manifest = {"n_iter": model.n_iter,
                    "final_log_likelihood": model.final_log_likelihood,
                    "ll_history": model.ll_history}
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    manifest.update(version=_FORMAT_VERSION, kind=kind,
                    shapes={name: list(a.shape) for name, a in arrays.items()})
    np.savez(prefix.with_suffix(".npz"), **arrays)
    prefix.with_suffix(".json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def load_model(prefix):
    prefix = Path(prefix)
    manifest = json.loads(prefix.with_suffix(".json").read_text())
    if manifest.get("version") != _FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {manifest.get('version')}")
    arrays = np.load(prefix.with_suffix(".npz"))
    kind = manifest["kind"]
    if kind == "whitener":
        return WhitenTransform(mean=arrays["mean"], projection=arrays["projection"],
                               eigenvalues=arrays["eigenvalues"],
                               energy_threshold=manifest["energy_threshold"])
    if kind == "gaussian":
        return GaussianModel(mean=arrays["mean"], covariance=arrays["covariance"],
                             chol_lower=arrays["chol_lower"],
                             log_det=manifest["log_det"],
                             reg_lambda=manifest["reg_lambda"])
    if kind == "gmm":
        return GMMModel(weights=arrays["weights"], means=arrays["means"],
                        covariances=arrays["covariances"], chols=arrays["chols"],
                        log_dets=arrays["log_dets"], reg_lambdas=arrays["reg_lambdas"],
                        n_iter=manifest["n_iter"],
                        final_log_likelihood=manifest["final_log_likelihood"],
                        ll_history=list(manifest["ll_history"]))
    raise ValueError(f"unknown model kind {kind!r}")
