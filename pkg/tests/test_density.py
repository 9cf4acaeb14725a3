import logging

import numpy as np
import pytest

from dualspace import (
    FeatureMatrix,
    ScoreVector,
    apply_whitener,
    combined_score,
    fit_gaussian,
    fit_gmm,
    fit_whitener,
    gaussian_log_likelihood,
    gmm_log_likelihood,
    knn_score,
    load_model,
    save_model,
)
from dualspace.datasets import gaussian_blob_features, spectrum_features


def fm(values, tag="pretrained"):
    return FeatureMatrix(np.asarray(values, dtype=float), tag)


def dense_gaussian_oracle(x, mean, cov):
    """Explicit-inverse log-density: the independent check for the factored path."""
    d = mean.size
    inv = np.linalg.inv(cov)
    diff = x - mean
    quad = np.einsum("nd,de,ne->n", diff, inv, diff)
    _, logdet = np.linalg.slogdet(2.0 * np.pi * cov)
    return -0.5 * (quad + logdet)


# ---------------------------------------------------------------------------
# whitening

def test_whitener_line_data_keeps_one_component():
    t = np.linspace(-3, 3, 40)
    data = np.stack([t, 2.0 * t], axis=1)  # exactly on a line
    w = fit_whitener(fm(data), 0.90)
    assert w.rank == 1


def test_whitener_threshold_one_keeps_full_rank():
    rng = np.random.default_rng(0)
    data = rng.normal(size=(200, 6))
    w = fit_whitener(fm(data), 1.0)
    assert w.rank == 6


def test_whitened_training_covariance_is_identity():
    rng = np.random.default_rng(1)
    data = rng.normal(size=(300, 5)) @ rng.normal(size=(5, 5)) + rng.normal(size=5)
    w = fit_whitener(fm(data), 1.0)
    white = apply_whitener(w, fm(data)).values
    cov = np.cov(white, rowvar=False, ddof=1)
    assert np.max(np.abs(cov - np.eye(w.rank))) <= 1e-4


def test_whitener_matches_independent_eigendecomposition():
    rng = np.random.default_rng(2)
    data = rng.normal(size=(50, 5)) * np.array([3.0, 2.0, 1.0, 0.5, 0.1])
    w = fit_whitener(fm(data), 1.0)

    # oracle: direct eigensolve of the sample covariance
    cov = np.cov(data, rowvar=False, ddof=1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    oracle_proj = evecs[:, order] / np.sqrt(evals[order])

    assert np.allclose(w.eigenvalues, evals[order], atol=1e-10)
    for col in range(w.rank):
        a, b = w.projection[:, col], oracle_proj[:, col]
        assert np.allclose(a, b, atol=1e-6) or np.allclose(a, -b, atol=1e-6)


def test_whitener_rank_is_minimal_and_energy_satisfied():
    data = spectrum_features(2000, [5.0, 2.5, 1.2, 0.6, 0.3, 0.15, 0.08, 0.04], seed=3)
    for threshold in (0.85, 0.90, 0.95):
        w = fit_whitener(fm(data), threshold)
        evals, _ = np.linalg.eigh(np.cov(data, rowvar=False, ddof=1))
        evals = np.sort(evals)[::-1]
        total = evals.sum()
        assert evals[:w.rank].sum() / total >= threshold - 1e-12
        if w.rank > 1:
            assert evals[:w.rank - 1].sum() / total < threshold


def test_whitener_centers_mean_to_zero_matrix():
    data = np.tile(np.array([1.0, -2.0, 3.0]), (10, 1))
    data[0] += 1e-3  # keep one nonzero eigenvalue
    w = fit_whitener(fm(data), 0.9)
    out = apply_whitener(w, fm(np.tile(w.mean, (4, 1)))).values
    assert np.allclose(out, 0.0)


def test_whitener_rejects_bad_inputs():
    with pytest.raises(ValueError):
        fit_whitener(fm(np.zeros((1, 3))), 0.9)
    with pytest.raises(ValueError):
        fit_whitener(fm(np.random.default_rng(0).normal(size=(5, 3))), 1.5)
    w = fit_whitener(fm(np.random.default_rng(0).normal(size=(10, 3))), 0.9)
    with pytest.raises(ValueError):
        apply_whitener(w, fm(np.zeros((2, 4))))


def test_whitener_drops_zero_eigenvalues_without_nonfinite():
    rank_deficient = np.random.default_rng(4).normal(size=(30, 2)) @ np.ones((2, 6))
    w = fit_whitener(fm(rank_deficient), 0.99)
    assert np.all(np.isfinite(w.projection))
    assert w.rank <= 2


# ---------------------------------------------------------------------------
# single Gaussian

def test_gaussian_mean_of_square_corners():
    model = fit_gaussian(fm([[0, 0], [2, 0], [0, 2], [2, 2]]))
    assert np.allclose(model.mean, [1.0, 1.0])


def test_gaussian_log_density_peaks_at_mean():
    rng = np.random.default_rng(5)
    data = rng.normal(size=(500, 1))
    model = fit_gaussian(fm(data))
    queries = np.concatenate([[model.mean[0]], rng.normal(size=9)])[:, None]
    scores = gaussian_log_likelihood(model, fm(queries)).values
    assert np.argmax(scores) == 0


def test_gaussian_matches_dense_oracle():
    rng = np.random.default_rng(6)
    train = rng.normal(size=(100, 3)) @ rng.normal(size=(3, 3))
    model = fit_gaussian(fm(train))
    x = rng.normal(size=(100, 3)) * 2.0
    got = gaussian_log_likelihood(model, fm(x)).values
    want = dense_gaussian_oracle(x, model.mean, model.covariance)
    assert np.allclose(got, want, atol=1e-8)


def test_gaussian_1d_standard_closed_forms():
    # centered unit-variance data: log N(0 | 0, 1) = -0.5 log 2pi
    z = np.arange(-3.0, 3.5, 0.5)
    z = (z - z.mean()) / z.std()  # exact MLE mean 0, var 1
    model = fit_gaussian(fm(z[:, None]))
    at0, at1 = gaussian_log_likelihood(model, fm([[0.0], [1.0]])).values
    assert abs(at0 - (-0.9189385332046727)) < 1e-9
    assert abs(at1 - (-1.4189385332046727)) < 1e-9


def test_gaussian_density_integrates_to_one_by_quadrature():
    rng = np.random.default_rng(7)
    for dim in (1, 2):
        data = rng.normal(size=(400, dim))
        model = fit_gaussian(fm(data))
        grid_1d = np.linspace(-8, 8, 321)
        step = grid_1d[1] - grid_1d[0]
        if dim == 1:
            pts = grid_1d[:, None]
            weight = step
        else:
            gx, gy = np.meshgrid(grid_1d, grid_1d)
            pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
            weight = step * step
        mass = np.exp(gaussian_log_likelihood(model, fm(pts)).values).sum() * weight
        assert abs(mass - 1.0) < 1e-3


def test_gaussian_regularization_escalates_on_singular_covariance(caplog):
    # two identical columns -> singular covariance; loading must rescue it
    rng = np.random.default_rng(8)
    col = rng.normal(size=(50, 1))
    data = np.hstack([col, col])
    with caplog.at_level(logging.WARNING, logger="dualspace.density"):
        model = fit_gaussian(fm(data), reg_lambda=0.0)
    assert model.reg_lambda >= 1e-6
    assert any("escalating" in r.message for r in caplog.records)
    scores = gaussian_log_likelihood(model, fm(data)).values
    assert np.all(np.isfinite(scores))


def test_gaussian_rejects_single_sample():
    with pytest.raises(ValueError):
        fit_gaussian(fm([[1.0, 2.0]]))


# ---------------------------------------------------------------------------
# GMM

def test_gmm_k1_equals_single_gaussian():
    rng = np.random.default_rng(9)
    data = rng.normal(size=(120, 4)) @ rng.normal(size=(4, 4))
    test = rng.normal(size=(60, 4))
    gauss = gaussian_log_likelihood(fit_gaussian(fm(data)), fm(test)).values
    mix = gmm_log_likelihood(fit_gmm(fm(data), k=1, seed=0), fm(test)).values
    assert np.allclose(gauss, mix, atol=1e-8)


def test_gmm_recovers_separated_cluster_centers():
    values, _, centers = gaussian_blob_features(2, 200, dim=3, spread=10.0,
                                                scale=0.3, seed=10)
    model = fit_gmm(fm(values), k=2, seed=1)
    dist = np.linalg.norm(model.means[:, None, :] - centers[None, :, :], axis=2)
    # each fitted mean within 0.1 of a distinct true center
    assert dist.min(axis=1).max() < 0.1
    assert set(dist.argmin(axis=1)) == {0, 1}


def test_gmm_log_likelihood_non_decreasing():
    values, _, _ = gaussian_blob_features(3, 100, dim=2, spread=4.0, scale=1.0, seed=11)
    model = fit_gmm(fm(values), k=3, seed=2)
    ll = np.array(model.ll_history)
    assert np.all(np.diff(ll) >= -1e-9 * np.maximum(1.0, np.abs(ll[:-1])))


def test_gmm_weights_sum_to_one():
    rng = np.random.default_rng(12)
    model = fit_gmm(fm(rng.normal(size=(80, 2))), k=3, seed=3)
    assert model.weights.min() > 0
    assert abs(model.weights.sum() - 1.0) < 1e-9


def test_gmm_rejects_bad_k():
    rng = np.random.default_rng(13)
    with pytest.raises(ValueError):
        fit_gmm(fm(rng.normal(size=(5, 2))), k=0, seed=0)
    with pytest.raises(ValueError):
        fit_gmm(fm(rng.normal(size=(3, 2))), k=4, seed=0)


# ---------------------------------------------------------------------------
# kNN

def test_knn_frozen_examples():
    train = fm([[0.0, 0.0], [1.0, 0.0]])
    assert knn_score(train, fm([[0.0, 0.0]]), k=1).values[0] == 0.0
    assert knn_score(train, fm([[0.0, 1.0]]), k=1).values[0] == -1.0
    # brute force: distances 0 and 1, mean 0.5, negated
    assert knn_score(train, fm([[0.0, 0.0]]), k=2).values[0] == -0.5


def test_knn_self_score_is_maximum():
    rng = np.random.default_rng(14)
    pts = rng.normal(size=(30, 3))
    train = fm(pts)
    scores = knn_score(train, fm(np.vstack([pts[0], pts[0] + 5.0])), k=1).values
    assert scores[0] == 0.0
    assert scores[0] >= scores[1]


def test_knn_matches_bruteforce_oracle():
    rng = np.random.default_rng(15)
    train, test, k = rng.normal(size=(40, 4)), rng.normal(size=(25, 4)), 5
    got = knn_score(fm(train), fm(test), k).values
    want = np.empty(25)
    for i, q in enumerate(test):
        dists = np.sort([np.linalg.norm(q - t) for t in train])
        want[i] = -np.mean(dists[:k])
    assert np.allclose(got, want, atol=1e-10)


def test_knn_input_validation():
    train = fm([[0.0], [1.0]])
    with pytest.raises(ValueError):
        knn_score(train, fm([[0.0]]), k=3)  # k > n_train
    with pytest.raises(ValueError):
        knn_score(train, fm([[0.0, 1.0]]), k=1)  # dim mismatch


# ---------------------------------------------------------------------------
# combined score

def test_combined_score_is_elementwise_sum():
    zp = ScoreVector(np.array([-1.0, -2.0]), "pretrained")
    zf = ScoreVector(np.array([-3.0, -1.0]), "finetuned")
    out = combined_score(zp, zf)
    assert np.array_equal(out.values, [-4.0, -3.0])
    assert out.space_tag == "combined"


def test_combined_with_zero_preserves_ranking():
    rng = np.random.default_rng(16)
    zp = ScoreVector(rng.normal(size=50), "pretrained")
    zero = ScoreVector(np.zeros(50), "finetuned")
    assert np.array_equal(np.argsort(combined_score(zp, zero).values),
                          np.argsort(zp.values))


def test_combined_log_sum_equals_product_of_probabilities():
    rng = np.random.default_rng(17)
    zp = ScoreVector(-rng.random(20), "pretrained")
    zf = ScoreVector(-rng.random(20), "finetuned")
    assert np.allclose(np.exp(combined_score(zp, zf).values),
                       np.exp(zp.values) * np.exp(zf.values), rtol=1e-12)


def test_combined_ranking_invariant_under_constant_shift():
    rng = np.random.default_rng(18)
    zp = ScoreVector(rng.normal(size=40), "pretrained")
    zf = ScoreVector(rng.normal(size=40), "finetuned")
    base = np.argsort(combined_score(zp, zf).values)
    shifted = ScoreVector(zp.values + 123.4, "pretrained")
    assert np.array_equal(np.argsort(combined_score(shifted, zf).values), base)


def test_combined_rejects_length_mismatch():
    with pytest.raises(ValueError):
        combined_score(ScoreVector(np.zeros(3), "a"), ScoreVector(np.zeros(4), "b"))


# ---------------------------------------------------------------------------
# serialization

@pytest.mark.parametrize("kind", ["whitener", "gaussian", "gmm"])
def test_model_serialization_round_trip(tmp_path, kind):
    rng = np.random.default_rng(19)
    data = fm(rng.normal(size=(100, 3)))
    if kind == "whitener":
        model = fit_whitener(data, 0.9)
    elif kind == "gaussian":
        model = fit_gaussian(data)
    else:
        model = fit_gmm(data, k=2, seed=0)
    save_model(model, tmp_path / "model")
    loaded = load_model(tmp_path / "model")

    query = fm(rng.normal(size=(10, 3)))
    if kind == "whitener":
        assert np.array_equal(apply_whitener(model, query).values,
                              apply_whitener(loaded, query).values)
    elif kind == "gaussian":
        assert np.array_equal(gaussian_log_likelihood(model, query).values,
                              gaussian_log_likelihood(loaded, query).values)
    else:
        assert np.array_equal(gmm_log_likelihood(model, query).values,
                              gmm_log_likelihood(loaded, query).values)


def test_feature_matrix_rejects_nonfinite():
    with pytest.raises(ValueError):
        fm([[np.nan, 1.0]])
    with pytest.raises(ValueError):
        fm(np.zeros((0, 3)))
