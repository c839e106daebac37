import math

import numpy as np
import pytest

from spotcheck import kpca
from spotcheck.errors import InputError, RankDeficiencyError
from spotcheck.featurize import BENIGN, FeatureVector
from spotcheck.numerics import Prng
from spotcheck.records import ANOMALY, NORMAL


def _blob(rng, m=50, dim=8):
    return rng.dirichlet(np.full(dim, 2.0), size=m)


def _two_clusters(rng, m=60, dim=8):
    a = rng.dirichlet(np.r_[np.full(dim // 2, 8.0), np.full(dim - dim // 2, 1.0)], size=m // 2)
    b = rng.dirichlet(np.r_[np.full(dim // 2, 1.0), np.full(dim - dim // 2, 8.0)], size=m - m // 2)
    return np.vstack([a, b])


# independent reference: explicit centring matrix, LAPACK eigh, dense solve
def _ref_fit(X, gamma, r, lam_p):
    m = len(X)
    d2 = ((X[:, None, :] - X[None, :, :]) ** 2).sum(-1)
    K = np.exp(-gamma * d2)
    J = np.eye(m) - np.full((m, m), 1.0 / m)
    Kc = J @ K @ J
    w, V = np.linalg.eigh(Kc)
    w, V = w[::-1][:r], V[:, ::-1][:, :r]
    U = V / np.sqrt(w)
    ref = {"X": X, "K": K, "U": U, "gamma": gamma, "w": w}
    Z = _ref_transform(ref, X)
    dz = ((Z[:, None, :] - Z[None, :, :]) ** 2).sum(-1)
    gp = 1.0 / (2.0 * np.median(dz[np.triu_indices(m, 1)]))
    Kz = np.exp(-gp * dz)
    ref.update(Z=Z, gp=gp, A=np.linalg.solve(Kz + lam_p * np.eye(m), X))
    return ref


def _ref_transform(ref, Y):
    k = np.exp(-ref["gamma"] * ((Y[:, None, :] - ref["X"][None, :, :]) ** 2).sum(-1))
    K = ref["K"]
    kc = k - k.mean(1, keepdims=True) - K.mean(1)[None, :] + K.mean()
    return kc @ ref["U"]


def _ref_mse(ref, Y):
    Z = _ref_transform(ref, Y)
    dz = ((Z[:, None, :] - ref["Z"][None, :, :]) ** 2).sum(-1)
    Xh = np.exp(-ref["gp"] * dz) @ ref["A"]
    return ((Y - Xh) ** 2).mean(1)


def _ref_grid(X, grid, folds, r, seed, lam_p):
    order = list(range(len(X)))
    Prng(seed).shuffle(order)
    parts = [sorted(order[k::folds]) for k in range(folds)]
    scores = {}
    for g in grid:
        errs = []
        for k in range(folds):
            tr = sorted(i for j, p in enumerate(parts) if j != k for i in p)
            ref = _ref_fit(X[tr], g, r, lam_p)
            errs.append(_ref_mse(ref, X[parts[k]]).mean())
        scores[g] = float(np.mean(errs))
    return min(scores, key=lambda g: (scores[g], g)), scores


def test_grid_search_matches_independent_cv(rng):
    X = _two_clusters(rng)
    grid = [0.01, 0.1, 0.5]
    got = {}
    best = kpca.grid_search_gamma(X, grid, folds=3, r=2, seed=5, scores=got)
    want, ref_scores = _ref_grid(X, grid, 3, 2, 5, kpca.DEFAULT_PREIMAGE_RIDGE)
    assert best == want
    for g in grid:
        assert got[g] == pytest.approx(ref_scores[g], rel=1e-5)


def test_grid_of_one_value_returned(rng):
    assert kpca.grid_search_gamma(_blob(rng), [0.2]) == 0.2
    assert kpca.grid_search_gamma(_blob(rng), [0.1, 0.1]) == 0.1


def test_grid_rejects_bad_values(rng):
    with pytest.raises(InputError):
        kpca.grid_search_gamma(_blob(rng), [])
    with pytest.raises(InputError):
        kpca.grid_search_gamma(_blob(rng), [0.1, -1.0])


def test_grid_skips_failing_candidates():
    X = np.tile([0.25, 0.25, 0.5], (9, 1))
    with pytest.raises(RankDeficiencyError):
        kpca.grid_search_gamma(X, [0.1, 0.2])


def test_default_grid():
    g = kpca.default_grid()
    assert len(g) == 25 and g[0] == pytest.approx(0.01) and g[-1] == pytest.approx(0.5)
    assert np.allclose(np.diff(np.log(g)), np.log(50) / 24)


def test_identical_rows_rank_deficient():
    with pytest.raises(RankDeficiencyError, match="lower r"):
        kpca.fit_kpca(np.tile([0.5, 0.5, 0.0], (10, 1)), grid=[0.1])


def test_centering_three_points():
    X = np.array([[1.0, 0, 0], [0, 1.0, 0], [0.2, 0.3, 0.5]])
    model = kpca.fit_kpca(X, r=2, grid=[0.5])
    Kc = model.centered_gram
    assert np.max(np.abs(Kc.sum(axis=1))) <= 1e-10
    assert np.max(np.abs(Kc.sum(axis=0))) <= 1e-10


def test_fit_matches_reference_eigensolve(rng):
    X = _blob(rng)
    model = kpca.fit_kpca(X, r=2, grid=[0.3])
    ref = _ref_fit(X, 0.3, 2, kpca.DEFAULT_PREIMAGE_RIDGE)
    assert model.lambda_r == pytest.approx(ref["w"], rel=1e-9)
    Z = model.latents
    assert np.max(np.abs(Z.mean(axis=0))) <= 1e-8
    # population variances of the latents are lambda_i / m
    assert Z.var(axis=0) == pytest.approx(model.lambda_r / len(X), rel=1e-8)
    cov = np.cov(Z.T, bias=True)
    assert abs(cov[0, 1]) <= 1e-8
    assert np.abs(Z) == pytest.approx(np.abs(ref["Z"]), abs=1e-8)


def test_transform_consistency(blob):
    X = blob.matrix("train")
    model = kpca.fit_kpca(X, grid=[0.2])
    assert np.max(np.abs(kpca.kpca_transform(model, X) - model.latents)) <= 1e-8
    assert np.max(np.abs(kpca.kpca_transform(model, X[3]) - model.latents[3])) <= 1e-8


def test_transform_far_limit(blob):
    X = blob.matrix("train")
    model = kpca.fit_kpca(X, grid=[0.2])
    limit = -model.U_r.T @ (model.row_means - model.grand_mean)
    far = np.full(X.shape[1], 1e3)
    assert kpca.kpca_transform(model, far) == pytest.approx(limit, abs=1e-12)


def test_transform_dimension_mismatch(blob):
    model = kpca.fit_kpca(blob.matrix("train"), grid=[0.2])
    with pytest.raises(InputError):
        kpca.kpca_transform(model, np.zeros(3))


def test_self_reconstruction_below_cv_percentile(blob):
    X = blob.matrix("train")
    model = kpca.fit_kpca(X, grid=[0.2])
    cv = []
    parts = kpca._fold_indices(len(X), 3, 0)
    for k, held in enumerate(parts):
        tr = np.sort(np.concatenate([p for j, p in enumerate(parts) if j != k]))
        cv.extend(kpca.reconstruction_mse(kpca._fit_fixed(X[tr], 0.2, 2, model.lambda_p), X[held]))
    cut = np.percentile(cv, 95)
    self_mse = np.mean((kpca.kpca_inverse(model, model.latents) - X) ** 2, axis=1)
    assert np.all(self_mse < cut)


def test_preimage_ridge_shrinkage(blob):
    X = blob.matrix("train")
    model = kpca.fit_kpca(X, grid=[0.2])
    norms = []
    for lam in (1e-3, 1.0, 1e3):
        kpca.fit_preimage(model, lam)
        norms.append(np.linalg.norm(kpca.kpca_inverse(model, model.latents)))
    assert norms[0] > norms[1] > norms[2]


def test_preimage_interpolates_full_rank(rng):
    X = rng.dirichlet(np.ones(5), size=6)
    model = kpca.fit_kpca(X, r=5, grid=[0.5], lambda_p=1e-9, folds=2)
    Xh = kpca.kpca_inverse(model, model.latents)
    assert np.mean((Xh - X) ** 2) <= 1e-4


def test_more_components_never_worse(blob):
    X = blob.matrix("train")
    prev = math.inf
    for r in (1, 2, 3, 4):
        model = kpca._fit_fixed(X, 0.3, r, kpca.DEFAULT_PREIMAGE_RIDGE)
        mse = float(np.mean(kpca.reconstruction_mse(model, X)))
        assert mse <= prev + 1e-12
        prev = mse


def test_score_thresholds_and_order(blob):
    model = kpca.fit_kpca(blob.matrix("train"), grid=[0.2])
    rows = blob.select("test")
    assert all(r.verdict == NORMAL for r in kpca.kpca_score(model, rows, math.inf))
    assert all(r.verdict == ANOMALY for r in kpca.kpca_score(model, rows, -1.0))
    a = kpca.kpca_score(model, rows, 0.001)
    assert a == kpca.kpca_score(model, rows, 0.001)
    assert [r.app_id for r in a] == [r.app_id for r in rows]
    assert all(r.detector == "kpca" for r in a)


def test_score_separation(blob):
    model = kpca.fit_kpca(blob.matrix("train"), grid=[0.05, 0.5])
    recs = kpca.kpca_score(model, blob.select("test"), 0.0)
    labels = [r.label for r in blob.select("test")]
    benign = [r.score for r, lab in zip(recs, labels) if lab == BENIGN]
    anom = [r.score for r, lab in zip(recs, labels) if lab != BENIGN]
    assert np.mean(benign) < np.mean(anom)


def test_scores_invariant_to_training_order(blob):
    X = blob.matrix("train")
    perm = np.array(list(range(len(X))))
    Prng(4).shuffle(perm)
    a = kpca._fit_fixed(X, 0.2, 2, kpca.DEFAULT_PREIMAGE_RIDGE)
    b = kpca._fit_fixed(X[perm], 0.2, 2, kpca.DEFAULT_PREIMAGE_RIDGE)
    T = blob.matrix("test")
    assert kpca.reconstruction_mse(a, T) == pytest.approx(kpca.reconstruction_mse(b, T), abs=1e-12)


def test_model_json_roundtrip(tmp_path, blob):
    model = kpca.fit_kpca(blob.matrix("train"), grid=[0.1, 0.2])
    path = tmp_path / "m.json"
    kpca.save(model, path)
    back = kpca.load(path)
    T = blob.matrix("test")
    assert np.array_equal(kpca.reconstruction_mse(back, T), kpca.reconstruction_mse(model, T))
    doc = kpca.to_json(model)
    assert doc["format"] == "kpca-v1"
    assert set(doc["preimage"]) == {"A", "gamma_p", "lambda_p"}
    assert set(doc["centering"]) == {"row_means", "grand_mean"}
    with pytest.raises(InputError):
        kpca.from_json({"format": "vae-v1"})


def test_score_single_feature_vector_list(blob):
    model = kpca.fit_kpca(blob.matrix("train"), grid=[0.2])
    row = FeatureVector("x", BENIGN, blob.rows[0].values)
    (rec,) = kpca.kpca_score(model, [row], 0.5)
    assert rec.app_id == "x" and rec.verdict == NORMAL
