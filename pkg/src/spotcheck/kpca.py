"""Kernel PCA anomaly detector with an RBF kernel.

Fitting centres the training Gram matrix in feature space, keeps the top ``r``
eigenpairs and learns a kernel-ridge map from latent points back to input
space. The anomaly score of a point is the mean squared error between it and
its reconstruction.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics
from .errors import InputError, NumericError, RankDeficiencyError
from .numerics import Prng
from .records import ANOMALY, KPCA, NORMAL, AnomalyRecord

log = logging.getLogger(__name__)

FORMAT = "kpca-v1"
EIG_FLOOR = 1e-10
DEFAULT_PREIMAGE_RIDGE = 1e-3


def default_grid(lo: float = 0.01, hi: float = 0.5, count: int = 25) -> list[float]:
    return [float(g) for g in np.geomspace(lo, hi, count)]


@dataclass
class KpcaModel:
    gamma: float
    r: int
    X_train: np.ndarray
    row_means: np.ndarray
    grand_mean: float
    U_r: np.ndarray  # eigenvectors scaled by 1/sqrt(lambda)
    lambda_r: np.ndarray
    A: np.ndarray | None = None
    gamma_p: float = 1.0
    lambda_p: float = DEFAULT_PREIMAGE_RIDGE
    meta: dict = field(default_factory=dict)
    # training latents through the same path a loaded model uses; not serialised
    latents: np.ndarray | None = field(default=None, repr=False)
    centered_gram: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_features(self) -> int:
        return self.X_train.shape[1]

    @property
    def latent_dim(self) -> int:
        return self.r


def center_gram(K: np.ndarray) -> np.ndarray:
    """K - 1K - K1 + 1K1 with (1)_ij = 1/m."""
    row = K.mean(axis=1)
    col = K.mean(axis=0)
    return K - row[:, None] - col[None, :] + K.mean()


def _fit_fixed(X: np.ndarray, gamma: float, r: int, lambda_p: float) -> KpcaModel:
    m = X.shape[0]
    K = numerics.rbf_matrix(X, X, gamma)
    Kc = center_gram(K)
    w, V = numerics.sym_eig(Kc)
    keep = int(np.sum(w[:r] > EIG_FLOOR))
    if keep < r:
        raise RankDeficiencyError(
            f"only {keep} of r={r} centred-kernel eigenvalues exceed {EIG_FLOOR:g} "
            f"(m={m}, gamma={gamma:g}); lower r or supply more varied training data"
        )
    lam = w[:r].copy()
    # contiguous so a reloaded model hits the same BLAS path bit for bit
    U = np.ascontiguousarray(V[:, :r] / np.sqrt(lam))
    model = KpcaModel(
        gamma=float(gamma),
        r=r,
        X_train=X.copy(),
        row_means=K.mean(axis=1),
        grand_mean=float(K.mean()),
        U_r=U,
        lambda_r=lam,
        lambda_p=float(lambda_p),
    )
    model.centered_gram = Kc
    model.latents = kpca_transform(model, X)
    fit_preimage(model, lambda_p)
    return model


def fit_preimage(model: KpcaModel, lambda_p: float | None = None) -> KpcaModel:
    """Fit the latent -> input kernel-ridge map on the training latents."""
    if lambda_p is not None:
        model.lambda_p = float(lambda_p)
    Z = model.latents
    d2 = numerics.sq_dists(Z, Z)[np.triu_indices(len(Z), k=1)]
    med = float(np.median(d2)) if d2.size else 0.0
    model.gamma_p = 1.0 / (2.0 * med) if med > 0 else 1.0
    Kzz = numerics.rbf_matrix(Z, Z, model.gamma_p)
    model.A = np.ascontiguousarray(numerics.ridge_solve(Kzz, model.X_train, model.lambda_p))
    return model


def _fold_indices(m: int, folds: int, seed: int) -> list[np.ndarray]:
    order = list(range(m))
    Prng(seed).shuffle(order)
    return [np.array(sorted(order[k::folds])) for k in range(folds)]


def cv_mse(X: np.ndarray, gamma: float, r: int = 2, folds: int = 3, seed: int = 0,
           lambda_p: float = DEFAULT_PREIMAGE_RIDGE) -> float:
    """Mean held-out reconstruction MSE over a seeded k-fold partition."""
    parts = _fold_indices(len(X), folds, seed)
    errs = []
    for k, held in enumerate(parts):
        if len(held) < r:
            raise RankDeficiencyError(f"fold {k} has {len(held)} < r={r} points")
        train = np.concatenate([p for j, p in enumerate(parts) if j != k])
        model = _fit_fixed(X[np.sort(train)], gamma, r, lambda_p)
        errs.append(float(np.mean(reconstruction_mse(model, X[held]))))
    return float(np.mean(errs))


def grid_search_gamma(X_train, grid=None, folds: int = 3, r: int = 2, seed: int = 0,
                      lambda_p: float = DEFAULT_PREIMAGE_RIDGE, scores: dict | None = None) -> float:
    """Pick the gamma with the lowest cross-validated reconstruction MSE (ties -> smaller gamma).

    If ``scores`` is given it is filled with ``{gamma: mean_mse}``.
    """
    X = np.asarray(X_train, dtype=np.float64)
    grid = default_grid() if grid is None else [float(g) for g in grid]
    if not grid or any(not g > 0 for g in grid):
        raise InputError("gamma grid must be non-empty and positive")
    if len(X) < folds:
        raise InputError(f"need at least {folds} training rows for {folds}-fold search")
    if len(set(grid)) == 1:
        return grid[0]
    best = None
    last_err = None
    for g in grid:
        try:
            mse = cv_mse(X, g, r, folds, seed, lambda_p)
        except NumericError as exc:
            log.warning("skipping gamma=%g: %s", g, exc)
            last_err = exc
            continue
        if scores is not None:
            scores[g] = mse
        if best is None or (mse, g) < best:
            best = (mse, g)
    if best is None:
        raise RankDeficiencyError(f"every gamma candidate failed during grid search; last: {last_err}")
    return best[1]


def fit_kpca(X_train, r: int = 2, grid=None, folds: int = 3, seed: int = 0,
             lambda_p: float = DEFAULT_PREIMAGE_RIDGE) -> KpcaModel:
    X = np.asarray(X_train, dtype=np.float64)
    if X.ndim != 2 or len(X) < 3:
        raise InputError("need a 2-D training matrix with at least 3 rows")
    if r < 1:
        raise InputError("latent dimension must be >= 1")
    scores: dict = {}
    gamma = grid_search_gamma(X, grid, folds, r, seed, lambda_p, scores)
    model = _fit_fixed(X, gamma, r, lambda_p)
    model.meta = {"folds": folds, "seed": seed, "grid": list(default_grid() if grid is None else grid),
                  "cv_mse": {repr(k): v for k, v in scores.items()}}
    return model


def kpca_transform(model: KpcaModel, X) -> np.ndarray:
    """Latent coordinates of one point (1-D input) or a batch (2-D input)."""
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != model.n_features:
        raise InputError(f"expected {model.n_features} features, got {X.shape[1]}")
    k = numerics.rbf_matrix(X, model.X_train, model.gamma)
    kc = k - k.mean(axis=1, keepdims=True) - model.row_means[None, :] + model.grand_mean
    Z = kc @ model.U_r
    return Z[0] if single else Z


def kpca_inverse(model: KpcaModel, Z) -> np.ndarray:
    Z = np.asarray(Z, dtype=np.float64)
    single = Z.ndim == 1
    Z = np.atleast_2d(Z)
    if Z.shape[1] != model.r:
        raise InputError(f"expected {model.r} latent coordinates, got {Z.shape[1]}")
    Zt = kpca_transform(model, model.X_train)
    Xh = numerics.rbf_matrix(Z, Zt, model.gamma_p) @ model.A
    return Xh[0] if single else Xh


def reconstruction_mse(model: KpcaModel, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Xh = kpca_inverse(model, kpca_transform(model, X))
    return np.mean((X - Xh) ** 2, axis=1)


def kpca_score(model: KpcaModel, rows, alpha: float) -> list[AnomalyRecord]:
    """Score FeatureVectors; verdict is anomaly iff MSE > alpha."""
    if math.isnan(alpha):
        raise InputError("threshold must not be NaN")
    rows = list(rows)
    if not rows:
        return []
    mse = reconstruction_mse(model, np.vstack([r.values for r in rows]))
    return [AnomalyRecord(r.app_id, float(e), ANOMALY if e > alpha else NORMAL, KPCA)
            for r, e in zip(rows, mse)]


def to_json(model: KpcaModel) -> dict:
    return {
        "format": FORMAT,
        "gamma": model.gamma,
        "r": model.r,
        "centering": {"row_means": model.row_means.tolist(), "grand_mean": model.grand_mean},
        "U_r": model.U_r.tolist(),
        "lambda_r": model.lambda_r.tolist(),
        "X_train": model.X_train.tolist(),
        "preimage": {"A": model.A.tolist(), "gamma_p": model.gamma_p, "lambda_p": model.lambda_p},
        "meta": model.meta,
    }


def from_json(doc: dict) -> KpcaModel:
    if doc.get("format") != FORMAT:
        raise InputError(f"not a {FORMAT} model file")
    pre = doc["preimage"]
    model = KpcaModel(
        gamma=float(doc["gamma"]),
        r=int(doc["r"]),
        X_train=np.array(doc["X_train"], dtype=np.float64),
        row_means=np.array(doc["centering"]["row_means"], dtype=np.float64),
        grand_mean=float(doc["centering"]["grand_mean"]),
        U_r=np.array(doc["U_r"], dtype=np.float64).reshape(-1, int(doc["r"])),
        lambda_r=np.array(doc["lambda_r"], dtype=np.float64),
        A=np.array(pre["A"], dtype=np.float64),
        gamma_p=float(pre["gamma_p"]),
        lambda_p=float(pre["lambda_p"]),
        meta=doc.get("meta", {}),
    )
    model.latents = kpca_transform(model, model.X_train)
    return model


def save(model: KpcaModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(to_json(model), fh)


def load(path) -> KpcaModel:
    with open(path) as fh:
        return from_json(json.load(fh))
