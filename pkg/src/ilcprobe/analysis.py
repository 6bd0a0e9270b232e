"""Layer-wise shift sensitivity and representation geometry.

All metrics promote their inputs to float64.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .errors import (DegenerateMeans, DegenerateReference, EmptyInput, InvalidParam, NumericalError,
                     RankDeficiency, ShapeError)

TVD_BINS = 40
PCA_DIM = 32


def _f64(a, name="features") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ShapeError(f"{name} must be a 2-D matrix")
    return a


def mean_pairwise_dist(A, B) -> float:
    """Mean squared Euclidean distance over all |A|*|B| pairs (self-pairs included).

    Uses mean|a|^2 + mean|b|^2 - 2 <mean a, mean b> after shifting both sets
    by A's mean, which keeps the cancellation small.
    """
    A, B = _f64(A, "A"), _f64(B, "B")
    if A.shape[1] != B.shape[1]:
        raise ShapeError(f"feature widths differ: {A.shape[1]} vs {B.shape[1]}")
    if not len(A) or not len(B):
        raise EmptyInput("mean_pairwise_dist of an empty set")
    c = A.mean(axis=0)
    A = A - c
    B = B - c
    ma, mb = A.mean(axis=0), B.mean(axis=0)
    d = np.einsum("ij,ij->", A, A) / len(A) + np.einsum("ij,ij->", B, B) / len(B) - 2.0 * ma @ mb
    return float(max(d, 0.0))


def sensitivity_score(probe_feats, test_feats) -> float:
    """|1 - dist(probe, test) / dist(probe, probe)|."""
    ref = mean_pairwise_dist(probe_feats, probe_feats)
    if ref == 0.0:
        raise DegenerateReference("all probe points coincide")
    return float(abs(1.0 - mean_pairwise_dist(probe_feats, test_feats) / ref))


@dataclass
class SensitivityProfile:
    per_layer: dict[int, dict[int, float]]
    dists: dict[int, dict[int, tuple[float, float]]] = field(default_factory=dict)


def sensitivity_profile(probe_store, test_store, layers=None, groups=None) -> SensitivityProfile:
    """sens per (layer, group) between the probe and test stores.

    Groups whose probe points coincide are skipped.
    """
    layers = probe_store.layers if layers is None else layers
    if groups is None:
        groups = sorted(set(np.unique(probe_store.groups)) & set(np.unique(test_store.groups)))
    per, dists = {}, {}
    for l in layers:
        P, T = probe_store.layer(l), test_store.layer(l)
        per[l], dists[l] = {}, {}
        for g in groups:
            pg, tg = P[probe_store.groups == g], T[test_store.groups == g]
            if not len(pg) or not len(tg):
                continue
            ref = mean_pairwise_dist(pg, pg)
            if ref == 0.0:
                continue
            cross = mean_pairwise_dist(pg, tg)
            per[l][int(g)] = abs(1.0 - cross / ref)
            dists[l][int(g)] = (cross, ref)
    return SensitivityProfile(per, dists)


def histogram_tvd(p, q) -> float:
    """0.5 * sum |p - q| after normalizing both histograms."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError("histograms must have the same bins")
    return float(0.5 * np.abs(p / p.sum() - q / q.sum()).sum())


def feature_tvd_per_feature(id_feats, ood_feats, bins: int = TVD_BINS) -> np.ndarray:
    """TVD of each column's histogram over the union range of both sets."""
    X, Y = _f64(id_feats, "id_feats"), _f64(ood_feats, "ood_feats")
    if X.shape[1] != Y.shape[1]:
        raise ShapeError(f"feature widths differ: {X.shape[1]} vs {Y.shape[1]}")
    if not len(X) or not len(Y):
        raise EmptyInput("empty feature matrix")
    if bins < 1:
        raise InvalidParam("bins must be positive")
    lo = np.minimum(X.min(axis=0), Y.min(axis=0))
    hi = np.maximum(X.max(axis=0), Y.max(axis=0))
    span = hi - lo
    flat = span == 0
    # constant-equal columns: both sides put all mass in one bin
    scale = np.where(flat, 1.0, span)
    d = X.shape[1]
    out = np.empty(d)

    def binned(M):
        k = np.floor((M - lo) / scale * bins).astype(np.int64)
        k = np.clip(k, 0, bins - 1)
        k[:, flat] = 0
        counts = np.zeros((d, bins))
        np.add.at(counts, (np.broadcast_to(np.arange(d), k.shape), k), 1.0)
        return counts / len(M)

    P, Q = binned(X), binned(Y)
    out[:] = 0.5 * np.abs(P - Q).sum(axis=1)
    return out


def feature_tvd(id_feats, ood_feats, bins: int = TVD_BINS) -> float:
    """Mean over features of the per-feature histogram TVD."""
    return float(feature_tvd_per_feature(id_feats, ood_feats, bins).mean())


@dataclass
class TvdProfile:
    per_layer: dict[int, float]
    bins: int = TVD_BINS
    per_group: dict[int, dict[int, float]] = field(default_factory=dict)
    seed: int | None = None


def tvd_profile(id_store, ood_store, layers=None, bins: int = TVD_BINS, per_group: bool = False,
                seed: int = 0) -> TvdProfile:
    """Mean TVD per layer; with ``per_group`` also per group, each side subsampled
    to the smallest group size present on that side."""
    layers = id_store.layers if layers is None else layers
    prof = TvdProfile({}, bins, {}, seed if per_group else None)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 31]))
    picks = {}
    if per_group:
        groups = sorted(set(np.unique(id_store.groups)) & set(np.unique(ood_store.groups)))
        m_id = min(int(np.sum(id_store.groups == g)) for g in groups)
        m_ood = min(int(np.sum(ood_store.groups == g)) for g in groups)
        for g in groups:
            picks[g] = (np.sort(rng.choice(np.flatnonzero(id_store.groups == g), m_id, replace=False)),
                        np.sort(rng.choice(np.flatnonzero(ood_store.groups == g), m_ood, replace=False)))
    for l in layers:
        A, B = id_store.layer(l), ood_store.layer(l)
        prof.per_layer[l] = feature_tvd(A, B, bins)
        if per_group:
            prof.per_group[l] = {int(g): feature_tvd(A[i], B[j], bins) for g, (i, j) in picks.items()}
    return prof


def _class_stats(feats, labels):
    X = _f64(feats)
    labels = np.asarray(labels)
    if len(labels) != len(X):
        raise ShapeError("labels and features differ in length")
    classes = np.unique(labels)
    if len(classes) < 2:
        raise InvalidParam("need at least two classes")
    return X, labels, classes


def cdnv(feats, labels) -> float:
    """Mean over class pairs of (Var_i + Var_j) / (2 |mu_i - mu_j|^2)."""
    X, labels, classes = _class_stats(feats, labels)
    mus, var = {}, {}
    for c in classes:
        R = X[labels == c]
        mus[c] = R.mean(axis=0)
        var[c] = float(((R - mus[c]) ** 2).sum(axis=1).mean())
    vals = []
    for i, j in combinations(classes, 2):
        gap = float(((mus[i] - mus[j]) ** 2).sum())
        if gap == 0.0:
            raise DegenerateMeans(f"classes {i} and {j} share a mean")
        vals.append((var[i] + var[j]) / (2.0 * gap))
    return float(np.mean(vals))


def scatter_matrices(feats, labels):
    """Within-class (normalized by the total sample count) and between-class covariances."""
    X, labels, classes = _class_stats(feats, labels)
    K, (n, d) = len(classes), X.shape
    mu_g = X.mean(axis=0)
    Sw = np.zeros((d, d))
    Sb = np.zeros((d, d))
    for c in classes:
        R = X[labels == c]
        mu = R.mean(axis=0)
        D = R - mu
        Sw += D.T @ D
        Sb += np.outer(mu - mu_g, mu - mu_g)
    return Sw / n, Sb / K, K


def nc1(feats, labels) -> float:
    """(1/K) trace(Sigma_W pinv(Sigma_B))."""
    Sw, Sb, K = scatter_matrices(feats, labels)
    try:
        Sb_pinv = np.linalg.pinv(Sb, hermitian=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("pseudoinverse of the between-class covariance failed") from exc
    return float(max(np.trace(Sw @ Sb_pinv) / K, 0.0))


@dataclass
class CollapseProfile:
    per_layer: dict[int, float]
    nc1: dict[int, float] = field(default_factory=dict)


def collapse_profile(store, layers=None, with_nc1: bool = True) -> CollapseProfile:
    layers = store.layers if layers is None else layers
    prof = CollapseProfile({})
    for l in layers:
        X = store.layer(l)
        prof.per_layer[l] = cdnv(X, store.labels)
        if with_nc1:
            prof.nc1[l] = nc1(X, store.labels)
    return prof


@dataclass
class PcaProjector:
    layer: int
    mean: np.ndarray
    basis: np.ndarray
    k: int
    singular_values: np.ndarray
    rank_deficient: bool = False
    n_train: int = 0

    @property
    def explained_variance(self) -> np.ndarray:
        return self.singular_values ** 2 / max(self.n_train - 1, 1)


def fit_pca(train_feats, k: int = PCA_DIM, layer: int = 0, tol: float | None = None) -> PcaProjector:
    """Top-k right singular vectors of the centred training matrix.

    Each basis vector is signed so that its largest-magnitude entry is
    positive. If fewer than k singular values are nonzero a RankDeficiency
    warning is issued and the extra columns are an arbitrary orthonormal
    completion.
    """
    X = _f64(train_feats)
    n, d = X.shape
    if not 0 < k <= min(n, d):
        raise InvalidParam(f"k={k} must be in [1, min(n, d)={min(n, d)}]")
    mean = X.mean(axis=0)
    _, s, Vt = np.linalg.svd(X - mean, full_matrices=False)
    basis = Vt[:k].T.copy()
    pivots = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[pivots, np.arange(k)])
    basis *= np.where(signs == 0, 1.0, signs)
    sv = s[:k].copy()
    if tol is None:
        tol = max(n, d) * np.finfo(np.float64).eps * (s[0] if len(s) else 0.0)
    deficient = bool(np.sum(sv > tol) < k)
    if deficient:
        warnings.warn(f"only {int(np.sum(sv > tol))} nonzero singular values for k={k}", RankDeficiency, stacklevel=2)
    return PcaProjector(layer, mean, basis, k, sv, deficient, n_train=n)


def project(p: PcaProjector, feats) -> np.ndarray:
    """(feats - training mean) @ basis."""
    X = _f64(feats)
    if X.shape[1] != p.mean.shape[0]:
        raise ShapeError(f"feature width {X.shape[1]} != projector input width {p.mean.shape[0]}")
    return (X - p.mean) @ p.basis


def reconstruct(p: PcaProjector, coords) -> np.ndarray:
    return np.asarray(coords, dtype=np.float64) @ p.basis.T + p.mean
