"""Sub-region discovery on normalized encoder weights, and top-k image ranking."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.metrics import silhouette_score
from sklearn.utils.validation import check_is_fitted

from ._validation import as_float_array, check_indices, check_positive_int
from .errors import ArgumentError
from .rng import stream

ROW_FLOOR = 1e-8


@dataclass
class NormalizedRows:
    unit: np.ndarray  # (m, K)
    kept: np.ndarray  # original row ids of ``unit``
    excluded: np.ndarray  # row ids with norm below the floor


def normalize_rows(W, floor=ROW_FLOOR):
    """Unit-normalize the rows of a weight matrix (or an :class:`EncoderHead`)."""
    W = as_float_array(getattr(W, "W", W), "W")
    if W.ndim != 2:
        raise ArgumentError("expected a 2-D weight matrix")
    norms = np.linalg.norm(W, axis=1)
    ok = norms >= floor
    if not ok.any():
        raise ArgumentError("all rows are degenerate (norm below floor); nothing to normalize")
    return NormalizedRows(W[ok] / norms[ok, None], np.flatnonzero(ok), np.flatnonzero(~ok))


@dataclass
class ClusterModel:
    k: int
    centers: np.ndarray  # (k, K) unit rows
    assignments: np.ndarray
    objective: float  # sum of cosines to own center
    n_iter: int
    history: list = field(default_factory=list)
    reseeds: list = field(default_factory=list)  # (restart, iteration, cluster)
    restart: int = 0


def _assign(X, centers):
    # argmax picks the first maximum, i.e. the lowest cluster id on ties
    cos = X @ centers.T
    lab = np.argmax(cos, axis=1)
    return lab, cos[np.arange(len(X)), lab]


def _farthest_point_init(X, k, rng):
    first = int(rng.integers(len(X)))
    chosen = [first]
    best = X @ X[first]
    for _ in range(1, k):
        nxt = int(np.argmin(best))  # lowest max-cosine = farthest in cosine distance
        chosen.append(nxt)
        best = np.maximum(best, X @ X[nxt])
    return X[chosen].copy()


def _one_run(X, k, rng, max_iters, tol, restart):
    centers = _farthest_point_init(X, k, rng)
    history, reseeds = [], []
    lab, own = _assign(X, centers)
    it = 0
    for it in range(1, max_iters + 1):
        new = np.zeros_like(centers)
        for j in range(k):
            members = X[lab == j]
            s = members.sum(axis=0) if len(members) else np.zeros(X.shape[1])
            norm = np.linalg.norm(s)
            if len(members) == 0 or norm < ROW_FLOOR:
                # empty or cancelling cluster: restart it at the worst-fit point
                far = int(np.argmin(own))
                s, norm = X[far], 1.0
                own[far] = np.inf
                reseeds.append((restart, it, j))
            new[j] = s / norm
        centers = new
        new_lab, own = _assign(X, centers)
        history.append(float(own.sum()))
        if np.array_equal(new_lab, lab) and (len(history) < 2 or history[-1] - history[-2] <= tol):
            lab = new_lab
            break
        lab = new_lab
    return ClusterModel(k, centers, lab, float(own.sum()), it, history, reseeds, restart)


def vmf_cluster(unit_vectors, k=2, seed=0, max_iters=100, n_restarts=10, tol=1e-12):
    """Spherical k-means (hard-assignment vMF mixture with shared concentration).

    Each restart draws its first seed point from stream ``(seed, "vmf", r)`` and
    places the rest by farthest-point seeding on cosine distance.  The restart
    with the highest objective wins; ties go to the earliest restart.
    """
    X = as_float_array(unit_vectors, "unit_vectors")
    k = check_positive_int(k, "k")
    if X.ndim != 2:
        raise ArgumentError("unit_vectors must be 2-D")
    if not np.allclose(np.linalg.norm(X, axis=1), 1.0, atol=1e-9):
        raise ArgumentError("inputs must be unit vectors; call normalize_rows first")
    if len(np.unique(X, axis=0)) < k:
        raise ArgumentError(f"need at least k={k} distinct vectors")
    best = None
    for r in range(check_positive_int(n_restarts, "n_restarts")):
        run = _one_run(X, k, stream(seed, "vmf", r), max_iters, tol, r)
        if best is None or run.objective > best.objective:
            best = run
    return best


class SphericalKMeans(BaseEstimator, ClusterMixin):
    """scikit-learn style wrapper over :func:`vmf_cluster`; rows are normalized on input."""

    def __init__(self, n_clusters=2, n_restarts=10, max_iters=100, random_state=0):
        self.n_clusters = n_clusters
        self.n_restarts = n_restarts
        self.max_iters = max_iters
        self.random_state = random_state

    def fit(self, X, y=None):
        rows = normalize_rows(X)
        self.model_ = vmf_cluster(rows.unit, self.n_clusters, self.random_state,
                                  self.max_iters, self.n_restarts)
        self.cluster_centers_ = self.model_.centers
        self.excluded_ = rows.excluded
        labels = np.full(len(np.asarray(X)), -1)
        labels[rows.kept] = self.model_.assignments
        self.labels_ = labels
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = as_float_array(X, "X")
        norms = np.linalg.norm(X, axis=1)
        out = np.full(len(X), -1)
        ok = norms >= ROW_FLOOR
        out[ok] = _assign(X[ok] / norms[ok, None], self.cluster_centers_)[0]
        return out


def cluster_gap(model):
    """Pairwise cosine distances ``1 - cos`` between cluster centers."""
    C = model.centers if hasattr(model, "centers") else np.asarray(model, dtype=np.float64)
    if len(C) < 2:
        raise ArgumentError("cluster_gap needs k >= 2")
    return 1.0 - C @ C.T


def cosine_to_center(unit_vectors, model):
    X = np.asarray(unit_vectors, dtype=np.float64)
    return np.einsum("ij,ij->i", X, model.centers[model.assignments])


def silhouette_report(unit_vectors, ks=(2, 3, 4, 5), seed=0):
    """Cosine silhouette per k; informational only, never used to pick k."""
    X = np.asarray(unit_vectors, dtype=np.float64)
    out = {}
    for k in ks:
        if len(np.unique(X, axis=0)) <= k:
            out[k] = float("nan")
            continue
        lab = vmf_cluster(X, k, seed).assignments
        out[k] = float(silhouette_score(X, lab, metric="cosine")) if len(set(lab)) > 1 else float("nan")
    return out


@dataclass
class RankedImages:
    ids: list
    scores: np.ndarray
    source: str  # "recorded" | "generated"

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ArgumentError("ranked image ids must be unique")

    def rows(self):
        return [(r + 1, i, float(s)) for r, (i, s) in enumerate(zip(self.ids, self.scores))]


def rank_images(values, image_ids, S, top_k, source="recorded"):
    """Top-k images by mean response over voxel set ``S``.

    ``values`` is (n_images, N): recorded betas or predicted activations.
    Ties in score keep ascending image-id order.
    """
    V = as_float_array(values, "values")
    if V.ndim != 2 or len(V) != len(image_ids):
        raise ArgumentError("values must be (n_images, n_voxels) aligned with image_ids")
    idx = check_indices(getattr(S, "indices", S), V.shape[1], "voxel set")
    top_k = check_positive_int(top_k, "top_k")
    if top_k > len(V):
        raise ArgumentError(f"top_k={top_k} exceeds the {len(V)} available images")
    if source not in ("recorded", "generated"):
        raise ArgumentError(f"unknown source {source!r}")
    scores = V[:, idx].mean(axis=1)
    ids = [str(i) for i in image_ids]
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))[:top_k]
    return RankedImages([ids[i] for i in order], scores[order], source)
