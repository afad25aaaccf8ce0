"""Simulated subject: planted voxel tuning, recordings with session structure,
per-session normalization, repeat averaging, t-statistics and voxel selection."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import vonmises_fisher

from .errors import ArgumentError, ConfigError, ConsistencyError
from .features import normalize_embedding
from .metrics import saturation
from .rng import stream


@dataclass
class SubjectConfig:
    region_size: int = 100
    n_nonselective: int = 100
    kappa: float = 50.0
    amplitude: tuple = (3.0, 5.0)
    nonselective_amplitude: float = 0.5
    bias_sd: float = 1.0
    subclusters: dict = field(default_factory=lambda: {"food": 2})
    subcluster_angle: float = 60.0
    subcluster_axis: str = "saturation"
    noise_ratio: float = 1.0
    session_offset_sd: float = 0.1

    def validate(self):
        if not 0.0 <= self.subcluster_angle < 180.0:
            raise ConfigError("sub-cluster separation must lie in [0, 180) degrees",
                              "subject.subcluster_angle")
        if self.region_size < 1 or self.n_nonselective < 0:
            raise ConfigError("region sizes must be positive", "subject.region_size")
        if self.kappa <= 0:
            raise ConfigError("kappa must be positive", "subject.kappa")
        if self.noise_ratio < 0 or self.session_offset_sd < 0:
            raise ConfigError("noise levels must be non-negative", "subject.noise_ratio")
        if self.subcluster_axis not in ("saturation", "random"):
            raise ConfigError("subcluster_axis must be 'saturation' or 'random'",
                              "subject.subcluster_axis")
        for name, k in self.subclusters.items():
            if int(k) < 2:
                raise ConfigError(f"sub-cluster count for {name!r} must be >= 2",
                                  f"subject.subclusters.{name}")


@dataclass
class GroundTruthSubject:
    W: np.ndarray  # (N, K)
    b: np.ndarray  # (N,)
    region: np.ndarray  # (N,) category id or -1
    subcluster: np.ndarray  # (N,) sub-cluster id within region or -1
    noise_sd: np.ndarray  # (N,)
    prototypes: np.ndarray  # (C, K) planted category directions
    subcluster_directions: dict  # category id -> (k, K)
    categories: tuple
    extractor: object = None

    @property
    def N(self):
        return self.W.shape[0]

    def region_voxels(self, category):
        return np.flatnonzero(self.region == category)


@dataclass
class VoxelSet:
    indices: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        if idx.size and idx.min() < 0:
            raise ArgumentError("voxel indices must be non-negative")
        if np.unique(idx).size != idx.size:
            raise ArgumentError("voxel indices must be unique")
        self.indices = np.sort(idx)

    def __len__(self):
        return int(self.indices.size)

    def __iter__(self):
        return iter(self.indices.tolist())

    def check_range(self, n_voxels):
        if self.indices.size and self.indices.max() >= n_voxels:
            raise ArgumentError(f"voxel index {int(self.indices.max())} >= N = {n_voxels}")
        return self


@dataclass
class SubjectDataset:
    """Images plus a voxel x column beta matrix.

    Raw datasets have one column per presentation (``column_session`` and
    ``column_repeat`` set); averaged datasets have one column per unique image,
    in image order.
    """

    images: np.ndarray
    image_ids: list
    image_categories: np.ndarray
    category_names: tuple
    betas: np.ndarray  # (N, n_columns)
    column_image: np.ndarray
    column_session: np.ndarray | None = None
    column_repeat: np.ndarray | None = None
    heldout: np.ndarray | None = None  # per image
    normalized: bool = False
    averaged: bool = False
    flags: np.ndarray | None = None  # (N, n_sessions) zero-variance pairs

    def __post_init__(self):
        self.column_image = np.asarray(self.column_image, dtype=np.int64)
        if self.betas.shape[1] != self.column_image.size:
            raise ConsistencyError("beta columns and manifest disagree")
        if self.column_image.size and (self.column_image.min() < 0
                                       or self.column_image.max() >= len(self.image_ids)):
            raise ConsistencyError("a presentation references a missing image")

    @property
    def n_voxels(self):
        return self.betas.shape[0]

    @property
    def n_sessions(self):
        return 0 if self.column_session is None else int(self.column_session.max()) + 1

    def flagged_voxels(self):
        if self.flags is None:
            return np.zeros(self.n_voxels, dtype=bool)
        return self.flags.any(axis=1)

    def _split(self, held):
        if not self.averaged:
            raise ArgumentError("training arrays come from an averaged dataset")
        mask = np.zeros(len(self.image_ids), dtype=bool) if self.heldout is None else self.heldout
        cols = np.flatnonzero(mask[self.column_image] == held)
        return self.images[self.column_image[cols]], self.betas[:, cols].T

    def training_arrays(self):
        return self._split(False)

    def heldout_arrays(self):
        return self._split(True)


# ------------------------------------------------------------------ ground truth


def category_prototypes(unit_embeddings, labels, n_categories):
    P = np.stack([unit_embeddings[labels == c].mean(axis=0) for c in range(n_categories)])
    return normalize_embedding(P)


def _orthonormal_to(p, v):
    v = v - (v @ p) * p
    n = np.linalg.norm(v)
    if n < 1e-12:
        raise ConfigError("sub-cluster axis is parallel to the region prototype")
    return v / n


def make_subject(world, extractor, cfg: SubjectConfig | None = None, seed=0):
    """Plant category-selective regions (and sub-clusters) in embedding space."""
    cfg = cfg or SubjectConfig()
    cfg.validate()
    C = len(world.categories)
    E = extractor.normalized(world.images)
    K = E.shape[1]
    protos = category_prototypes(E, world.labels, C)
    rng = stream(seed, "subject")
    N = C * cfg.region_size + cfg.n_nonselective
    W = np.zeros((N, K))
    region = np.full(N, -1, dtype=np.int64)
    sub = np.full(N, -1, dtype=np.int64)
    sub_dirs = {}
    half = np.deg2rad(cfg.subcluster_angle) / 2
    sat = saturation(world.images)
    for c, name in enumerate(world.categories):
        rows = np.arange(c * cfg.region_size, (c + 1) * cfg.region_size)
        region[rows] = c
        k = int(cfg.subclusters.get(name, 1))
        p = protos[c]
        if k >= 2:
            m = world.labels == c
            if cfg.subcluster_axis == "saturation":
                s = sat[m] - sat[m].mean()
                u = _orthonormal_to(p, (s[:, None] * (E[m] - E[m].mean(axis=0))).sum(axis=0))
            else:
                u = _orthonormal_to(p, rng.standard_normal(K))
            v = _orthonormal_to(u, _orthonormal_to(p, rng.standard_normal(K)))
            v = _orthonormal_to(p, v)
            phis = 2 * np.pi * np.arange(k) / k
            dirs = np.stack([np.cos(half) * p + np.sin(half) * (np.cos(f) * u + np.sin(f) * v)
                             for f in phis])
            sub_dirs[c] = dirs
            labels = np.arange(rows.size) % k
            sub[rows] = labels
            centers = dirs[labels]
        else:
            centers = np.repeat(p[None], rows.size, axis=0)
        amps = rng.uniform(*cfg.amplitude, size=rows.size)
        for j, r in enumerate(rows):
            d = vonmises_fisher(centers[j], cfg.kappa).rvs(random_state=rng)
            W[r] = amps[j] * np.asarray(d).reshape(-1)
    ns = np.arange(C * cfg.region_size, N)
    if ns.size:
        W[ns] = cfg.nonselective_amplitude * normalize_embedding(rng.standard_normal((ns.size, K)))
    b = rng.normal(0.0, cfg.bias_sd, size=N)
    signal_sd = (E @ W.T).std(axis=0)
    noise_sd = cfg.noise_ratio * signal_sd
    if ns.size and cfg.region_size:
        noise_sd[ns] = cfg.noise_ratio * np.median(signal_sd[region >= 0])
    return GroundTruthSubject(W, b, region, sub, noise_sd, protos, sub_dirs,
                              tuple(world.categories), extractor)


# ------------------------------------------------------------------ recordings


def simulate_recordings(subject, world, sessions=4, repeats=3, seed=0, heldout_fraction=0.1,
                        session_offset_sd=0.1):
    """Raw recordings: one column per presentation, tagged with session and repeat.

    ``beta[i, p] = <W_i, f_hat(I_p)> + b_i + offset_i(session_p) + noise``.
    """
    if sessions < 1 or repeats < 1:
        raise ArgumentError("sessions and repeats must be >= 1")
    rng = stream(seed, "recordings")
    n = len(world)
    E = subject.extractor.normalized(world.images)
    model = E @ subject.W.T + subject.b  # (n, N)
    col_image = np.tile(np.arange(n), repeats)
    col_repeat = np.repeat(np.arange(repeats), n)
    order = rng.permutation(col_image.size)
    col_image, col_repeat = col_image[order], col_repeat[order]
    col_session = (np.arange(col_image.size) * sessions) // col_image.size
    offsets = rng.normal(0.0, session_offset_sd, size=(subject.N, sessions)) \
        if session_offset_sd > 0 else np.zeros((subject.N, sessions))
    noise = rng.standard_normal((subject.N, col_image.size)) * subject.noise_sd[:, None]
    betas = model[col_image].T + offsets[:, col_session] + noise
    held = np.zeros(n, dtype=bool)
    n_held = int(round(heldout_fraction * n))
    if n_held:
        held[stream(seed, "heldout").choice(n, size=n_held, replace=False)] = True
    return SubjectDataset(world.images, list(world.ids), world.labels.copy(),
                          tuple(world.categories), betas, col_image, col_session.astype(np.int64),
                          col_repeat.astype(np.int64), held)


def normalize_sessions(dataset: SubjectDataset):
    """Z-score every voxel within each session (population sd).

    (voxel, session) pairs with zero variance are set to 0 and flagged.
    """
    if dataset.column_session is None:
        raise ArgumentError("normalization needs session tags (raw dataset)")
    B = dataset.betas.copy()
    flags = np.zeros((dataset.n_voxels, dataset.n_sessions), dtype=bool)
    for s in range(dataset.n_sessions):
        cols = np.flatnonzero(dataset.column_session == s)
        if cols.size == 0:
            continue
        block = B[:, cols]
        mu = block.mean(axis=1, keepdims=True)
        sd = block.std(axis=1, keepdims=True)
        zero = sd[:, 0] <= 1e-12 * np.maximum(1.0, np.abs(mu[:, 0]))
        flags[zero, s] = True
        out = (block - mu) / np.where(zero[:, None], 1.0, sd)
        out[zero] = 0.0
        B[:, cols] = out
    return replace(dataset, betas=B, normalized=True, flags=flags)


def average_repeats(dataset: SubjectDataset):
    """One column per unique image: the mean over its presentations."""
    n = len(dataset.image_ids)
    counts = np.bincount(dataset.column_image, minlength=n)
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise ConsistencyError(f"image {dataset.image_ids[missing[0]]} has no presentations")
    sums = np.zeros((dataset.n_voxels, n))
    np.add.at(sums.T, dataset.column_image, dataset.betas.T)
    return replace(dataset, betas=sums / counts, column_image=np.arange(n), column_session=None,
                   column_repeat=None, averaged=True)


def pooled_t(a, b):
    """Two-sample pooled-variance t statistic of a vs b along axis -1."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n1, n2 = a.shape[-1], b.shape[-1]
    if n1 < 2 or n2 < 2:
        raise ArgumentError("each group needs at least 2 observations")
    sp2 = (a.var(axis=-1, ddof=1) * (n1 - 1) + b.var(axis=-1, ddof=1) * (n2 - 1)) / (n1 + n2 - 2)
    diff = a.mean(axis=-1) - b.mean(axis=-1)
    se = np.sqrt(sp2 * (1 / n1 + 1 / n2))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, diff / np.where(se > 0, se, 1.0), 0.0)
    return t


def compute_tstats(dataset: SubjectDataset, category):
    """Per-voxel category-vs-rest t on an averaged dataset; NaN for flagged voxels."""
    if not dataset.averaged:
        raise ArgumentError("t statistics need an averaged dataset")
    if isinstance(category, str):
        if category not in dataset.category_names:
            raise ArgumentError(f"unknown category {category!r}")
        category = dataset.category_names.index(category)
    labels = dataset.image_categories[dataset.column_image]
    m = labels == category
    if m.sum() < 2:
        raise ArgumentError(f"category {category} has fewer than 2 images")
    t = pooled_t(dataset.betas[:, m], dataset.betas[:, ~m])
    t[dataset.flagged_voxels()] = np.nan
    return t


def preferred_mask(tstats, category, name=None):
    """Voxels whose largest category t is ``category`` (a localizer-style mask).

    ``tstats`` is (C, N); NaN rows (flagged voxels) never qualify.
    """
    T = np.asarray(tstats, dtype=np.float64)
    filled = np.where(np.isnan(T), -np.inf, T)
    keep = (np.argmax(filled, axis=0) == category) & np.isfinite(filled[category])
    return VoxelSet(np.flatnonzero(keep), {"name": f"preferred:{name or category}"})


def select_voxels(tstats, threshold, mask: VoxelSet | None = None, **provenance):
    """Voxels with t > threshold, intersected with ``mask`` when given."""
    t = np.asarray(tstats, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        keep = t > threshold
    idx = np.flatnonzero(keep)
    if mask is not None:
        idx = np.intersect1d(idx, mask.indices)
    prov = {"threshold": float(threshold)}
    if mask is not None:
        prov["mask"] = mask.provenance.get("name", "mask")
    prov.update(provenance)
    if idx.size == 0:
        warnings.warn(f"no voxel passes t > {threshold}", RuntimeWarning, stacklevel=2)
    return VoxelSet(idx, prov)
