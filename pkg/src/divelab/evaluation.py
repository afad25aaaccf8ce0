"""Forced-choice prototype classification, specificity tables and group contrasts.

The human studies of the original work are replaced here by fixed image
metrics (saturation, luminance, prototype score, embedding dispersion).
That is a semantic downgrade; every report carries it in its header.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_images
from .errors import ArgumentError, DegenerateEmbeddingError
from .features import NORM_FLOOR
from .metrics import luminance, saturation
from .rng import stream

DEDUP_COS = 1.0 - 1e-9
REPORT_NOTE = ("automated image metrics stand in for human judgments; "
               "no equivalence to human-rated attributes is claimed")


@dataclass
class CategoryPrototypes:
    categories: list  # names, index = category id
    vectors: list  # per category: (m_c, K) unit rows

    def __post_init__(self):
        if len(self.categories) != len(self.vectors) or not self.categories:
            raise ArgumentError("need one prototype block per category")
        for name, v in zip(self.categories, self.vectors):
            if len(v) == 0:
                raise ArgumentError(f"category {name!r} has no prototype")
            if not np.allclose(np.linalg.norm(v, axis=1), 1.0, atol=1e-9):
                raise ArgumentError(f"prototypes of {name!r} are not unit norm")

    @property
    def C(self):
        return len(self.categories)

    def stacked(self):
        """All prototypes (P, K) with their category ids (P,)."""
        ids = np.concatenate([np.full(len(v), c) for c, v in enumerate(self.vectors)])
        return np.vstack(self.vectors), ids


def _dedup(unit):
    keep = []
    for row in unit:
        if all(row @ k < DEDUP_COS for k in keep):
            keep.append(row)
    return np.array(keep)


def build_prototypes(extractor, exemplars, categories=None, mode="all"):
    """Prototype directions from exemplar renders.

    ``exemplars`` maps category name -> images (m, 3, H, W), or is a list in
    category-id order.  ``mode="all"`` keeps every (deduplicated) normalized
    exemplar embedding; ``mode="mean"`` keeps the normalized per-category mean.
    """
    if mode not in ("all", "mean"):
        raise ArgumentError(f"unknown prototype mode {mode!r}")
    if isinstance(exemplars, dict):
        categories = list(categories or exemplars)
        blocks = [exemplars[c] for c in categories]
    else:
        blocks = list(exemplars)
        categories = list(categories or range(len(blocks)))
    vectors = []
    for name, imgs in zip(categories, blocks):
        raw = extractor.transform(check_images(imgs, extractor.image_shape))
        norms = np.linalg.norm(raw, axis=1)
        bad = np.flatnonzero(norms < NORM_FLOOR)
        if bad.size:
            raise DegenerateEmbeddingError(
                f"exemplar {int(bad[0])} of category {name!r} has a degenerate embedding", int(bad[0]))
        unit = raw / norms[:, None]
        if mode == "mean":
            m = unit.mean(axis=0)
            if np.linalg.norm(m) < NORM_FLOOR:
                raise DegenerateEmbeddingError(f"mean prototype of {name!r} is degenerate", 0)
            vectors.append((m / np.linalg.norm(m))[None])
        else:
            vectors.append(_dedup(unit))
    return CategoryPrototypes(categories, vectors)


def classify_embeddings(raw, prototypes: CategoryPrototypes):
    """Category id per embedding by max cosine; -1 marks a degenerate embedding.

    Ties between prototypes go to the lowest category id.
    """
    raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
    norms = np.linalg.norm(raw, axis=1)
    ok = norms >= NORM_FLOOR
    P, ids = prototypes.stacked()
    labels = np.full(len(raw), -1)
    if ok.any():
        cos = (raw[ok] / norms[ok, None]) @ P.T
        per_cat = np.full((ok.sum(), prototypes.C), -np.inf)
        for c in range(prototypes.C):
            per_cat[:, c] = cos[:, ids == c].max(axis=1)
        labels[ok] = np.argmax(per_cat, axis=1)
    return labels


def classify(images, prototypes, extractor):
    return classify_embeddings(extractor.transform(check_images(images, extractor.image_shape)),
                               prototypes)


class PrototypeClassifier(BaseEstimator, ClassifierMixin):
    """Forced-choice nearest-prototype classifier over extractor embeddings.

    ``fit(X, y)`` takes exemplar images and their integer category ids.
    """

    def __init__(self, extractor=None, mode="all"):
        self.extractor = extractor
        self.mode = mode

    def fit(self, X, y):
        if self.extractor is None:
            raise ArgumentError("PrototypeClassifier needs a fitted FeatureExtractor")
        X = check_images(X, self.extractor.image_shape)
        y = np.asarray(y)
        self.classes_ = np.unique(y)
        self.prototypes_ = build_prototypes(self.extractor, [X[y == c] for c in self.classes_],
                                            list(self.classes_), self.mode)
        return self

    def predict(self, X):
        check_is_fitted(self, "prototypes_")
        lab = classify(X, self.prototypes_, self.extractor)
        out = np.full(len(lab), -1, dtype=self.classes_.dtype if self.classes_.dtype.kind in "iu" else object)
        out[lab >= 0] = self.classes_[lab[lab >= 0]]
        return out


# --------------------------------------------------------------------------- specificity


@dataclass
class ImageGroup:
    """A ranked image list (best first) with the region's preferred category id."""

    name: str
    images: np.ndarray
    target: int
    source: str = "recorded"


@dataclass
class SpecificityRow:
    group: str
    tier: str
    category: str
    n: int
    matched: int
    unclassifiable: int

    @property
    def percent(self):
        return 100.0 * self.matched / self.n if self.n else float("nan")


@dataclass
class SpecificityReport:
    rows: list = field(default_factory=list)
    tiers: dict = field(default_factory=dict)  # tier label -> definition
    note: str = REPORT_NOTE

    def lookup(self, group, tier):
        for r in self.rows:
            if r.group == group and r.tier == tier:
                return r.percent
        raise KeyError((group, tier))

    def table(self):
        return [(r.group, r.tier, r.category, r.n, r.matched, r.unclassifiable, r.percent)
                for r in self.rows]


def tier_size(tier, group_size):
    """A tier is an int count or a float fraction of the group size, e.g. 0.1."""
    if isinstance(tier, (int, np.integer)) and not isinstance(tier, bool):
        n = int(tier)
    elif isinstance(tier, float) and 0 < tier <= 1:
        n = max(1, int(round(tier * group_size)))
    else:
        raise ArgumentError(f"invalid tier {tier!r}")
    if n < 1 or n > group_size:
        raise ArgumentError(f"tier {tier!r} asks for {n} images but the group has {group_size}")
    return n


def tier_label(tier):
    return f"top-{tier}" if isinstance(tier, (int, np.integer)) else f"top-{tier * 100:g}%"


def specificity_report(groups, prototypes, extractor, tiers=(0.1, 0.2)):
    """Percent of each group's top-tier images classified as the group's target."""
    report = SpecificityReport()
    for g in groups:
        labels = classify(g.images, prototypes, extractor)
        for tier in tiers:
            n = tier_size(tier, len(labels))
            sub = labels[:n]
            label = tier_label(tier)
            report.tiers[label] = tier
            valid = sub >= 0
            report.rows.append(SpecificityRow(
                g.name, label, str(prototypes.categories[g.target]), int(valid.sum()),
                int((sub[valid] == g.target).sum()), int((~valid).sum())))
    return report


# --------------------------------------------------------------------------- contrasts


@dataclass
class ContrastRow:
    metric: str
    mean_a: float
    mean_b: float
    difference: float
    ci_low: float
    ci_high: float

    @property
    def excludes_zero(self):
        return self.ci_low > 0 or self.ci_high < 0


def _dispersion(unit):
    return 1.0 - float(np.linalg.norm(unit.mean(axis=0)))


def _metric_values(name, images, extractor, prototypes):
    """Per-image values and the group statistic for a built-in metric."""
    if name == "saturation":
        return saturation(images), np.mean
    if name == "luminance":
        return luminance(images), np.mean
    if name == "dispersion":
        return extractor.normalized(images), _dispersion
    if name.startswith("prototype:"):
        cat = name.split(":", 1)[1]
        if prototypes is None or cat not in [str(c) for c in prototypes.categories]:
            raise ArgumentError(f"unknown prototype category in metric {name!r}")
        c = [str(x) for x in prototypes.categories].index(cat)
        return (extractor.normalized(images) @ prototypes.vectors[c].T).max(axis=1), np.mean
    raise ArgumentError(f"unknown metric {name!r}")


def _content_key(values):
    return hashlib.blake2b(np.ascontiguousarray(values).tobytes(), digest_size=8).hexdigest()


def _boot_stats(values, stat, seed, metric, n_boot):
    # the resampling stream depends only on the group's own values, so swapping
    # the two groups reuses the same draws and negates every difference exactly
    rng = stream(seed, "bootstrap", metric, _content_key(values))
    idx = rng.integers(0, len(values), size=(n_boot, len(values)))
    return np.array([stat(values[i]) for i in idx])


def contrast_report(images_a, images_b, metrics=("saturation",), extractor=None, prototypes=None,
                    seed=0, n_boot=1000, level=0.95):
    """Group means, difference (A - B) and a percentile bootstrap CI per metric."""
    a = check_images(images_a, name="group A")
    b = check_images(images_b, name="group B")
    if len(a) == 0 or len(b) == 0:
        raise ArgumentError("both groups must be non-empty")
    alpha = (1.0 - level) / 2 * 100
    rows = []
    for m in metrics:
        va, stat = _metric_values(m, a, extractor, prototypes)
        vb, _ = _metric_values(m, b, extractor, prototypes)
        sa, sb = float(stat(va)), float(stat(vb))
        d = _boot_stats(va, stat, seed, m, n_boot) - _boot_stats(vb, stat, seed, m, n_boot)
        lo = float(np.percentile(d, alpha, method="lower"))
        hi = float(np.percentile(d, 100 - alpha, method="higher"))
        rows.append(ContrastRow(m, sa, sb, sa - sb, lo, hi))
    return rows
