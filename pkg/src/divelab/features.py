"""A fixed, smooth image-to-embedding map standing in for a pretrained backbone.

The map has two stages.  :func:`descriptors` computes 105 hand-specified
statistics: channel means (central window and a 3x3 grid), channel spread
(global and per quadrant), soft chroma (spatial spread and a 3x3 grid), and,
at two scales, oriented smoothed-gradient energies and Laplacian energies
pooled globally and per quadrant.  Every operation is smooth (square roots
carry an epsilon, padding replicates edges), so gradients w.r.t. pixels
exist everywhere.  :class:`FeatureExtractor` then standardizes the
descriptors and applies a shrunk whitening projection onto the leading K
principal directions.  Calibration happens once in :meth:`fit`; after that
the extractor is frozen.
"""
from __future__ import annotations

import math

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted
from torch.nn import functional as F

from ._validation import check_images
from .errors import ArgumentError, DegenerateEmbeddingError

N_DESCRIPTORS = 105
NORM_FLOOR = 1e-8
_EPS = 1e-4
_ANGLES = (0.0, math.pi / 4, math.pi / 2, 3 * math.pi / 4)


def _conv_same(x, kernel):
    """Single-channel 'same' convolution with edge replication."""
    k = kernel.to(dtype=x.dtype)[None, None]
    ph, pw = kernel.shape[0] // 2, kernel.shape[1] // 2
    return F.conv2d(F.pad(x, (pw, pw, ph, ph), mode="replicate"), k)


def _kernels():
    blur = torch.tensor([1.0, 2.0, 1.0], dtype=torch.float64) / 4
    return {
        "blur": blur[:, None] * blur[None, :],
        "dx": torch.tensor([[0.0, 0.0, 0.0], [-0.5, 0.0, 0.5], [0.0, 0.0, 0.0]], dtype=torch.float64),
        "dy": torch.tensor([[0.0, -0.5, 0.0], [0.0, 0.0, 0.0], [0.0, 0.5, 0.0]], dtype=torch.float64),
        "lap": torch.tensor([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]], dtype=torch.float64),
    }


def _soft_sqrt(x):
    return torch.sqrt(x + _EPS)


def _orientation_energies(lum, kernels):
    smooth = _conv_same(lum, kernels["blur"])
    gx = _conv_same(smooth, kernels["dx"])
    gy = _conv_same(smooth, kernels["dy"])
    out = []
    for a in _ANGLES:
        energy = (math.cos(a) * gx + math.sin(a) * gy) ** 2
        out.append(_soft_sqrt(energy.mean(dim=(1, 2, 3)))[:, None])
        out.append(_soft_sqrt(F.adaptive_avg_pool2d(energy, 2).flatten(1)))
    return out


def descriptors(x: torch.Tensor) -> torch.Tensor:
    """Raw descriptor batch (n, N_DESCRIPTORS) for images ``x`` of shape (n, 3, H, W)."""
    n = x.shape[0]
    kernels = _kernels()
    H, W = x.shape[2:]
    center = x[:, :, H // 4: H - H // 4, W // 4: W - W // 4]
    parts = [center.mean(dim=(2, 3)), F.adaptive_avg_pool2d(x, 3).flatten(1)]
    parts.append(_soft_sqrt(x.var(dim=(2, 3), unbiased=False)))
    quad_mean = F.interpolate(F.adaptive_avg_pool2d(x, 2), size=(H, W), mode="nearest")
    parts.append(_soft_sqrt(F.adaptive_avg_pool2d((x - quad_mean) ** 2, 2)).flatten(1))
    chroma = _soft_sqrt(x.var(dim=1, unbiased=False, keepdim=True))
    parts += [_soft_sqrt(chroma.var(dim=(1, 2, 3), unbiased=False))[:, None],
              F.adaptive_avg_pool2d(chroma, 3).flatten(1)]
    lum = (0.299 * x[:, 0:1] + 0.587 * x[:, 1:2] + 0.114 * x[:, 2:3])
    coarse = F.avg_pool2d(lum, 2)
    for level in (lum, coarse):
        parts += _orientation_energies(level, kernels)
        lap = _conv_same(level, kernels["lap"]) ** 2
        parts.append(_soft_sqrt(lap.mean(dim=(1, 2, 3)))[:, None])
        parts.append(_soft_sqrt(F.adaptive_avg_pool2d(lap, 2).flatten(1)))
    out = torch.cat(parts, dim=1)
    assert out.shape == (n, N_DESCRIPTORS)
    return out


class FeatureExtractor(BaseEstimator, TransformerMixin):
    """Frozen differentiable embedding ``image -> R^K``.

    Parameters
    ----------
    n_components : int
        Embedding dimension K (at most N_DESCRIPTORS).
    shrinkage : float
        Ridge added to the descriptor covariance eigenvalues before whitening,
        as a fraction of their mean.  Keeps near-null descriptor directions
        from dominating the embedding.
    image_shape : tuple
        Expected (3, H, W) input shape.
    """

    def __init__(self, n_components=64, shrinkage=1.0, image_shape=(3, 24, 24)):
        self.n_components = n_components
        self.shrinkage = shrinkage
        self.image_shape = image_shape

    def fit(self, X, y=None):
        X = check_images(X, self.image_shape)
        if not 1 <= self.n_components <= N_DESCRIPTORS:
            raise ArgumentError(f"n_components must be in [1, {N_DESCRIPTORS}]")
        with torch.no_grad():
            d = descriptors(torch.as_tensor(X)).numpy()
        self.mean_ = d.mean(axis=0)
        self.scale_ = d.std(axis=0) + 1e-8
        z = (d - self.mean_) / self.scale_
        evals, evecs = np.linalg.eigh(np.cov(z, rowvar=False))
        order = np.argsort(evals)[::-1][: self.n_components]
        evals, evecs = evals[order], evecs[:, order]
        signs = np.sign(evecs[np.argmax(np.abs(evecs), axis=0), np.arange(evecs.shape[1])])
        evecs = evecs * signs
        ridge = self.shrinkage * float(np.mean(np.clip(evals, 0, None)))
        self.projection_ = (evecs / np.sqrt(np.clip(evals, 0, None) + ridge)).T
        return self

    @classmethod
    def from_arrays(cls, arrays, image_shape=(3, 24, 24), shrinkage=1.0):
        ext = cls(n_components=int(arrays["projection"].shape[0]), shrinkage=shrinkage,
                  image_shape=tuple(image_shape))
        ext.mean_ = np.asarray(arrays["mean"], dtype=np.float64)
        ext.scale_ = np.asarray(arrays["scale"], dtype=np.float64)
        ext.projection_ = np.asarray(arrays["projection"], dtype=np.float64)
        return ext

    def to_arrays(self):
        check_is_fitted(self, "projection_")
        return {"mean": self.mean_, "scale": self.scale_, "projection": self.projection_}

    @property
    def K(self):
        return int(self.projection_.shape[0])

    def embed_torch(self, x: torch.Tensor) -> torch.Tensor:
        """Differentiable raw embeddings for a (n, 3, H, W) tensor."""
        check_is_fitted(self, "projection_")
        if tuple(x.shape[1:]) != tuple(self.image_shape):
            raise ArgumentError(f"images have shape {tuple(x.shape[1:])}, expected {self.image_shape}")
        d = descriptors(x)
        mean = torch.as_tensor(self.mean_, dtype=x.dtype)
        scale = torch.as_tensor(self.scale_, dtype=x.dtype)
        proj = torch.as_tensor(self.projection_, dtype=x.dtype)
        return ((d - mean) / scale) @ proj.T

    def transform(self, X):
        """Raw (unnormalized) K-d embeddings, float64."""
        X = check_images(X, self.image_shape)
        with torch.no_grad():
            return self.embed_torch(torch.as_tensor(X)).numpy()

    def normalized(self, X):
        return normalize_embedding(self.transform(X))


def extract_features(extractor, image):
    """Raw embedding of a single image (3, H, W) or a batch."""
    single = np.ndim(image) == 3
    out = extractor.transform(image)
    return out[0] if single else out


def normalize_embedding(v, floor=NORM_FLOOR):
    """Scale embeddings to unit L2 norm along the last axis."""
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    bad = np.flatnonzero(norms.reshape(-1) < floor)
    if bad.size:
        raise DegenerateEmbeddingError(
            f"embedding norm below {floor:g} (item {int(bad[0])})", int(bad[0])
        )
    return v / norms


def normalize_torch(v: torch.Tensor, floor=NORM_FLOOR):
    norms = v.norm(dim=-1, keepdim=True)
    small = (norms.detach().reshape(-1) < floor).nonzero()
    if small.numel():
        i = int(small[0, 0])
        raise DegenerateEmbeddingError(f"embedding norm below {floor:g} (item {i})", i)
    return v / norms
