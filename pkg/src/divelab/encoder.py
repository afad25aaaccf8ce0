"""Voxel-wise linear encoding head on unit-normalized image embeddings."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_float_array, check_images
from .errors import ArgumentError, FittingError
from .features import normalize_embedding, normalize_torch
from .rng import stream, sub_seed

# jitter of 4 px at a 224 px input, rescaled to the image side
REFERENCE_OFFSET_PX = 4
REFERENCE_INPUT_PX = 224


@dataclass
class EncoderHead:
    W: np.ndarray  # (N, K)
    b: np.ndarray  # (N,)
    extractor_id: str = ""

    def __post_init__(self):
        self.W = as_float_array(self.W, "W")
        self.b = as_float_array(self.b, "b")
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],) or min(self.W.shape) == 0:
            raise ArgumentError(f"incompatible head shapes W{self.W.shape} b{self.b.shape}")

    @property
    def N(self):
        return self.W.shape[0]

    @property
    def K(self):
        return self.W.shape[1]

    def predict_from_embedding(self, raw):
        """``W @ normalize(raw) + b`` for a raw embedding (K,) or batch (n, K)."""
        raw = np.asarray(raw, dtype=np.float64)
        if raw.shape[-1] != self.K:
            raise ArgumentError(f"embedding has {raw.shape[-1]} dims, head expects {self.K}")
        return normalize_embedding(raw) @ self.W.T + self.b

    def torch_forward(self, raw: torch.Tensor) -> torch.Tensor:
        W = torch.as_tensor(self.W, dtype=raw.dtype)
        b = torch.as_tensor(self.b, dtype=raw.dtype)
        return normalize_torch(raw) @ W.T + b


@dataclass
class AugmentConfig:
    scale_range: tuple = (0.95, 1.05)
    max_offset: int | None = None  # None -> scaled from 4 px at 224 px
    noise_sd: float = 0.05
    enabled: bool = True

    def offset_for(self, side):
        if self.max_offset is not None:
            return int(self.max_offset)
        return max(1, int(round(REFERENCE_OFFSET_PX * side / REFERENCE_INPUT_PX)))


@dataclass
class FitConfig:
    lr_init: float = 3e-4
    lr_end: float = 1.5e-4
    epochs: int = 100
    weight_decay: float = 2e-2
    batch_size: int = 4
    augment: AugmentConfig | None = None
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if self.augment is None:
            self.augment = AugmentConfig()
        if not (self.lr_init > 0 and self.lr_end > 0):
            raise ArgumentError("learning rates must be positive")
        if self.lr_end > self.lr_init:
            raise ArgumentError("final learning rate must not exceed the initial one")
        if self.epochs < 1:
            raise ArgumentError("epochs must be >= 1")

    def as_dict(self):
        return asdict(self)


def augment(images, rng, cfg: AugmentConfig):
    """Pixel scaling, edge-padded spatial offset, then additive Gaussian noise.

    Works on a single (3, H, W) image or a batch; each image gets its own draws.
    """
    single = np.ndim(images) == 3
    x = np.array(images, dtype=np.float64, copy=True)
    if single:
        x = x[None]
    if not cfg.enabled:
        return x[0] if single else x
    n, _, H, W = x.shape
    lo, hi = cfg.scale_range
    if (lo, hi) != (1.0, 1.0):
        x = x * rng.uniform(lo, hi, size=(n, 1, 1, 1))
    off = cfg.offset_for(min(H, W))
    if off > 0:
        shifts = rng.integers(-off, off + 1, size=(n, 2))
        rows = np.arange(H)
        cols = np.arange(W)
        out = np.empty_like(x)
        for i, (dy, dx) in enumerate(shifts):
            ri = np.clip(rows - dy, 0, H - 1)
            ci = np.clip(cols - dx, 0, W - 1)
            out[i] = x[i][:, ri][:, :, ci]
        x = out
    if cfg.noise_sd > 0:
        x = x + rng.normal(0.0, cfg.noise_sd, size=x.shape)
    return x[0] if single else x


def predict_betas(head: EncoderHead, extractor, image):
    """Predicted betas (N,) for one image, or (n, N) for a batch."""
    single = np.ndim(image) == 3
    out = head.predict_from_embedding(extractor.transform(image))
    return out[0] if single else out


def _embed_batches(extractor, images, batch=256):
    return np.concatenate([extractor.transform(images[i:i + batch])
                           for i in range(0, len(images), batch)])


def fit_head_arrays(images, betas, extractor, cfg: FitConfig | None = None, logger=None):
    """Fit W, b by minibatch MSE with decoupled weight decay on W.

    ``images`` (n, 3, H, W); ``betas`` (n, N).  W starts at zero and b at the
    per-voxel training mean, so a constant target is already optimal.
    The learning rate decays exponentially per epoch from ``lr_init`` to
    ``lr_end``.  Returns ``(head, per_epoch_loss)``.
    """
    cfg = cfg or FitConfig()
    images = check_images(images, extractor.image_shape)
    Y = as_float_array(betas, "betas")
    if Y.ndim != 2 or len(Y) != len(images):
        raise ArgumentError("betas must be (n_images, n_voxels) aligned with images")
    if len(images) < 2:
        raise ArgumentError("fitting needs at least 2 images")
    n, N = Y.shape
    torch.manual_seed(sub_seed(cfg.seed, "fit-head"))
    W = torch.zeros((N, extractor.K), dtype=torch.float64, requires_grad=True)
    b = torch.tensor(Y.mean(axis=0), dtype=torch.float64, requires_grad=True)
    opt = torch.optim.AdamW([
        {"params": [W], "weight_decay": cfg.weight_decay},
        {"params": [b], "weight_decay": 0.0},
    ], lr=cfg.lr_init)
    gamma = (cfg.lr_end / cfg.lr_init) ** (1.0 / max(cfg.epochs - 1, 1))
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma)
    Yt = torch.as_tensor(Y)
    fixed = None if cfg.augment.enabled else torch.as_tensor(
        normalize_embedding(_embed_batches(extractor, images)))
    history = []
    for epoch in range(cfg.epochs):
        rng = stream(cfg.seed, "fit-head", epoch)
        order = rng.permutation(n)
        if fixed is None:
            feats = torch.as_tensor(normalize_embedding(
                _embed_batches(extractor, augment(images, rng, cfg.augment))))
        else:
            feats = fixed
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = torch.as_tensor(order[start:start + cfg.batch_size])
            pred = feats[idx] @ W.T + b
            loss = ((pred - Yt[idx]) ** 2).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        value = total / n
        if not math.isfinite(value):
            raise FittingError(f"non-finite loss in epoch {epoch}", epoch)
        history.append(value)
        sched.step()
        if logger is not None:
            logger.debug("head epoch %d loss %.6f", epoch, value)
    head = EncoderHead(W.detach().numpy().copy(), b.detach().numpy().copy(),
                       extractor_id=getattr(extractor, "id_", ""))
    return head, history


def fit_head(dataset, extractor, cfg: FitConfig | None = None, logger=None):
    """Fit a head on an averaged :class:`~divelab.subject.SubjectDataset`."""
    images, betas = dataset.training_arrays()
    return fit_head_arrays(images, betas, extractor, cfg, logger=logger)


def r2_per_voxel(y_true, y_pred):
    """Per-column R^2 = 1 - SSres/SStot; NaN where the target has zero variance."""
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if y_true.ndim == 1:
        y_true, y_pred = y_true[:, None], y_pred[:, None]
    if y_true.shape[0] == 0:
        raise ArgumentError("held-out set is empty")
    ss_res = ((y_true - y_pred) ** 2).sum(axis=0)
    ss_tot = ((y_true - y_true.mean(axis=0)) ** 2).sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        r2 = 1.0 - ss_res / ss_tot
    r2[ss_tot == 0] = np.nan
    return r2


def evaluate_r2(head, extractor, images, betas):
    """Held-out R^2 per voxel (NaN marks voxels with undefined R^2)."""
    if len(images) == 0:
        raise ArgumentError("held-out set is empty")
    pred = head.predict_from_embedding(_embed_batches(extractor, check_images(images)))
    return r2_per_voxel(betas, pred)


class BrainEncoder(BaseEstimator, RegressorMixin):
    """scikit-learn wrapper: images (n, 3, H, W) -> betas (n, N).

    ``score`` returns the mean R^2 over voxels with defined R^2.
    """

    def __init__(self, extractor=None, lr_init=3e-4, lr_end=1.5e-4, epochs=100,
                 weight_decay=2e-2, batch_size=4, augment=True, random_state=0):
        self.extractor = extractor
        self.lr_init = lr_init
        self.lr_end = lr_end
        self.epochs = epochs
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.augment = augment
        self.random_state = random_state

    def _config(self):
        return FitConfig(self.lr_init, self.lr_end, self.epochs, self.weight_decay,
                         self.batch_size, AugmentConfig(enabled=bool(self.augment)),
                         self.random_state)

    def fit(self, X, y):
        if self.extractor is None:
            raise ArgumentError("BrainEncoder needs a fitted FeatureExtractor")
        self.head_, self.loss_history_ = fit_head_arrays(X, y, self.extractor, self._config())
        return self

    def predict(self, X):
        check_is_fitted(self, "head_")
        return predict_betas(self.head_, self.extractor, check_images(X))

    def score(self, X, y, sample_weight=None):
        r2 = r2_per_voxel(y, self.predict(X))
        return float(np.nanmean(r2))
