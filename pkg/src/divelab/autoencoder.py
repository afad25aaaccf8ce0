"""Image <-> latent autoencoder.

Three modes: ``identity`` (latent = image), ``affine`` (latent = 2 * image - 1,
the usual centered pixel range for diffusion; exact and invertible) and
``learned`` (a small conv encoder/decoder pair trained by pixel MSE).
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from ._validation import check_images
from .errors import ArgumentError, TrainingError
from .rng import stream, sub_seed


@dataclass
class AutoencoderConfig:
    mode: str = "identity"  # "identity" | "affine" | "learned"
    latent_channels: int = 4
    width: int = 32
    steps: int = 1500
    batch_size: int = 32
    lr: float = 2e-3
    threshold: float = 0.01


class _ConvEncoder(nn.Module):
    def __init__(self, width, latent_channels):
        super().__init__()
        self.a = nn.Conv2d(3, width, 3, padding=1)
        self.b = nn.Conv2d(width, width, 3, padding=1)
        self.down = nn.Conv2d(width, latent_channels, 4, stride=2, padding=1)

    def forward(self, x):
        return self.down(F.silu(self.b(F.silu(self.a(x)))))


class _ConvDecoder(nn.Module):
    def __init__(self, width, latent_channels):
        super().__init__()
        self.up = nn.ConvTranspose2d(latent_channels, width, 4, stride=2, padding=1)
        self.a = nn.Conv2d(width, width, 3, padding=1)
        self.out = nn.Conv2d(width, 3, 3, padding=1)

    def forward(self, z):
        return torch.sigmoid(self.out(F.silu(self.a(F.silu(self.up(z))))))


class Autoencoder:
    """``encode``: images (n, 3, H, W) -> latents; ``decode``: latents -> images.

    In identity mode both maps return their input unchanged; affine mode maps
    [0, 1] pixels to [-1, 1] latents.  ``decode_torch`` is the differentiable
    decoder used by guidance.
    """

    def __init__(self, image_shape=(3, 24, 24), mode="identity", encoder=None, decoder=None,
                 latent_shape=None, reconstruction_mse=0.0):
        if mode not in ("identity", "affine", "learned"):
            raise ArgumentError(f"unknown autoencoder mode {mode!r}")
        self.image_shape = tuple(image_shape)
        self.mode = mode
        self.encoder = encoder
        self.decoder = decoder
        self.latent_shape = tuple(latent_shape) if latent_shape else self.image_shape
        self.reconstruction_mse = reconstruction_mse
        self._decoder64 = None

    @classmethod
    def identity(cls, image_shape=(3, 24, 24)):
        return cls(image_shape, "identity")

    @classmethod
    def affine(cls, image_shape=(3, 24, 24)):
        return cls(image_shape, "affine")

    def encode(self, images):
        x = check_images(images, self.image_shape)
        if self.mode == "identity":
            return np.array(images, dtype=np.float64, copy=True).reshape(x.shape)
        if self.mode == "affine":
            return 2.0 * x - 1.0
        with torch.no_grad():
            return self.encoder(torch.as_tensor(x, dtype=torch.float32)).double().numpy()

    def decode(self, latents):
        z = np.asarray(latents, dtype=np.float64)
        if z.ndim == len(self.latent_shape):
            z = z[None]
        if tuple(z.shape[1:]) != self.latent_shape:
            raise ArgumentError(f"latent shape {tuple(z.shape[1:])}, expected {self.latent_shape}")
        if self.mode == "identity":
            return z.copy()
        if self.mode == "affine":
            return (z + 1.0) / 2.0
        with torch.no_grad():
            return self.decoder(torch.as_tensor(z, dtype=torch.float32)).double().numpy()

    def decode_torch(self, z: torch.Tensor) -> torch.Tensor:
        if tuple(z.shape[1:]) != self.latent_shape:
            raise ArgumentError(f"latent shape {tuple(z.shape[1:])}, expected {self.latent_shape}")
        if self.mode == "identity":
            return z
        if self.mode == "affine":
            return (z + 1.0) / 2.0
        if z.dtype == torch.float64:
            if self._decoder64 is None:
                self._decoder64 = copy.deepcopy(self.decoder).double()
            return self._decoder64(z)
        return self.decoder(z.float()).to(z.dtype)

    def state_arrays(self):
        if self.mode != "learned":
            return {}
        out = {}
        for prefix, mod in (("encoder", self.encoder), ("decoder", self.decoder)):
            for k, v in mod.state_dict().items():
                out[f"{prefix}.{k}"] = v.detach().numpy().copy()
        return out

    @classmethod
    def from_arrays(cls, arrays, image_shape, cfg: AutoencoderConfig, reconstruction_mse=0.0):
        if cfg.mode in ("identity", "affine"):
            return cls(image_shape, cfg.mode)
        enc = _ConvEncoder(cfg.width, cfg.latent_channels)
        dec = _ConvDecoder(cfg.width, cfg.latent_channels)
        for prefix, mod in (("encoder", enc), ("decoder", dec)):
            state = {k[len(prefix) + 1:]: torch.as_tensor(v) for k, v in arrays.items()
                     if k.startswith(prefix + ".")}
            mod.load_state_dict(state)
        latent = (cfg.latent_channels, image_shape[1] // 2, image_shape[2] // 2)
        return cls(image_shape, "learned", enc.eval(), dec.eval(), latent, reconstruction_mse)


def fit_autoencoder(corpus, cfg: AutoencoderConfig | None = None, seed=0, image_shape=None):
    """Identity and affine modes need no data; learned mode trains on ``corpus`` by pixel MSE.

    Raises :class:`TrainingError` when the learned model ends above
    ``cfg.threshold`` mean reconstruction error.
    """
    cfg = cfg or AutoencoderConfig()
    if cfg.mode in ("identity", "affine"):
        shape = image_shape or (np.shape(corpus)[1:] if corpus is not None else (3, 24, 24))
        return Autoencoder(shape, cfg.mode)
    if cfg.mode != "learned":
        raise ArgumentError(f"unknown autoencoder mode {cfg.mode!r}")
    x = check_images(corpus)
    if len(x) == 0:
        raise ArgumentError("learned autoencoder needs a non-empty corpus")
    shape = x.shape[1:]
    if shape[1] % 2 or shape[2] % 2:
        raise ArgumentError("image side must be even for the learned autoencoder")
    torch.manual_seed(sub_seed(seed, "autoencoder-init"))
    enc = _ConvEncoder(cfg.width, cfg.latent_channels)
    dec = _ConvDecoder(cfg.width, cfg.latent_channels)
    params = list(enc.parameters()) + list(dec.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(cfg.steps, 1))
    data = torch.as_tensor(x, dtype=torch.float32)
    rng = stream(seed, "train-autoencoder")
    for step in range(cfg.steps):
        idx = torch.as_tensor(rng.integers(0, len(x), size=cfg.batch_size))
        batch = data[idx]
        loss = F.mse_loss(dec(enc(batch)), batch)
        if not math.isfinite(float(loss.detach())):
            raise TrainingError(f"non-finite autoencoder loss at step {step}", step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
    enc.eval()
    dec.eval()
    latent = (cfg.latent_channels, shape[1] // 2, shape[2] // 2)
    ae = Autoencoder(shape, "learned", enc, dec, latent)
    recon = np.concatenate([ae.decode(ae.encode(x[i:i + 256])) for i in range(0, len(x), 256)])
    ae.reconstruction_mse = float(((recon - x) ** 2).mean())
    if ae.reconstruction_mse > cfg.threshold:
        raise TrainingError(
            f"reconstruction MSE {ae.reconstruction_mse:.4g} above threshold {cfg.threshold}")
    return ae
