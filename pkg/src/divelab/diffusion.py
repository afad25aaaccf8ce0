"""Noise schedules, the forward process, epsilon-prediction training and
deterministic / ancestral reverse steps.

Step indices are 1-based: ``t = 1 .. T`` index ``alpha_bar``, and ``t = 0``
denotes clean data (cumulative signal fraction exactly 1).  All closed-form
helpers accept numpy arrays or torch tensors and return the same kind.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from ._validation import check_positive_int, check_same_shape
from .errors import ArgumentError, GenerationError, ScheduleError, SingularityError, TrainingError
from .rng import stream, sub_seed


@dataclass(frozen=True)
class NoiseSchedule:
    alpha_bar: np.ndarray
    name: str = "custom"

    def __post_init__(self):
        ab = np.array(self.alpha_bar, dtype=np.float64)
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)
        _check_alpha_bar(ab)

    @classmethod
    def from_alpha_bar(cls, values, name="custom"):
        return cls(np.asarray(values, dtype=np.float64), name=name)

    @property
    def T(self) -> int:
        return len(self.alpha_bar)

    @property
    def sqrt_alpha_bar(self):
        return np.sqrt(self.alpha_bar)

    @property
    def sqrt_one_minus_alpha_bar(self):
        return np.sqrt(1.0 - self.alpha_bar)

    @property
    def diffusion_ready(self) -> bool:
        return bool(self.alpha_bar[0] >= 0.99 and self.alpha_bar[-1] <= 0.01)

    def require_diffusion_ready(self):
        if self.alpha_bar[0] < 0.99:
            raise ScheduleError(
                f"alpha_bar[1] = {self.alpha_bar[0]:.6g} < 0.99; schedule starts too noisy", 1
            )
        if self.alpha_bar[-1] > 0.01:
            raise ScheduleError(
                f"alpha_bar[{self.T}] = {self.alpha_bar[-1]:.6g} > 0.01; schedule ends too clean",
                self.T,
            )

    def abar(self, t):
        """Cumulative signal fraction at step(s) ``t``; ``abar(0) == 1``."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ArgumentError(f"step index outside [0, {self.T}]: {t}")
        padded = np.concatenate([[1.0], self.alpha_bar])
        return padded[t]


def _check_alpha_bar(ab):
    if ab.ndim != 1 or ab.size < 2:
        raise ScheduleError("alpha_bar must be a 1-d sequence with at least 2 steps")
    for i, v in enumerate(ab, start=1):
        if not (0.0 < v <= 1.0) or not math.isfinite(v):
            raise ScheduleError(f"alpha_bar[{i}] = {v!r} outside (0, 1]", i)
    steps = np.diff(ab)
    bad = np.flatnonzero(steps >= 0)
    if bad.size:
        i = int(bad[0]) + 2
        raise ScheduleError(f"alpha_bar not strictly decreasing at index {i}", i)


def build_schedule(T=1000, kind="linear-beta", beta_start=1e-4, beta_end=0.02, s=0.008,
                   max_beta=0.999):
    """Build a :class:`NoiseSchedule`.

    ``linear-beta`` spaces per-step noise rates evenly in ``[beta_start, beta_end]``;
    ``cosine`` uses the squared-cosine cumulative curve with offset ``s``.
    Monotonicity and range are always enforced; whether the endpoints are
    suitable for sampling is checked by the trainer and sampler
    (:meth:`NoiseSchedule.require_diffusion_ready`).
    """
    if not isinstance(T, (int, np.integer)) or T < 2:
        raise ScheduleError(f"T must be an integer >= 2, got {T!r}")
    if kind == "linear-beta":
        for name, b in (("beta_start", beta_start), ("beta_end", beta_end)):
            if not 0.0 < b < 1.0:
                raise ScheduleError(f"{name} = {b!r} outside (0, 1)")
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
        ab = np.cumprod(1.0 - betas)
    elif kind == "cosine":
        if not 0.0 < s < 1.0:
            raise ScheduleError(f"s = {s!r} outside (0, 1)")
        steps = np.arange(T + 1, dtype=np.float64)
        f = np.cos((steps / T + s) / (1 + s) * np.pi / 2) ** 2
        curve = f / f[0]
        betas = np.clip(1.0 - curve[1:] / curve[:-1], 0.0, max_beta)
        ab = np.cumprod(1.0 - betas)
    else:
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(ab, name=f"{kind}-{T}")


def _coef(values, like):
    """Broadcast per-sample coefficients against a batch ``like``."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values.reshape((-1,) + (1,) * (like.ndim - 1))
    if isinstance(like, torch.Tensor):
        return torch.as_tensor(values, dtype=like.dtype, device=like.device)
    return values


def forward_diffuse(x0, t, eps, schedule):
    """Noisy sample ``sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps``."""
    check_same_shape(x0, eps, ("x0", "eps"))
    ab = schedule.abar(t)
    return _coef(np.sqrt(ab), x0) * x0 + _coef(np.sqrt(1.0 - ab), eps) * eps


def predict_x0(x_t, eps_pred, t, schedule):
    check_same_shape(x_t, eps_pred, ("x_t", "eps_pred"))
    ab = schedule.abar(t)
    if np.any(ab <= 0):
        raise SingularityError(f"alpha_bar is zero at step {t}")
    return (x_t - _coef(np.sqrt(1.0 - ab), eps_pred) * eps_pred) / _coef(np.sqrt(ab), x_t)


def step_sigma(t, t_next, schedule, eta):
    ab, ab_next = schedule.abar(t), schedule.abar(t_next)
    return eta * math.sqrt((1.0 - ab_next) / (1.0 - ab) * (1.0 - ab / ab_next)) if t != t_next else 0.0


def denoise_step(x_t, eps_pred, t, t_next, schedule, eta=0.0, rng=None, noise=None):
    """One generalized (DDIM-family) reverse step from ``t`` to ``t_next``.

    ``eta = 0`` is fully deterministic; ``eta = 1`` matches ancestral sampling.
    When ``eta > 0`` the fresh noise comes from ``noise`` if given, else from
    ``rng``.
    """
    if not 0.0 <= eta <= 1.0:
        raise ArgumentError(f"eta must lie in [0, 1], got {eta}")
    if t_next > t or t_next < 0:
        raise ArgumentError(f"invalid step ordering t={t} -> t_next={t_next}")
    check_same_shape(x_t, eps_pred, ("x_t", "eps_pred"))
    if t_next == t:
        return x_t.clone() if isinstance(x_t, torch.Tensor) else np.array(x_t, copy=True)
    x0_hat = predict_x0(x_t, eps_pred, t, schedule)
    ab_next = float(schedule.abar(t_next))
    sigma = step_sigma(t, t_next, schedule, eta)
    out = math.sqrt(ab_next) * x0_hat + math.sqrt(max(1.0 - ab_next - sigma**2, 0.0)) * eps_pred
    if sigma > 0:
        if noise is not None:
            z = noise
        elif rng is not None:
            z = rng.standard_normal(np.shape(x_t))
        else:
            raise ArgumentError("eta > 0 needs a random generator or explicit noise")
        if isinstance(x_t, torch.Tensor):
            z = torch.as_tensor(z, dtype=x_t.dtype)
        out = out + sigma * z
    return out


def sampling_timesteps(T, steps):
    """Descending step indices ``[T, ..., 0]`` with ``steps`` transitions."""
    steps = check_positive_int(steps, "steps")
    if steps > T:
        raise ArgumentError(f"cannot take {steps} steps on a {T}-step schedule")
    ts = np.round(np.linspace(T, 0, steps + 1)).astype(np.int64)
    return [int(v) for v in ts]


# --------------------------------------------------------------------------- models


def timestep_embedding(t, dim, T):
    """Sinusoidal embedding of ``t / T`` (float tensor of shape (n,))."""
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = (t.float() / T * 1000.0)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class _ResBlock(nn.Module):
    def __init__(self, c, emb):
        super().__init__()
        self.n1 = nn.GroupNorm(4, c)
        self.c1 = nn.Conv2d(c, c, 3, padding=1)
        self.t = nn.Linear(emb, c)
        self.n2 = nn.GroupNorm(4, c)
        self.c2 = nn.Conv2d(c, c, 3, padding=1)

    def forward(self, x, e):
        h = self.c1(F.silu(self.n1(x))) + self.t(e)[:, :, None, None]
        return x + self.c2(F.silu(self.n2(h)))


class ConvDenoiser(nn.Module):
    """Three-level U-Net for (C, H, W) data with H, W divisible by 4.

    Residual blocks take the timestep embedding; the bottleneck adds a
    global-pooled linear term so every pixel sees whole-image context.
    ``width`` must be a multiple of 4 (group norm with 4 groups).
    """

    def __init__(self, in_channels=3, width=16, emb_dim=32):
        super().__init__()
        if width % 4:
            raise ArgumentError("denoiser width must be a multiple of 4")
        c, E = width, 4 * width
        self.emb_dim = emb_dim
        self.temb = nn.Sequential(nn.Linear(emb_dim, E), nn.SiLU(), nn.Linear(E, E))
        self.inp = nn.Conv2d(in_channels, c, 3, padding=1)
        self.r1 = _ResBlock(c, E)
        self.d1 = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.r2 = _ResBlock(2 * c, E)
        self.d2 = nn.Conv2d(2 * c, 2 * c, 3, stride=2, padding=1)
        self.r3 = _ResBlock(2 * c, E)
        self.pool = nn.Linear(2 * c, 2 * c)
        self.r4 = _ResBlock(2 * c, E)
        self.u2 = nn.ConvTranspose2d(2 * c, 2 * c, 4, stride=2, padding=1)
        self.m2 = nn.Conv2d(4 * c, 2 * c, 3, padding=1)
        self.r5 = _ResBlock(2 * c, E)
        self.u1 = nn.ConvTranspose2d(2 * c, c, 4, stride=2, padding=1)
        self.m1 = nn.Conv2d(2 * c, c, 3, padding=1)
        self.r6 = _ResBlock(c, E)
        self.out = nn.Conv2d(c, in_channels, 3, padding=1)

    def forward(self, x, emb):
        e = self.temb(emb)
        h1 = self.r1(self.inp(x), e)
        h2 = self.r2(self.d1(h1), e)
        h = self.r3(self.d2(h2), e)
        h = h + self.pool(h.mean(dim=(2, 3)))[:, :, None, None]
        h = self.r4(h, e)
        h = self.r5(self.m2(torch.cat([self.u2(h), h2], 1)), e)
        h = self.r6(self.m1(torch.cat([self.u1(h), h1], 1)), e)
        return self.out(F.silu(h))


class MLPDenoiser(nn.Module):
    def __init__(self, dim, hidden=(128, 128, 128), emb_dim=32):
        super().__init__()
        self.emb_dim = emb_dim
        layers, prev = [], dim + emb_dim
        for h in hidden:
            layers += [nn.Linear(prev, h), nn.SiLU()]
            prev = h
        layers.append(nn.Linear(prev, dim))
        self.net = nn.Sequential(*layers)

    def forward(self, x, emb):
        shape = x.shape
        flat = x.reshape(shape[0], -1)
        return self.net(torch.cat([flat, emb], dim=1)).reshape(shape)


@dataclass
class DenoiserConfig:
    steps: int = 3000
    batch_size: int = 64
    lr: float = 2e-3
    lr_final: float = 2e-4
    width: int = 16
    hidden: tuple = (128, 128, 128)
    emb_dim: int = 32
    ema: float = 0.995
    grad_clip: float = 1.0


@dataclass
class DenoiserModel:
    """An epsilon-prediction network bound to its data shape and schedule."""

    net: nn.Module
    data_shape: tuple
    schedule_name: str
    T: int
    config: DenoiserConfig = field(default_factory=DenoiserConfig)

    @torch.no_grad()
    def predict(self, x_t, t):
        """Predicted noise for a batch ``x_t`` (n, *data_shape) at scalar step ``t``."""
        x = torch.as_tensor(np.asarray(x_t), dtype=torch.float32)
        if tuple(x.shape[1:]) != tuple(self.data_shape):
            raise ArgumentError(f"x_t has shape {tuple(x.shape[1:])}, model expects {self.data_shape}")
        tt = torch.full((x.shape[0],), int(t), dtype=torch.float32)
        emb = timestep_embedding(tt, self.net.emb_dim, self.T)
        return self.net(x, emb).double().numpy()

    def state_arrays(self):
        return {k: v.detach().cpu().numpy().copy() for k, v in self.net.state_dict().items()}


def make_denoiser_net(data_shape, cfg: DenoiserConfig):
    if len(data_shape) == 3:
        if data_shape[1] % 4 or data_shape[2] % 4:
            raise ArgumentError(f"image side must be divisible by 4, got {tuple(data_shape)}")
        return ConvDenoiser(data_shape[0], cfg.width, cfg.emb_dim)
    dim = int(np.prod(data_shape))
    return MLPDenoiser(dim, tuple(cfg.hidden), cfg.emb_dim)


def init_denoiser(data_shape, schedule, cfg: DenoiserConfig, seed):
    torch.manual_seed(sub_seed(seed, "denoiser-init"))
    net = make_denoiser_net(tuple(data_shape), cfg)
    return DenoiserModel(net, tuple(data_shape), schedule.name, schedule.T, cfg)


def draw_training_batch(corpus, schedule, rng, batch_size):
    """Indices, 1-based steps, noise and noisy inputs for one training batch."""
    idx = rng.integers(0, len(corpus), size=batch_size)
    t = rng.integers(1, schedule.T + 1, size=batch_size)
    eps = rng.standard_normal((batch_size,) + corpus.shape[1:])
    x_t = forward_diffuse(corpus[idx], t, eps, schedule)
    return idx, t, eps, x_t


def denoiser_loss(model, x_t, t, eps):
    x = torch.as_tensor(x_t, dtype=torch.float32)
    emb = timestep_embedding(torch.as_tensor(t, dtype=torch.float32), model.net.emb_dim, model.T)
    pred = model.net(x, emb)
    return F.mse_loss(pred, torch.as_tensor(eps, dtype=torch.float32))


def train_denoiser(corpus, schedule, cfg: DenoiserConfig | None = None, seed=0, log_every=0,
                   logger=None):
    """Fit an epsilon-prediction model by minimizing E||eps_theta(x_t, t) - eps||^2.

    Returns ``(model, loss_history)`` with one loss per optimization step.
    The returned weights are the exponential moving average when ``cfg.ema``
    is positive.
    """
    cfg = cfg or DenoiserConfig()
    corpus = np.asarray(corpus, dtype=np.float64)
    if corpus.ndim < 2 or len(corpus) == 0:
        raise ArgumentError("corpus must be a non-empty batch of equally shaped items")
    schedule.require_diffusion_ready()
    model = init_denoiser(corpus.shape[1:], schedule, cfg, seed)
    if cfg.steps == 0:
        return model, []
    ema_net = copy.deepcopy(model.net) if cfg.ema > 0 else None
    opt = torch.optim.Adam(model.net.parameters(), lr=cfg.lr)
    decay = (cfg.lr_final / cfg.lr) ** (1.0 / max(cfg.steps - 1, 1))
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, decay)
    rng = stream(seed, "train-denoiser")
    history = []
    for step in range(cfg.steps):
        _, t, eps, x_t = draw_training_batch(corpus, schedule, rng, cfg.batch_size)
        loss = denoiser_loss(model, x_t, t, eps)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingError(f"non-finite denoiser loss at step {step}", step)
        history.append(value)
        opt.zero_grad()
        loss.backward()
        if cfg.grad_clip:
            nn.utils.clip_grad_norm_(model.net.parameters(), cfg.grad_clip)
        opt.step()
        sched.step()
        if ema_net is not None:
            with torch.no_grad():
                for pe, p in zip(ema_net.parameters(), model.net.parameters()):
                    pe.mul_(cfg.ema).add_(p, alpha=1.0 - cfg.ema)
        if logger is not None and log_every and step % log_every == 0:
            logger.info("denoiser step %d loss %.5f", step, value)
    if ema_net is not None:
        model.net = ema_net
    model.net.eval()
    return model, history


def reverse_process(model, schedule, n, steps, eta=0.0, seed=0, hook=None, chain_offset=0):
    """Run ``n`` chains through the reverse process.

    Chain ``c`` draws its initial noise and per-step noise from its own
    stream ``(seed, "chain", chain_offset + c)``.  ``hook(step, t, x_t, eps)``
    may return a replacement epsilon (used by guidance); it is called with
    float64 numpy arrays.
    """
    schedule.require_diffusion_ready()
    ts = sampling_timesteps(schedule.T, steps)
    rngs = [stream(seed, "chain", chain_offset + c) for c in range(n)]
    x = np.stack([r.standard_normal(model.data_shape) for r in rngs])
    for k, (t, t_next) in enumerate(zip(ts[:-1], ts[1:])):
        eps = model.predict(x, t)
        if hook is not None:
            eps = hook(k, t, x, eps)
        z = None
        if step_sigma(t, t_next, schedule, eta) > 0:
            z = np.stack([r.standard_normal(model.data_shape) for r in rngs])
        x = denoise_step(x, eps, t, t_next, schedule, eta=eta, noise=z)
        if not np.all(np.isfinite(x)):
            bad = int(np.flatnonzero(~np.isfinite(x).reshape(n, -1).all(axis=1))[0])
            raise GenerationError(f"non-finite state after step {k}", step=k, chain=chain_offset + bad)
    return x


def sample(model, schedule, n, steps=50, eta=0.0, seed=0):
    """Unguided samples in the model's data space."""
    return reverse_process(model, schedule, n, steps, eta, seed)
