"""Brain-guided sampling: push the reverse process toward images whose predicted
mean activation over a voxel set is high.

At every reverse step the objective is evaluated on the decoded blend
``x_t' = sqrt(1 - abar) * x0_hat + (1 - sqrt(1 - abar)) * x_t`` of the current
state and its one-shot clean estimate, and the predicted noise is shifted
against the objective's gradient w.r.t. ``x_t``:
``eps' = eps - sqrt(1 - abar) * gamma * grad``.  The predicted noise is
held constant while differentiating (the denoiser is never backpropagated).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from ._validation import check_images, check_indices, check_same_shape
from .diffusion import predict_x0, reverse_process, sampling_timesteps
from .errors import ArgumentError, DegenerateEmbeddingError, DegenerateRegionError, GenerationError
from .features import NORM_FLOOR, normalize_embedding, normalize_torch
from .rng import stream


@dataclass
class GuidanceConfig:
    gamma: float | None = None  # None -> calibrate on a pilot chain
    steps: int = 50
    eta: float = 1.0  # ancestral steps; 0 gives the deterministic stepper
    trace_every: int = 4
    calibration_target: float = 0.15

    def __post_init__(self):
        if self.gamma is not None and self.gamma < 0:
            raise ArgumentError("gamma must be >= 0")
        if not 0.0 <= self.eta <= 1.0:
            raise ArgumentError("eta must lie in [0, 1]")
        if self.steps < 1 or self.trace_every < 1:
            raise ArgumentError("steps and trace_every must be >= 1")
        if not 0.05 <= self.calibration_target <= 0.5:
            raise ArgumentError("calibration_target must lie in [0.05, 0.5]")


@dataclass
class GuidanceTrace:
    objective: np.ndarray  # (steps, n)
    grad_norm: np.ndarray  # (steps, n)
    snapshot_steps: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)  # decoded x0_hat, each (n, 3, H, W)

    def mean_rows(self):
        return [(k, float(self.objective[k].mean()), float(self.grad_norm[k].mean()))
                for k in range(len(self.objective))]


@dataclass
class GuidedBatch:
    images: np.ndarray  # (n, 3, H, W) clipped to [0, 1]
    latents: np.ndarray
    activation: np.ndarray  # (n,) final predicted mean activation over S
    trace: GuidanceTrace
    gamma: float


def _voxels(S, head):
    idx = S.indices if hasattr(S, "indices") else np.asarray(S)
    return check_indices(idx, head.N, "voxel set")


def blend_euler(x_t, x0_hat, t, schedule):
    check_same_shape(x_t, x0_hat, ("x_t", "x0_hat"))
    w = math.sqrt(1.0 - float(schedule.abar(t)))
    return w * x0_hat + (1.0 - w) * x_t


def region_objective(head, extractor, S, image):
    """Mean predicted activation over voxel set ``S`` (scalar, or (n,) for a batch)."""
    idx = _voxels(S, head)
    single = np.ndim(image) == 3
    raw = extractor.transform(check_images(image, extractor.image_shape))
    pred = normalize_embedding(raw) @ head.W[idx].T + head.b[idx]
    out = pred.mean(axis=1)
    return float(out[0]) if single else out


def _resize_for_encoder(img, extractor):
    # decoder output and encoder input share one shape at this scale
    if tuple(img.shape[1:]) != tuple(extractor.image_shape):
        raise ArgumentError(f"decoded shape {tuple(img.shape[1:])} does not match encoder input")
    return img


def _unbiased_objective(head, extractor, idx, images: torch.Tensor):
    raw = extractor.embed_torch(_resize_for_encoder(images, extractor))
    unit = normalize_torch(raw)
    W = torch.as_tensor(head.W[idx], dtype=images.dtype)
    return (unit @ W.T).mean(dim=1)


def image_gradient(head, extractor, S, images):
    """``(value, d value / d image)`` directly in image space (no diffusion)."""
    idx = _voxels(S, head)
    x = torch.as_tensor(check_images(images, extractor.image_shape)).requires_grad_(True)
    val = _unbiased_objective(head, extractor, idx, x)
    (grad,) = torch.autograd.grad(val.sum(), x)
    return val.detach().numpy() + head.b[idx].mean(), grad.numpy()


def objective_gradient(head, decoder, extractor, S, x_t, eps_pred, t, schedule):
    """Objective value and its gradient w.r.t. the diffusion state ``x_t``.

    Chain: x_t -> x0_hat -> blended x_t' -> decode -> embed -> normalize ->
    head rows of S -> mean.  ``eps_pred`` is a constant.  Works on a single
    state or a batch; each batch element's gradient is independent.
    """
    idx = _voxels(S, head)
    check_same_shape(x_t, eps_pred, ("x_t", "eps_pred"))
    single = np.ndim(x_t) == len(decoder.latent_shape)
    xt = np.asarray(x_t, dtype=np.float64)
    ep = np.asarray(eps_pred, dtype=np.float64)
    if single:
        xt, ep = xt[None], ep[None]
    x = torch.as_tensor(xt).requires_grad_(True)
    eps = torch.as_tensor(ep)
    x0_hat = predict_x0(x, eps, t, schedule)
    blended = blend_euler(x, x0_hat, t, schedule)
    try:
        val = _unbiased_objective(head, extractor, idx, decoder.decode_torch(blended))
    except DegenerateEmbeddingError as err:
        raise DegenerateEmbeddingError(f"degenerate embedding for sample {err.index}", err.index)
    (grad,) = torch.autograd.grad(val.sum(), x)
    value = val.detach().numpy() + head.b[idx].mean()
    grad = grad.numpy()
    if single:
        return float(value[0]), grad[0]
    return value, grad


def perturb_epsilon(eps_pred, grad, t, gamma, schedule):
    """``eps - sqrt(1 - abar_t) * gamma * grad``; ``grad`` is of the unscaled mean objective."""
    check_same_shape(eps_pred, grad, ("eps_pred", "grad"))
    if gamma == 0:
        return np.array(eps_pred, copy=True)
    return eps_pred - math.sqrt(1.0 - float(schedule.abar(t))) * gamma * grad


def _norms(a):
    return np.sqrt((a.reshape(len(a), -1) ** 2).sum(axis=1))


def calibrate_gamma(model, schedule, decoder, head, extractor, S, seed=0, target=0.15):
    """Scale gamma so the first-step ||eps' - eps|| / ||eps|| equals ``target``
    on one pilot chain (the ratio is linear in gamma)."""
    T = schedule.T
    x = stream(seed, "pilot")
    x = x.standard_normal((1,) + tuple(model.data_shape))
    eps = model.predict(x, T)
    _, grad = objective_gradient(head, decoder, extractor, S, x, eps, T, schedule)
    ratio = math.sqrt(1.0 - float(schedule.abar(T))) * _norms(grad)[0] / _norms(eps)[0]
    if not ratio > 0 or not math.isfinite(ratio):
        raise DegenerateRegionError("pilot gradient vanished; cannot calibrate gamma")
    return target / ratio


def generate_guided(model, schedule, decoder, head, extractor, S, cfg: GuidanceConfig, n, seed=0,
                    chain_offset=0, gamma=None):
    """Guided reverse process for ``n`` chains.

    ``gamma`` overrides ``cfg.gamma``; if both are None it is calibrated.
    With gamma == 0 the chain states are bit-identical to :func:`divelab.diffusion.sample`
    for the same seed (the objective is still traced).
    """
    idx = _voxels(S, head)
    if gamma is None:
        gamma = cfg.gamma
    if gamma is None:
        gamma = calibrate_gamma(model, schedule, decoder, head, extractor, idx, seed,
                                cfg.calibration_target)
    steps = cfg.steps
    sampling_timesteps(schedule.T, steps)
    obj = np.zeros((steps, n))
    gn = np.zeros((steps, n))
    trace = GuidanceTrace(obj, gn)

    def hook(k, t, x, eps):
        value, grad = objective_gradient(head, decoder, extractor, idx, x, eps, t, schedule)
        norms = _norms(grad)
        bad = ~(np.isfinite(value) & np.isfinite(norms))
        if bad.any():
            raise GenerationError(f"non-finite guidance at step {k}", step=k,
                                  chain=chain_offset + int(np.flatnonzero(bad)[0]))
        obj[k] = value
        gn[k] = norms
        new_eps = perturb_epsilon(eps, grad, t, gamma, schedule)
        if k % cfg.trace_every == 0:
            trace.snapshot_steps.append(k)
            trace.snapshots.append(np.clip(decoder.decode(predict_x0(x, new_eps, t, schedule)), 0, 1))
        return new_eps

    latents = reverse_process(model, schedule, n, steps, cfg.eta, seed, hook=hook,
                              chain_offset=chain_offset)
    images = np.clip(decoder.decode(latents), 0.0, 1.0)
    activation = region_objective(head, extractor, idx, images)
    return GuidedBatch(images, latents, np.atleast_1d(activation), trace, float(gamma))


@dataclass
class AscentResult:
    image: np.ndarray
    alignment: float
    objective: list


def region_direction(head, S):
    idx = _voxels(S, head)
    direction = head.W[idx].sum(axis=0)
    if np.linalg.norm(direction) < NORM_FLOOR:
        raise DegenerateRegionError("aggregate region weight vector is (near) zero")
    return direction / np.linalg.norm(direction)


def ascent_diagnostic(head, S, extractor, init_image, steps=500, step_size=1.0, max_halvings=30):
    """Plain gradient ascent on the region objective in image space.

    The step size adapts: it doubles after every accepted step and is halved
    until the objective does not decrease.  Ascent stops early once no
    halving helps.

    Returns the final image, the cosine between its normalized embedding and
    the normalized summed weight vector of S, and the objective history.
    """
    direction = region_direction(head, S)
    x = np.array(check_images(init_image, extractor.image_shape), copy=True)
    value, grad = image_gradient(head, extractor, S, x)
    history = [float(value[0])]
    lr = float(step_size)
    max_step = lr * 2.0 ** 20  # growth cap; keeps steps finite near a fixed point
    for _ in range(steps):
        # halve the step until the objective does not decrease
        for _ in range(max_halvings):
            cand = x + lr * grad
            cv, cg = image_gradient(head, extractor, S, cand)
            if cv[0] >= value[0]:
                break
            lr *= 0.5
        else:
            break
        x, value, grad = cand, cv, cg
        history.append(float(value[0]))
        lr = min(2.0 * lr, max_step)
    unit = normalize_embedding(extractor.transform(x))[0]
    return AscentResult(x[0], float(unit @ direction), history)
