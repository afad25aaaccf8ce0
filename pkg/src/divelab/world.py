"""Procedural image world: one visually distinct renderer family per category."""
from __future__ import annotations

import colorsys
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .rng import stream

DEFAULT_CATEGORIES = ("face", "place", "body", "word", "food")
DEFAULT_FAMILIES = ("blobs", "grid", "stripes", "glyphs", "patches")


@dataclass
class WorldConfig:
    categories: tuple = DEFAULT_CATEGORIES
    families: tuple = DEFAULT_FAMILIES
    size: int = 24
    n_images: int = 2000
    pixel_noise: float = 0.02


@dataclass
class World:
    images: np.ndarray  # (n, 3, L, L) in [0, 1]
    labels: np.ndarray  # (n,) category ids
    categories: tuple
    ids: list = field(default_factory=list)
    seed: int = 0

    def __len__(self):
        return len(self.labels)


def _hsv(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h % 1.0, min(max(s, 0.0), 1.0), min(max(v, 0.0), 1.0)))


def _canvas(L, color):
    return np.broadcast_to(np.asarray(color, dtype=np.float64)[:, None, None], (3, L, L)).copy()


def _grid(L):
    yy, xx = np.mgrid[0:L, 0:L].astype(np.float64)
    return yy, xx


def _paint(img, mask, color):
    """Alpha-blend ``color`` into ``img`` with per-pixel weights ``mask`` in [0, 1]."""
    return img * (1 - mask) + np.asarray(color)[:, None, None] * mask


def render_blobs(rng, L):
    img = _canvas(L, _hsv(rng.random(), rng.uniform(0.05, 0.25), rng.uniform(0.25, 0.5)))
    yy, xx = _grid(L)
    for _ in range(rng.integers(2, 6)):
        cy, cx = rng.uniform(0.15, 0.85, 2) * L
        r = rng.uniform(0.08, 0.2) * L
        mask = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        img = _paint(img, mask, _hsv(rng.random(), rng.uniform(0.1, 0.35), rng.uniform(0.55, 0.9)))
    return img


def render_grid(rng, L):
    img = _canvas(L, _hsv(rng.random(), rng.uniform(0.0, 0.25), rng.uniform(0.6, 0.9)))
    line = _hsv(rng.random(), rng.uniform(0.0, 0.3), rng.uniform(0.05, 0.3))
    yy, xx = _grid(L)
    sy, sx = rng.integers(4, 9, 2)
    oy, ox = rng.integers(0, 4, 2)
    mask = ((yy.astype(int) + oy) % sy == 0) | ((xx.astype(int) + ox) % sx == 0)
    return _paint(img, mask.astype(np.float64) * 0.9, line)


def render_stripes(rng, L):
    hue = rng.random()
    a = _hsv(hue, rng.uniform(0.1, 0.45), rng.uniform(0.15, 0.4))
    b = _hsv(hue + rng.uniform(-0.1, 0.1), rng.uniform(0.1, 0.45), rng.uniform(0.65, 0.95))
    yy, xx = _grid(L)
    theta = rng.uniform(0, np.pi)
    period = rng.uniform(3.0, 7.0)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * (np.cos(theta) * xx + np.sin(theta) * yy) / period + phase)
    mask = 0.5 * (1 + np.tanh(3 * wave))
    return _paint(_canvas(L, a), mask, b)


def render_glyphs(rng, L):
    img = _canvas(L, np.full(3, rng.uniform(0.8, 1.0)))
    ink = np.full(3, rng.uniform(0.0, 0.2))
    yy, xx = _grid(L)
    n_rows = rng.integers(2, 4)
    row_h = L / n_rows
    for r in range(n_rows):
        base = (r + 0.5) * row_h
        x = rng.uniform(1, 3)
        while x < L - 4:
            w = rng.uniform(2, 4)
            h = rng.uniform(0.35, 0.6) * row_h
            x0, y0 = x, base - h / 2
            kind = rng.integers(0, 3)
            if kind == 0:  # vertical bar
                seg = (np.abs(xx - x0) < 0.6) & (yy >= y0) & (yy <= y0 + h)
            elif kind == 1:  # slanted stroke
                t = (yy - y0) / max(h, 1e-6)
                seg = (np.abs(xx - (x0 + t * w)) < 0.6) & (t >= 0) & (t <= 1)
            else:  # small arc
                d = np.hypot((xx - x0 - w / 2) / (w / 2), (yy - base) / (h / 2))
                seg = np.abs(d - 1) < 0.35
            img = _paint(img, seg.astype(np.float64), ink)
            x += w + rng.uniform(1.5, 3.0)
    return img


def render_patches(rng, L):
    img = _canvas(L, np.full(3, rng.uniform(0.2, 0.85)))
    sat = rng.uniform(0.35, 1.0)
    yy, xx = _grid(L)
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0.2, 0.8, 2) * L
        ry, rx = rng.uniform(0.15, 0.32, 2) * L
        d = np.hypot((yy - cy) / ry, (xx - cx) / rx)
        mask = 1 / (1 + np.exp((d - 1) * 6))
        img = _paint(img, mask, _hsv(rng.random(), sat * rng.uniform(0.85, 1.0), rng.uniform(0.7, 1.0)))
    return img


RENDERERS = {
    "blobs": render_blobs,
    "grid": render_grid,
    "stripes": render_stripes,
    "glyphs": render_glyphs,
    "patches": render_patches,
}


def validate_world_config(cfg: WorldConfig):
    if len(cfg.categories) < 2:
        raise ConfigError("a world needs at least 2 categories", "world.categories")
    if len(cfg.families) != len(cfg.categories):
        raise ConfigError("one renderer family per category is required", "world.families")
    unknown = [f for f in cfg.families if f not in RENDERERS]
    if unknown:
        raise ConfigError(f"unknown renderer families {unknown}", "world.families")
    if cfg.size < 8 or cfg.size % 2:
        raise ConfigError("image size must be an even integer >= 8", "world.size")
    if cfg.n_images < len(cfg.categories):
        raise ConfigError("fewer images than categories", "world.n_images")
    if not 0 <= cfg.pixel_noise < 0.5:
        raise ConfigError("pixel_noise must lie in [0, 0.5)", "world.pixel_noise")


def render(family, L, seed, *key, pixel_noise=0.02):
    rng = stream(seed, "render", *key)
    img = RENDERERS[family](rng, L)
    if pixel_noise:
        img = img + rng.normal(0.0, pixel_noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def make_world(cfg: WorldConfig | None = None, seed=0):
    """Render a balanced, deterministic corpus.

    Category ``c`` images come from renderer ``cfg.families[c]``; labels are a
    seeded permutation of a balanced assignment (counts differ by at most one).
    """
    cfg = cfg or WorldConfig()
    validate_world_config(cfg)
    C = len(cfg.categories)
    labels = np.arange(cfg.n_images) % C
    labels = stream(seed, "world-labels").permutation(labels)
    images = np.stack([
        render(cfg.families[c], cfg.size, seed, "world", i, pixel_noise=cfg.pixel_noise)
        for i, c in enumerate(labels)
    ])
    ids = [f"img{i:05d}" for i in range(cfg.n_images)]
    return World(images, labels.astype(np.int64), tuple(cfg.categories), ids, seed)


def render_exemplars(cfg: WorldConfig, per_category, seed):
    """Held-out renders (distinct stream from the corpus) for prototype building."""
    validate_world_config(cfg)
    out = {}
    for c, fam in enumerate(cfg.families):
        out[c] = np.stack([
            render(fam, cfg.size, seed, "exemplar", c, j, pixel_noise=cfg.pixel_noise)
            for j in range(per_category)
        ])
    return out
