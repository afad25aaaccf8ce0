"""Per-image scalar metrics on (n, 3, H, W) arrays in [0, 1]."""
import numpy as np

from ._validation import check_images


def saturation(images):
    """Mean per-pixel HSV saturation, (max - min) / max with 0 where max == 0."""
    x = check_images(images)
    mx = x.max(axis=1)
    mn = x.min(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(mx > 0, (mx - mn) / np.where(mx > 0, mx, 1.0), 0.0)
    return s.mean(axis=(1, 2))


def luminance(images):
    x = check_images(images)
    return (0.299 * x[:, 0] + 0.587 * x[:, 1] + 0.114 * x[:, 2]).mean(axis=(1, 2))
