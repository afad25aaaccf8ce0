"""File formats: PNG images, CSV tables, SVG bar charts and dataset directories."""
from __future__ import annotations

import csv
import io as _io
import json
import os
from html import escape

import numpy as np
from PIL import Image

from .checkpoint import atomic_write_bytes
from .errors import DependencyError, FormatError


def to_uint8(image):
    """(3, H, W) float in [0, 1] -> (H, W, 3) uint8 (round half to even, clipped)."""
    x = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.round(x * 255.0).astype(np.uint8).transpose(1, 2, 0)


def quantize(images):
    """Images as they will read back from PNG."""
    return np.round(np.clip(np.asarray(images, dtype=np.float64), 0, 1) * 255.0) / 255.0


def png_bytes(image):
    buf = _io.BytesIO()
    # no timestamps or text chunks, so identical pixels give identical bytes
    Image.fromarray(to_uint8(image), "RGB").save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def write_png(path, image):
    atomic_write_bytes(path, png_bytes(image))


def read_png(path):
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except FileNotFoundError:
        raise DependencyError(f"missing image {path}", str(path)) from None
    return arr.transpose(2, 0, 1) / 255.0


def write_csv(path, header, rows, comments=()):
    """CSV with optional leading ``# key: value`` comment lines."""
    buf = _io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    atomic_write_bytes(path, buf.getvalue().encode())


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def read_csv(path):
    """Returns ``(header, rows)`` skipping comment lines; cells stay strings."""
    if not os.path.exists(path):
        raise DependencyError(f"missing table {path}", str(path))
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    return rows[0], rows[1:]


def write_json(path, obj):
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def read_json(path):
    if not os.path.exists(path):
        raise DependencyError(f"missing file {path}", str(path))
    with open(path) as fh:
        return json.load(fh)


_PALETTE = ("#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860")


def bar_chart_svg(groups, series, values, title="", ylabel="", ymax=100.0, note=""):
    """Grouped bar chart; ``values[i][j]`` is series ``j`` in group ``i``."""
    W, H, left, bottom, top = 120 + 110 * len(groups), 340, 60, 60, 40
    plot_h = H - bottom - top
    bw = 80 / max(len(series), 1)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
           f'font-family="sans-serif" font-size="11">',
           f'<text x="{W / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>']
    for frac in (0, 0.25, 0.5, 0.75, 1.0):
        y = top + plot_h * (1 - frac)
        out.append(f'<line x1="{left}" x2="{W - 20}" y1="{y:.1f}" y2="{y:.1f}" stroke="#ddd"/>')
        out.append(f'<text x="{left - 5}" y="{y + 4:.1f}" text-anchor="end">{ymax * frac:g}</text>')
    out.append(f'<text x="14" y="{top + plot_h / 2}" transform="rotate(-90 14 {top + plot_h / 2})" '
               f'text-anchor="middle">{escape(ylabel)}</text>')
    for i, g in enumerate(groups):
        x0 = left + 20 + 110 * i
        for j, _ in enumerate(series):
            v = values[i][j]
            v = 0.0 if v is None or not np.isfinite(v) else float(v)
            h = plot_h * min(max(v / ymax, 0.0), 1.0)
            out.append(f'<rect x="{x0 + j * bw:.1f}" y="{top + plot_h - h:.1f}" width="{bw - 2:.1f}" '
                       f'height="{h:.1f}" fill="{_PALETTE[j % len(_PALETTE)]}"/>')
        out.append(f'<text x="{x0 + 40}" y="{H - bottom + 16}" text-anchor="middle">{escape(str(g))}</text>')
    for j, s in enumerate(series):
        y = H - 22 + 0 * j
        x = left + 150 * j
        out.append(f'<rect x="{x}" y="{y - 9}" width="10" height="10" fill="{_PALETTE[j % len(_PALETTE)]}"/>')
        out.append(f'<text x="{x + 14}" y="{y}">{escape(str(s))}</text>')
    if note:
        out.append(f'<text x="{W / 2}" y="{H - 4}" text-anchor="middle" font-size="9" '
                   f'fill="#666">{escape(note)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path, svg):
    atomic_write_bytes(path, svg.encode())


# --------------------------------------------------------------------------- datasets


def write_image_dir(directory, images, ids):
    os.makedirs(directory, exist_ok=True)
    for img, name in zip(images, ids):
        write_png(os.path.join(directory, f"{name}.png"), img)


def read_image_dir(directory, ids):
    if not os.path.isdir(directory):
        raise DependencyError(f"missing image directory {directory}", str(directory))
    return np.stack([read_png(os.path.join(directory, f"{name}.png")) for name in ids])


def write_betas(path, betas):
    """Raw float32 little-endian matrix (voxels x columns); shape lives in meta.json."""
    atomic_write_bytes(path, np.ascontiguousarray(betas, dtype="<f4").tobytes())


def read_betas(path, shape):
    if not os.path.exists(path):
        raise DependencyError(f"missing beta file {path}", str(path))
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != int(np.prod(shape)):
        raise FormatError(f"{path} holds {raw.size} values, meta.json expects shape {shape}")
    return raw.reshape(shape).astype(np.float64)
