"""File formats: 8-bit grayscale PNG / PGM (P5) decode, binary mask PNG I/O,
polygon rasterization, and the deformed-grid rendering."""

from __future__ import annotations

import io

import numpy as np
from PIL import Image, ImageDraw

from .grid import BinaryMask, DeformationField, ScalarField

_LUMA = (0.299, 0.587, 0.114)


def _open(source) -> Image.Image:
    if isinstance(source, (bytes, bytearray)):
        return Image.open(io.BytesIO(source))
    return Image.open(source)


def load_image(source) -> ScalarField:
    """Decode a grayscale PNG/PGM or an RGB PNG (converted to luma)."""
    img = _open(source)
    if img.mode in ("RGB", "RGBA", "P"):
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
        vals = _LUMA[0] * arr[..., 0] + _LUMA[1] * arr[..., 1] + _LUMA[2] * arr[..., 2]
    elif img.mode == "L":
        vals = np.asarray(img, dtype=np.float64)
    else:
        vals = np.asarray(img.convert("L"), dtype=np.float64)
    return ScalarField(vals)


def load_mask(source) -> BinaryMask:
    """8-bit PNG with values {0, 255} mapped onto {0, 1}."""
    img = _open(source)
    arr = np.asarray(img.convert("L"))
    if not np.isin(arr, (0, 255)).all():
        raise ValueError("mask file must contain only values 0 and 255")
    return BinaryMask((arr == 255).astype(np.uint8))


def mask_to_png_bytes(mask: BinaryMask) -> bytes:
    img = Image.fromarray((mask.values * 255).astype(np.uint8), mode="L")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def save_mask(mask: BinaryMask, path) -> None:
    with open(path, "wb") as f:
        f.write(mask_to_png_bytes(mask))


def rasterize_polygon(points, height: int, width: int) -> BinaryMask:
    """Closed polygon -> mask via even-odd fill evaluated at pixel centers."""
    pts = [(float(x), float(y)) for x, y in points]
    if len(pts) < 3:
        raise ValueError("polygon needs at least 3 vertices")
    xc = np.arange(width) + 0.5
    yc = np.arange(height) + 0.5
    crossings = np.zeros((height, width), dtype=np.int64)
    n = len(pts)
    for k in range(n):
        x1, y1 = pts[k]
        x2, y2 = pts[(k + 1) % n]
        if y1 == y2:
            continue
        rows = (yc >= min(y1, y2)) & (yc < max(y1, y2))
        if not rows.any():
            continue
        xi = x1 + (yc[rows] - y1) * (x2 - x1) / (y2 - y1)
        crossings[rows] += xc[None, :] < xi[:, None]
    return BinaryMask((crossings % 2).astype(np.uint8))


def render_grid_overlay(phi: DeformationField, spacing: int = 8) -> bytes:
    """Deformed grid lines as a PNG, the standard way of visualizing the map."""
    v = phi.vectors
    h, w = phi.pixel_height, phi.pixel_width
    scale = 4 if max(h, w) <= 160 else 1
    img = Image.new("L", ((w + 1) * scale, (h + 1) * scale), 255)
    draw = ImageDraw.Draw(img)
    rows = sorted(set(list(range(0, h + 1, spacing)) + [h]))
    cols = sorted(set(list(range(0, w + 1, spacing)) + [w]))
    for i in rows:
        pts = [(v[i, j, 0] * scale, v[i, j, 1] * scale) for j in range(w + 1)]
        draw.line(pts, fill=0, width=1)
    for j in cols:
        pts = [(v[i, j, 0] * scale, v[i, j, 1] * scale) for i in range(h + 1)]
        draw.line(pts, fill=0, width=1)
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()
