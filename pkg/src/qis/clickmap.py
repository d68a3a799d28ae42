"""Turn user clicks and strokes into binary click maps.

The image is clustered into K intensity classes (deterministic 1-D Lloyd
iteration), every class is split into its 4-connected components, and the
click map is the union of the components containing the clicks: the local
homogeneous region grown around each click.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyImage, MixedPolarity, OutOfBounds
from .grid import BinaryMask, RegionLabeling, ScalarField, connected_components

POSITIVE = "pos"
NEGATIVE = "neg"


@dataclass(frozen=True)
class Click:
    x: int
    y: int
    polarity: str
    step: int = 0

    def __post_init__(self):
        if self.polarity not in (POSITIVE, NEGATIVE):
            raise ValueError(f"polarity must be '{POSITIVE}' or '{NEGATIVE}'")
        if self.x < 0 or self.y < 0:
            raise OutOfBounds(f"click ({self.x}, {self.y}) has negative coordinates")


@dataclass(frozen=True)
class ClickMap:
    mask: BinaryMask
    source_clicks: tuple
    polarity: str


def kmeans_labels(img: ScalarField, K: int = 3, tol: float = 1e-6,
                  max_iter: int = 100) -> RegionLabeling:
    """Deterministic 1-D Lloyd clustering of pixel intensities.

    Centers start at the (i+0.5)/K quantiles of the distinct intensity values,
    ties go to the lower-index center, and K is reduced to the number of
    distinct intensities when the image has fewer.
    """
    if K < 1:
        raise ValueError("K must be positive")
    v = img.values
    if v.size == 0:
        raise EmptyImage("cannot cluster an empty image")
    distinct = np.unique(v)
    K = min(K, distinct.size)
    centers = np.quantile(distinct, (np.arange(K) + 0.5) / K)

    flat = v.ravel()
    assign = np.zeros(flat.size, dtype=np.int64)
    for _ in range(max_iter):
        # argmin returns the first (lowest-index) center on ties
        assign = np.abs(flat[:, None] - centers[None, :]).argmin(axis=1)
        new_centers = centers.copy()
        for k in range(K):
            sel = assign == k
            if sel.any():
                new_centers[k] = flat[sel].mean()
        if np.abs(new_centers - centers).max() < tol:
            centers = new_centers
            break
        centers = new_centers
    assign = np.abs(flat[:, None] - centers[None, :]).argmin(axis=1)
    return RegionLabeling(assign.reshape(v.shape), {k: k for k in range(K)})


def component_decomposition(clusters: RegionLabeling) -> RegionLabeling:
    """Split every cluster into its 4-connected components."""
    return connected_components(clusters)


def build_click_map(clicks: Sequence[Click], components: RegionLabeling) -> ClickMap:
    """Union of the components containing the clicks (all of one polarity)."""
    if not clicks:
        raise ValueError("click list is empty")
    polarity = clicks[0].polarity
    if any(c.polarity != polarity for c in clicks):
        raise MixedPolarity("clicks in one map must share a polarity")
    labels = components.labels
    h, w = labels.shape
    hit = np.zeros(components.count, dtype=bool)
    for c in clicks:
        if not (0 <= c.x < w and 0 <= c.y < h):
            raise OutOfBounds(f"click ({c.x}, {c.y}) outside {w}x{h} image")
        hit[labels[c.y, c.x]] = True
    mask = BinaryMask(hit[labels].astype(np.uint8))
    return ClickMap(mask, tuple(clicks), polarity)


def _bresenham(x0: int, y0: int, x1: int, y1: int):
    dx = abs(x1 - x0)
    dy = -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    x, y = x0, y0
    while True:
        yield x, y
        if x == x1 and y == y1:
            return
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x += sx
        if e2 <= dx:
            err += dx
            y += sy


def stroke_to_clicks(polyline: Sequence, polarity: str, step: int = 0,
                     bounds=None) -> list:
    """Densify a polyline into per-pixel clicks by Bresenham traversal.

    Duplicates are removed with order preserved; `bounds` = (width, height)
    enables range checking.
    """
    if not polyline:
        raise ValueError("polyline must have at least one vertex")
    pts = [(int(round(x)), int(round(y))) for x, y in polyline]
    if bounds is not None:
        w, h = bounds
        for x, y in pts:
            if not (0 <= x < w and 0 <= y < h):
                raise OutOfBounds(f"stroke vertex ({x}, {y}) outside {w}x{h} image")
    seen = set()
    out = []
    segments = [(pts[0], pts[0])] if len(pts) == 1 else list(zip(pts[:-1], pts[1:]))
    for (x0, y0), (x1, y1) in segments:
        for x, y in _bresenham(x0, y0, x1, y1):
            if (x, y) not in seen:
                seen.add((x, y))
                out.append(Click(x, y, polarity, step))
    return out


def parse_step_object(obj: dict, bounds=None) -> list:
    """One interaction-step JSON object -> list of Clicks.

    Schema: {"step": n, "polarity": "pos"|"neg", "points": [{"x":..,"y":..},..]}
    or {"step": n, "polarity": ..., "stroke": [[x, y], ...]} for server-side
    densification.
    """
    if "polarity" not in obj:
        raise ValueError("step object missing 'polarity'")
    polarity = obj["polarity"]
    if polarity not in (POSITIVE, NEGATIVE):
        raise ValueError(f"unknown polarity {polarity!r}")
    step = int(obj.get("step", 0))
    if "stroke" in obj:
        return stroke_to_clicks([(p[0], p[1]) for p in obj["stroke"]], polarity, step, bounds)
    if "points" not in obj:
        raise ValueError("step object needs 'points' or 'stroke'")
    clicks = [Click(int(p["x"]), int(p["y"]), polarity, step) for p in obj["points"]]
    if not clicks:
        raise ValueError("step object has no points")
    if bounds is not None:
        w, h = bounds
        for c in clicks:
            if not (0 <= c.x < w and 0 <= c.y < h):
                raise OutOfBounds(f"point ({c.x}, {c.y}) outside {w}x{h} image")
    return clicks


def load_click_script(text: str) -> list:
    """Click script file: JSON array of step objects (kept raw for replay)."""
    data = json.loads(text)
    if not isinstance(data, list):
        raise ValueError("click script must be a JSON array of step objects")
    return data
