"""Image/mask/deformation containers and the sampling primitives shared by all modules.

Coordinate convention: x = column index, y = row index, origin at the top-left
corner.  Pixel (i, j) occupies the unit square with corners (j, i) and
(j+1, i+1); its center sits at (j + 0.5, i + 0.5).  Deformations live on the
nodal grid (cell corners), so an H x W image carries an (H+1) x (W+1) field of
2-vectors storing target coordinates in pixel units.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage as ndi

from .errors import DimensionMismatch


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ScalarField:
    """H x W grid of real intensities (float64, row-major)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 2 or v.shape[1] < 2:
            raise DimensionMismatch(f"scalar field must be at least 2x2, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("scalar field contains non-finite values")
        object.__setattr__(self, "values", _readonly(v))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class BinaryMask:
    """H x W grid with values in {0, 1} (uint8)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise DimensionMismatch(f"mask must be 2-D, got shape {v.shape}")
        if not np.isin(v, (0, 1)).all():
            raise ValueError("mask values must be exactly 0 or 1")
        object.__setattr__(self, "values", _readonly(v.astype(np.uint8)))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def area(self) -> int:
        return int(self.values.sum())


@dataclass(frozen=True)
class DeformationField:
    """Nodal (H+1) x (W+1) grid of 2-vectors; vectors[..., 0] = x, [..., 1] = y."""

    vectors: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 3 or v.shape[2] != 2 or v.shape[0] < 2 or v.shape[1] < 2:
            raise DimensionMismatch(f"deformation must be (rows+1, cols+1, 2), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("deformation contains non-finite values")
        object.__setattr__(self, "vectors", _readonly(v))

    @property
    def node_height(self) -> int:
        return self.vectors.shape[0]

    @property
    def node_width(self) -> int:
        return self.vectors.shape[1]

    @property
    def pixel_height(self) -> int:
        return self.vectors.shape[0] - 1

    @property
    def pixel_width(self) -> int:
        return self.vectors.shape[1] - 1


@dataclass(frozen=True)
class RegionLabeling:
    """Per-pixel integer labels plus the map from label to intensity-cluster index.

    After `connected_components` every label is one 4-connected region and the
    labels partition the image; the raw cluster map stage (`kmeans_labels`)
    uses the same container with labels == clusters.
    """

    labels: np.ndarray
    cluster_of_label: dict = field(default_factory=dict)

    def __post_init__(self):
        l = np.asarray(self.labels)
        if l.ndim != 2:
            raise DimensionMismatch("labels must be 2-D")
        if l.min() < 0:
            raise ValueError("labels must be nonnegative")
        object.__setattr__(self, "labels", _readonly(l.astype(np.int32)))

    @property
    def count(self) -> int:
        return int(self.labels.max()) + 1


def identity_deformation(pixel_height: int, pixel_width: int) -> DeformationField:
    """The identity map on the nodal grid of a pixel_height x pixel_width image."""
    ys, xs = np.mgrid[0 : pixel_height + 1, 0 : pixel_width + 1]
    return DeformationField(np.stack([xs, ys], axis=-1).astype(np.float64))


def rescale_intensity(img: ScalarField) -> ScalarField:
    """Affinely map intensities onto [0, 255]; a constant image maps to all zeros."""
    v = img.values
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        return ScalarField(np.zeros_like(v))
    return ScalarField((v - lo) * (255.0 / (hi - lo)))


def node_centers(phi: DeformationField) -> np.ndarray:
    """Deformed pixel-center positions: the average of each cell's four corner nodes."""
    v = phi.vectors
    return 0.25 * (v[:-1, :-1] + v[:-1, 1:] + v[1:, :-1] + v[1:, 1:])


def sample_bilinear(field: np.ndarray, x: np.ndarray, y: np.ndarray,
                    with_gradient: bool = False):
    """Bilinearly sample `field` (H x W, values at pixel centers) at points (x, y).

    Out-of-domain points are sampled with replicated-edge clamping.  With
    `with_gradient`, also returns d/dx and d/dy of the interpolant (zero in the
    clamped directions).
    """
    h, w = field.shape
    u = np.clip(x - 0.5, 0.0, w - 1.0)
    v = np.clip(y - 0.5, 0.0, h - 1.0)
    j0 = np.clip(np.floor(u).astype(np.int64), 0, max(w - 2, 0))
    i0 = np.clip(np.floor(v).astype(np.int64), 0, max(h - 2, 0))
    fu = u - j0
    fv = v - i0
    f00 = field[i0, j0]
    f01 = field[i0, j0 + 1]
    f10 = field[i0 + 1, j0]
    f11 = field[i0 + 1, j0 + 1]
    top = f00 + fu * (f01 - f00)
    bot = f10 + fu * (f11 - f10)
    val = top + fv * (bot - top)
    if not with_gradient:
        return val
    inside_x = (x - 0.5 > 0.0) & (x - 0.5 < w - 1.0)
    inside_y = (y - 0.5 > 0.0) & (y - 0.5 < h - 1.0)
    gx = ((1.0 - fv) * (f01 - f00) + fv * (f11 - f10)) * inside_x
    gy = (bot - top) * inside_y
    return val, gx, gy


def warp_indicator(mask: BinaryMask, phi: DeformationField) -> ScalarField:
    """The warped indicator: per pixel, the mask sampled bilinearly at phi(center)."""
    if (phi.pixel_height, phi.pixel_width) != (mask.height, mask.width):
        raise DimensionMismatch(
            f"deformation {phi.vectors.shape[:2]} does not match mask {mask.values.shape}")
    centers = node_centers(phi)
    vals = sample_bilinear(mask.values.astype(np.float64), centers[..., 0], centers[..., 1])
    return ScalarField(vals)


def threshold_mask(fieldv: ScalarField, tau: float = 0.5) -> BinaryMask:
    return BinaryMask((fieldv.values >= tau).astype(np.uint8))


def connected_components(mask_or_labels) -> RegionLabeling:
    """4-connected components of each class of a binary mask or labeling.

    Labels are assigned in raster-scan first-seen order, so the result is
    deterministic and idempotent (relabeling a labeling permutes nothing).
    """
    if isinstance(mask_or_labels, BinaryMask):
        classes = mask_or_labels.values.astype(np.int32)
        cluster_map = None
    elif isinstance(mask_or_labels, RegionLabeling):
        classes = mask_or_labels.labels
        cluster_map = mask_or_labels.cluster_of_label or None
    else:
        classes = np.asarray(mask_or_labels).astype(np.int32)
        cluster_map = None

    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
    tmp = np.full(classes.shape, -1, dtype=np.int64)
    tmp_cluster = []
    offset = 0
    for cls in np.unique(classes):
        lab, n = ndi.label(classes == cls, structure=structure)
        sel = lab > 0
        tmp[sel] = lab[sel] - 1 + offset
        cid = int(cluster_map[int(cls)]) if cluster_map else int(cls)
        tmp_cluster.extend([cid] * n)
        offset += n

    # Relabel in raster-scan first-seen order.
    flat = tmp.ravel()
    first_idx = np.full(offset, flat.size, dtype=np.int64)
    np.minimum.at(first_idx, flat, np.arange(flat.size))
    order = np.argsort(first_idx, kind="stable")
    remap = np.empty(offset, dtype=np.int64)
    remap[order] = np.arange(offset)
    cluster_of_label = {int(remap[t]): tmp_cluster[t] for t in range(offset)}
    return RegionLabeling(remap[flat].reshape(classes.shape), cluster_of_label)


def component_count(mask: BinaryMask) -> int:
    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
    _, n = ndi.label(mask.values, structure=structure)
    return int(n)


def hole_count(mask: BinaryMask) -> int:
    """Background components (4-connected) that do not touch the image border."""
    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
    lab, n = ndi.label(mask.values == 0, structure=structure)
    border = np.unique(np.concatenate([lab[0, :], lab[-1, :], lab[:, 0], lab[:, -1]]))
    border = set(int(b) for b in border if b != 0)
    return n - len(border)
