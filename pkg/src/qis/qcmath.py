"""Quasi-conformal quantities of a nodal deformation.

Per grid cell we form the 2x2 Jacobian from the four corner nodes
(cell-centered differencing: each partial is the average of the two opposing
edge differences, grid spacing 1 pixel), and from it the Beltrami coefficient

    |mu|^2 = (||Df||_F^2 - 2 det Df) / (||Df||_F^2 + 2 det Df),

with the complex value obtained from the Wirtinger derivatives mu = f_zbar / f_z.
|mu| < 1 on a cell iff det Df > 0 there, which is what makes the deformation
locally one-to-one; the dilatation K = (1+|mu|)/(1-|mu|) equals the singular
value ratio of the Jacobian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDilatation, NonPositiveDenominator
from .grid import DeformationField, ScalarField, _readonly

MU_DUMP_MAGIC = b"QISMU\x00"


@dataclass(frozen=True)
class JacobianField:
    """Per-cell Jacobian entries plus cached determinant and Frobenius norm."""

    dxdx: np.ndarray  # d f1 / d x1   (f1 = x-component)
    dxdy: np.ndarray  # d f1 / d x2
    dydx: np.ndarray  # d f2 / d x1
    dydy: np.ndarray  # d f2 / d x2
    det: np.ndarray
    frob2: np.ndarray

    def __post_init__(self):
        for name in ("dxdx", "dxdy", "dydx", "dydy", "det", "frob2"):
            object.__setattr__(self, name, _readonly(np.asarray(getattr(self, name), np.float64)))

    @property
    def height(self) -> int:
        return self.dxdx.shape[0]

    @property
    def width(self) -> int:
        return self.dxdx.shape[1]


@dataclass(frozen=True)
class ComplexField:
    """Beltrami coefficient per cell, split into real and imaginary parts."""

    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "re", _readonly(np.asarray(self.re, np.float64)))
        object.__setattr__(self, "im", _readonly(np.asarray(self.im, np.float64)))

    def abs(self) -> np.ndarray:
        return np.hypot(self.re, self.im)

    def arg(self) -> np.ndarray:
        return np.arctan2(self.im, self.re)


def cell_partials(vectors: np.ndarray):
    """(a, b, c, d) per cell from nodal values: a = df1/dx1, b = df1/dx2, etc."""
    fx = vectors[..., 0]
    fy = vectors[..., 1]
    a = 0.5 * ((fx[:-1, 1:] - fx[:-1, :-1]) + (fx[1:, 1:] - fx[1:, :-1]))
    b = 0.5 * ((fx[1:, :-1] - fx[:-1, :-1]) + (fx[1:, 1:] - fx[:-1, 1:]))
    c = 0.5 * ((fy[:-1, 1:] - fy[:-1, :-1]) + (fy[1:, 1:] - fy[1:, :-1]))
    d = 0.5 * ((fy[1:, :-1] - fy[:-1, :-1]) + (fy[1:, 1:] - fy[:-1, 1:]))
    return a, b, c, d


def jacobian_field(phi: DeformationField) -> JacobianField:
    a, b, c, d = cell_partials(phi.vectors)
    det = a * d - b * c
    frob2 = a * a + b * b + c * c + d * d
    return JacobianField(a, b, c, d, det, frob2)


def min_cell_det(phi: DeformationField) -> float:
    a, b, c, d = cell_partials(phi.vectors)
    return float((a * d - b * c).min())


def orientation_valid(phi: DeformationField) -> bool:
    return min_cell_det(phi) > 0.0


def beltrami_field(J: JacobianField) -> ComplexField:
    denom = J.frob2 + 2.0 * J.det
    if np.any(denom <= 0.0):
        raise NonPositiveDenominator("cell with ||Df||_F^2 + 2 det Df <= 0")
    # mu = f_zbar / f_z with 2 f_z = (a + d) + i (c - b), 2 f_zbar = (a - d) + i (c + b)
    pz_re = J.dxdx + J.dydy
    pz_im = J.dydx - J.dxdy
    pb_re = J.dxdx - J.dydy
    pb_im = J.dydx + J.dxdy
    re = (pb_re * pz_re + pb_im * pz_im) / denom
    im = (pb_im * pz_re - pb_re * pz_im) / denom
    return ComplexField(re, im)


def dilatation_field(mu: ComplexField) -> ScalarField:
    m = mu.abs()
    if np.any(m >= 1.0):
        raise DegenerateDilatation("|mu| >= 1 somewhere; dilatation undefined")
    return ScalarField((1.0 + m) / (1.0 - m))


def beltrami_penalty(v):
    """Distortion barrier 1/(v-1)^2 on [0, 1) and its derivative -2/(v-1)^3."""
    v = np.asarray(v, dtype=np.float64)
    if np.any(v < 0.0) or np.any(v >= 1.0):
        raise ValueError("penalty argument must lie in [0, 1)")
    w = v - 1.0
    value = 1.0 / (w * w)
    deriv = -2.0 / (w * w * w)
    if value.ndim == 0:
        return float(value), float(deriv)
    return value, deriv


def _penalty_second(v: np.ndarray) -> np.ndarray:
    w = v - 1.0
    return 6.0 / (w * w * w * w)


def mu_dump_bytes(mu: ComplexField, K: ScalarField) -> bytes:
    """Diagnostic dump: 16-byte header (magic, u32 height, u32 width, little-endian)
    followed by |mu| then K as float32 row-major grids."""
    m = mu.abs().astype("<f4")
    k = K.values.astype("<f4")
    h, w = m.shape
    header = MU_DUMP_MAGIC + b"\x00\x00" + struct.pack("<II", h, w)
    return header + m.tobytes() + k.tobytes()


def deformation_dump_bytes(phi: DeformationField) -> bytes:
    """Same container as the mu dump, payload = nodal x grid then y grid (float32)."""
    v = phi.vectors
    h, w = v.shape[:2]
    header = MU_DUMP_MAGIC + b"\x00\x00" + struct.pack("<II", h, w)
    return header + v[..., 0].astype("<f4").tobytes() + v[..., 1].astype("<f4").tobytes()
