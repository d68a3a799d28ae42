"""Discretization and minimization of the deformation energy

    F(Psi) = 1/2 sum (I - J(Psi))^2 + alpha1 sum |lap Psi|^2 + alpha2 sum phi(|mu(Psi)|^2)

over nodal deformations, where J(Psi) = c1 W + c2 (1 - W) and W warps a
Gaussian-smoothed copy of the template indicator (the final mask always warps
the raw binary template).  The minimizer alternates the closed-form constant
update with a generalized Gauss-Newton inner solve: search directions come
from Jacobi-preconditioned CG on the positive-definite model Hessian and step
lengths from Armijo backtracking that additionally insists every cell keeps a
Jacobian determinant above `det_floor`, so accepted iterates never fold.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage as ndi

from .errors import DimensionMismatch, EmptyRegion, OrientationViolation
from .grid import (BinaryMask, DeformationField, ScalarField, identity_deformation,
                   sample_bilinear, warp_indicator)
from .qcmath import cell_partials

_ARMIJO_C = 1e-4
_ARMIJO_BACKTRACK = 0.5
_ARMIJO_MAX_HALVINGS = 20
_CG_RTOL = 1e-2
_CG_MAX_ITER = 50
_Q_CAP = 0.9   # distortion trust region: worst admissible |mu|^2 per step
_STEP_CLIP = 2.0   # largest nodal displacement (pixels) of one search direction


@dataclass(frozen=True)
class EnergyParams:
    alpha1: float = 0.001
    alpha2: float = 100.0
    max_gn: int = 50
    max_ad: int = 10
    tol_f: float = 1e-4
    tol_step: float = 1e-3
    tol_grad: float = 1e-3
    det_floor: float = 1e-6
    smooth_sigma: float = 1.0

    def __post_init__(self):
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ValueError("regularization weights must be nonnegative")
        if self.max_gn < 1 or self.max_ad < 1:
            raise ValueError("iteration caps must be at least 1")
        if min(self.tol_f, self.tol_step, self.tol_grad) <= 0 or self.det_floor <= 0:
            raise ValueError("tolerances and det_floor must be positive")


@dataclass(frozen=True)
class ObjectiveEval:
    """One objective evaluation: value, flat gradient, and the implicit GN operator."""

    value: float
    gradient: np.ndarray
    gn_apply: object  # callable: flat vector -> flat vector, SPD
    gn_diag: np.ndarray


@dataclass
class SolveReport:
    iterations: int = 0
    energy: float = np.nan
    min_det: float = np.nan
    converged: bool = False
    line_search_failed: bool = False
    energies: list = field(default_factory=list)
    outer_energies: list = field(default_factory=list)
    wall_s: float = 0.0


def _laplacian(g: np.ndarray) -> np.ndarray:
    """5-point Laplacian with replicated-edge boundary."""
    out = -4.0 * g
    out[:-1, :] += g[1:, :]
    out[1:, :] += g[:-1, :]
    out[:, :-1] += g[:, 1:]
    out[:, 1:] += g[:, :-1]
    out[0, :] += g[0, :]
    out[-1, :] += g[-1, :]
    out[:, 0] += g[:, 0]
    out[:, -1] += g[:, -1]
    return out


def _laplacian_normal_diag(shape) -> np.ndarray:
    """diag(A^T A) for the replicated-edge Laplacian A on a grid of `shape`."""
    h, w = shape
    oob = np.zeros((h, w))
    oob[0, :] += 1
    oob[-1, :] += 1
    oob[:, 0] += 1
    oob[:, -1] += 1
    in_deg = 4.0 - oob
    return (4.0 - oob) ** 2 + in_deg


def _avg4(g: np.ndarray) -> np.ndarray:
    return 0.25 * (g[:-1, :-1] + g[:-1, 1:] + g[1:, :-1] + g[1:, 1:])


def _avg4_t(s: np.ndarray, out: np.ndarray) -> None:
    q = 0.25 * s
    out[:-1, :-1] += q
    out[:-1, 1:] += q
    out[1:, :-1] += q
    out[1:, 1:] += q


def _dx_t(s: np.ndarray, out: np.ndarray) -> None:
    q = 0.5 * s
    out[:-1, 1:] += q
    out[:-1, :-1] -= q
    out[1:, 1:] += q
    out[1:, :-1] -= q


def _dy_t(s: np.ndarray, out: np.ndarray) -> None:
    q = 0.5 * s
    out[1:, :-1] += q
    out[:-1, :-1] -= q
    out[1:, 1:] += q
    out[:-1, 1:] -= q


def _dx_cells(g: np.ndarray) -> np.ndarray:
    return 0.5 * ((g[:-1, 1:] - g[:-1, :-1]) + (g[1:, 1:] - g[1:, :-1]))


def _dy_cells(g: np.ndarray) -> np.ndarray:
    return 0.5 * ((g[1:, :-1] - g[:-1, :-1]) + (g[1:, 1:] - g[:-1, 1:]))


def smooth_template(D: BinaryMask, sigma: float = 1.0) -> np.ndarray:
    return ndi.gaussian_filter(D.values.astype(np.float64), sigma, mode="nearest")


def _min_corner_det(vec: np.ndarray) -> np.ndarray:
    """Per cell, the smallest of the four corner Jacobians of the bilinear patch.

    All four positive makes the patch injective (a convex quad), and because
    the bilinear determinant varies linearly per coordinate this survives
    subdivision, so prolongation between levels cannot fold; the averaged
    cell determinant alone admits bowtie cells that only reveal their fold
    when resampled.
    """
    p = vec
    ex_t = p[:-1, 1:] - p[:-1, :-1]     # top edge
    ex_b = p[1:, 1:] - p[1:, :-1]       # bottom edge
    ey_l = p[1:, :-1] - p[:-1, :-1]     # left edge
    ey_r = p[1:, 1:] - p[:-1, 1:]       # right edge

    def cross(u, v):
        return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]

    tl = cross(ex_t, ey_l)
    tr = cross(ex_t, ey_r)
    bl = cross(ex_b, ey_l)
    br = cross(ex_b, ey_r)
    return np.minimum(np.minimum(tl, tr), np.minimum(bl, br))


class _Objective:
    """Energy/gradient/GN machinery for fixed image, smoothed template and constants."""

    def __init__(self, image: np.ndarray, template_soft: np.ndarray,
                 c1: float, c2: float, params: EnergyParams):
        self.I = image
        self.S = template_soft
        self.c1 = float(c1)
        self.c2 = float(c2)
        self.params = params
        h, w = image.shape
        self.identity = identity_deformation(h, w).vectors
        self.lap_diag = _laplacian_normal_diag(self.identity.shape[:2])

    def with_constants(self, c1: float, c2: float) -> "_Objective":
        new = _Objective.__new__(_Objective)
        new.__dict__.update(self.__dict__)
        new.c1, new.c2 = float(c1), float(c2)
        return new

    # -- energy ---------------------------------------------------------

    def try_energy(self, vec: np.ndarray):
        """(F, min cell det, max_q); F is +inf when a cell has det <= 0."""
        a, b, c, d = cell_partials(vec)
        det0 = a * d - b * c
        min_det = float(det0.min())
        if min_det <= 0.0:
            return np.inf, min_det, np.inf
        k = self.c1 - self.c2
        centers = _avg4(vec[..., 0]), _avg4(vec[..., 1])
        wv = sample_bilinear(self.S, centers[0], centers[1])
        res = self.c2 + k * wv - self.I
        fid = 0.5 * float((res * res).sum())
        u = vec - self.identity
        lx = _laplacian(u[..., 0])
        ly = _laplacian(u[..., 1])
        lap = self.params.alpha1 * float((lx * lx).sum() + (ly * ly).sum())
        q = ((a - d) ** 2 + (b + c) ** 2) / ((a + d) ** 2 + (c - b) ** 2)
        mu_term = self.params.alpha2 * float((1.0 / (q - 1.0) ** 2).sum())
        return fid + lap + mu_term, min_det, float(q.max())

    # -- full state (energy + caches for gradient / GN) ------------------

    def full_state(self, vec: np.ndarray) -> dict:
        a, b, c, d = cell_partials(vec)
        det = a * d - b * c
        if det.min() <= 0.0:
            raise OrientationViolation(f"cell with det = {det.min():.3e} <= 0")
        k = self.c1 - self.c2
        cx = _avg4(vec[..., 0])
        cy = _avg4(vec[..., 1])
        wv, gx, gy = sample_bilinear(self.S, cx, cy, with_gradient=True)
        res = self.c2 + k * wv - self.I
        u = vec - self.identity
        lx = _laplacian(u[..., 0])
        ly = _laplacian(u[..., 1])

        n1 = a - d
        n2 = b + c
        d1 = a + d
        d2 = c - b
        N = n1 * n1 + n2 * n2
        Dn = d1 * d1 + d2 * d2
        q = N / Dn
        wq = q - 1.0
        phi = 1.0 / (wq * wq)
        phi_p = -2.0 / (wq * wq * wq)
        phi_pp = 6.0 / (wq * wq * wq * wq)

        inv_dn = 1.0 / Dn
        qa = (2.0 * n1 - q * 2.0 * d1) * inv_dn
        qb = (2.0 * n2 + q * 2.0 * d2) * inv_dn
        qc = (2.0 * n2 - q * 2.0 * d2) * inv_dn
        qd = (-2.0 * n1 - q * 2.0 * d1) * inv_dn

        fid = 0.5 * float((res * res).sum())
        lap = self.params.alpha1 * float((lx * lx).sum() + (ly * ly).sum())
        mu_term = self.params.alpha2 * float(phi.sum())
        return {
            "vec": vec, "F": fid + lap + mu_term,
            "fid": fid, "lap": lap, "mu": mu_term,
            "res": res, "gx": gx, "gy": gy, "k": k,
            "lx": lx, "ly": ly,
            "q": q, "qa": qa, "qb": qb, "qc": qc, "qd": qd,
            "n1": n1, "n2": n2, "d1": d1, "d2": d2, "N": N, "Dn": Dn,
            "phi_p": phi_p, "phi_pp": phi_pp,
            "min_det": float(det.min()), "max_mu": float(np.sqrt(q.max())),
        }

    def gradient(self, st: dict) -> np.ndarray:
        a1, a2 = self.params.alpha1, self.params.alpha2
        g = np.zeros_like(st["vec"])
        sx = st["res"] * st["k"] * st["gx"]
        sy = st["res"] * st["k"] * st["gy"]
        _avg4_t(sx, g[..., 0])
        _avg4_t(sy, g[..., 1])
        g[..., 0] += 2.0 * a1 * _laplacian(st["lx"])
        g[..., 1] += 2.0 * a1 * _laplacian(st["ly"])
        pa = a2 * st["phi_p"] * st["qa"]
        pb = a2 * st["phi_p"] * st["qb"]
        pc = a2 * st["phi_p"] * st["qc"]
        pd = a2 * st["phi_p"] * st["qd"]
        _dx_t(pa, g[..., 0])
        _dy_t(pb, g[..., 0])
        _dx_t(pc, g[..., 1])
        _dy_t(pd, g[..., 1])
        return g

    def gn_operator(self, st: dict, dtype=np.float64):
        """Implicit SPD model Hessian and its exact diagonal (Jacobi preconditioner).

        Fidelity contributes its Gauss-Newton block J^T J, the smoothness term
        its exact Hessian 2 a1 A^T A, and the distortion barrier the positive
        semidefinite part of its Hessian in the cell quantities
        rho = (a-d, b+c, a+d, c-b):

            phi''(q) grad_q grad_q^T  +  phi'(q) [ (2/T) I_n + (8 S / T^3) dd^T ],

        where q = S/T with S = n1^2 + n2^2, T = d1^2 + d2^2 (the indefinite
        cross and -I_d pieces of phi' Hess(q) are dropped).  Keeping the phi'
        piece matters: the plain first-order block vanishes at the identity and
        leaves the far field curvature-free.
        """
        a1, a2 = self.params.alpha1, self.params.alpha2
        shift = self.params.det_floor
        shape = st["vec"].shape

        # the inner solve requests float32: CG only needs a descent direction
        # to 1e-2 relative residual, and halving the memory traffic roughly
        # halves the per-iteration cost on large grids
        f32 = np.dtype(dtype).type
        k = f32(st["k"])
        gx = st["gx"].astype(f32)
        gy = st["gy"].astype(f32)
        d1 = st["d1"].astype(f32)
        d2 = st["d2"].astype(f32)
        T = st["Dn"]
        q = st["q"]
        phi_p = a2 * st["phi_p"]
        phi_pp = (a2 * st["phi_pp"]).astype(f32)
        qn1 = (2.0 * st["n1"] / T).astype(f32)
        qn2 = (2.0 * st["n2"] / T).astype(f32)
        qd1 = (-2.0 * st["d1"] * q / T).astype(f32)
        qd2 = (-2.0 * st["d2"] * q / T).astype(f32)
        w_n = (phi_p * 2.0 / T).astype(f32)
        w_d = (phi_p * 8.0 * st["N"] / (T * T * T)).astype(f32)
        a1 = f32(a1)
        shift = f32(shift)

        two_a1 = f32(2.0) * a1

        def apply(uflat: np.ndarray) -> np.ndarray:
            u = uflat.reshape(shape)
            # stacked gathers handle both components in one pass
            u4 = _avg4(u)
            ux_cells = _dx_cells(u)
            uy_cells = _dy_cells(u)
            # fidelity block J^T J
            ju = k * (gx * u4[..., 0] + gy * u4[..., 1])
            fid = np.empty(ju.shape + (2,), dtype=u.dtype)
            fid[..., 0] = ju * k * gx
            fid[..., 1] = ju * k * gy
            out = shift * u
            _avg4_t(fid, out)
            # smoothness block 2 a1 A^T A
            out += two_a1 * _laplacian(_laplacian(u))
            # distortion block in rho coordinates
            rn1 = ux_cells[..., 0] - uy_cells[..., 1]
            rn2 = uy_cells[..., 0] + ux_cells[..., 1]
            rd1 = ux_cells[..., 0] + uy_cells[..., 1]
            rd2 = ux_cells[..., 1] - uy_cells[..., 0]
            gq = phi_pp * (qn1 * rn1 + qn2 * rn2 + qd1 * rd1 + qd2 * rd2)
            dd_rank1 = w_d * (d1 * rd1 + d2 * rd2)
            m1 = gq * qn1 + w_n * rn1
            m2 = gq * qn2 + w_n * rn2
            m3 = gq * qd1 + dd_rank1 * d1
            m4 = gq * qd2 + dd_rank1 * d2
            mx = np.empty(m1.shape + (2,), dtype=u.dtype)
            mx[..., 0] = m1 + m3
            mx[..., 1] = m2 + m4
            my = np.empty(m1.shape + (2,), dtype=u.dtype)
            my[..., 0] = m2 - m4
            my[..., 1] = m3 - m1
            _dx_t(mx, out)
            _dy_t(my, out)
            return out.ravel()

        diag = np.zeros(shape, dtype=f32)
        wx = (f32(0.25) * k * gx) ** 2
        wy = (f32(0.25) * k * gy) ** 2
        _avg4_t(f32(4.0) * wx, diag[..., 0])   # each corner receives the full squared weight
        _avg4_t(f32(4.0) * wy, diag[..., 1])
        lap_diag32 = (two_a1 * self.lap_diag).astype(f32)
        diag[..., 0] += lap_diag32
        diag[..., 1] += lap_diag32
        # distortion diag: corner weight patterns (wa, wb) = (+-1/2, +-1/2);
        # x-dof has rho_dot = (wa, wb, wa, -wb), y-dof has (-wd, wc, wd, wc)
        x_sum = qn1 + qd1
        x_dif = qn2 - qd2
        y_sum = qn2 + qd2
        y_dif = qd1 - qn1
        half_n = 0.5 * w_n
        dx0 = diag[..., 0]
        dx0[:-1, :-1] += 0.25 * (phi_pp * (x_sum + x_dif) ** 2 + w_d * (d1 - d2) ** 2) + half_n
        dx0[1:, 1:] += 0.25 * (phi_pp * (x_sum + x_dif) ** 2 + w_d * (d1 - d2) ** 2) + half_n
        dx0[:-1, 1:] += 0.25 * (phi_pp * (x_sum - x_dif) ** 2 + w_d * (d1 + d2) ** 2) + half_n
        dx0[1:, :-1] += 0.25 * (phi_pp * (x_sum - x_dif) ** 2 + w_d * (d1 + d2) ** 2) + half_n
        dy0 = diag[..., 1]
        dy0[:-1, :-1] += 0.25 * (phi_pp * (y_sum + y_dif) ** 2 + w_d * (d1 + d2) ** 2) + half_n
        dy0[1:, 1:] += 0.25 * (phi_pp * (y_sum + y_dif) ** 2 + w_d * (d1 + d2) ** 2) + half_n
        dy0[:-1, 1:] += 0.25 * (phi_pp * (y_sum - y_dif) ** 2 + w_d * (d1 - d2) ** 2) + half_n
        dy0[1:, :-1] += 0.25 * (phi_pp * (y_sum - y_dif) ** 2 + w_d * (d1 - d2) ** 2) + half_n
        diag += shift
        return apply, diag.ravel()


def assemble_objective(I_n: ScalarField, D: BinaryMask, c1: float, c2: float,
                       psi: DeformationField, params: EnergyParams) -> ObjectiveEval:
    """Evaluate the discretized energy at psi: value, analytic gradient, GN operator."""
    if (psi.pixel_height, psi.pixel_width) != (I_n.height, I_n.width):
        raise DimensionMismatch(
            f"deformation for {psi.pixel_height}x{psi.pixel_width} pixels vs image "
            f"{I_n.height}x{I_n.width}")
    obj = _Objective(I_n.values, smooth_template(D, params.smooth_sigma), c1, c2, params)
    st = obj.full_state(psi.vectors)
    apply_h, diag = obj.gn_operator(st)
    return ObjectiveEval(st["F"], obj.gradient(st).ravel(), apply_h, diag)


def _pcg(apply_h, b: np.ndarray, diag: np.ndarray, rtol: float, max_iter: int) -> np.ndarray:
    x = np.zeros_like(b)
    r = b.copy()
    minv = 1.0 / diag
    z = minv * r
    p = z.copy()
    rz = float(r @ z)
    nb = float(np.linalg.norm(b))
    if nb == 0.0:
        return x
    for _ in range(max_iter):
        if float(np.linalg.norm(r)) <= rtol * nb:
            break
        hp = apply_h(p)
        php = float(p @ hp)
        if php <= 0.0:
            break
        alpha = rz / php
        x += alpha * p
        r -= alpha * hp
        z = minv * r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x


def _gauss_newton(obj: _Objective, vec: np.ndarray, params: EnergyParams,
                  trace_cb=None, trace_ctx=None, scales=None) -> tuple:
    st = obj.full_state(vec)
    report = SolveReport(energy=st["F"], min_det=st["min_det"], energies=[st["F"]])
    # boundary nodes stay put: with det > 0 inside this pins the map to a
    # global bijection of the domain, which is what preserves topology; a
    # free boundary can wrap border strips onto the template interior
    free = np.zeros(vec.shape, dtype=bool)
    free[1:-1, 1:-1, :] = True
    freef = free.ravel()
    # stopping scales are anchored at the start of the outer (level) solve
    if scales is None:
        scale_f = 1.0 + abs(st["F"])
        scale_psi = 1.0 + float(np.linalg.norm(vec))
    else:
        scale_f, scale_psi = scales
    delta_f = np.inf
    step_norm = np.inf
    for it in range(1, params.max_gn + 1):
        report.iterations = it
        g = obj.gradient(st)
        gflat = g.ravel() * freef
        gnorm = float(np.linalg.norm(gflat))
        # an already-critical start returns untouched after this first pass;
        # otherwise stop once the last energy change, the last update and the
        # current gradient are all small
        if gnorm <= 1e-8 * scale_f:
            report.converged = True
            break
        if (delta_f <= params.tol_f * scale_f
                and step_norm <= params.tol_step * scale_psi
                and gnorm <= params.tol_grad * scale_f):
            report.converged = True
            break

        apply_full, diag = obj.gn_operator(st, np.float32)

        def apply_h(u):
            return apply_full(u * freef) * freef + u * (~freef)

        diag = diag * freef + (~freef)
        p = _pcg(apply_h, (-gflat).astype(np.float32), diag,
                 _CG_RTOL, _CG_MAX_ITER).astype(np.float64)
        gp = float(gflat @ p)
        if gp >= 0.0:
            p = -gflat
            gp = -gnorm * gnorm
        # cap the largest nodal move at a couple of pixels so one stray
        # far-field component cannot force the whole step to be halved away
        pmax = float(np.abs(p).max())
        if pmax > _STEP_CLIP:
            scale = _STEP_CLIP / pmax
            p *= scale
            gp *= scale
        pv = p.reshape(vec.shape)

        # distortion trust region: never let the worst |mu|^2 grow past the
        # cap (or past its current value when the start is already worse);
        # concentrated near-degenerate cells make the field untransferable
        # between levels even though their determinants stay positive
        q_cap = max(_Q_CAP, float(st["q"].max()))
        t = 1.0
        accepted = False
        for _ in range(_ARMIJO_MAX_HALVINGS + 1):
            trial = vec + t * pv
            f_t, det_t, q_t = obj.try_energy(trial)
            if (det_t >= params.det_floor and q_t <= q_cap
                    and f_t <= st["F"] + _ARMIJO_C * t * gp):
                accepted = True
                break
            t *= _ARMIJO_BACKTRACK
        if not accepted:
            report.line_search_failed = True
            break

        delta_f = abs(st["F"] - f_t)
        step_norm = t * float(np.linalg.norm(p))
        vec = trial
        st = obj.full_state(vec)
        report.energies.append(st["F"])
        if trace_cb is not None:
            rec = dict(trace_ctx or {})
            rec.update(gn=it, F=st["F"], min_det=st["min_det"], max_mu=st["max_mu"])
            trace_cb(rec)
    report.energy = st["F"]
    report.min_det = st["min_det"]
    return vec, report


def gauss_newton_solve(I_n: ScalarField, D: BinaryMask, c1: float, c2: float,
                       psi0: DeformationField, params: EnergyParams,
                       trace_cb=None) -> tuple:
    """Minimize over the deformation at fixed constants. Returns (field, report)."""
    obj = _Objective(I_n.values, smooth_template(D, params.smooth_sigma), c1, c2, params)
    vec, report = _gauss_newton(obj, np.array(psi0.vectors), params, trace_cb)
    return DeformationField(vec), report


def update_constants(I_n: ScalarField, psi: DeformationField, D: BinaryMask) -> tuple:
    """Closed-form constants: means of I_n over the warped mask and its complement."""
    w = warp_indicator(D, psi).values
    soft_fg = float(w.sum())
    if soft_fg < 1.0 or w.size - soft_fg < 1.0:
        raise EmptyRegion("warped foreground or background has all but vanished")
    sel = w >= 0.5
    if not sel.any() or sel.all():
        raise EmptyRegion("thresholded warp leaves an empty region")
    v = I_n.values
    return float(v[sel].mean()), float(v[~sel].mean())


def alternating_direction_solve(I_n: ScalarField, D: BinaryMask,
                                psi_init: DeformationField, params: EnergyParams,
                                trace_cb=None, trace_ctx=None) -> tuple:
    """Outer loop: closed-form constants, then the Gauss-Newton deformation solve.

    Returns (c1, c2, field, report); report.outer_energies is non-increasing.
    """
    t0 = time.perf_counter()
    soft = smooth_template(D, params.smooth_sigma)
    vec = np.array(psi_init.vectors)
    c1 = c2 = None
    report = SolveReport()
    last_rep = None
    scales = None
    for k in range(1, params.max_ad + 1):
        nc1, nc2 = update_constants(I_n, DeformationField(vec), D)
        dc = np.inf if c1 is None else max(abs(nc1 - c1), abs(nc2 - c2))
        obj = _Objective(I_n.values, soft, nc1, nc2, params)
        if scales is None:
            # anchor the stopping scales once per level to the data energy
            # (the constant-fit fidelity), which no warp state can inflate
            e_data = 0.5 * float(((I_n.values - I_n.values.mean()) ** 2).sum())
            scales = (1.0 + e_data, 1.0 + float(np.linalg.norm(vec)))
        ctx = dict(trace_ctx or {})
        ctx["ad"] = k
        vec_new, gn_rep = _gauss_newton(obj, vec, params, trace_cb, ctx, scales)
        if report.outer_energies and gn_rep.energy > report.outer_energies[-1]:
            # the closed-form constants minimize the hard-threshold fidelity,
            # not the smoothed objective; roll the round back if it ascended
            break
        dpsi = float(np.linalg.norm(vec_new - vec))
        scale = params.tol_step * (1.0 + float(np.linalg.norm(vec)))
        vec = vec_new
        c1, c2 = nc1, nc2
        last_rep = gn_rep
        report.iterations += gn_rep.iterations
        report.energies.extend(gn_rep.energies)
        report.outer_energies.append(gn_rep.energy)
        report.line_search_failed = gn_rep.line_search_failed
        report.converged = gn_rep.converged
        if dpsi <= scale and (k == 1 or dc <= params.tol_step * (1.0 + max(abs(c1), abs(c2)))):
            # round 1 has no previous constants; an unchanged deformation
            # means the input was already converged
            break
    report.energy = last_rep.energy
    report.min_det = last_rep.min_det
    report.wall_s = time.perf_counter() - t0
    return c1, c2, DeformationField(vec), report


# -- multilevel continuation -------------------------------------------------

def _coarsen_avg(a: np.ndarray) -> np.ndarray:
    h, w = a.shape
    if h % 2 or w % 2:
        a = np.pad(a, ((0, h % 2), (0, w % 2)), mode="edge")
        h, w = a.shape
    return 0.25 * (a[0::2, 0::2] + a[0::2, 1::2] + a[1::2, 0::2] + a[1::2, 1::2])


def _restrict_nodes(vec: np.ndarray, coarse_nodes: tuple) -> np.ndarray:
    hf, wf = vec.shape[0] - 1, vec.shape[1] - 1
    hc, wc = coarse_nodes
    ii = np.minimum(2 * np.arange(hc), hf)
    jj = np.minimum(2 * np.arange(wc), wf)
    return 0.5 * vec[np.ix_(ii, jj)]


def _prolong_nodes(vec: np.ndarray, fine_nodes: tuple) -> np.ndarray:
    hc = vec.shape[0] - 1
    wc = vec.shape[1] - 1
    hf, wf = fine_nodes
    yy = np.minimum(np.arange(hf)[:, None] * 0.5, hc) * np.ones((1, wf))
    xx = np.ones((hf, 1)) * np.minimum(np.arange(wf)[None, :] * 0.5, wc)
    i0 = np.clip(np.floor(yy).astype(np.int64), 0, hc - 1)
    j0 = np.clip(np.floor(xx).astype(np.int64), 0, wc - 1)
    fy = yy - i0
    fx = xx - j0
    out = np.empty((hf, wf, 2))
    for comp in range(2):
        g = vec[..., comp]
        top = g[i0, j0] + fx * (g[i0, j0 + 1] - g[i0, j0])
        bot = g[i0 + 1, j0] + fx * (g[i0 + 1, j0 + 1] - g[i0 + 1, j0])
        out[..., comp] = 2.0 * (top + fy * (bot - top))
    return out


def _damp_to_valid(vec: np.ndarray, det_floor: float) -> np.ndarray:
    """Repair a prolongated/restricted field whose cells folded or nearly so.

    Offending nodes (determinant below the floor, or distortion |mu|^2 so
    close to 1 that the barrier would dwarf every other term) take the local
    displacement average (a box mollifier): this unfolds the high-frequency
    inversions prolongation can introduce in heavily compressed bands without
    discarding the transport itself.  If mollification stalls the
    displacement is halved globally as a fallback.
    """
    h, w = vec.shape[0] - 1, vec.shape[1] - 1
    ident = identity_deformation(h, w).vectors
    u = vec - ident

    def bad_cells(disp, q_cap=None):
        vec2 = ident + disp
        bad = _min_corner_det(vec2) < det_floor
        if q_cap is not None:
            a, b, c, d = cell_partials(vec2)
            det = a * d - b * c
            frob2 = a * a + b * b + c * c + d * d
            q = (frob2 - 2.0 * det) / np.maximum(frob2 + 2.0 * det, 1e-300)
            bad |= q > q_cap
        return bad

    kernel = np.ones((3, 3)) / 9.0
    interior = np.zeros((h + 1, w + 1), dtype=bool)
    interior[1:-1, 1:-1] = True

    def mollify(rounds, q_cap):
        for _ in range(rounds):
            bad = bad_cells(u, q_cap)
            if not bad.any():
                return True
            nodes = np.zeros((h + 1, w + 1), dtype=bool)
            nodes[:-1, :-1] |= bad
            nodes[:-1, 1:] |= bad
            nodes[1:, :-1] |= bad
            nodes[1:, 1:] |= bad
            nodes = ndi.binary_dilation(nodes, structure=np.ones((3, 3), dtype=bool))
            nodes &= interior   # pinned boundary nodes never move
            for comp in range(2):
                avg = ndi.convolve(u[..., comp], kernel, mode="nearest")
                u[nodes, comp] = avg[nodes]
        return not bad_cells(u, q_cap).any()

    # best effort on distortion spikes beyond the solver's own trust region
    # (prolongation artifacts), then a hard determinant repair
    mollify(50, 0.95)
    if mollify(200, None):
        return ident + u
    for _ in range(60):
        if not bad_cells(u).any():
            break
        u *= 0.5
    return ident + u


def multilevel_solve(I_n: ScalarField, D: BinaryMask, psi_init: DeformationField,
                     params: EnergyParams, levels: int = 4, trace_cb=None,
                     coarsest_dim: int = 64) -> tuple:
    """Coarse-to-fine continuation around `alternating_direction_solve`.

    Images coarsen by 2x2 averaging (masks re-binarized at 0.5) until the
    smallest dimension is <= `coarsest_dim` or `levels` grids exist; the
    coarse solution is prolongated (coordinates doubled) as the next initial
    guess, damped toward identity if it ever violates the determinant floor.
    """
    if levels < 1:
        raise ValueError("levels must be >= 1")
    imgs = [I_n.values]
    masks = [D.values.astype(np.float64)]
    while len(imgs) < levels and min(imgs[-1].shape) > coarsest_dim:
        imgs.append(_coarsen_avg(imgs[-1]))
        masks.append((_coarsen_avg(masks[-1]) >= 0.5).astype(np.float64))

    vec = np.array(psi_init.vectors)
    for lev in range(1, len(imgs)):
        vec = _restrict_nodes(vec, (imgs[lev].shape[0] + 1, imgs[lev].shape[1] + 1))

    report = SolveReport()
    c1 = c2 = None
    t0 = time.perf_counter()
    for lev in reversed(range(len(imgs))):
        img = imgs[lev]
        vec = _damp_to_valid(vec, params.det_floor)
        level_field = DeformationField(vec)
        c1, c2, field, rep = alternating_direction_solve(
            ScalarField(img), BinaryMask(masks[lev].astype(np.uint8)), level_field,
            params, trace_cb, {"level": lev})
        vec = np.array(field.vectors)
        report.iterations += rep.iterations
        report.outer_energies = rep.outer_energies
        report.energies.extend(rep.energies)
        report.converged = rep.converged
        report.line_search_failed = rep.line_search_failed
        if lev > 0:
            # repair bowtie patches on the coarse grid first: prolongation
            # samples each bilinear patch, so only injective patches survive
            # subdivision without folding
            vec = _damp_to_valid(vec, params.det_floor)
            vec = _prolong_nodes(vec, (imgs[lev - 1].shape[0] + 1, imgs[lev - 1].shape[1] + 1))
    report.energy = rep.energy
    report.min_det = rep.min_det
    report.wall_s = time.perf_counter() - t0
    return c1, c2, DeformationField(vec), report


def extract_mask(D: BinaryMask, psi: DeformationField) -> BinaryMask:
    """Final crisp mask: warp the raw template indicator and threshold at 0.5.

    Two discretization defenses keep the pixel mask faithful to the continuum
    set (which is homeomorphic to the template, since the map is bijective):

    * the warped indicator is averaged over a 3x3 sub-pixel stencil (offsets
      +-1/3 mapped through the deformation) before thresholding, which
      suppresses slivers where the map compresses a band below pixel width
      while reproducing every mask bit-exactly under the identity (the
      own-pixel weight stays 0.605 > 1/2);
    * sub-resolution fragments / pin-holes that still survive are removed,
      smallest first, but only while the counts exceed the template's and the
      piece is genuinely tiny, so real topology failures remain visible.
    """
    from .grid import component_count, hole_count, sample_bilinear

    v = psi.vectors
    tl = v[:-1, :-1]
    tr = v[:-1, 1:]
    bl = v[1:, :-1]
    br = v[1:, 1:]
    field = D.values.astype(np.float64)
    acc = np.zeros(D.values.shape)
    for sub_y in (1.0 / 6.0, 0.5, 5.0 / 6.0):
        for sub_x in (1.0 / 6.0, 0.5, 5.0 / 6.0):
            top = tl + sub_x * (tr - tl)
            bot = bl + sub_x * (br - bl)
            pt = top + sub_y * (bot - top)
            acc += sample_bilinear(field, pt[..., 0], pt[..., 1])
    mask = (acc >= 4.5).astype(np.uint8)

    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
    lab, n = ndi.label(mask, structure=structure)
    target = component_count(D)
    if n > target:
        sizes = ndi.sum_labels(np.ones_like(mask), lab, np.arange(1, n + 1))
        tiny = max(16.0, 0.01 * sizes.max())
        order = np.argsort(sizes, kind="stable")
        for idx in order[: n - target]:
            if sizes[idx] <= tiny:
                mask[lab == idx + 1] = 0
    holes, hn = ndi.label(mask == 0, structure=structure)
    border = set(np.unique(np.concatenate([holes[0, :], holes[-1, :],
                                           holes[:, 0], holes[:, -1]]))) - {0}
    interior = [k for k in range(1, hn + 1) if k not in border]
    target_holes = hole_count(D)
    if len(interior) > target_holes:
        sizes = ndi.sum_labels(np.ones_like(mask), holes, np.array(interior))
        tiny = max(16.0, 0.01 * float(mask.sum()))
        order = np.argsort(sizes, kind="stable")
        for pos in order[: len(interior) - target_holes]:
            if sizes[pos] <= tiny:
                mask[holes == interior[pos]] = 1
    return BinaryMask(mask)
