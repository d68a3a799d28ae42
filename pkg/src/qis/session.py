"""The interactive loop: initial solve, per-click image shifts, warm-started
refinement, undo and artifact export.

Each step builds the click map on the current image I^{n-1}, picks the click
weight r from the admissible interval, forms I^n = I^{n-1} + r * M^n (stored
unclipped, so the shifts compose exactly) and re-solves the deformation warm
started from the previous one.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from . import fidelity
from .clickmap import build_click_map, component_decomposition, kmeans_labels
from .errors import (DegenerateTemplate, DimensionMismatch, EmptyRegion, HistoryLimit,
                     NothingToUndo, UnknownArtifact)
from .grid import (BinaryMask, DeformationField, ScalarField, component_count,
                   hole_count, identity_deformation, rescale_intensity)
from .imageio import mask_to_png_bytes, render_grid_overlay
from .qcmath import deformation_dump_bytes, min_cell_det
from .solver import EnergyParams, extract_mask, multilevel_solve

MAX_STEPS = 64


@dataclass(frozen=True)
class StepRecord:
    step: int
    clicks: tuple
    click_map: object          # ClickMap or None for step 0
    r: float                   # nan for step 0
    image_n: ScalarField
    phi_n: DeformationField
    mask_n: BinaryMask
    c1: float
    c2: float
    energy: float
    min_det: float
    time_ms: float
    warnings: tuple = ()
    trace: tuple = ()


@dataclass(frozen=True)
class SessionState:
    image0: ScalarField
    template: BinaryMask
    params: EnergyParams
    kmeans_k: int
    levels: int
    steps: tuple
    current: int

    @property
    def record(self) -> StepRecord:
        return self.steps[self.current]


def dice(a: BinaryMask, b: BinaryMask) -> float:
    inter = int((a.values & b.values).sum())
    total = a.area() + b.area()
    if total == 0:
        return 1.0
    return 2.0 * inter / total


def topology(mask: BinaryMask) -> tuple:
    return component_count(mask), hole_count(mask)


def init_session(image: ScalarField, template: BinaryMask,
                 params: EnergyParams = EnergyParams(), kmeans_k: int = 3,
                 levels: int = 4) -> SessionState:
    """Rescale the image, solve from the identity and record step 0."""
    if (image.height, image.width) != (template.height, template.width):
        raise DimensionMismatch(
            f"image {image.height}x{image.width} vs template "
            f"{template.height}x{template.width}")
    area = template.area()
    if area == 0 or area == template.height * template.width:
        raise DegenerateTemplate("template must be nonempty and not cover everything")
    img0 = rescale_intensity(image)
    trace = []
    t0 = time.perf_counter()
    ident = identity_deformation(image.height, image.width)
    c1, c2, phi, rep = multilevel_solve(img0, template, ident, params, levels,
                                        trace.append)
    ms = (time.perf_counter() - t0) * 1e3
    rec = StepRecord(0, (), None, float("nan"), img0, phi, extract_mask(template, phi),
                     c1, c2, rep.energy, min_cell_det(phi), ms, (), tuple(trace))
    return SessionState(img0, template, params, kmeans_k, levels, (rec,), 0)


def apply_step(state: SessionState, clicks) -> tuple:
    """One interaction step.  Returns (new_state, warnings).

    A mixed-polarity batch is split into two sequential steps, negative
    first, since each step carries a single click weight.  An ineffective
    click (one of the three analysis regions comes out empty) leaves the
    state unchanged and reports the warning instead of raising.
    """
    if not clicks:
        raise ValueError("a step needs at least one click")
    polarities = {c.polarity for c in clicks}
    if len(polarities) > 1:
        neg = [c for c in clicks if c.polarity == "neg"]
        pos = [c for c in clicks if c.polarity == "pos"]
        state, warn_a = apply_step(state, neg)
        state, warn_b = apply_step(state, pos)
        return state, warn_a + warn_b
    prev = state.record
    if prev.step + 1 > MAX_STEPS:
        raise HistoryLimit(f"session limited to {MAX_STEPS} interaction steps")
    t0 = time.perf_counter()
    clusters = kmeans_labels(prev.image_n, state.kmeans_k)
    components = component_decomposition(clusters)
    cmap = build_click_map(clicks, components)
    try:
        stats = fidelity.estimate_region_stats(prev.image_n, prev.mask_n, cmap)
    except EmptyRegion:
        return state, ["ineffective_click"]
    r, warn = fidelity.choose_r(stats, cmap.polarity)
    warnings = [warn] if warn else []
    image_n = ScalarField(prev.image_n.values + r * cmap.mask.values)

    trace = []
    c1, c2, phi, rep = multilevel_solve(image_n, state.template, prev.phi_n,
                                        state.params, state.levels, trace.append)
    ms = (time.perf_counter() - t0) * 1e3
    rec = StepRecord(prev.step + 1, tuple(clicks), cmap, r, image_n, phi,
                     extract_mask(state.template, phi), c1, c2, rep.energy,
                     min_cell_det(phi), ms, tuple(warnings), tuple(trace))
    steps = state.steps[: state.current + 1] + (rec,)
    new_state = SessionState(state.image0, state.template, state.params,
                             state.kmeans_k, state.levels, steps, state.current + 1)
    return new_state, warnings


def undo_step(state: SessionState) -> SessionState:
    """Serve the previous record; redo history survives until the next apply."""
    if state.current == 0:
        raise NothingToUndo("already at step 0")
    return SessionState(state.image0, state.template, state.params, state.kmeans_k,
                        state.levels, state.steps, state.current - 1)


def step_summary(rec: StepRecord, truth: BinaryMask = None) -> dict:
    out = {
        "step": rec.step,
        "r": None if np.isnan(rec.r) else rec.r,
        "energy": rec.energy,
        "min_det": rec.min_det,
        "time_ms": rec.time_ms,
        "warnings": list(rec.warnings),
    }
    if truth is not None:
        out["dice"] = dice(rec.mask_n, truth)
    return out


def export(state: SessionState, what: str, ground_truth: BinaryMask = None) -> bytes:
    """Serialize one artifact of the current step."""
    rec = state.record
    if what == "mask":
        return mask_to_png_bytes(rec.mask_n)
    if what == "deformation":
        return deformation_dump_bytes(rec.phi_n)
    if what == "deformation_overlay":
        return render_grid_overlay(rec.phi_n)
    if what == "trace":
        lines = []
        for r in state.steps[: state.current + 1]:
            for entry in r.trace:
                row = {"step": r.step}
                row.update(entry)
                lines.append(json.dumps(row))
        return ("\n".join(lines) + "\n").encode()
    if what == "metrics":
        rows = [step_summary(r, ground_truth) for r in state.steps[: state.current + 1]]
        return json.dumps(rows, indent=2).encode()
    raise UnknownArtifact(f"no artifact named {what!r}")
