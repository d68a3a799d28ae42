import json
import struct

import numpy as np
import pytest

from qis.clickmap import Click
from qis.errors import (DegenerateTemplate, DimensionMismatch, NothingToUndo,
                        UnknownArtifact)
from qis.grid import BinaryMask, ScalarField
from qis.imageio import load_mask
from qis.qcmath import MU_DUMP_MAGIC
from qis.session import (apply_step, dice, export, init_session, topology,
                         undo_step)


def test_init_validations():
    img = ScalarField(np.zeros((8, 8)))
    with pytest.raises(DimensionMismatch):
        init_session(img, BinaryMask(np.zeros((9, 8), np.uint8)))
    with pytest.raises(DegenerateTemplate):
        init_session(img, BinaryMask(np.zeros((8, 8), np.uint8)))
    with pytest.raises(DegenerateTemplate):
        init_session(img, BinaryMask(np.ones((8, 8), np.uint8)))


def test_step0_segments_bright_square(blob_session):
    scene, state = blob_session
    rec = state.record
    assert rec.step == 0 and state.current == 0
    a_mask = BinaryMask(scene["a"].astype(np.uint8))
    assert dice(rec.mask_n, a_mask) >= 0.95
    # dim square B stays out at step 0
    assert (rec.mask_n.values & scene["b"]).sum() <= 0.1 * scene["b"].sum()
    assert topology(rec.mask_n) == topology(state.template)


def test_positive_click_includes_region(blob_session):
    scene, state = blob_session
    x, y = scene["pos_click"]
    state1, warnings = apply_step(state, [Click(x, y, "pos", 1)])
    assert warnings == []
    rec = state1.record
    assert rec.step == 1 and state1.current == 1
    assert dice(rec.mask_n, scene["truth"]) >= 0.9
    # effective interaction: the click map gained mask coverage
    cm = rec.click_map.mask.values
    assert (rec.mask_n.values & cm).sum() > 0
    assert topology(rec.mask_n) == topology(state.template)
    # image composition is exact and unclipped
    diff = rec.image_n.values - state.record.image_n.values
    assert np.array_equal(diff, rec.r * cm)


def test_ineffective_positive_click(blob_session):
    scene, state = blob_session
    # a positive click inside the current mask adds nothing
    state1, warnings = apply_step(state, [Click(40, 40, "pos", 1)])
    assert warnings == ["ineffective_click"]
    assert state1 is state


def test_undo_and_redo_semantics(blob_session):
    scene, state = blob_session
    x, y = scene["pos_click"]
    state1, _ = apply_step(state, [Click(x, y, "pos", 1)])
    back = undo_step(state1)
    assert back.current == 0
    assert len(back.steps) == 2          # redo history retained
    assert np.array_equal(back.record.mask_n.values, state.record.mask_n.values)
    with pytest.raises(NothingToUndo):
        undo_step(back)
    # a new apply after undo truncates the redo tail deterministically
    redo, _ = apply_step(back, [Click(x, y, "pos", 1)])
    assert len(redo.steps) == 2
    assert np.array_equal(redo.record.mask_n.values, state1.record.mask_n.values)


def test_replay_determinism(blob_session):
    scene, _ = blob_session
    x, y = scene["pos_click"]
    runs = []
    for _ in range(2):
        st = init_session(scene["image"], scene["template"])
        st, _ = apply_step(st, [Click(x, y, "pos", 1)])
        runs.append(st)
    assert np.array_equal(runs[0].record.mask_n.values, runs[1].record.mask_n.values)
    assert np.array_equal(runs[0].record.phi_n.vectors, runs[1].record.phi_n.vectors)
    assert export(runs[0], "mask") == export(runs[1], "mask")


def test_exports(blob_session):
    scene, state = blob_session
    png = export(state, "mask")
    assert np.array_equal(load_mask(png).values, state.record.mask_n.values)

    blob = export(state, "deformation")
    assert blob[:6] == MU_DUMP_MAGIC
    h, w = struct.unpack("<II", blob[8:16])
    assert (h, w) == (97, 97)

    overlay = export(state, "deformation_overlay")
    assert overlay[:8] == b"\x89PNG\r\n\x1a\n"

    metrics = json.loads(export(state, "metrics", scene["truth"]))
    assert metrics[0]["step"] == 0
    assert 0.0 <= metrics[0]["dice"] <= 1.0
    assert metrics[0]["r"] is None

    trace = export(state, "trace").decode().strip().splitlines()
    assert all(json.loads(line)["step"] == 0 for line in trace)
    assert any("min_det" in json.loads(line) for line in trace)

    with pytest.raises(UnknownArtifact):
        export(state, "hologram")


def test_history_cap(blob_session, monkeypatch):
    import qis.session as S

    scene, state = blob_session
    x, y = scene["pos_click"]
    monkeypatch.setattr(S, "MAX_STEPS", 0)
    with pytest.raises(S.HistoryLimit):
        apply_step(state, [Click(x, y, "pos", 1)])


def test_mixed_polarity_splits_negative_first(blob_session, monkeypatch):
    import qis.session as S

    scene, state = blob_session
    seen = []
    real = S.fidelity.estimate_region_stats

    def spy(I_prev, fg, cmap):
        seen.append(cmap.polarity)
        return real(I_prev, fg, cmap)

    monkeypatch.setattr(S.fidelity, "estimate_region_stats", spy)
    x, y = scene["pos_click"]
    # the positive click targets B, the negative click is ineffective (outside
    # the mask), so the state advances by the positive step only
    state1, warns = apply_step(state, [Click(x, y, "pos", 1), Click(2, 2, "neg", 1)])
    assert seen[0] == "neg"
    assert "ineffective_click" in warns
    assert state1.record.step == 1


def test_dice_identities(blob_session):
    scene, state = blob_session
    m = state.record.mask_n
    assert dice(m, m) == 1.0
    empty = BinaryMask(np.zeros_like(m.values))
    inverted = BinaryMask(1 - m.values)
    assert dice(m, inverted) == 0.0
    assert dice(empty, empty) == 1.0
