"""Session-oriented HTTP API under /v1.

One in-memory store holds the sessions; per-session mutations are serialized
(submitting a step while another is running answers 409), reads serve the
immutable records.  Error bodies are always {"code": ..., "message": ...}.
"""

from __future__ import annotations

import json
import os
import pickle
import secrets
import threading
import time
from contextlib import asynccontextmanager
from dataclasses import dataclass, field

from fastapi import FastAPI, Request, Response
from fastapi.middleware.cors import CORSMiddleware

from . import session as qsession
from .clickmap import parse_step_object
from .errors import (DegenerateTemplate, DimensionMismatch, EmptyRegion, HistoryLimit,
                     NothingToUndo, OutOfBounds, QisError)
from .grid import ScalarField
from .imageio import load_image, load_mask, mask_to_png_bytes, rasterize_polygon
from .solver import EnergyParams

MAX_PIXELS = 4096 * 4096


def _env_int(name: str, default: int) -> int:
    try:
        return int(os.environ.get(name, default))
    except ValueError:
        return default


@dataclass
class SessionHandle:
    id: str
    created_at: float
    ttl: float
    state: qsession.SessionState
    lock: threading.Lock = field(default_factory=threading.Lock)

    @property
    def expired(self) -> bool:
        return time.time() - self.created_at > self.ttl


class SessionStore:
    def __init__(self, max_sessions: int = 64, ttl_s: float = 3600.0):
        self.max_sessions = max_sessions
        self.ttl_s = ttl_s
        self._sessions: dict = {}
        self._lock = threading.Lock()

    def purge(self) -> None:
        with self._lock:
            for sid in [s for s, h in self._sessions.items() if h.expired]:
                del self._sessions[sid]

    def create(self, state: qsession.SessionState) -> SessionHandle:
        self.purge()
        with self._lock:
            if len(self._sessions) >= self.max_sessions:
                raise QisError("session capacity reached")
            handle = SessionHandle(secrets.token_urlsafe(16), time.time(), self.ttl_s, state)
            self._sessions[handle.id] = handle
            return handle

    def get(self, sid: str):
        self.purge()
        return self._sessions.get(sid)

    def delete(self, sid: str) -> bool:
        with self._lock:
            return self._sessions.pop(sid, None) is not None

    def snapshot(self, path: str) -> None:
        with self._lock:
            blob = {sid: (h.created_at, h.ttl, h.state) for sid, h in self._sessions.items()}
        with open(path, "wb") as f:
            pickle.dump(blob, f)

    def restore(self, path: str) -> None:
        with open(path, "rb") as f:
            blob = pickle.load(f)
        with self._lock:
            for sid, (created, ttl, state) in blob.items():
                self._sessions[sid] = SessionHandle(sid, created, ttl, state)


def _error(status: int, code: str, message: str) -> Response:
    return Response(json.dumps({"code": code, "message": message}), status_code=status,
                    media_type="application/json")


def _summary(rec, sid: str) -> dict:
    out = qsession.step_summary(rec)
    out["mask_url"] = f"/v1/sessions/{sid}/mask?step={rec.step}"
    return out


def create_app(store: SessionStore = None, snapshot_path: str = None) -> FastAPI:
    store = store or SessionStore(_env_int("QIS_MAX_SESSIONS", 64),
                                  _env_int("QIS_SESSION_TTL_S", 3600))
    snapshot_path = snapshot_path or os.environ.get("QIS_SNAPSHOT_PATH")

    @asynccontextmanager
    async def lifespan(app):
        if snapshot_path and os.path.exists(snapshot_path):
            try:
                store.restore(snapshot_path)
            except Exception:
                pass
        yield
        if snapshot_path:
            store.snapshot(snapshot_path)

    app = FastAPI(lifespan=lifespan)
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"])
    app.state.store = store

    @app.post("/v1/sessions", status_code=201)
    async def create_session(request: Request):
        form = await request.form()
        if "image" not in form:
            return _error(400, "missing_image", "multipart field 'image' is required")
        try:
            image = load_image(await form["image"].read())
        except Exception as exc:
            return _error(400, "bad_image", f"could not decode image: {exc}")
        if image.height * image.width > MAX_PIXELS:
            return _error(413, "image_too_large",
                          f"image exceeds {MAX_PIXELS} pixels")
        params_raw = form.get("params")
        try:
            params, kmeans_k, levels = _parse_params(params_raw)
        except Exception as exc:
            return _error(400, "bad_params", str(exc))
        try:
            template = await _parse_template(form, image)
        except Exception as exc:
            return _error(400, "bad_template", str(exc))
        if template is None:
            return _error(400, "missing_template",
                          "provide a 'template' mask file or a 'polygon' JSON field")
        if (template.height, template.width) != (image.height, image.width):
            return _error(400, "dimension_mismatch",
                          "template dimensions do not match the image")
        try:
            state = qsession.init_session(image, template, params, kmeans_k, levels)
        except DegenerateTemplate as exc:
            return _error(422, "degenerate_template", str(exc))
        except DimensionMismatch as exc:
            return _error(400, "dimension_mismatch", str(exc))
        handle = store.create(state)
        return {"session_id": handle.id, "step0": _summary(state.record, handle.id)}

    @app.post("/v1/sessions/{sid}/clicks")
    def post_clicks(sid: str, body: dict):
        handle = store.get(sid)
        if handle is None:
            return _error(404, "unknown_session", "no such session")
        if not handle.lock.acquire(blocking=False):
            return _error(409, "step_in_flight", "another step is being processed")
        try:
            state = handle.state
            bounds = (state.image0.width, state.image0.height)
            try:
                clicks = parse_step_object(body, bounds)
            except OutOfBounds as exc:
                return _error(400, "out_of_bounds", str(exc))
            except (ValueError, KeyError, TypeError) as exc:
                return _error(400, "bad_step", str(exc))
            try:
                new_state, warnings = qsession.apply_step(state, clicks)
            except HistoryLimit as exc:
                return _error(409, "history_limit", str(exc))
            except EmptyRegion as exc:
                return _error(400, "empty_region", str(exc))
            handle.state = new_state
            out = _summary(new_state.record, sid)
            out["warnings"] = warnings
            return out
        finally:
            handle.lock.release()

    @app.get("/v1/sessions/{sid}/mask")
    def get_mask(sid: str, step: int = None):
        handle = store.get(sid)
        if handle is None:
            return _error(404, "unknown_session", "no such session")
        state = handle.state
        idx = state.current if step is None else step
        if not (0 <= idx < len(state.steps)):
            return _error(400, "bad_step_index", f"step must be in [0, {len(state.steps) - 1}]")
        return Response(mask_to_png_bytes(state.steps[idx].mask_n), media_type="image/png")

    @app.get("/v1/sessions/{sid}/state")
    def get_state(sid: str):
        handle = store.get(sid)
        if handle is None:
            return _error(404, "unknown_session", "no such session")
        state = handle.state
        return {
            "session_id": sid,
            "current": state.current,
            "steps": [_summary(r, sid) for r in state.steps[: state.current + 1]],
        }

    @app.post("/v1/sessions/{sid}/undo")
    def post_undo(sid: str):
        handle = store.get(sid)
        if handle is None:
            return _error(404, "unknown_session", "no such session")
        if not handle.lock.acquire(blocking=False):
            return _error(409, "step_in_flight", "another step is being processed")
        try:
            try:
                handle.state = qsession.undo_step(handle.state)
            except NothingToUndo as exc:
                return _error(400, "nothing_to_undo", str(exc))
            return {"current": handle.state.current,
                    "step": _summary(handle.state.record, sid)}
        finally:
            handle.lock.release()

    @app.delete("/v1/sessions/{sid}", status_code=204)
    def delete_session(sid: str):
        if not store.delete(sid):
            return _error(404, "unknown_session", "no such session")
        return Response(status_code=204)

    return app


def _parse_params(raw):
    kwargs = {}
    kmeans_k = 3
    levels = 4
    if raw:
        data = json.loads(raw)
        if not isinstance(data, dict):
            raise ValueError("params must be a JSON object")
        kmeans_k = int(data.pop("kmeans_k", 3))
        levels = int(data.pop("levels", 4))
        allowed = {"alpha1", "alpha2", "max_gn", "max_ad", "tol_f", "tol_step",
                   "tol_grad", "det_floor", "smooth_sigma"}
        unknown = set(data) - allowed
        if unknown:
            raise ValueError(f"unknown params: {sorted(unknown)}")
        kwargs = data
    return EnergyParams(**kwargs), kmeans_k, levels


async def _parse_template(form, image: ScalarField):
    if "template" in form:
        data = await form["template"].read()
        return load_mask(data)
    if "polygon" in form:
        pts = json.loads(form["polygon"])
        if not isinstance(pts, list) or len(pts) < 3:
            raise ValueError("polygon needs at least 3 vertices")
        return rasterize_polygon(pts, image.height, image.width)
    return None


def main() -> None:
    import uvicorn

    port = _env_int("QIS_PORT", 8080)
    uvicorn.run(create_app(), host="0.0.0.0", port=port)


if __name__ == "__main__":
    main()
