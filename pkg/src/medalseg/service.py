"""Session-based HTTP service for interactive hybrid refinement.

Sessions live on disk (volume, state JSON, probability/label NIfTIs,
scribble channel stacks) so they survive restarts. Each session allows one
mutating operation at a time (409 otherwise). Refinement always restarts
from the probabilities of the original segment run plus the accumulated
scribbles, so repeated refines with unchanged scribbles are reproducible.
"""

from __future__ import annotations

import colorsys
import io
import json
import os
import threading
import time
import uuid
from dataclasses import replace
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Query, Response
from pydantic import BaseModel

from . import nifti
from .errors import MedalSegError
from .phantom import build_phantom
from .pipeline import PipelineConfig, desk_config, run
from .volume import MultiChannelMask, NORMALIZED, ProbabilityMap, Volume


def data_root() -> Path:
    return Path(os.environ.get("MEDALSEG_DATA_DIR", str(Path.home() / ".medalseg" / "sessions")))


class PromptIn(BaseModel):
    sentence: str
    instance_label: int = 0


class CreateSession(BaseModel):
    path: str | None = None
    modality: str | None = None
    phantom: bool = False


class SegmentIn(BaseModel):
    prompts: list[PromptIn]
    mode: str = "text-only"


class RleMask(BaseModel):
    dims: list[int]
    runs: list[list[int]]


class ScribbleIn(BaseModel):
    class_id: int
    axis: int
    index: int
    rle: RleMask
    polarity: str = "add"


class SessionStore:
    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._mutex = threading.Lock()
        self._locks: dict[str, threading.Lock] = {}

    def lock(self, sid: str) -> threading.Lock:
        with self._mutex:
            return self._locks.setdefault(sid, threading.Lock())

    def dir(self, sid: str) -> Path:
        d = self.root / sid
        if not d.is_dir():
            raise HTTPException(status_code=404, detail=f"unknown session {sid}")
        return d

    def state(self, sid: str) -> dict:
        return json.loads((self.dir(sid) / "state.json").read_text())

    def save_state(self, sid: str, state: dict) -> None:
        state["updated"] = time.time()
        (self.root / sid / "state.json").write_text(json.dumps(state, indent=2) + "\n")


def _class_color(class_id: int):
    hue = (class_id * 0.61803398875) % 1.0
    r, g, b = colorsys.hsv_to_rgb(hue, 0.85, 1.0)
    return int(r * 255), int(g * 255), int(b * 255)


def _slice2d(arr: np.ndarray, axis: int, index: int) -> np.ndarray:
    # basic indexing: callers mutate the returned view to paint scribbles
    sl = [slice(None)] * arr.ndim
    sl[axis] = index
    return arr[tuple(sl)]


def decode_rle(rle: RleMask) -> np.ndarray:
    d0, d1 = int(rle.dims[0]), int(rle.dims[1])
    flat = np.zeros(d0 * d1, dtype=np.uint8)
    for start, length in rle.runs:
        if start < 0 or length < 1 or start + length > flat.size:
            raise HTTPException(status_code=422, detail=f"run ({start},{length}) out of bounds")
        flat[start : start + length] = 1
    return flat.reshape(d0, d1)


def create_app(root: Path | None = None, cfg: PipelineConfig | None = None) -> FastAPI:
    store = SessionStore(root or data_root())
    base_cfg = cfg or desk_config()
    app = FastAPI(title="medalseg service")
    app.state.store = store

    def load_vol(sid: str) -> Volume:
        state = store.state(sid)
        return nifti.load_volume(store.dir(sid) / "volume.nii.gz", state["modality"],
                                 intensity_domain=state["intensity_domain"])

    @app.post("/sessions")
    def create_session(body: CreateSession):
        sid = uuid.uuid4().hex[:12]
        d = store.root / sid
        d.mkdir(parents=True)
        if body.phantom:
            case = build_phantom()
            vol = case.volume
            modality = "MRI"
        else:
            if not body.path or not Path(body.path).is_file():
                raise HTTPException(status_code=404, detail=f"volume not found: {body.path}")
            if not body.modality:
                raise HTTPException(status_code=422, detail="modality required with a volume path")
            modality = body.modality
            vol = nifti.load_volume(body.path, modality)
        nifti.save_volume(d / "volume.nii.gz", vol)
        state = {
            "id": sid,
            "modality": modality,
            "intensity_domain": vol.intensity_domain,
            "dims": list(vol.dims),
            "spacing": list(vol.spacing),
            "created": time.time(),
            "queries": [],
            "has_result": False,
        }
        store.save_state(sid, state)
        return {"id": sid, "dims": state["dims"], "spacing": state["spacing"], "modality": modality}

    @app.get("/sessions/{sid}")
    def get_session(sid: str):
        state = store.state(sid)
        return {
            "id": sid,
            "dims": state["dims"],
            "spacing": state["spacing"],
            "modality": state["modality"],
            "classes": state["queries"],
            "has_result": state["has_result"],
        }

    @app.post("/sessions/{sid}/segment")
    def segment(sid: str, body: SegmentIn):
        d = store.dir(sid)
        lock = store.lock(sid)
        if not lock.acquire(blocking=False):
            raise HTTPException(status_code=409, detail="session busy")
        try:
            vol = load_vol(sid)
            cfg_run = replace(base_cfg, mode=body.mode) if body.mode != base_cfg.mode else base_cfg
            try:
                result = run(vol, [p.model_dump() for p in body.prompts], cfg_run)
            except MedalSegError as e:
                raise HTTPException(status_code=422, detail=str(e))
            state = store.state(sid)
            state["queries"] = [
                {"sentence": q.sentence, "instance_label": q.instance_label,
                 "class_id": q.class_id, "class_name": q.class_name, "channel": i}
                for i, q in enumerate(result.queries)
            ]
            state["has_result"] = True
            nifti.save_nifti(d / "base_prob.nii.gz", result.probabilities.data, vol.spacing)
            nifti.save_nifti(d / "prob.nii.gz", result.probabilities.data, vol.spacing)
            nifti.save_nifti(d / "labels.nii.gz", result.labels.data[0].astype(np.int32), vol.spacing)
            n = len(result.queries)
            zero = np.zeros((n,) + vol.dims, dtype=np.uint8)
            nifti.save_nifti(d / "scr_add.nii.gz", zero, vol.spacing)
            nifti.save_nifti(d / "scr_erase.nii.gz", zero, vol.spacing)
            store.save_state(sid, state)
            return {"report": result.report.to_dict(), "classes": state["queries"]}
        finally:
            lock.release()

    @app.post("/sessions/{sid}/scribbles", status_code=204)
    def scribbles(sid: str, body: ScribbleIn):
        d = store.dir(sid)
        state = store.state(sid)
        if not state["has_result"]:
            raise HTTPException(status_code=422, detail="segment before scribbling")
        channel = next((q["channel"] for q in state["queries"] if q["class_id"] == body.class_id), None)
        if channel is None:
            raise HTTPException(status_code=422, detail=f"unknown class id {body.class_id}")
        dims = state["dims"]
        if body.axis not in (0, 1, 2):
            raise HTTPException(status_code=422, detail="axis must be 0, 1 or 2")
        if not 0 <= body.index < dims[body.axis]:
            raise HTTPException(status_code=422, detail="slice index out of range")
        slice_dims = [n for ax, n in enumerate(dims) if ax != body.axis]
        if list(body.rle.dims) != slice_dims:
            raise HTTPException(status_code=422, detail=f"rle dims {body.rle.dims} != slice dims {slice_dims}")
        if body.polarity not in ("add", "erase"):
            raise HTTPException(status_code=422, detail="polarity must be add or erase")

        lock = store.lock(sid)
        if not lock.acquire(blocking=False):
            raise HTTPException(status_code=409, detail="session busy")
        try:
            mask2d = decode_rle(body.rle)
            fname = "scr_add.nii.gz" if body.polarity == "add" else "scr_erase.nii.gz"
            buf, _ = nifti.load_nifti(d / fname)
            buf = np.ascontiguousarray(buf).astype(np.uint8)
            target = _slice2d(buf[channel], body.axis, body.index)
            np.copyto(target, np.maximum(target, mask2d))
            # erase strokes also clear the add buffer on that slice
            if body.polarity == "erase":
                add, _ = nifti.load_nifti(d / "scr_add.nii.gz")
                add = np.ascontiguousarray(add).astype(np.uint8)
                sl = _slice2d(add[channel], body.axis, body.index)
                np.copyto(sl, np.where(mask2d > 0, 0, sl))
                nifti.save_nifti(d / "scr_add.nii.gz", add, state["spacing"])
            nifti.save_nifti(d / fname, buf, state["spacing"])
            store.save_state(sid, state)
        finally:
            lock.release()
        return Response(status_code=204)

    @app.post("/sessions/{sid}/refine")
    def refine(sid: str):
        d = store.dir(sid)
        state = store.state(sid)
        if not state["has_result"]:
            raise HTTPException(status_code=422, detail="segment before refining")
        lock = store.lock(sid)
        if not lock.acquire(blocking=False):
            raise HTTPException(status_code=409, detail="session busy")
        try:
            vol = load_vol(sid)
            base, _ = nifti.load_nifti(d / "base_prob.nii.gz")
            base = np.clip(np.ascontiguousarray(base, dtype=np.float64), 0.0, 1.0)
            add, _ = nifti.load_nifti(d / "scr_add.nii.gz")
            erase, _ = nifti.load_nifti(d / "scr_erase.nii.gz")
            scr_add = MultiChannelMask(data=np.ascontiguousarray(add).astype(np.uint8))
            scr_erase = MultiChannelMask(data=np.ascontiguousarray(erase).astype(np.uint8))
            queries = [
                {"sentence": q["sentence"], "instance_label": q["instance_label"]}
                for q in state["queries"]
            ]
            base_prob = ProbabilityMap(data=base, channel_meta=[q["class_id"] for q in state["queries"]])
            try:
                result = run(vol, queries, replace(base_cfg, mode="hybrid"),
                             scribbles=scr_add, erase=scr_erase, base_prob=base_prob)
            except MedalSegError as e:
                raise HTTPException(status_code=422, detail=str(e))
            nifti.save_nifti(d / "prob.nii.gz", result.probabilities.data, vol.spacing)
            nifti.save_nifti(d / "labels.nii.gz", result.labels.data[0].astype(np.int32), vol.spacing)
            store.save_state(sid, state)
            return {"report": result.report.to_dict()}
        finally:
            lock.release()

    @app.get("/sessions/{sid}/slice")
    def slice_png(sid: str, axis: int = Query(ge=0, le=2), index: int = 0, overlay: str = "labels"):
        from PIL import Image

        d = store.dir(sid)
        state = store.state(sid)
        if not 0 <= index < state["dims"][axis]:
            raise HTTPException(status_code=422, detail="slice index out of range")
        vol = load_vol(sid)
        if vol.intensity_domain != NORMALIZED:
            from .volume import normalize_intensity

            vol = normalize_intensity(vol)
        base = _slice2d(vol.data, axis, index)
        rgb = np.stack([base, base, base], axis=-1).astype(np.float64)

        if overlay == "labels" and state["has_result"]:
            labels, _ = nifti.load_nifti(d / "labels.nii.gz")
            lab2d = _slice2d(np.ascontiguousarray(labels), axis, index)
            for q in state["queries"]:
                sel = lab2d == (q["channel"] + 1)
                if not sel.any():
                    continue
                color = np.array(_class_color(q["class_id"]), dtype=np.float64)
                rgb[sel] = 0.5 * rgb[sel] + 0.5 * color
        elif overlay.startswith("prob:") and state["has_result"]:
            cid = int(overlay.split(":", 1)[1])
            channel = next((q["channel"] for q in state["queries"] if q["class_id"] == cid), None)
            if channel is None:
                raise HTTPException(status_code=422, detail=f"unknown class id {cid}")
            prob, _ = nifti.load_nifti(d / "prob.nii.gz")
            p2d = _slice2d(np.ascontiguousarray(prob)[channel], axis, index)
            color = np.array(_class_color(cid), dtype=np.float64)
            alpha = (0.7 * p2d)[..., None]
            rgb = (1.0 - alpha) * rgb + alpha * color
        elif overlay not in ("labels", "none"):
            if not overlay.startswith("prob:"):
                raise HTTPException(status_code=422, detail=f"unknown overlay {overlay!r}")

        img = Image.fromarray(np.clip(rgb, 0, 255).astype(np.uint8))
        buf = io.BytesIO()
        img.save(buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png")

    @app.get("/sessions/{sid}/result")
    def result(sid: str):
        d = store.dir(sid)
        path = d / "labels.nii.gz"
        if not path.is_file():
            raise HTTPException(status_code=404, detail="no result yet")
        return Response(content=path.read_bytes(), media_type="application/gzip",
                        headers={"Content-Disposition": "attachment; filename=labels.nii.gz"})

    return app
