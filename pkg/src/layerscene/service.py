"""Scene-editing HTTP service.

The service owns a scene store and exposes create/edit/render/optimize
endpoints consumed by the UI and batch clients. Optimization runs on a
worker pool behind job ids so the API stays responsive; edits are
serialized per scene; renders are read-only.

Error responses always carry a machine-readable ``code``.
"""

from __future__ import annotations

import base64
import threading
import uuid
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from fastapi import Body, FastAPI
from fastapi.responses import JSONResponse

from .bridge import BridgeError
from .config import (
    ConfigError,
    RunConfig,
    SceneConfig,
    TemplateConfig,
    build_denoiser,
    run_config_from_dict,
    scene_config_from_dict,
)
from .denoiser import ConditionToken, DenoiserError
from .metrics import MetricsError, PairRecord, MetricsReport, consistency, mask_iou, ssim, visual_consistency
from .sampler import build_anchor, render_final, run_pipeline, stream
from .scene import EditOp, Layout, SceneError
from .serialize import (
    decode_grid,
    encode_grid,
    save_png,
    token_from_dict,
    tonemap_to_u8,
    TONEMAP_OFFSET,
    TONEMAP_SCALE,
)
from .store import SceneNotFound, SceneRecord, SceneStore, StoreError, edit_from_dict

from PIL import Image
import io


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str):
        self.status = status
        self.code = code
        self.message = message
        super().__init__(message)


@dataclass
class Job:
    id: str
    scene_id: str
    kind: str
    status: str = "queued"  # queued | running | done | error
    error: dict | None = None


class JobRunner:
    def __init__(self, workers: int):
        self.executor = ThreadPoolExecutor(max_workers=workers)
        self.jobs: dict[str, Job] = {}
        self._lock = threading.Lock()

    def submit(self, scene_id: str, kind: str, fn) -> Job:
        job = Job(id=uuid.uuid4().hex[:12], scene_id=scene_id, kind=kind)
        with self._lock:
            self.jobs[job.id] = job

        def run():
            job.status = "running"
            try:
                fn()
                job.status = "done"
            except (BridgeError,) as exc:
                job.status = "error"
                job.error = {"code": "BRIDGE_FAILURE", "message": str(exc)}
            except (DenoiserError,) as exc:
                job.status = "error"
                job.error = {"code": "DENOISER_FAILURE", "message": str(exc)}
            except Exception as exc:
                job.status = "error"
                job.error = {"code": "OPTIMIZE_FAILURE", "message": str(exc)}

        self.executor.submit(run)
        return job

    def get(self, job_id: str) -> Job:
        job = self.jobs.get(job_id)
        if job is None:
            raise ApiError(404, "JOB_NOT_FOUND", f"no job {job_id}")
        return job


def effective_denoiser(record: SceneRecord, dtype=np.float32):
    """Configured denoiser plus templates introduced by restyle edits."""
    d = build_denoiser(record.run_config, record.scene_config, dtype=dtype)
    if hasattr(d, "register"):
        for ed in record.edits:
            if ed.get("op") == "restyle" and ed.get("template"):
                tok = token_from_dict(ed["token"])
                tmpl = TemplateConfig(**ed["template"])
                d.register(tok, tmpl.build(record.scene_config.shape, dtype=dtype))
    return d


def optimize_record(record: SceneRecord) -> SceneRecord:
    """(Re)run the pipeline for a record, honoring restyle history."""
    sc, rc = record.scene_config, record.run_config
    specs = sc.layer_specs()
    if record.base_checkpoint is not None:
        _, _, restyles = record.current()
        for src, tok in restyles.items():
            specs[src] = replace(
                specs[src], condition=ConditionToken(id=tok["id"], label=tok["label"])
            )
    d = effective_denoiser(record)
    s = rc.schedule()
    anchor = None
    if record.anchor is not None:
        image = record.anchor_image()
        layout = Layout(tuple(tuple(o) for o in record.anchor["layout"]))
        rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(entropy=(sc.seed, 3)))
        )
        anchor = build_anchor(image, layout, record.anchor["weight"], s, rng)
    cp = run_pipeline(
        specs,
        shape=sc.shape,
        seed=sc.seed,
        d=d,
        s=s,
        N=rc.N,
        tau=rc.tau,
        blend=rc.blend,
        guidance=rc.guidance,
        step_kind=rc.step_kind,
        anchor=anchor,
        global_label=sc.global_prompt,
    )
    record.base_checkpoint = cp
    return record


def render_record(record: SceneRecord, layout=None, global_prompt: str | None = None):
    cp, _, _ = record.current()
    d = effective_denoiser(record)
    if layout is None:
        lay = cp.scene.canonical_layout()
    else:
        lay = Layout(tuple(tuple(o) for o in layout))
    cp.scene.validate_layout(lay)
    return render_final(cp, lay, d, global_label=global_prompt)


def _png_b64(grid: np.ndarray) -> str:
    u8 = tonemap_to_u8(grid)
    if u8.shape[0] == 1:
        img = Image.fromarray(u8[0], mode="L")
    else:
        img = Image.fromarray(np.moveaxis(u8, 0, 2), mode="RGB")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _scene_summary(record: SceneRecord, status: str) -> dict:
    layers = []
    if record.base_checkpoint is not None:
        cp, origins, _ = record.current()
        for k, layer in enumerate(cp.scene.layers):
            layers.append(
                {
                    "index": k,
                    "prompt": layer.condition.label,
                    "offset": list(layer.offset),
                    "movement": list(layer.movement_range),
                    "mask_kind": layer.mask.kind,
                    "origin": origins[k],
                    "background": k == cp.scene.K - 1,
                }
            )
        step = cp.scene.step
    else:
        for k, lc in enumerate(record.scene_config.layers):
            layers.append(
                {
                    "index": k,
                    "prompt": lc.prompt,
                    "offset": list(lc.offset),
                    "movement": list(lc.movement),
                    "mask_kind": lc.mask.kind,
                    "origin": k,
                    "background": k == len(record.scene_config.layers) - 1,
                }
            )
        step = None
    return {
        "id": record.id,
        "status": status,
        "created": record.created,
        "updated": record.updated,
        "shape": list(record.scene_config.shape),
        "step": step,
        "layers": layers,
        "edits": record.edits,
        "global_prompt": record.scene_config.global_prompt,
        "has_anchor": record.anchor is not None,
    }


def create_app(
    store_path,
    run_defaults: RunConfig | None = None,
    workers: int = 2,
) -> FastAPI:
    app = FastAPI(title="layerscene service")
    store = SceneStore(store_path)
    jobs = JobRunner(workers)
    locks: dict[str, threading.Lock] = defaultdict(threading.Lock)
    last_job: dict[str, str] = {}
    defaults = run_defaults or RunConfig()

    @app.exception_handler(ApiError)
    async def api_error_handler(request, exc: ApiError):
        return JSONResponse(
            status_code=exc.status,
            content={"code": exc.code, "message": exc.message},
        )

    def load(scene_id: str) -> SceneRecord:
        try:
            return store.get(scene_id)
        except SceneNotFound:
            raise ApiError(404, "SCENE_NOT_FOUND", f"no scene {scene_id}")

    def scene_status(record: SceneRecord) -> str:
        jid = last_job.get(record.id)
        if jid and jobs.jobs[jid].status in ("queued", "running"):
            return "optimizing"
        if jid and jobs.jobs[jid].status == "error":
            return "error"
        return "ready" if record.base_checkpoint is not None else "pending"

    def enqueue_optimize(record: SceneRecord) -> Job:
        def work():
            with locks[record.id]:
                rec = store.get(record.id)
                rec = optimize_record(rec)
                store.save(rec)

        job = jobs.submit(record.id, "optimize", work)
        last_job[record.id] = job.id
        return job

    @app.post("/scenes")
    def create_scene(payload: dict = Body(...)):
        try:
            sc = scene_config_from_dict(payload["scene"])
            rc = (
                run_config_from_dict(payload["run"])
                if payload.get("run")
                else defaults
            )
        except (KeyError, ConfigError, SceneError) as exc:
            raise ApiError(422, "INVALID_CONFIG", str(exc))
        record = SceneRecord(id=store.new_id(), scene_config=sc, run_config=rc)
        store.save(record)
        job = enqueue_optimize(record)
        return {"id": record.id, "job_id": job.id}

    @app.get("/scenes")
    def list_scenes():
        return {"scenes": store.list_meta()}

    @app.get("/scenes/{scene_id}")
    def get_scene(scene_id: str):
        record = load(scene_id)
        return _scene_summary(record, scene_status(record))

    @app.delete("/scenes/{scene_id}")
    def delete_scene(scene_id: str):
        load(scene_id)
        store.delete(scene_id)
        return {"deleted": scene_id}

    @app.post("/scenes/{scene_id}/edits")
    def apply_scene_edit(scene_id: str, payload: dict = Body(...)):
        with locks[scene_id]:
            record = load(scene_id)
            if record.base_checkpoint is None:
                raise ApiError(409, "NOT_OPTIMIZED", "scene has no checkpoint yet")
            try:
                cp, _, _ = record.current()
                op = edit_from_dict(payload, cp.scene.shape)
                from .scene import apply_edit

                apply_edit(cp.scene, op)  # validate before recording
            except (SceneError, KeyError, TypeError, ValueError) as exc:
                raise ApiError(422, "INVALID_EDIT", str(exc))
            record.edits.append(payload)
            store.save(record)
            job = None
            if op.op == "restyle" and payload.get("reoptimize", True):
                job = enqueue_optimize(record)
            out = _scene_summary(store.get(scene_id), scene_status(record))
            if job:
                out["job_id"] = job.id
            return out

    @app.post("/scenes/{scene_id}/render")
    def render_scene(scene_id: str, payload: dict = Body(default={})):
        record = load(scene_id)
        if record.base_checkpoint is None:
            raise ApiError(409, "NOT_OPTIMIZED", "scene has no checkpoint yet")
        try:
            grid = render_record(
                record,
                layout=payload.get("layout"),
                global_prompt=payload.get("global_prompt"),
            )
        except (SceneError,) as exc:
            raise ApiError(422, "INVALID_LAYOUT", str(exc))
        except BridgeError as exc:
            raise ApiError(502, "BRIDGE_FAILURE", str(exc))
        except DenoiserError as exc:
            raise ApiError(502, "DENOISER_FAILURE", str(exc))
        out = {
            "png": _png_b64(grid),
            "shape": list(grid.shape),
            "tonemap": {"scale": TONEMAP_SCALE, "offset": TONEMAP_OFFSET},
        }
        if payload.get("include_grid"):
            out["grid"] = encode_grid(grid)
        return out

    @app.post("/scenes/{scene_id}/optimize")
    def optimize_scene_endpoint(scene_id: str, payload: dict = Body(default={})):
        record = load(scene_id)
        job = enqueue_optimize(record)
        return {"job_id": job.id}

    @app.get("/jobs/{job_id}")
    def get_job(job_id: str):
        job = jobs.get(job_id)
        out = {"id": job.id, "scene_id": job.scene_id, "kind": job.kind,
               "status": job.status}
        if job.error:
            out["error"] = job.error
        return out

    @app.post("/scenes/{scene_id}/anchor")
    def upload_anchor(scene_id: str, payload: dict = Body(...)):
        with locks[scene_id]:
            record = load(scene_id)
            c, h, w = record.scene_config.shape
            try:
                image = decode_grid(payload["image"], (c, h, w))
                layout = [tuple(o) for o in payload["layout"]]
                weight = float(payload.get("weight", record.run_config.anchor_weight))
                if weight <= 0:
                    raise ValueError("anchor weight must be positive")
            except (KeyError, ValueError) as exc:
                raise ApiError(422, "INVALID_ANCHOR", str(exc))
            record.set_anchor(image, layout, weight)
            store.save(record)
            job = enqueue_optimize(record)
            return {"job_id": job.id}

    @app.post("/metrics")
    def compute_metrics(payload: dict = Body(...)):
        try:
            a, b = payload["a"], payload["b"]
            shape = tuple(payload["shape"])
            img_a = decode_grid(a["image"], shape)
            img_b = decode_grid(b["image"], shape)
            mask_a = decode_grid(a["mask"], shape[-2:])
            mask_b = decode_grid(b["mask"], shape[-2:])
            rec = PairRecord(
                name=payload.get("name", "pair"),
                mask_iou=mask_iou(mask_a, mask_b),
                consistency=consistency(mask_a, mask_b),
                visual_consistency=visual_consistency(img_a, mask_a, img_b, mask_b),
                ssim=ssim(img_a, img_b, data_range=payload.get("data_range", 1.0)),
            )
        except (KeyError, MetricsError, ValueError) as exc:
            raise ApiError(422, "INVALID_METRICS_INPUT", str(exc))
        return MetricsReport(records=[rec]).to_dict()

    app.state.store = store
    app.state.jobs = jobs
    return app
