"""HTTP service exposing scenes, training jobs, and the chat loop.

Training runs asynchronously in a background thread per scene while holding
that scene's registry lock, so concurrent edits observe a busy signal instead
of racing the trainer. Edit handles serve images through the same scene
endpoints as root scenes.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request, UploadFile
from fastapi.responses import FileResponse, JSONResponse
from fastapi.staticfiles import StaticFiles

from . import scene_io
from .editor import ATLAS_RESOLUTION, SceneAssets
from .errors import BusyError, ConfigurationError, SceneAtlasError
from .planner import RemotePlanner, ScriptedPlanner, load_rules
from .router import Reply, SceneRegistry, SessionStore, run_turn
from .scene_io import SceneDirectory, load_scene, save_checkpoint
from .tools import ToolRegistry, default_registry
from .training import TrainConfig, fit, write_history_csv


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8787
    store_root: Path = Path("scenes")
    planner: str = "scripted"  # scripted | remote
    rules_file: Path | None = None
    static_dir: Path | None = None
    atlas_resolution: int = ATLAS_RESOLUTION
    registry_seed: int = 0

    def __post_init__(self) -> None:
        if not 0 < self.port < 65536:
            raise ConfigurationError(f"port {self.port} out of range")
        self.store_root = Path(self.store_root)

    @staticmethod
    def from_file(path: Path | str) -> "ServiceConfig":
        entries = scene_io.read_manifest(Path(path))
        kwargs: dict = {}
        for key, value in entries.items():
            if key in ("port", "atlas_resolution", "registry_seed"):
                kwargs[key] = int(value)
            elif key in ("store_root", "rules_file", "static_dir"):
                kwargs[key] = Path(value)
            elif key in ("host", "planner"):
                kwargs[key] = value
            else:
                raise ConfigurationError(f"unknown service config key {key!r}")
        return ServiceConfig(**kwargs)


@dataclass
class TrainJob:
    state: str = "idle"  # idle | running | done | error
    step: int = 0
    total_steps: int = 0
    losses: dict = field(default_factory=dict)
    error: str = ""


def _error(status: int, code: str, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"code": code, "message": message})


def create_app(config: ServiceConfig | None = None) -> FastAPI:
    config = config or ServiceConfig()
    config.store_root.mkdir(parents=True, exist_ok=True)

    app = FastAPI(title="sceneatlas", docs_url=None, redoc_url=None)
    registry = SceneRegistry(seed=config.registry_seed)
    sessions = SessionStore()
    tools: ToolRegistry = default_registry()
    if config.planner == "remote":
        planner = RemotePlanner()
    else:
        rules = load_rules(config.rules_file) if config.rules_file else None
        planner = ScriptedPlanner(rules)
    jobs: dict[str, TrainJob] = {}
    jobs_mutex = threading.Lock()

    for scene_dir in sorted(p for p in config.store_root.iterdir() if p.is_dir()):
        if (scene_dir / scene_io.MANIFEST_NAME).exists():
            registry.issue(SceneDirectory(scene_dir))

    app.state.registry = registry
    app.state.sessions = sessions
    app.state.config = config

    @app.exception_handler(SceneAtlasError)
    async def _scene_error(request: Request, exc: SceneAtlasError):
        if isinstance(exc, BusyError):
            return _error(409, "busy", str(exc))
        return _error(400, "bad_request", str(exc))

    def resolve_or_none(handle: str):
        try:
            return registry.resolve(handle)
        except KeyError:
            return None

    # ------------------------------------------------------------- scenes

    @app.get("/api/scenes")
    def list_scenes():
        out = []
        for handle in registry.handles():
            ref = registry.resolve(handle)
            if ref.edit_id is not None:
                continue
            man = ref.scene.manifest()
            out.append(
                {
                    "handle": handle,
                    "views": int(man["views"]),
                    "height": int(man["height"]),
                    "width": int(man["width"]),
                    "edit_count": len(ref.scene.edit_ids()),
                }
            )
        return {"scenes": out}

    @app.post("/api/scenes", status_code=201)
    async def upload_scene(files: list[UploadFile]):
        if not files:
            return _error(400, "bad_request", "no images uploaded")
        from io import BytesIO

        from PIL import Image

        images = []
        for f in files:
            try:
                with Image.open(BytesIO(await f.read())) as im:
                    images.append(
                        np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
                    )
            except Exception as exc:
                return _error(400, "decode_error", f"cannot decode {f.filename}: {exc}")
        shapes = {im.shape for im in images}
        if len(shapes) > 1:
            return _error(400, "dimension_error", f"uploaded views have mixed shapes: {sorted(shapes)}")
        viewset = scene_io.ViewSet(views=np.stack(images))
        name = f"scene-{len(list(config.store_root.iterdir())) + 1:04d}"
        scene = SceneDirectory.create(config.store_root / name, viewset, source="upload")
        handle = registry.issue(scene)
        return {"handle": handle}

    # ----------------------------------------------------------- training

    @app.post("/api/scenes/{handle}/train", status_code=202)
    def start_training(handle: str, body: dict | None = None):
        ref = resolve_or_none(handle)
        if ref is None:
            return _error(404, "scene_not_found", f"unknown scene {handle}")
        body = body or {}
        overrides = {k: v for k, v in body.items() if v is not None}
        train_cfg = TrainConfig(**overrides)

        lock = registry.scene_lock(handle)
        if not lock.acquire(blocking=False):
            return _error(409, "busy", f"scene {handle} is busy")
        with jobs_mutex:
            job = TrainJob(state="running", total_steps=train_cfg.total_steps)
            jobs[handle] = job

        def progress(step, report):
            job.step = step + 1
            if (step + 1) % 50 == 0 or step + 1 == train_cfg.total_steps:
                job.losses = report.term_values()

        def worker():
            try:
                viewset = load_scene(ref.scene.root)
                result = fit(viewset, train_cfg, callback=progress)
                save_checkpoint(result.mapping, result.atlas, ref.scene.checkpoint_path)
                write_history_csv(result.history, ref.scene.ckpt_dir / "loss_history.csv")
                job.state = "done"
            except Exception as exc:  # job state carries the failure
                job.state = "error"
                job.error = str(exc)
            finally:
                lock.release()

        threading.Thread(target=worker, daemon=True).start()
        return {"state": "running", "total_steps": train_cfg.total_steps}

    @app.get("/api/scenes/{handle}/train/status")
    def train_status(handle: str):
        if resolve_or_none(handle) is None:
            return _error(404, "scene_not_found", f"unknown scene {handle}")
        job = jobs.get(handle)
        if job is None:
            return {"state": "idle", "step": 0, "total_steps": 0, "losses": {}}
        return {
            "state": job.state,
            "step": job.step,
            "total_steps": job.total_steps,
            "losses": job.losses,
            "error": job.error,
        }

    # ------------------------------------------------------------- images

    def _serve(path: Path):
        if not path.exists():
            return _error(404, "not_found", f"no such image {path.name}")
        return FileResponse(path, media_type="image/png")

    @app.get("/api/scenes/{handle}/views/{t}.png")
    def get_view(handle: str, t: int):
        ref = resolve_or_none(handle)
        if ref is None:
            return _error(404, "scene_not_found", f"unknown scene {handle}")
        if ref.edit_id is not None:
            return _serve(ref.scene.edits_dir / ref.edit_id / "views" / f"{t:04d}.png")
        return _serve(ref.scene.views_dir / f"{t:04d}.png")

    @app.get("/api/scenes/{handle}/atlas/{which}.png")
    def get_atlas(handle: str, which: str):
        if which not in ("fg", "bg"):
            return _error(404, "not_found", "atlas is fg or bg")
        ref = resolve_or_none(handle)
        if ref is None:
            return _error(404, "scene_not_found", f"unknown scene {handle}")
        if ref.edit_id is not None:
            return _serve(ref.scene.edits_dir / ref.edit_id / f"{which}.png")
        path = ref.scene.atlases_dir / f"{which}.png"
        if not path.exists():
            with registry.acquire(handle):
                SceneAssets(ref.scene).atlases(config.atlas_resolution)
        return _serve(path)

    @app.get("/api/scenes/{handle}/edits/{edit_id}/views/{t}.png")
    def get_edit_view(handle: str, edit_id: str, t: int):
        ref = resolve_or_none(handle)
        if ref is None:
            return _error(404, "scene_not_found", f"unknown scene {handle}")
        return _serve(ref.scene.edits_dir / edit_id / "views" / f"{t:04d}.png")

    @app.get("/api/scenes/{handle}/edits/{edit_id}/{which}.png")
    def get_edit_atlas(handle: str, edit_id: str, which: str):
        if which not in ("fg", "bg"):
            return _error(404, "not_found", "atlas is fg or bg")
        ref = resolve_or_none(handle)
        if ref is None:
            return _error(404, "scene_not_found", f"unknown scene {handle}")
        return _serve(ref.scene.edits_dir / edit_id / f"{which}.png")

    @app.get("/api/scenes/{handle}/artifacts/{name}")
    def get_artifact(handle: str, name: str):
        ref = resolve_or_none(handle)
        if ref is None:
            return _error(404, "scene_not_found", f"unknown scene {handle}")
        return _serve(ref.scene.artifacts_dir / name)

    # --------------------------------------------------------------- chat

    @app.post("/api/chat")
    def chat(body: dict):
        message = body.get("message", "")
        if not message:
            return _error(400, "bad_request", "message is required")
        session = None
        if body.get("session_id"):
            session = sessions.get(body["session_id"])
            if session is None:
                return _error(404, "session_not_found", f"unknown session {body['session_id']}")
        else:
            scene_handle = body.get("scene", "")
            if scene_handle not in registry:
                return _error(404, "scene_not_found", f"unknown scene {scene_handle}")
            session = sessions.create(scene_handle)
        try:
            sessions.begin_turn(session)
        except BusyError as exc:
            return _error(409, "busy", str(exc))
        try:
            reply = run_turn(
                session, message, planner, registry, tools,
                resolution=config.atlas_resolution,
            )
        finally:
            sessions.end_turn(session)
        return {
            "session_id": session.session_id,
            "reply": reply.text,
            "artifacts": _artifact_payload(reply, registry),
        }

    @app.get("/api/sessions/{session_id}")
    def get_session(session_id: str):
        session = sessions.get(session_id)
        if session is None:
            return _error(404, "session_not_found", f"unknown session {session_id}")
        messages = []
        for msg in session.history:
            payload = {"role": msg.role, "text": msg.text}
            if msg.artifacts:
                payload["artifacts"] = _artifact_payload(Reply("", msg.artifacts), registry)
            messages.append(payload)
        return {
            "session_id": session.session_id,
            "scene": session.scene_handle,
            "messages": messages,
        }

    if config.static_dir and Path(config.static_dir).is_dir():
        app.mount("/", StaticFiles(directory=config.static_dir, html=True), name="ui")

    return app


def _artifact_payload(reply: Reply, registry: SceneRegistry) -> list[dict]:
    payload = []
    for art in reply.artifacts:
        if art.kind == "edit":
            man = registry.resolve(art.handle).scene.manifest()
            payload.append(
                {
                    "kind": "edit",
                    "handle": art.handle,
                    "edit_id": art.edit_id,
                    "url": f"/api/scenes/{art.handle}/views/0.png",
                    "views": int(man["views"]),
                }
            )
        else:
            root_handle = None
            scene_root = art.path.parent.parent  # artifacts/<name> under scene root
            root_handle = registry.handle_for_root(scene_root)
            payload.append(
                {
                    "kind": "image",
                    "url": f"/api/scenes/{root_handle}/artifacts/{art.path.name}",
                }
            )
    return payload

