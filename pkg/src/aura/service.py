"""Operational shell: stream registry, HTTP API, and the live event channel.

Persistence happens synchronously on the pipeline thread, so ingestion
naturally backs off when the writer stalls instead of dropping events. The
API serves the operator console; every console capability maps 1:1 onto an
endpoint here and works headless through the CLI as well.
"""

from __future__ import annotations

import json
import logging
import os
import queue
import threading
from pathlib import Path

from fastapi import Depends, FastAPI, HTTPException, Request, WebSocket
from fastapi.responses import FileResponse, PlainTextResponse
from pydantic import BaseModel

from .adapt import resolve_suggestion_in_store, run_policy_batch
from .automl import (
    FeedbackLabel,
    FeedbackRecord,
    SuggestionConflict,
)
from .fusion import DetectionEvent
from .ingest import ConfigError, SourceError, load_scene_config, open_frame_source, window_frames
from .pipeline import StreamPipeline
from .store import DanglingReference, DataStore, now_ms

logger = logging.getLogger(__name__)

TOKEN_HEADER = "x-aura-token"

STATUS_RUNNING = "running"
STATUS_SUSPENDED = "suspended"
STATUS_STOPPED = "stopped"
_ALLOWED_TRANSITIONS = {
    (STATUS_RUNNING, STATUS_SUSPENDED),
    (STATUS_SUSPENDED, STATUS_RUNNING),
    (STATUS_RUNNING, STATUS_STOPPED),
    (STATUS_SUSPENDED, STATUS_STOPPED),
}


class StreamRunner(threading.Thread):
    """Processes one file-backed stream to completion on its own thread."""

    def __init__(self, service: "Service", config, source_path: str, seed: int = 0):
        super().__init__(daemon=True, name=f"stream-{config.stream_id}")
        self.service = service
        self.config = config
        self.source_path = source_path
        self.seed = seed

    def run(self) -> None:
        store = self.service.store
        try:
            source = open_frame_source(
                self.source_path,
                expected_dims=(self.config.frame_width, self.config.frame_height),
                fps=self.config.fps,
                stream_id=self.config.stream_id,
            )
            pipeline = StreamPipeline(
                self.config,
                hyperparams=store.current_hyperparams,
                policy=store.load_policy,
                seed=self.seed,
                store=store,
            )
            for result in pipeline.run(window_frames(source, self.config.fps)):
                for event in result.events:
                    self.service.broadcast(event)
            store.update_stream_status(self.config.stream_id, STATUS_STOPPED)
        except Exception:
            logger.exception("stream %s failed", self.config.stream_id)
            store.update_stream_status(self.config.stream_id, STATUS_STOPPED)
        finally:
            self.service.runners.pop(self.config.stream_id, None)


class Service:
    def __init__(self, store: DataStore, token: str | None = None):
        self.store = store
        self.token = token
        self.runners: dict[str, StreamRunner] = {}
        self._subscribers: list[queue.Queue] = []
        self._lock = threading.Lock()

    def broadcast(self, event: DetectionEvent) -> None:
        with self._lock:
            subscribers = list(self._subscribers)
        for q in subscribers:
            try:
                q.put_nowait(event.to_dict())
            except queue.Full:
                # Slow live consumers are evicted rather than stalling the
                # pipeline; the event log remains the source of truth.
                self.unsubscribe(q)

    def subscribe(self) -> queue.Queue:
        q: queue.Queue = queue.Queue(maxsize=256)
        with self._lock:
            self._subscribers.append(q)
        return q

    def unsubscribe(self, q: queue.Queue) -> None:
        with self._lock:
            if q in self._subscribers:
                self._subscribers.remove(q)

    def register_stream(self, config_doc: dict, source: str, seed: int = 0) -> dict:
        config = load_scene_config(config_doc)
        registry = self.store.registry()
        existing = registry.get(config.stream_id)
        if existing and existing.get("status") in (STATUS_RUNNING, STATUS_SUSPENDED):
            raise DuplicateStreamError(config.stream_id)
        if not Path(source).exists():
            raise SourceError(f"source does not exist: {source}")
        self.store.record_registration(
            config.stream_id, config.to_dict(), source, STATUS_RUNNING
        )
        runner = StreamRunner(self, config, source, seed=seed)
        self.runners[config.stream_id] = runner
        runner.start()
        return {
            "stream_id": config.stream_id,
            "status": STATUS_RUNNING,
            "source": source,
        }


class DuplicateStreamError(ValueError):
    def __init__(self, stream_id: str):
        super().__init__(f"stream '{stream_id}' already registered")


class StreamRegistration(BaseModel):
    config: dict
    source: str
    seed: int = 0


class FeedbackBody(BaseModel):
    stream_id: str
    region_label: str
    window_index: int
    label: str
    operator: str = "operator"
    corrected_type: str | None = None


class ResolveBody(BaseModel):
    decision: str  # "approve" | "reject"
    operator: str = "operator"


def create_app(
    store: DataStore, token: str | None = None, service: Service | None = None
) -> FastAPI:
    service = service or Service(store, token=token)
    app = FastAPI(title="aura", version="0.1.0")
    app.state.service = service

    def check_token(request: Request) -> None:
        if service.token and request.headers.get(TOKEN_HEADER) != service.token:
            raise HTTPException(status_code=401, detail="missing or bad token")

    auth = Depends(check_token)

    @app.get("/streams", dependencies=[auth])
    def get_streams():
        return {
            "streams": [
                {
                    "stream_id": sid,
                    "status": entry.get("status"),
                    "source": entry.get("source"),
                    "config": entry.get("config"),
                    "registered_ms": entry.get("timestamp_ms"),
                }
                for sid, entry in sorted(service.store.registry().items())
            ]
        }

    @app.post("/streams", dependencies=[auth], status_code=201)
    def post_streams(body: StreamRegistration):
        try:
            return service.register_stream(body.config, body.source, seed=body.seed)
        except DuplicateStreamError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        except (ConfigError, SourceError) as exc:
            raise HTTPException(status_code=400, detail=str(exc))

    @app.get("/events", dependencies=[auth])
    def get_events(
        stream_id: str | None = None,
        region_label: str | None = None,
        verdict: str | None = None,
        since_ms: int | None = None,
        until_ms: int | None = None,
        limit: int = 100,
        token: str | None = None,
    ):
        try:
            page, next_token = service.store.query_events(
                stream_id=stream_id,
                region_label=region_label,
                verdict=verdict,
                since_ms=since_ms,
                until_ms=until_ms,
                limit=limit,
                token=token,
            )
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return {
            "events": [e.to_dict() for e in page],
            "next_token": next_token,
        }

    @app.post("/feedback", dependencies=[auth], status_code=201)
    def post_feedback(body: FeedbackBody):
        try:
            record = FeedbackRecord(
                stream_id=body.stream_id,
                region_label=body.region_label,
                window_index=body.window_index,
                label=FeedbackLabel(body.label),
                operator=body.operator,
                timestamp_ms=now_ms(),
                corrected_type=body.corrected_type,
            )
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=f"malformed label: {exc}")
        try:
            service.store.append_feedback(record)
        except DanglingReference as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        return {"ok": True}

    @app.get("/suggestions", dependencies=[auth])
    def get_suggestions():
        return {
            "suggestions": [
                s.to_dict() for s in service.store.suggestions().values()
            ]
        }

    @app.post("/suggestions/{suggestion_id}/resolve", dependencies=[auth])
    def post_resolve(suggestion_id: str, body: ResolveBody):
        if body.decision not in ("approve", "reject"):
            raise HTTPException(status_code=400, detail="decision must be approve|reject")
        try:
            resolved = resolve_suggestion_in_store(
                service.store,
                suggestion_id,
                approve=body.decision == "approve",
                operator=body.operator,
            )
        except KeyError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        except SuggestionConflict as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        return resolved.to_dict()

    @app.get("/hyperparams", dependencies=[auth])
    def get_hyperparams():
        return {
            "current": service.store.current_hyperparams().to_dict(),
            "history": [h.to_dict() for h in service.store.hyperparams_history()],
        }

    @app.post("/policy/batch", dependencies=[auth])
    def post_policy_batch():
        params, consumed = run_policy_batch(service.store)
        return {
            "version": params.version,
            "mode": params.mode,
            "labeled_windows_consumed": consumed,
        }

    @app.get("/frames/{stream_id}/{window_index}/thumbnail", dependencies=[auth])
    def get_thumbnail(stream_id: str, window_index: int):
        path = service.store.thumbnail_path(stream_id, window_index)
        if not path.exists():
            raise HTTPException(status_code=404, detail="no thumbnail for window")
        return FileResponse(path, media_type="image/jpeg")

    @app.get("/healthz", response_class=PlainTextResponse)
    def healthz():
        return "ok"

    @app.websocket("/events/live")
    async def events_live(websocket: WebSocket):
        if service.token and websocket.query_params.get("token") != service.token:
            await websocket.close(code=4401)
            return
        await websocket.accept()
        replay_after = websocket.query_params.get("after_window")
        if replay_after is not None:
            try:
                after = int(replay_after)
            except ValueError:
                after = -1
            for event in service.store.events():
                if event.window_index > after:
                    await websocket.send_text(json.dumps(event.to_dict()))
        q = service.subscribe()
        import anyio

        try:
            while True:
                item = await anyio.to_thread.run_sync(q.get)
                await websocket.send_text(json.dumps(item))
        except Exception:
            pass
        finally:
            service.unsubscribe(q)

    return app


def serve(
    config_dir: str | None = None,
    data_dir: str | None = None,
    bind: str | None = None,
) -> None:
    """Run the HTTP service; registers any configs found in ``config_dir``
    that name a frame source."""
    import uvicorn

    data_dir = data_dir or os.environ.get("AURA_DATA_DIR", "./aura-data")
    bind = bind or os.environ.get("AURA_BIND_ADDR", "127.0.0.1:8787")
    token = os.environ.get("AURA_API_TOKEN")
    host, _, port = bind.partition(":")
    store = DataStore(data_dir)
    service = Service(store, token=token)
    app = create_app(store, token=token, service=service)

    if config_dir:
        for path in sorted(Path(config_dir).glob("*.json")):
            doc = json.loads(path.read_text())
            source = doc.pop("source", None)
            if source:
                try:
                    service.register_stream(doc, source)
                    logger.info("registered stream from %s", path.name)
                except (DuplicateStreamError, ConfigError, SourceError) as exc:
                    logger.warning("skipping %s: %s", path.name, exc)

    uvicorn.run(app, host=host or "127.0.0.1", port=int(port or 8787), log_level="warning")
