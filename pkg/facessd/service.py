"""
Service: HTTP face detection and analysis over a weights file.

Endpoints:
- GET  /health  liveness
- GET  /        service name, version and head configuration
- POST /detect  binary PPM body -> DetectResponse
- GET  /stats   request counters
- POST /reset   reload the weights from disk
"""
import logging
import threading
import time
from pathlib import Path
from typing import Optional, Union

from fastapi import FastAPI, HTTPException, Query, Request
from fastapi.concurrency import run_in_threadpool

from . import __version__
from .anchors import DefaultBoxGrid
from .augment import normalize
from .data import decode_ppm
from .errors import FaceSSDError
from .infer import candidates, finalize, run_model
from .model import FaceSSDModel, load_model
from .models import DatasetStats, DetectResponse, InferenceConfig, WeightsManifest

logger = logging.getLogger("facessd.service")

SERVICE_NAME = "Face-SSD Detector"


class Detector:
    """
    A loaded model plus the statistics it was trained with.

    The model is read-only after loading; a lock serialises reloads against
    running requests.
    """

    def __init__(self, weights_path: Union[str, Path], inference: Optional[InferenceConfig] = None):
        self.weights_path = Path(weights_path)
        self.inference = inference or InferenceConfig()
        self.grid = DefaultBoxGrid()
        self.model: Optional[FaceSSDModel] = None
        self.manifest: Optional[WeightsManifest] = None
        self.lock = threading.Lock()

        # Statistics
        self.total_requests = 0
        self.total_failed = 0
        self.total_faces = 0
        self.loads = 0
        self.start_time = None

    def load(self) -> None:
        model, manifest = load_model(self.weights_path)
        if manifest.stats is None:
            raise FaceSSDError(f"{self.weights_path}: weights carry no dataset statistics")
        with self.lock:
            self.model, self.manifest = model, manifest
            self.loads += 1
        if self.start_time is None:
            self.start_time = time.time()
        logger.info(
            f"LOADED | weights={self.weights_path} | tasks={[t.value for t in manifest.head.tasks]} | "
            f"scale={manifest.channel_scale}"
        )

    @property
    def stats(self) -> DatasetStats:
        return self.manifest.stats

    def detect(self, body: bytes, image_id: str, overrides: dict) -> DetectResponse:
        cfg = self.inference.model_copy(update={k: v for k, v in overrides.items() if v is not None})
        cfg = InferenceConfig.model_validate(cfg.model_dump())
        try:
            pixels = decode_ppm(body, label=image_id)
        except FaceSSDError:
            with self.lock:
                self.total_failed += 1
            raise
        with self.lock:
            volumes = run_model(self.model, normalize(pixels, self.stats))
            detections = finalize(candidates(volumes, self.grid, cfg.th_face), self.model.head, cfg)
            self.total_requests += 1
            self.total_faces += len(detections)
            tasks = list(self.model.head.tasks)
        logger.debug(f"DETECT | image={image_id} | faces={len(detections)} | th_face={cfg.th_face}")
        return DetectResponse(image_id=image_id, tasks=tasks, detections=detections)

    def get_stats(self) -> dict:
        uptime = time.time() - self.start_time if self.start_time else 0
        with self.lock:
            counters = (self.loads, self.total_requests, self.total_failed, self.total_faces)
        loads, total_requests, total_failed, total_faces = counters
        return {
            "weights": str(self.weights_path),
            "loads": loads,
            "total_requests": total_requests,
            "total_failed": total_failed,
            "total_faces": total_faces,
            "uptime_seconds": uptime,
            "requests_per_second": total_requests / uptime if uptime > 0 else 0,
        }


def create_app(weights_path: Union[str, Path], inference: Optional[InferenceConfig] = None) -> FastAPI:
    """FastAPI app serving one weights file; the model loads at startup."""
    app = FastAPI(title=SERVICE_NAME, version=__version__)
    detector = Detector(weights_path, inference)
    app.state.detector = detector

    @app.on_event("startup")
    async def startup():
        try:
            detector.load()
        except FaceSSDError as e:
            logger.error(f"Could not load weights: {e}")
        logger.info("Detection API started")

    def require_model() -> Detector:
        if detector.model is None:
            raise HTTPException(status_code=503, detail="Model not loaded")
        return detector

    @app.get("/")
    async def root():
        """Root endpoint."""
        info = {"service": SERVICE_NAME, "version": __version__, "head": None}
        if detector.manifest is not None:
            info["head"] = detector.manifest.head.model_dump(mode="json")
            info["channel_scale"] = detector.manifest.channel_scale
        return info

    @app.get("/health")
    async def health():
        """Health check."""
        return {"status": "healthy"}

    @app.post("/detect", response_model=DetectResponse)
    async def detect_image(
        request: Request,
        image_id: str = Query(default="image"),
        th_face: Optional[float] = Query(default=None, ge=0, le=1),
        th_t: Optional[float] = Query(default=None, ge=0, le=1),
        nms_overlap: Optional[float] = Query(default=None, gt=0, lt=1),
    ):
        """
        Detect faces in a binary PPM (P6) body of 300x300 pixels.

        Returns:
            DetectResponse with one record per face
        """
        active = require_model()
        body = await request.body()
        overrides = {"th_face": th_face, "th_t": th_t, "nms_overlap": nms_overlap}
        try:
            # forward pass off the event loop
            return await run_in_threadpool(active.detect, body, image_id, overrides)
        except FaceSSDError as e:
            raise HTTPException(status_code=400, detail=f"{e.kind}: {e}")

    @app.get("/stats")
    async def get_stats():
        """Request statistics."""
        return require_model().get_stats()

    @app.post("/reset")
    async def reset():
        """Reload the weights file, e.g. after a new training run wrote it."""
        try:
            await run_in_threadpool(detector.load)
        except FaceSSDError as e:
            raise HTTPException(status_code=503, detail=f"{e.kind}: {e}")
        return {"status": "reloaded", "weights": str(detector.weights_path)}

    return app
