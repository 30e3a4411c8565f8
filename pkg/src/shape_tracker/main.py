import logging
import traceback

from fastapi import FastAPI, File, Form, UploadFile
from fastapi.responses import JSONResponse

from .configs import settings
from .configs.models import RunConfig
from .data_loader import DataLoader
from .errors import ShapeTrackerError
from .geometry import Intrinsics
from .orchestrator import RunOrchestrator, register_from_csv
from .utils.cache import get_cache

logging.basicConfig(
    level=getattr(logging, settings.LOG_LEVEL, logging.INFO),
    format="%(asctime)s [%(levelname)s] %(name)s: %(message)s"
)
logger = logging.getLogger("shape_tracker")

app = FastAPI(title="Shape-Prior Tracker")

loader = DataLoader()


def _failure(e: Exception, endpoint: str) -> JSONResponse:
    if isinstance(e, ShapeTrackerError):
        logger.warning(f"{endpoint} rejected: {e}")
        return JSONResponse(status_code=400, content=e.to_record())
    logger.error("Error in %s: %s", endpoint, str(e))
    logger.debug(traceback.format_exc())
    return JSONResponse(status_code=500, content={"success": False, "error": str(e)})


@app.post("/register")
async def register(
    correspondences: UploadFile = File(...),
    fx: float = Form(...),
    fy: float = Form(...),
    cx: float = Form(...),
    cy: float = Form(...),
    width: int = Form(...),
    height: int = Form(...),
):
    """
    Initial registration from a correspondence CSV (x,y,z,u,v) and pinhole intrinsics.
    Returns the 3x4 mesh->camera pose, its RMS reprojection error and per-start residuals.
    """
    try:
        contents = await correspondences.read()
        loader.save_upload(correspondences.filename or "correspondences.csv", contents)
        k = Intrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height)
        result = register_from_csv(contents, k)
        return JSONResponse(content={
            "success": True,
            "pose": result.pose.matrix34().tolist(),
            "rms_px": result.rms_px,
            "converged": result.converged,
            "winning_seed": result.winning_seed,
            "per_start_residuals": [list(r) for r in result.per_start_residuals],
        })
    except Exception as e:
        return _failure(e, "/register")


@app.post("/track")
async def track(config: UploadFile = File(...)):
    """Run a TOML-configured tracking job and return its metrics report."""
    try:
        contents = await config.read()
        path = loader.save_upload(config.filename or "run.toml", contents)
        run_config = RunConfig.from_toml(path)
        logger.info(f"/track: config {run_config.config_hash()}")
        report = RunOrchestrator(run_config).run()
        return JSONResponse(content={"success": True, **report.model_dump(mode="json")})
    except Exception as e:
        return _failure(e, "/track")


@app.get("/health")
async def health():
    cache = get_cache()
    return {
        "status": "healthy",
        "cache_enabled": cache is not None,
        "cache_size": cache.size() if cache is not None else 0,
    }


@app.get("/")
async def root():
    return {"status": "running", "message": "Shape-Prior Tracker API is up"}


def main() -> None:
    import uvicorn

    uvicorn.run(app, host=settings.API_HOST, port=settings.API_PORT)
