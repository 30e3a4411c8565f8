"""
Settings for the shape-prior tracker. Environment variables override the defaults below.
"""
import logging
import os
from pathlib import Path

from dotenv import load_dotenv

logger = logging.getLogger(__name__)

# =====================
# Load .env automatically
# =====================
BASE_DIR = Path(__file__).resolve().parent.parent
dotenv_path = BASE_DIR / ".env"

if dotenv_path.exists():
    load_dotenv(dotenv_path)
    logger.info(f"[Settings] Loaded environment variables from {dotenv_path}")
else:
    logger.debug("[Settings] .env file not found, using system environment variables")


def _flag(name: str, default: str) -> bool:
    return os.getenv(name, default).lower() == "true"


# =====================
# Logging / service
# =====================
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()
API_HOST = os.getenv("API_HOST", "127.0.0.1")
API_PORT = int(os.getenv("API_PORT", "8000"))
DETERMINISTIC = _flag("DETERMINISTIC", "true")

# =====================
# Prior shape
# =====================
SURFACE_DENSITY = float(os.getenv("SURFACE_DENSITY", "0"))  # samples per unit area; 0 = derive from bbox diagonal
SURFACE_SPACING_FRACTION = 0.005  # mean sample spacing <= 0.5% of bbox diagonal
MASK_DILATION_PX = int(os.getenv("MASK_DILATION_PX", "5"))  # at 1280 px width, scaled
MASK_REFERENCE_WIDTH = 1280
TEXTURE_WEIGHT_CAP = 10.0  # texture weight saturation
ALLOWED_MESH_EXTENSIONS = [".obj", ".ply"]

# =====================
# Registration
# =====================
REGISTRATION_HUBER_PX = float(os.getenv("REGISTRATION_HUBER_PX", "3.0"))
REGISTRATION_MAX_ITERATIONS = 100
REGISTRATION_REL_TOL = 1e-10
REGISTRATION_DEPTH_FACTORS = (0.5, 1.0, 2.0)
MIN_CORRESPONDENCES = 4

# =====================
# Features
# =====================
MAX_FEATURES = int(os.getenv("MAX_FEATURES", "600"))  # per frame, pre-mask
FAST_THRESHOLD = float(os.getenv("FAST_THRESHOLD", "20"))
DETECTION_GRID = (8, 8)
PATCH_SIZE = 15
PYRAMID_LEVELS = 3
TRACK_MAX_SSD = float(os.getenv("TRACK_MAX_SSD", "400"))  # mean squared intensity per pixel
DESCRIPTOR_BITS = 256
DESCRIPTOR_SEED = 0x5EED
MATCH_WINDOW_PX = 11.0

# =====================
# Optimizer
# =====================
W_SHAPE = float(os.getenv("W_SHAPE", "100"))
REPROJ_HUBER_PX = float(os.getenv("REPROJ_HUBER_PX", "3.0"))  # px
SHAPE_HUBER_FRACTION = 0.02  # of mesh bbox diagonal
BA_MAX_ITERATIONS = int(os.getenv("BA_MAX_ITERATIONS", "20"))
BA_REL_TOL = 1e-10
POSE_OPT_ROUNDS = 4  # optimize-then-reflag rounds
POSE_OPT_ITERATIONS = 10

# =====================
# Tracking
# =====================
MIN_TRACKING_INLIERS = int(os.getenv("MIN_TRACKING_INLIERS", "15"))
MIN_INIT_POINTS = 20
KEYFRAME_INLIER_RATIO = float(os.getenv("KEYFRAME_INLIER_RATIO", "0.7"))
MAX_FRAMES_BETWEEN_KEYFRAMES = int(os.getenv("MAX_FRAMES_BETWEEN_KEYFRAMES", "20"))
COVISIBILITY_MIN_SHARED = 15
LOCAL_WINDOW_SIZE = int(os.getenv("LOCAL_WINDOW_SIZE", "5"))
MIN_PARALLAX_DEG = 0.5
MAPPING_QUEUE_SIZE = 8

# =====================
# Caching
# =====================
CACHE_DIR = os.getenv("CACHE_DIR", "/tmp/shape_tracker_cache")
CACHE_EXPIRE = int(os.getenv("CACHE_EXPIRE", "86400"))  # seconds
CACHE_ENABLED = _flag("CACHE_ENABLED", "true")

# =====================
# Evaluation
# =====================
TRE_SAMPLE_FRAMES = 20  # frames sampled among tracked ones

# =====================
# Uploads (service)
# =====================
MAX_UPLOAD_SIZE = 50 * 1024 * 1024  # 50 MB
ALLOWED_UPLOAD_EXTENSIONS = [".csv", ".toml", ".txt", ".obj", ".ply"]
