"""
Validation utilities for the shape-prior tracker.
"""
import re
from pathlib import Path
from typing import Any, Dict, List, Union

from ..configs.settings import ALLOWED_MESH_EXTENSIONS
from ..errors import MeshParseError


def validate_mesh_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    if path.suffix.lower() not in ALLOWED_MESH_EXTENSIONS:
        raise MeshParseError(
            f"Mesh extension '{path.suffix}' not supported. Allowed: {ALLOWED_MESH_EXTENSIONS}"
        )
    if not path.is_file():
        raise FileNotFoundError(f"Mesh file not found: {path}")
    return path


def validate_file_upload(filename: str, content_length: int, allowed_extensions: List[str], max_size: int) -> Dict[str, Any]:
    result: Dict[str, Any] = {"valid": True, "errors": [], "warnings": []}

    if not filename:
        result["valid"] = False
        result["errors"].append("Filename is required")
        return result

    file_ext = "." + filename.lower().split(".")[-1] if "." in filename else ""
    if file_ext not in [ext.lower() for ext in allowed_extensions]:
        result["valid"] = False
        result["errors"].append(f"File extension '{file_ext}' not allowed. Allowed: {allowed_extensions}")

    if content_length > max_size:
        result["valid"] = False
        result["errors"].append(f"File size {content_length} bytes exceeds maximum {max_size} bytes")
    elif content_length > max_size * 0.8:
        result["warnings"].append(f"File is large ({content_length} bytes), processing may be slow")

    return result


def sanitize_filename(filename: str) -> str:
    filename = filename.split("/")[-1].split("\\")[-1]
    filename = re.sub(r'[<>:"|?*]', "_", filename)
    filename = filename.strip(" .")
    return filename if filename else "untitled"
