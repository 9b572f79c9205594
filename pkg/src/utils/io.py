from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import imageio.v2 as imageio
import numpy as np

UINT16_MAX = 65535


class ImageFormatError(ValueError):
    pass


# -----------------------------
# PNG
# -----------------------------
def quantize_color(color: np.ndarray) -> np.ndarray:
    """[0, 1] float -> uint8, round half up."""
    return np.clip(np.floor(np.asarray(color, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def quantize_depth(depth_m: np.ndarray, depth_scale: float) -> np.ndarray:
    """meters -> uint16 file units, round half up; 0 stays 0 (invalid)."""
    d = np.floor(np.asarray(depth_m, dtype=np.float64) * depth_scale + 0.5)
    if np.any(d > UINT16_MAX):
        raise ImageFormatError(f"depth exceeds 16-bit range at scale {depth_scale}")
    return np.clip(d, 0, UINT16_MAX).astype(np.uint16)


def write_color_png(path: str | Path, color: np.ndarray) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    imageio.imwrite(p, quantize_color(color))
    return p


def write_depth_png(path: str | Path, depth_m: np.ndarray, depth_scale: float = 1000.0) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    imageio.imwrite(p, quantize_depth(depth_m, depth_scale))
    return p


def read_color_png(path: str | Path) -> np.ndarray:
    try:
        img = np.asarray(imageio.imread(Path(path)))
    except (OSError, ValueError) as e:
        raise ImageFormatError(f"cannot read color image {path}: {e}") from e
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    if img.dtype != np.uint8 or img.shape[2] < 3:
        raise ImageFormatError(f"{path}: expected 8-bit RGB, got {img.dtype} {img.shape}")
    return img[..., :3].astype(np.float64) / 255.0


def read_depth_png(path: str | Path, depth_scale: float) -> np.ndarray:
    try:
        img = np.asarray(imageio.imread(Path(path)))
    except (OSError, ValueError) as e:
        raise ImageFormatError(f"cannot read depth image {path}: {e}") from e
    if img.ndim != 2:
        raise ImageFormatError(f"{path}: expected single-channel 16-bit depth, got shape {img.shape}")
    if np.any(img < 0) or np.any(img > UINT16_MAX):
        raise ImageFormatError(f"{path}: depth values outside 16-bit range")
    return img.astype(np.uint16).astype(np.float64) / depth_scale


# -----------------------------
# JSON / CSV
# -----------------------------
def write_json(path: str | Path, obj: Any) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(obj, indent=2, sort_keys=True), encoding="utf-8")
    return p


def read_json(path: str | Path) -> Dict[str, Any]:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def export_csv(
    rows: Iterable[Dict[str, Any]],
    path: str | Path,
    columns: Sequence[str],
    *,
    header_comment: Optional[str] = None,
) -> Path:
    """Write rows with a fixed column order; an optional '# ...' provenance line goes first."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", newline="", encoding="utf-8") as f:
        if header_comment:
            f.write(f"# {header_comment}\n")
        writer = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        for r in rows:
            writer.writerow(r)
    return p


def read_csv(path: str | Path) -> List[Dict[str, str]]:
    with Path(path).open(newline="", encoding="utf-8") as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    return list(csv.DictReader(lines))
