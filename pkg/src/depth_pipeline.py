"""
Pseudo-depth ingestion and supervision targets.

Depth rasters are [H, W] float64 arrays in meters, row-major with the origin
at the top-left. On disk they are either PFM ("Pf", single channel, scale
sign gives endianness, rows stored bottom-up) or 16-bit grayscale PNG whose
integer values are multiplied by a per-file scale (meters per unit).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from PIL import Image

try:
    from .tensor_core import avg_pool2d
except ImportError:
    from tensor_core import avg_pool2d

DepthMap = NDArray[np.float64]
DepthPyramid = dict[int, NDArray[np.float64]]

DEPTH_MIN = 0.1
DEPTH_MAX = 1000.0
PYRAMID_LEVELS = (3, 4, 5, 6, 7)
DEPTH_SUFFIXES = (".pfm", ".png")


def _validate_raster(depth: NDArray, source: str) -> None:
    bad = ~np.isfinite(depth)
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise ValueError(f"{source}: non-finite depth at (row {row}, col {col})")
    negative = depth < 0
    if negative.any():
        row, col = np.argwhere(negative)[0]
        raise ValueError(f"{source}: negative depth {depth[row, col]} at (row {row}, col {col})")


def _read_pfm(path: Path) -> DepthMap:
    data = path.read_bytes()
    pos = 0
    fields: list[str] = []
    while len(fields) < 4:
        end = data.find(b"\n", pos)
        if end < 0:
            raise ValueError(f"{path}: malformed header")
        try:
            fields.extend(data[pos:end].decode("ascii").split())
        except UnicodeDecodeError:
            raise ValueError(f"{path}: malformed header") from None
        pos = end + 1
    magic, width, height, scale = fields[:4]
    if magic == "PF":
        raise ValueError(f"{path}: color PFM is not a depth map (expected 'Pf')")
    if magic != "Pf":
        raise ValueError(f"{path}: malformed header (magic {magic!r})")
    try:
        w, h, scale_value = int(width), int(height), float(scale)
    except ValueError:
        raise ValueError(f"{path}: malformed header") from None
    if w <= 0 or h <= 0 or scale_value == 0:
        raise ValueError(f"{path}: malformed header ({w}x{h}, scale {scale_value})")
    dtype = "<f4" if scale_value < 0 else ">f4"
    expected = w * h * 4
    if len(data) - pos < expected:
        raise ValueError(f"{path}: truncated raster ({len(data) - pos} of {expected} bytes)")
    raster = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return np.flipud(raster).astype(np.float64)


def _write_pfm(path: Path, depth: DepthMap) -> None:
    h, w = depth.shape
    header = f"Pf\n{w} {h}\n-1.0\n".encode("ascii")
    path.write_bytes(header + np.flipud(depth).astype("<f4").tobytes())


def load_depth(path: str | Path, scale: float | None = None) -> DepthMap:
    """
    Load a depth raster in meters.

    Args:
        path: .pfm file, or 16-bit grayscale .png
        scale: meters per PNG unit (required for PNG, ignored for PFM)

    Raises:
        ValueError: malformed header, non-finite or negative pixels
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".pfm":
        depth = _read_pfm(path)
    elif suffix == ".png":
        if scale is None or scale <= 0:
            raise ValueError(f"{path}: 16-bit PNG depth needs a positive scale, got {scale}")
        with Image.open(path) as img:
            if img.mode not in ("I;16", "I;16B", "I;16L", "I", "L"):
                raise ValueError(f"{path}: expected 16-bit grayscale PNG, got mode {img.mode}")
            depth = np.array(img).astype(np.float64) * scale
    else:
        raise ValueError(f"{path}: unsupported depth format {suffix!r}")
    _validate_raster(depth, str(path))
    return depth


def save_depth(path: str | Path, depth: DepthMap, scale: float | None = None) -> None:
    """Write a depth raster as PFM (float32) or as scaled 16-bit PNG."""
    path = Path(path)
    if depth.ndim != 2:
        raise ValueError(f"depth must be [H, W], got shape {depth.shape}")
    _validate_raster(depth, str(path))
    suffix = path.suffix.lower()
    if suffix == ".pfm":
        _write_pfm(path, depth)
    elif suffix == ".png":
        if scale is None or scale <= 0:
            raise ValueError(f"{path}: 16-bit PNG depth needs a positive scale, got {scale}")
        units = np.floor(depth / scale + 0.5)
        if units.max(initial=0) > np.iinfo(np.uint16).max:
            raise ValueError(f"{path}: depth {depth.max()} m exceeds 16-bit range at scale {scale}")
        Image.fromarray(units.astype(np.uint16)).save(path)
    else:
        raise ValueError(f"{path}: unsupported depth format {suffix!r}")


def find_depth_file(depth_dir: Path, stem: str) -> Path | None:
    for suffix in DEPTH_SUFFIXES:
        candidate = depth_dir / f"{stem}{suffix}"
        if candidate.exists():
            return candidate
    return None


def pyramid_targets(depth: DepthMap, levels=PYRAMID_LEVELS) -> DepthPyramid:
    """
    Average-pool the full-resolution map once per pyramid level.

    Level n uses window = stride = 2**n, so its raster is
    ceil(H / 2**n) x ceil(W / 2**n).
    """
    levels = sorted(levels)
    if not levels:
        raise ValueError("at least one pyramid level is required")
    coarsest = 2 ** levels[-1]
    h, w = depth.shape
    if h < coarsest or w < coarsest:
        raise ValueError(f"depth map {h}x{w} is smaller than the coarsest stride {coarsest}")
    return {n: avg_pool2d(depth, 2 ** n) for n in levels}


def inject_noise(depth: DepthMap, variance: float, seed: int) -> DepthMap:
    """Add i.i.d. zero-mean Gaussian noise of the given variance, then clamp at 0."""
    if variance < 0:
        raise ValueError(f"noise variance must be >= 0, got {variance}")
    if variance == 0:
        return depth.copy()
    rng = np.random.default_rng(seed)
    noisy = depth + rng.normal(0.0, np.sqrt(variance), size=depth.shape)
    return np.maximum(noisy, 0.0)


def clamp_log_domain(depth: DepthMap) -> DepthMap:
    return np.clip(depth, DEPTH_MIN, DEPTH_MAX)


def depth_summary(depth: DepthMap) -> dict:
    return {
        "height": int(depth.shape[0]),
        "width": int(depth.shape[1]),
        "min": float(depth.min()),
        "max": float(depth.max()),
        "mean": float(depth.mean()),
        "zero_pixels": int(np.count_nonzero(depth == 0)),
    }
