"""
Physics-driven haze synthesis with the Atmospheric Scattering Model.

    I(x, y) = J(x, y) * t(x, y) + A * (1 - t(x, y)),   t = exp(-beta * d)

Atmospheric light A and scattering coefficient beta are drawn per image from
truncated normal distributions by rejection sampling. Every draw comes from
an explicitly seeded generator; dataset synthesis seeds image i with
``base_seed ^ i`` so results do not depend on processing order.

sRGB values are treated as linear intensities in [0, 1].
"""

from __future__ import annotations

import json
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
from PIL import Image

try:
    from .console import get_console
    from .dataset_tools import ImageRecord, Manifest, save_manifest, to_uint8
    from .depth_pipeline import find_depth_file, load_depth
except ImportError:
    from console import get_console
    from dataset_tools import ImageRecord, Manifest, save_manifest, to_uint8
    from depth_pipeline import find_depth_file, load_depth

REJECTION_CAP = 10_000


@dataclass
class AtmosphereConfig:
    A_mean: float = 0.8
    A_std: float = 0.05
    A_min: float = 0.7
    A_max: float = 0.9
    beta_mean: float = 0.045
    beta_std: float = 0.02
    beta_min: float = 0.02
    beta_max: float = 0.16

    def validate(self) -> None:
        for name in ("A", "beta"):
            mean, std = getattr(self, f"{name}_mean"), getattr(self, f"{name}_std")
            lo, hi = getattr(self, f"{name}_min"), getattr(self, f"{name}_max")
            if not lo < hi:
                raise ValueError(f"{name}_min must be < {name}_max, got [{lo}, {hi}]")
            if std <= 0:
                raise ValueError(f"{name}_std must be > 0, got {std}")
            if not lo <= mean <= hi:
                raise ValueError(f"{name}_mean {mean} lies outside [{lo}, {hi}]")
        if self.A_min < 0 or self.A_max > 1:
            raise ValueError(f"atmospheric light range [{self.A_min}, {self.A_max}] must lie in [0, 1]")
        if self.beta_min < 0:
            raise ValueError(f"beta_min must be >= 0, got {self.beta_min}")

    @classmethod
    def from_dict(cls, data: dict) -> "AtmosphereConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown atmosphere config keys: {', '.join(sorted(unknown))}")
        config = cls(**{k: float(v) for k, v in data.items()})
        config.validate()
        return config

    def to_dict(self) -> dict:
        return asdict(self)


def load_atmosphere_config(path: str | Path | None) -> AtmosphereConfig:
    if path is None:
        return AtmosphereConfig()
    return AtmosphereConfig.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class HazeParams:
    A: float
    beta: float

    def to_dict(self) -> dict:
        return {"A": self.A, "beta": self.beta}


def _truncated_normal(rng: np.random.Generator, mean: float, std: float, lo: float, hi: float) -> float:
    for _ in range(REJECTION_CAP):
        value = rng.normal(mean, std)
        if lo <= value <= hi:
            return float(value)
    raise RuntimeError(
        f"truncated normal N({mean}, {std}^2) on [{lo}, {hi}] rejected {REJECTION_CAP} draws; "
        "the configuration is degenerate"
    )


def sample_atmosphere(config: AtmosphereConfig, seed: int) -> HazeParams:
    """Draw (A, beta) for one image; identical seed and config give identical output."""
    rng = np.random.default_rng(seed)
    a = _truncated_normal(rng, config.A_mean, config.A_std, config.A_min, config.A_max)
    beta = _truncated_normal(rng, config.beta_mean, config.beta_std, config.beta_min, config.beta_max)
    return HazeParams(A=a, beta=beta)


def _truncated_normal_batch(
    rng: np.random.Generator, n: int, mean: float, std: float, lo: float, hi: float
) -> np.ndarray:
    out = np.empty(n)
    filled = 0
    for _ in range(REJECTION_CAP):
        if filled == n:
            return out
        draws = rng.normal(mean, std, size=max(2 * (n - filled), 16))
        accepted = draws[(draws >= lo) & (draws <= hi)][: n - filled]
        out[filled:filled + accepted.size] = accepted
        filled += accepted.size
    if filled < n:
        raise RuntimeError(f"truncated normal on [{lo}, {hi}] could not be filled; degenerate configuration")
    return out


def sample_atmosphere_batch(config: AtmosphereConfig, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised sampler for Monte-Carlo checks: returns (A[n], beta[n])."""
    rng = np.random.default_rng(seed)
    a = _truncated_normal_batch(rng, n, config.A_mean, config.A_std, config.A_min, config.A_max)
    beta = _truncated_normal_batch(rng, n, config.beta_mean, config.beta_std, config.beta_min, config.beta_max)
    return a, beta


def transmission_map(depth: np.ndarray, beta: float) -> np.ndarray:
    """t = exp(-beta * d), elementwise; exactly 1 where d == 0."""
    if beta < 0:
        raise ValueError(f"scattering coefficient must be >= 0, got {beta}")
    negative = depth < 0
    if negative.any():
        row, col = np.argwhere(negative)[0]
        raise ValueError(f"negative depth {depth[row, col]} at (row {row}, col {col})")
    return np.exp(-beta * depth)


def composite_haze(clear: np.ndarray, t: np.ndarray, A: float) -> np.ndarray:
    """
    Apply the scattering model to a clear image.

    Args:
        clear: [3, H, W] in [0, 1]
        t: [H, W] transmission in (0, 1]
        A: atmospheric light
    """
    if clear.ndim != 3 or clear.shape[0] != 3:
        raise ValueError(f"clear image must be [3, H, W], got shape {clear.shape}")
    if clear.shape[1:] != t.shape:
        raise ValueError(f"resolution mismatch: image {clear.shape[1:]}, transmission {t.shape}")
    if clear.min(initial=0.0) < 0 or clear.max(initial=0.0) > 1:
        raise ValueError("clear image values must lie in [0, 1]")
    return clear * t[None] + A * (1.0 - t[None])


def synthesize_image(clear: np.ndarray, depth: np.ndarray, params: HazeParams) -> np.ndarray:
    """Unquantised hazy raster for one image."""
    return composite_haze(clear, transmission_map(depth, params.beta), params.A)


def load_rgb(path: str | Path) -> np.ndarray:
    """8-bit RGB PNG as a [3, H, W] float64 array in [0, 1]."""
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64).transpose(2, 0, 1) / 255.0


def save_rgb(path: str | Path, image: np.ndarray) -> None:
    Image.fromarray(to_uint8(image.transpose(1, 2, 0))).save(path)


@dataclass
class _SynthJob:
    index: int
    record: ImageRecord
    image_path: Path
    depth_path: Path | None
    depth_scale: float | None


def _plan_jobs(
    image_dir: Path | None,
    depth_dir: Path | None,
    source: Manifest | None,
    depth_scale: float | None,
) -> list[_SynthJob]:
    jobs = []
    if source is None:
        for index, path in enumerate(sorted(image_dir.glob("*.png"))):
            with Image.open(path) as img:
                width, height = img.size
            record = ImageRecord(id=index, file=path.name, width=width, height=height)
            depth_path = find_depth_file(depth_dir, path.stem)
            jobs.append(_SynthJob(index, record, path, depth_path, depth_scale))
        return jobs
    for index, record in enumerate(source.images):
        image_path = image_dir / Path(record.file).name if image_dir else source.image_path(record)
        if depth_dir is not None:
            depth_path = depth_dir / Path(record.depth_file).name if record.depth_file else None
            if depth_path is not None and not depth_path.exists():
                depth_path = None
        else:
            depth_path = source.depth_path(record)
        scale = record.depth_scale if record.depth_scale is not None else depth_scale
        jobs.append(_SynthJob(index, record, image_path, depth_path, scale))
    return jobs


def synthesize_dataset(
    image_dir: str | Path | None,
    depth_dir: str | Path | None,
    out_dir: str | Path,
    config: AtmosphereConfig,
    base_seed: int,
    source: Manifest | None = None,
    depth_scale: float | None = None,
    threads: int | None = None,
) -> tuple[Manifest, list[str]]:
    """
    Render one hazy image per clear image into ``out_dir``.

    Images come either from ``image_dir`` (every *.png, depth looked up by
    file stem in ``depth_dir``) or from a ``source`` manifest whose
    annotations are carried over. Depth rasters are copied next to the hazy
    images so the output manifest is self-contained. Images without a
    usable depth raster are skipped and listed in the returned report.
    """
    config.validate()
    console = get_console()
    image_dir = Path(image_dir) if image_dir is not None else None
    depth_dir = Path(depth_dir) if depth_dir is not None else None
    out_dir = Path(out_dir)
    for directory in (image_dir, depth_dir):
        if directory is not None and not directory.is_dir():
            raise FileNotFoundError(f"directory not found: {directory}")
    if source is None and (image_dir is None or depth_dir is None):
        raise ValueError("image and depth directories are required without a source manifest")

    jobs = _plan_jobs(image_dir, depth_dir, source, depth_scale)
    console.info(f"Rendering {len(jobs)} image(s) into {out_dir}")
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "depth").mkdir(parents=True, exist_ok=True)

    def work(job: _SynthJob) -> tuple[ImageRecord | None, str | None]:
        name = Path(job.record.file).name
        if job.depth_path is None:
            return None, f"{name}: missing depth file"
        try:
            clear = load_rgb(job.image_path)
            depth = load_depth(job.depth_path, job.depth_scale)
        except (OSError, ValueError) as e:
            return None, f"{name}: {e}"
        if depth.shape != clear.shape[1:]:
            return None, f"{name}: depth {depth.shape} does not match image {clear.shape[1:]}"
        seed = base_seed ^ job.index
        params = sample_atmosphere(config, seed)
        save_rgb(out_dir / "images" / name, synthesize_image(clear, depth, params))
        shutil.copyfile(job.depth_path, out_dir / "depth" / job.depth_path.name)
        record = ImageRecord(
            id=job.record.id,
            file=f"images/{name}",
            width=clear.shape[2],
            height=clear.shape[1],
            depth_file=f"depth/{job.depth_path.name}",
            depth_scale=job.depth_scale if job.depth_path.suffix.lower() == ".png" else None,
            split=job.record.split,
            haze_params={**params.to_dict(), "seed": seed},
        )
        return record, None

    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(work, jobs))

    manifest = Manifest(root=out_dir)
    skipped = []
    for record, problem in results:
        if problem is not None:
            skipped.append(problem)
            continue
        manifest.images.append(record)
    if source is not None:
        manifest.categories = list(source.categories)
        kept = {img.id for img in manifest.images}
        manifest.annotations = [
            replace(ann) for ann in source.annotations if ann.image_id in kept
        ]
    manifest.info = {"atmosphere": config.to_dict(), "base_seed": base_seed, "skipped": skipped}
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest, skipped
