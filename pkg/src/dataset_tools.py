"""
Dataset manifest management and the procedural toy corpus.

A manifest is one JSON document listing images (with their depth rasters,
split labels and recorded haze parameters), box annotations and the
category list. File paths inside it are relative to the manifest's
directory.
"""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy.stats import spearmanr

try:
    from .console import get_console
    from .depth_pipeline import load_depth, save_depth
except ImportError:
    from console import get_console
    from depth_pipeline import load_depth, save_depth

CATEGORIES = ("car", "truck", "bus")
SPLITS = ("train", "val", "test", "real_train", "real_test")
SIZE_GROUPS = ("small", "medium", "large")

SMALL_RATIO = 0.001
LARGE_RATIO = 0.01


@dataclass
class ImageRecord:
    id: int
    file: str
    width: int
    height: int
    depth_file: str | None = None
    depth_scale: float | None = None
    split: str = "train"
    haze_params: dict | None = None


@dataclass
class Annotation:
    id: int
    image_id: int
    bbox: list[float]
    category: str


@dataclass
class Manifest:
    images: list[ImageRecord] = field(default_factory=list)
    annotations: list[Annotation] = field(default_factory=list)
    categories: list[str] = field(default_factory=lambda: list(CATEGORIES))
    info: dict = field(default_factory=dict)
    root: Path = field(default=Path("."), compare=False)

    def to_dict(self) -> dict:
        return {
            "images": [asdict(img) for img in self.images],
            "annotations": [asdict(ann) for ann in self.annotations],
            "categories": list(self.categories),
            "info": self.info,
        }

    @classmethod
    def from_dict(cls, data: dict, root: Path = Path(".")) -> "Manifest":
        try:
            images = [ImageRecord(**img) for img in data.get("images", [])]
            annotations = [Annotation(**ann) for ann in data.get("annotations", [])]
        except TypeError as e:
            raise ValueError(f"manifest record has unexpected fields: {e}") from None
        return cls(
            images=images,
            annotations=annotations,
            categories=list(data.get("categories", CATEGORIES)),
            info=dict(data.get("info", {})),
            root=root,
        )

    def image_path(self, record: ImageRecord) -> Path:
        return self.root / record.file

    def depth_path(self, record: ImageRecord) -> Path | None:
        return self.root / record.depth_file if record.depth_file else None

    def annotations_by_image(self) -> dict[int, list[Annotation]]:
        grouped: dict[int, list[Annotation]] = defaultdict(list)
        for ann in self.annotations:
            grouped[ann.image_id].append(ann)
        return grouped

    def subset(self, split: str | None) -> "Manifest":
        """Images (and their annotations) carrying the given split label."""
        if split is None:
            return self
        images = [img for img in self.images if img.split == split]
        keep = {img.id for img in images}
        return Manifest(
            images=images,
            annotations=[a for a in self.annotations if a.image_id in keep],
            categories=list(self.categories),
            info=dict(self.info),
            root=self.root,
        )

    def validate(self) -> None:
        image_ids = [img.id for img in self.images]
        if len(set(image_ids)) != len(image_ids):
            raise ValueError("manifest image ids are not unique")
        ann_ids = [ann.id for ann in self.annotations]
        if len(set(ann_ids)) != len(ann_ids):
            raise ValueError("manifest annotation ids are not unique")
        by_id = {img.id: img for img in self.images}
        for img in self.images:
            if img.split not in SPLITS:
                raise ValueError(f"image {img.id}: unknown split {img.split!r}")
        for ann in self.annotations:
            img = by_id.get(ann.image_id)
            if img is None:
                raise ValueError(f"annotation {ann.id} references missing image {ann.image_id}")
            if ann.category not in self.categories:
                raise ValueError(f"annotation {ann.id}: unknown category {ann.category!r}")
            x, y, w, h = ann.bbox
            if w <= 0 or h <= 0:
                raise ValueError(f"annotation {ann.id}: non-positive box size {w}x{h}")
            if x < 0 or y < 0 or x + w > img.width or y + h > img.height:
                raise ValueError(
                    f"annotation {ann.id}: bbox {ann.bbox} outside image {img.width}x{img.height}"
                )


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    data = json.loads(path.read_text(encoding="utf-8"))
    manifest = Manifest.from_dict(data, root=path.parent)
    manifest.validate()
    return manifest


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(manifest.to_dict(), indent=2, sort_keys=True)
    path.write_text(text + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Census
# ---------------------------------------------------------------------------

def size_group(bbox: Sequence[float], image_width: int, image_height: int) -> str:
    """
    Classify a box by its area-to-image-area ratio.

    small: < 0.1%, medium: 0.1% to 1% inclusive, large: > 1%.
    """
    image_area = image_width * image_height
    if image_area <= 0:
        raise ValueError(f"image area must be positive, got {image_width}x{image_height}")
    ratio = (bbox[2] * bbox[3]) / image_area
    if ratio < SMALL_RATIO:
        return "small"
    if ratio <= LARGE_RATIO:
        return "medium"
    return "large"


def instance_stats(manifest: Manifest) -> dict[str, dict[str, dict[str, int]]]:
    """
    Annotation counts per split x category x size group.

    Raises ValueError for dangling image references or labels outside the
    manifest's splits and categories.
    """
    manifest.validate()
    table = {
        split: {cat: {group: 0 for group in SIZE_GROUPS} for cat in manifest.categories}
        for split in SPLITS
    }
    by_id = {img.id: img for img in manifest.images}
    for ann in manifest.annotations:
        img = by_id[ann.image_id]
        table[img.split][ann.category][size_group(ann.bbox, img.width, img.height)] += 1
    return table


def image_counts(manifest: Manifest) -> dict[str, int]:
    counts = Counter(img.split for img in manifest.images)
    return {split: counts.get(split, 0) for split in SPLITS}


def scale_histogram(manifest: Manifest, split: str | None = None) -> dict[str, int]:
    """Object scale distribution: sqrt(box area) in power-of-two bins."""
    subset = manifest.subset(split)
    counts: Counter[int] = Counter()
    for ann in subset.annotations:
        scale = math.sqrt(ann.bbox[2] * ann.bbox[3])
        counts[max(0, math.floor(math.log2(scale)))] += 1
    return {f"2^{k}": counts[k] for k in sorted(counts)}


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

def _default_split_names(parts: int) -> tuple[str, ...]:
    if parts == 3:
        return ("train", "val", "test")
    if parts == 2:
        return ("train", "test")
    raise ValueError(f"no default split names for {parts} ratio parts; pass names explicitly")


def parse_ratios(text: str) -> list[int]:
    try:
        ratios = [int(part) for part in text.split(":")]
    except ValueError:
        raise ValueError(f"ratios must look like 8:1:2, got {text!r}") from None
    return ratios


def _dominant_category(anns: list[Annotation], categories: Sequence[str]) -> str:
    if not anns:
        return ""
    counts = Counter(a.category for a in anns)
    return max(categories, key=lambda c: (counts.get(c, 0), -categories.index(c)))


def stratified_split(
    manifest: Manifest,
    ratios: Sequence[int],
    seed: int,
    names: Sequence[str] | None = None,
) -> Manifest:
    """
    Assign split labels in proportion to ``ratios``.

    Each split beyond the first gets floor(N * r / sum(r)) images and the
    first split takes the remainder. Images are shuffled within strata
    (dominant category) and the strata are interleaved. Each image then goes
    to the split whose share of its own stratum lags furthest behind the
    ratios, among splits that still have room, so every split sees each
    stratum in proportion and the totals are exact.
    """
    if not ratios or any(r <= 0 for r in ratios):
        raise ValueError(f"ratio parts must be positive integers, got {list(ratios)}")
    names = tuple(names) if names else _default_split_names(len(ratios))
    if len(names) != len(ratios):
        raise ValueError(f"{len(ratios)} ratio parts but {len(names)} split names")
    for name in names:
        if name not in SPLITS:
            raise ValueError(f"unknown split name {name!r}")
    n = len(manifest.images)
    if n < len(ratios):
        raise ValueError(f"{n} images cannot fill {len(ratios)} splits")

    total = sum(ratios)
    targets = [n * r // total for r in ratios]
    targets[0] += n - sum(targets)

    rng = np.random.default_rng(seed)
    by_image = manifest.annotations_by_image()
    strata: dict[str, list[ImageRecord]] = defaultdict(list)
    for img in manifest.images:
        strata[_dominant_category(by_image.get(img.id, []), manifest.categories)].append(img)

    keyed = []
    for s_index, key in enumerate(sorted(strata)):
        members = strata[key]
        order = rng.permutation(len(members))
        for rank, member_index in enumerate(order):
            keyed.append(((rank + 0.5) / len(members), s_index, rank, members[member_index]))
    keyed.sort(key=lambda item: item[:3])

    room = list(targets)
    per_stratum = [[0] * len(targets) for _ in strata]
    labels: dict[int, str] = {}
    for _, s_index, rank, img in keyed:
        assigned = per_stratum[s_index]
        # integer form of target_i * (rank + 1) / n - assigned_i
        deficits = [targets[i] * (rank + 1) - assigned[i] * n for i in range(len(targets))]
        open_splits = [i for i in range(len(targets)) if room[i] > 0]
        choice = max(open_splits, key=lambda i: (deficits[i], -i))
        assigned[choice] += 1
        room[choice] -= 1
        labels[img.id] = names[choice]

    images = [
        ImageRecord(**{**asdict(img), "split": labels[img.id]}) for img in manifest.images
    ]
    return Manifest(
        images=images,
        annotations=list(manifest.annotations),
        categories=list(manifest.categories),
        info=dict(manifest.info),
        root=manifest.root,
    )


# ---------------------------------------------------------------------------
# Depth / size correlation
# ---------------------------------------------------------------------------

@dataclass
class CorrelationReport:
    rho: float | None
    samples: int
    skipped: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"spearman_rho": self.rho, "samples": self.samples, "skipped": self.skipped}


def box_mean_depth(depth: np.ndarray, bbox: Sequence[float]) -> float:
    x, y, w, h = bbox
    r0, r1 = int(math.floor(y)), int(math.ceil(y + h))
    c0, c1 = int(math.floor(x)), int(math.ceil(x + w))
    window = depth[max(r0, 0):min(r1, depth.shape[0]), max(c0, 0):min(c1, depth.shape[1])]
    if window.size == 0:
        raise ValueError(f"bbox {list(bbox)} does not overlap the depth raster")
    return float(window.mean())


def depth_size_correlation(manifest: Manifest, depth_dir: str | Path | None = None) -> CorrelationReport:
    """
    Spearman rank correlation between mean in-box depth and box pixel area.

    Ties get average ranks. Annotations whose depth raster cannot be read
    are skipped and listed in the report.
    """
    console = get_console()
    depth_dir = Path(depth_dir) if depth_dir is not None else None
    by_image = manifest.annotations_by_image()
    depths: list[float] = []
    areas: list[float] = []
    skipped: list[str] = []
    for img in manifest.images:
        anns = by_image.get(img.id, [])
        if not anns:
            continue
        if img.depth_file is None:
            skipped.extend(f"annotation {a.id}: image {img.id} has no depth file" for a in anns)
            continue
        path = depth_dir / Path(img.depth_file).name if depth_dir else manifest.root / img.depth_file
        try:
            depth = load_depth(path, img.depth_scale)
        except (OSError, ValueError) as e:
            console.warn(f"  Skipping depth {path}: {e}")
            skipped.extend(f"annotation {a.id}: {e}" for a in anns)
            continue
        for ann in anns:
            try:
                depths.append(box_mean_depth(depth, ann.bbox))
            except ValueError as e:
                skipped.append(f"annotation {ann.id}: {e}")
                continue
            areas.append(ann.bbox[2] * ann.bbox[3])

    if len(depths) < 2:
        return CorrelationReport(rho=None, samples=len(depths), skipped=skipped)
    rho = spearmanr(depths, areas).statistic
    rho = None if rho is None or not np.isfinite(rho) else float(rho)
    return CorrelationReport(rho=rho, samples=len(depths), skipped=skipped)


# ---------------------------------------------------------------------------
# Toy corpus
# ---------------------------------------------------------------------------

# length x width (meters) and RGB body color; horizontal orientation
VEHICLE_TEMPLATES = {
    "car": (4.5, 2.2, (0.85, 0.15, 0.15)),
    "truck": (5.5, 2.4, (0.20, 0.35, 0.85)),
    "bus": (6.5, 2.6, (0.95, 0.80, 0.10)),
}
PLACEMENT_ATTEMPTS = 100


@dataclass
class ToyDatasetConfig:
    num_images: int = 100
    resolution: int = 128
    objects_per_image: int = 6
    seed: int = 0
    near_depth: float = 10.0
    far_depth: float = 200.0
    focal_fraction: float = 0.5

    def validate(self) -> None:
        if self.num_images < 0:
            raise ValueError(f"num_images must be >= 0, got {self.num_images}")
        if self.resolution < 128:
            raise ValueError(f"resolution must be >= 128, got {self.resolution}")
        if self.objects_per_image < 0:
            raise ValueError(f"objects_per_image must be >= 0, got {self.objects_per_image}")
        if not 0 < self.near_depth < self.far_depth:
            raise ValueError("depth range must satisfy 0 < near_depth < far_depth")


def _ground_depth(config: ToyDatasetConfig) -> np.ndarray:
    """Inverse depth linear in image row: far at the top, near at the bottom."""
    r = config.resolution
    rows = np.arange(r, dtype=np.float64)[:, None] / (r - 1)
    inv = 1.0 / config.far_depth + rows * (1.0 / config.near_depth - 1.0 / config.far_depth)
    return np.broadcast_to(1.0 / inv, (r, r)).copy()


def _row_at_depth(d: float, config: ToyDatasetConfig) -> int:
    inv_far, inv_near = 1.0 / config.far_depth, 1.0 / config.near_depth
    frac = (1.0 / d - inv_far) / (inv_near - inv_far)
    return int(round(frac * (config.resolution - 1)))


def _boxes_overlap(a: Sequence[int], b: Sequence[int], margin: int = 1) -> bool:
    return not (
        a[0] + a[2] + margin <= b[0]
        or b[0] + b[2] + margin <= a[0]
        or a[1] + a[3] + margin <= b[1]
        or b[1] + b[3] + margin <= a[1]
    )


def render_toy_image(config: ToyDatasetConfig, seed: int):
    """
    Render one toy scene.

    Returns (rgb float image [H, W, 3] in [0, 1], depth [H, W] meters,
    objects as (bbox [x, y, w, h], category), placement failures).
    """
    rng = np.random.default_rng(seed)
    r = config.resolution
    ground = _ground_depth(config)
    depth = ground.copy()
    proximity = (1.0 / ground - 1.0 / config.far_depth) / (1.0 / config.near_depth - 1.0 / config.far_depth)

    tint = np.array([0.35, 0.45, 0.30]) + rng.uniform(-0.05, 0.05, size=3)
    texture = rng.normal(0.0, 0.06, size=(r, r, 1)) * (0.3 + 0.7 * proximity[..., None])
    image = np.clip(tint[None, None, :] + texture, 0.0, 1.0)

    focal = config.focal_fraction * r
    d_min, d_max = config.near_depth * 1.2, config.far_depth * 0.5
    objects: list[tuple[list[int], str]] = []
    failures = 0
    for _ in range(config.objects_per_image):
        placed = False
        for _ in range(PLACEMENT_ATTEMPTS):
            category = CATEGORIES[int(rng.integers(len(CATEGORIES)))]
            length, width, _ = VEHICLE_TEMPLATES[category]
            d = float(rng.uniform(d_min, d_max))
            jitter = float(rng.uniform(0.9, 1.1))
            w = max(2, int(round(length * focal / d * jitter)))
            h = max(2, int(round(width * focal / d * jitter)))
            bottom = _row_at_depth(d, config)
            y = bottom - h + 1
            if w >= r or y < 0:
                continue
            x = int(rng.integers(0, r - w + 1))
            box = [x, y, w, h]
            if any(_boxes_overlap(box, other) for other, _ in objects):
                continue
            objects.append((box, category))
            placed = True
            break
        if not placed:
            failures += 1

    # paint far objects first
    for box, category in sorted(objects, key=lambda o: o[0][1]):
        x, y, w, h = box
        _, _, color = VEHICLE_TEMPLATES[category]
        shade = float(rng.uniform(0.85, 1.0))
        image[y:y + h, x:x + w] = np.array(color) * shade
        cab = x + int(w * 0.65)
        image[y:y + h, cab:cab + max(1, w // 8)] *= 0.5
        depth[y:y + h, x:x + w] = ground[y + h - 1, 0]
    return image, depth, objects, failures


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Round half away from zero onto 0..255."""
    return np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def generate_toy_dataset(config: ToyDatasetConfig, out_dir: str | Path, threads: int | None = None) -> Manifest:
    """
    Write a toy corpus (images/, depth/, manifest.json) under ``out_dir``.

    Image i is rendered from seed ``config.seed ^ i`` so output does not
    depend on thread scheduling.
    """
    config.validate()
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "depth").mkdir(parents=True, exist_ok=True)

    def work(index: int):
        image, depth, objects, failures = render_toy_image(config, config.seed ^ index)
        name = f"{index:06d}"
        Image.fromarray(to_uint8(image)).save(out_dir / "images" / f"{name}.png")
        save_depth(out_dir / "depth" / f"{name}.pfm", depth)
        return name, objects, failures

    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(work, range(config.num_images)))

    manifest = Manifest(root=out_dir)
    failures_by_image = {}
    for index, (name, objects, failures) in enumerate(results):
        manifest.images.append(
            ImageRecord(
                id=index,
                file=f"images/{name}.png",
                width=config.resolution,
                height=config.resolution,
                depth_file=f"depth/{name}.pfm",
            )
        )
        for box, category in objects:
            manifest.annotations.append(
                Annotation(
                    id=len(manifest.annotations),
                    image_id=index,
                    bbox=[float(v) for v in box],
                    category=category,
                )
            )
        if failures:
            failures_by_image[str(index)] = failures
    if failures_by_image:
        get_console().warn(
            f"Placement failed for {sum(failures_by_image.values())} object(s) "
            f"in {len(failures_by_image)} image(s)"
        )
    manifest.info = {"generator": asdict(config), "placement_failures": failures_by_image}
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
