"""
Progressive Domain Fine-Tuning.

Stage 1 adapts the seeded initial model to simulated haze with the first
backbone stage frozen. Stage 2 adapts to real haze with backbone stages 1..k
frozen and the learning rate scaled by gamma. Optimisation is plain SGD with
momentum and weight decay; frozen parameters (and the running statistics of
frozen norm layers) are never written.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

try:
    from .console import get_console
    from .dataset_tools import ImageRecord, Manifest, load_manifest
    from .depth_pipeline import clamp_log_domain, inject_noise, load_depth, pyramid_targets
    from .evaluator import Detection, EvaluationReport, evaluate
    from .losses import (
        DEPTH_LOSSES,
        DetectionTargets,
        depth_loss_pyramid,
        detection_loss,
        encode_targets,
        total_loss,
    )
    from .tensor_core import Tensor
    from .toy_detector import (
        BACKBONE_STAGES,
        LEVELS,
        ToyConfig,
        ToyModel,
        detect,
        read_tensor_bytes,
        save_checkpoint,
    )
except ImportError:
    from console import get_console
    from dataset_tools import ImageRecord, Manifest, load_manifest
    from depth_pipeline import clamp_log_domain, inject_noise, load_depth, pyramid_targets
    from evaluator import Detection, EvaluationReport, evaluate
    from losses import (
        DEPTH_LOSSES,
        DetectionTargets,
        depth_loss_pyramid,
        detection_loss,
        encode_targets,
        total_loss,
    )
    from tensor_core import Tensor
    from toy_detector import (
        BACKBONE_STAGES,
        LEVELS,
        ToyConfig,
        ToyModel,
        detect,
        read_tensor_bytes,
        save_checkpoint,
    )

LOG_NAME = "train_log.jsonl"


@dataclass
class StageConfig:
    dataset: str | None = None
    split: str | None = "train"
    epochs: int = 1
    lr: float = 0.02
    momentum: float = 0.938
    weight_decay: float = 1e-4
    frozen_prefixes: tuple[str, ...] = ()
    seed: int = 0
    batch_size: int = 2
    loss_weight: float = 0.2
    alpha: float = 0.7
    depth_loss: str = "sir"
    depth_noise_variance: float = 0.0

    def validate(self) -> None:
        if not self.lr > 0:
            raise ValueError(f"learning rate must be > 0, got {self.lr}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight decay must be >= 0, got {self.weight_decay}")
        if self.loss_weight < 0:
            raise ValueError(f"loss_weight must be >= 0, got {self.loss_weight}")
        if not 0 <= self.alpha <= 1:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.depth_loss not in DEPTH_LOSSES:
            raise ValueError(f"depth_loss must be one of {', '.join(DEPTH_LOSSES)}, got {self.depth_loss!r}")
        if self.depth_noise_variance < 0:
            raise ValueError(f"depth noise variance must be >= 0, got {self.depth_noise_variance}")

    @classmethod
    def from_dict(cls, data: dict) -> "StageConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown stage config keys: {', '.join(sorted(unknown))}")
        values = dict(data)
        if "frozen_prefixes" in values:
            values["frozen_prefixes"] = tuple(values["frozen_prefixes"])
        config = cls(**values)
        config.validate()
        return config

    def to_dict(self) -> dict:
        data = asdict(self)
        data["frozen_prefixes"] = list(self.frozen_prefixes)
        return data


def scaled_lr(lr: float, gamma: float) -> float:
    """lr * gamma, rounded to 12 significant digits so 0.02 * 0.1 is exactly 0.002."""
    return float(f"{lr * gamma:.12g}")


def backbone_prefixes(k: int) -> tuple[str, ...]:
    return tuple(f"backbone.{s}" for s in range(1, k + 1))


@dataclass
class PdftConfig:
    stage1: StageConfig = field(default_factory=StageConfig)
    stage2: StageConfig = field(default_factory=StageConfig)
    gamma: float = 0.1
    k: int = 3
    model: ToyConfig = field(default_factory=ToyConfig)

    def __post_init__(self):
        self.stage1 = replace(self.stage1, frozen_prefixes=backbone_prefixes(1))
        self.stage2 = replace(
            self.stage2,
            lr=scaled_lr(self.stage1.lr, self.gamma),
            frozen_prefixes=backbone_prefixes(self.k),
        )

    def validate(self) -> None:
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if not 1 <= self.k <= BACKBONE_STAGES:
            raise ValueError(f"k must be in [1, {BACKBONE_STAGES}], got {self.k}")
        self.stage1.validate()
        self.stage2.validate()
        self.model.validate()
        if self.stage2.lr != scaled_lr(self.stage1.lr, self.gamma):
            raise ValueError(f"stage-2 lr {self.stage2.lr} != stage-1 lr {self.stage1.lr} x gamma {self.gamma}")

    @classmethod
    def from_dict(cls, data: dict) -> "PdftConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown pdft config keys: {', '.join(sorted(unknown))}")
        stage1 = dict(data.get("stage1", {}))
        stage2 = dict(data.get("stage2", {}))
        derived = [f"stage1.{key}" for key in ("frozen_prefixes",) if key in stage1]
        derived += [f"stage2.{key}" for key in ("lr", "frozen_prefixes") if key in stage2]
        if derived:
            raise ValueError(f"{', '.join(derived)} are derived from stage1.lr, gamma and k; remove them")
        config = cls(
            stage1=StageConfig.from_dict(stage1),
            stage2=StageConfig.from_dict(stage2),
            gamma=float(data.get("gamma", 0.1)),
            k=int(data.get("k", 3)),
            model=ToyConfig.from_dict(data.get("model", {})),
        )
        config.validate()
        return config

    def to_dict(self) -> dict:
        return {
            "stage1": self.stage1.to_dict(),
            "stage2": self.stage2.to_dict(),
            "gamma": self.gamma,
            "k": self.k,
            "model": self.model.to_dict(),
        }


# ---------------------------------------------------------------------------
# Freezing and the optimizer step
# ---------------------------------------------------------------------------

def _has_prefix(name: str, prefix: str) -> bool:
    if prefix.endswith("."):
        return name.startswith(prefix)
    return name == prefix or name.startswith(prefix + ".")


def freeze_mask(model: ToyModel, frozen_prefixes: Sequence[str]) -> dict[str, bool]:
    """True for every parameter whose dotted name starts with a frozen prefix."""
    names = model.parameter_names()
    for prefix in frozen_prefixes:
        if not any(_has_prefix(name, prefix) for name in names):
            raise ValueError(f"frozen prefix {prefix!r} matches no parameter")
    return {name: any(_has_prefix(name, prefix) for prefix in frozen_prefixes) for name in names}


def sgd_step(
    params: dict[str, Tensor],
    grads: dict[str, Tensor],
    velocity: dict[str, Tensor],
    lr: float,
    momentum: float,
    weight_decay: float,
    mask: dict[str, bool],
) -> tuple[dict[str, Tensor], dict[str, Tensor]]:
    """
    v <- momentum * v + g + weight_decay * p;  p <- p - lr * v

    Masked entries are returned as the very same array objects. A non-finite
    gradient on any trainable parameter rejects the whole step.
    """
    for name, grad in grads.items():
        if not mask.get(name, False) and not np.all(np.isfinite(grad)):
            raise ValueError(f"non-finite gradient for {name}; step rejected")
    new_params, new_velocity = {}, {}
    for name, value in params.items():
        if mask.get(name, False):
            new_params[name] = value
            new_velocity[name] = velocity[name]
            continue
        v = momentum * velocity[name] + grads[name] + weight_decay * value
        new_velocity[name] = v
        new_params[name] = value - lr * v
    return new_params, new_velocity


# ---------------------------------------------------------------------------
# Samples
# ---------------------------------------------------------------------------

@dataclass
class Sample:
    image_id: int
    image: Tensor                 # [3, S, S]
    depth: Tensor | None          # [S, S] meters
    targets: DetectionTargets
    offset: tuple[int, int]       # crop origin in the source image
    scale: float                  # model pixels per source pixel


def _center_crop(width: int, height: int) -> tuple[int, int, int]:
    side = min(width, height)
    return (width - side) // 2, (height - side) // 2, side


def prepare_sample(manifest: Manifest, record: ImageRecord, config: ToyConfig, annotations=()) -> Sample:
    """Center-crop to a square, resize to the model input, and encode targets."""
    size = config.input_size
    with Image.open(manifest.image_path(record)) as img:
        rgb = img.convert("RGB")
        x0, y0, side = _center_crop(*rgb.size)
        rgb = rgb.crop((x0, y0, x0 + side, y0 + side)).resize((size, size), Image.Resampling.BILINEAR)
    image = np.asarray(rgb, dtype=np.float64).transpose(2, 0, 1) / 255.0
    scale = size / side

    depth = None
    depth_path = manifest.depth_path(record)
    if depth_path is not None:
        full = load_depth(depth_path, record.depth_scale)
        if full.shape != (record.height, record.width):
            raise ValueError(f"{depth_path}: depth {full.shape} does not match image {record.height}x{record.width}")
        raster = Image.fromarray(full.astype(np.float32))
        raster = raster.crop((x0, y0, x0 + side, y0 + side)).resize((size, size), Image.Resampling.BILINEAR)
        depth = np.maximum(np.asarray(raster, dtype=np.float64), 0.0)

    objects = []
    for ann in annotations:
        x, y, w, h = ann.bbox
        left = max((x - x0) * scale, 0.0)
        top = max((y - y0) * scale, 0.0)
        right = min((x + w - x0) * scale, float(size))
        bottom = min((y + h - y0) * scale, float(size))
        if right - left > 0 and bottom - top > 0:
            objects.append(([left, top, right - left, bottom - top], manifest.categories.index(ann.category)))
    targets = encode_targets(objects, config.level_shapes(), config.num_classes)
    return Sample(record.id, image, depth, targets, (x0, y0), scale)


def load_samples(
    manifest: Manifest, split: str | None, config: ToyConfig, threads: int | None = None
) -> list[Sample]:
    subset = manifest.subset(split)
    if len(subset.categories) != config.num_classes:
        raise ValueError(
            f"model predicts {config.num_classes} classes, manifest has {len(subset.categories)} categories"
        )
    by_image = subset.annotations_by_image()
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda r: prepare_sample(subset, r, config, by_image.get(r.id, [])), subset.images))


def _depth_labels(sample: Sample, stage: StageConfig) -> dict[int, Tensor] | None:
    if sample.depth is None:
        return None
    depth = inject_noise(sample.depth, stage.depth_noise_variance, stage.seed ^ sample.image_id)
    return {n: clamp_log_domain(t) for n, t in pyramid_targets(depth, LEVELS).items()}


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class StageResult:
    model: ToyModel
    history: list[dict]


def _sample_gradients(model: ToyModel, sample: Sample, labels, stage: StageConfig, update):
    out, cache = model.forward(sample.image, "batch", update)
    det = detection_loss(out.cls, out.box, sample.targets)
    dep = 0.0
    grad_depth = None
    if model.config.use_msdp and labels is not None:
        dep, grad_depth = depth_loss_pyramid(out.depth, labels, stage.depth_loss, stage.alpha)
        grad_depth = {n: g * stage.loss_weight for n, g in grad_depth.items()}
    loss = total_loss(det.value, dep, stage.loss_weight)
    return loss, model.backward(cache, det.grad_cls, det.grad_box, grad_depth)


def run_stage(
    model: ToyModel,
    samples: Sequence[Sample],
    stage: StageConfig,
    name: str = "stage",
    log_path: str | Path | None = None,
) -> StageResult:
    """
    Train a copy of ``model`` for ``stage.epochs`` epochs of seeded-shuffled
    batches. Returns the trained copy and one history record per epoch.
    """
    stage.validate()
    if not samples:
        raise ValueError("empty dataset: no images in the selected split")
    console = get_console()
    model = model.copy()
    mask = freeze_mask(model, stage.frozen_prefixes)
    frozen = {n for n, m in mask.items() if m}
    frozen_count = int(sum(model.params[n].size for n in frozen))

    def update(prefix: str) -> bool:
        return f"{prefix}.gamma" not in frozen

    labels = {s.image_id: _depth_labels(s, stage) for s in samples}
    velocity = {n: np.zeros_like(v) for n, v in model.params.items()}
    rng = np.random.default_rng(stage.seed)
    history = []
    for epoch in range(1, stage.epochs + 1):
        order = rng.permutation(len(samples))
        batch_losses = []
        for start in range(0, len(order), stage.batch_size):
            batch = [samples[i] for i in order[start:start + stage.batch_size]]
            summed = None
            loss_sum = 0.0
            for sample in batch:
                loss, grads = _sample_gradients(model, sample, labels[sample.image_id], stage, update)
                loss_sum += loss
                summed = grads if summed is None else {k: summed[k] + g for k, g in grads.items()}
            averaged = {k: g / len(batch) for k, g in summed.items()}
            try:
                model.params, velocity = sgd_step(
                    model.params, averaged, velocity, stage.lr, stage.momentum, stage.weight_decay, mask
                )
            except ValueError as e:
                console.warn(f"  {name} epoch {epoch}: {e}")
                continue
            batch_losses.append(loss_sum / len(batch))
        record = {
            "stage": name,
            "epoch": epoch,
            "lr": stage.lr,
            "mean_loss": float(np.mean(batch_losses)) if batch_losses else None,
            "frozen_param_count": frozen_count,
        }
        history.append(record)
        console.info(f"  {name} epoch {epoch}/{stage.epochs}: mean loss {record['mean_loss']}")
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")
    return StageResult(model=model, history=history)


@dataclass
class PdftResult:
    model: ToyModel
    checkpoints: dict[str, Path]
    history: list[dict]


def _verify_frozen(before: Path, after: Path, model: ToyModel, prefixes: Sequence[str]) -> None:
    frozen = [n for n, m in freeze_mask(model, prefixes).items() if m]
    old, new = read_tensor_bytes(before), read_tensor_bytes(after)
    changed = [n for n in frozen if old[n] != new[n]]
    if changed:
        raise RuntimeError(f"frozen parameters changed between {before.name} and {after.name}: {', '.join(changed)}")


def pdft(
    model0: ToyModel,
    sim_manifest: Manifest,
    real_manifest: Manifest,
    config: PdftConfig,
    out_dir: str | Path,
    threads: int | None = None,
) -> PdftResult:
    """
    Two-stage adaptation: simulated haze, then real haze.

    Writes stage0/, stage1/ and stage2/ checkpoints plus the JSON-lines
    training log under ``out_dir``.
    """
    config.validate()
    console = get_console()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / LOG_NAME
    log_path.write_text("", encoding="utf-8")

    checkpoints = {"stage0": save_checkpoint(model0, out_dir / "stage0")}

    console.rule("Stage 1: simulated haze")
    sim = load_samples(sim_manifest, config.stage1.split, model0.config, threads)
    stage1 = run_stage(model0, sim, config.stage1, "stage1", log_path)
    checkpoints["stage1"] = save_checkpoint(stage1.model, out_dir / "stage1")

    console.rule("Stage 2: real haze")
    real = load_samples(real_manifest, config.stage2.split, model0.config, threads)
    stage2 = run_stage(stage1.model, real, config.stage2, "stage2", log_path)
    checkpoints["stage2"] = save_checkpoint(stage2.model, out_dir / "stage2")

    _verify_frozen(checkpoints["stage0"], checkpoints["stage1"], model0, config.stage1.frozen_prefixes)
    _verify_frozen(checkpoints["stage1"], checkpoints["stage2"], model0, config.stage2.frozen_prefixes)
    return PdftResult(model=stage2.model, checkpoints=checkpoints, history=stage1.history + stage2.history)


# ---------------------------------------------------------------------------
# Inference and ablation
# ---------------------------------------------------------------------------

def predict(
    model: ToyModel,
    manifest: Manifest,
    split: str | None = None,
    score_threshold: float = 0.05,
    nms_iou: float = 0.5,
    threads: int | None = None,
) -> list[Detection]:
    """Detections for every image of ``split`` in source-image pixels."""
    subset = manifest.subset(split)
    config = model.config
    if len(subset.categories) != config.num_classes:
        raise ValueError(
            f"model predicts {config.num_classes} classes, manifest has {len(subset.categories)} categories"
        )

    def run(record: ImageRecord) -> list[Detection]:
        sample = prepare_sample(replace(subset, annotations=[]), replace(record, depth_file=None), config)
        dets = []
        for (x, y, w, h), k, score in detect(model, sample.image, score_threshold, nms_iou):
            dets.append(
                Detection(
                    image_id=record.id,
                    category=subset.categories[k],
                    bbox=[
                        sample.offset[0] + x / sample.scale,
                        sample.offset[1] + y / sample.scale,
                        w / sample.scale,
                        h / sample.scale,
                    ],
                    score=score,
                )
            )
        return dets

    with ThreadPoolExecutor(max_workers=threads) as pool:
        return [d for dets in pool.map(run, subset.images) for d in dets]


def evaluate_model(model: ToyModel, manifest: Manifest, split: str | None, threads: int | None = None) -> EvaluationReport:
    return evaluate(manifest, predict(model, manifest, split, threads=threads), split)


# Component rows of the ablation: model toggles, then stage overrides. A
# depth-loss weight of 0 trains MSDP through the detection loss only.
ABLATION_VARIANTS: dict[str, tuple[dict, dict]] = {
    "full": ({"use_msdp": True, "use_dck": True}, {}),
    "no_sir": ({"use_msdp": True, "use_dck": True}, {"loss_weight": 0.0}),
    "no_dck": ({"use_msdp": True, "use_dck": False}, {}),
    "msdp_only": ({"use_msdp": True, "use_dck": False}, {"loss_weight": 0.0}),
    "baseline": ({"use_msdp": False, "use_dck": False}, {}),
}
REFERENCE_VARIANT = "full"
DEFAULT_VARIANTS = ("full", "no_dck")

FINETUNE_STRATEGIES = ("direct", "sim_only", "pdft")


@dataclass
class AblationReport:
    seeds: list[int]
    scores: dict[str, list[float]]

    def wins(self, variant: str) -> int:
        """Seeds on which the full model scores at least as well as ``variant``."""
        reference = self.scores[REFERENCE_VARIANT]
        return sum(full >= other for full, other in zip(reference, self.scores[variant]))

    def to_dict(self) -> dict:
        return {
            "seeds": self.seeds,
            "mAP": self.scores,
            "mean_mAP": {v: float(np.mean(s)) if s else None for v, s in self.scores.items()},
            "wins_vs_full": {v: self.wins(v) for v in self.scores if v != REFERENCE_VARIANT},
            "runs": len(self.seeds),
        }


def ablation_configs(model_config: ToyConfig, stage: StageConfig, variant: str) -> tuple[ToyConfig, StageConfig]:
    if variant not in ABLATION_VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r} (expected one of {', '.join(ABLATION_VARIANTS)})")
    model_overrides, stage_overrides = ABLATION_VARIANTS[variant]
    return replace(model_config, **model_overrides), replace(stage, **stage_overrides)


def ablate(
    manifest: Manifest,
    model_config: ToyConfig,
    stage: StageConfig,
    seeds: Sequence[int],
    train_split: str = "train",
    test_split: str = "test",
    threads: int | None = None,
    variants: Sequence[str] = DEFAULT_VARIANTS,
) -> AblationReport:
    """
    Paired component ablation: every variant is trained once per seed from
    the same seeded initialisation and scored by test mAP. The full model is
    always included as the reference.
    """
    console = get_console()
    names = [REFERENCE_VARIANT] + [v for v in dict.fromkeys(variants) if v != REFERENCE_VARIANT]
    plans = {v: ablation_configs(model_config, stage, v) for v in names}
    train = load_samples(manifest, train_split, model_config, threads)
    report = AblationReport(seeds=list(seeds), scores={v: [] for v in names})
    for seed in seeds:
        for variant, (config, variant_stage) in plans.items():
            model = ToyModel.init(replace(config, seed=seed))
            trained = run_stage(model, train, replace(variant_stage, seed=seed), f"seed{seed}-{variant}")
            report.scores[variant].append(evaluate_model(trained.model, manifest, test_split, threads).mAP)
        summary = ", ".join(f"{v} {report.scores[v][-1]:.4f}" for v in names)
        console.info(f"  seed {seed}: {summary}")
    return report


@dataclass
class FinetuneComparison:
    seeds: list[int]
    scores: dict[str, list[float]]

    def to_dict(self) -> dict:
        return {
            "seeds": self.seeds,
            "mAP": self.scores,
            "mean_mAP": {s: float(np.mean(v)) if v else None for s, v in self.scores.items()},
            "pdft_wins_vs_direct": sum(p >= d for p, d in zip(self.scores["pdft"], self.scores["direct"])),
            "runs": len(self.seeds),
        }


def compare_finetuning(
    sim_manifest: Manifest,
    real_manifest: Manifest,
    config: PdftConfig,
    seeds: Sequence[int],
    test_split: str | None = "real_test",
    threads: int | None = None,
) -> FinetuneComparison:
    """
    Score three adaptation strategies on the real-haze test split, per seed:

    direct    stage-1 settings applied to real-haze data only
    sim_only  stage 1 on simulated haze, no real-haze stage
    pdft      stage 1 on simulated haze, then stage 2 on real haze
    """
    config.validate()
    console = get_console()
    sim = load_samples(sim_manifest, config.stage1.split, config.model, threads)
    real = load_samples(real_manifest, config.stage2.split, config.model, threads)
    result = FinetuneComparison(seeds=list(seeds), scores={s: [] for s in FINETUNE_STRATEGIES})
    for seed in seeds:
        model0 = ToyModel.init(replace(config.model, seed=seed))
        stage1 = replace(config.stage1, seed=seed)
        stage2 = replace(config.stage2, seed=seed)
        direct = run_stage(model0, real, replace(stage1, split=stage2.split), f"seed{seed}-direct").model
        sim_model = run_stage(model0, sim, stage1, f"seed{seed}-stage1").model
        progressive = run_stage(sim_model, real, stage2, f"seed{seed}-stage2").model
        for strategy, model in (("direct", direct), ("sim_only", sim_model), ("pdft", progressive)):
            result.scores[strategy].append(evaluate_model(model, real_manifest, test_split, threads).mAP)
        console.info(
            f"  seed {seed}: direct {result.scores['direct'][-1]:.4f}, "
            f"sim only {result.scores['sim_only'][-1]:.4f}, pdft {result.scores['pdft'][-1]:.4f}"
        )
    return result


def load_pdft_config(path: str | Path | None) -> PdftConfig:
    if path is None:
        return PdftConfig()
    return PdftConfig.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def load_stage_config(path: str | Path | None) -> StageConfig:
    if path is None:
        return StageConfig()
    return StageConfig.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def load_manifest_for(stage: StageConfig, override: str | Path | None = None) -> Manifest:
    source = override or stage.dataset
    if source is None:
        raise ValueError("no dataset manifest given for the stage")
    return load_manifest(source)
