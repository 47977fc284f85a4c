"""
Desk-scale depth-conditioned detector.

    backbone.1..4   Conv3x3/2 -> norm -> ReLU, resolution halves per stage
    neck            1x1 laterals on stages 2..4, top-down sum (P2, P3, P4)
    head            per level: MSDP depth prior (own weights per level),
                    shared tower Conv3x3 -> norm -> ReLU, shared DCK
                    modulation conditioned on D^M, shared 1x1 class and box
                    branches

Level n has stride 2**n. Parameters live in a flat name -> array dict so that
freezing, optimisation and serialization all work on names.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

try:
    from .decodet_kernels import (
        DckConfig,
        DckWeights,
        MsdpLevel,
        MsdpParams,
        dck_backward,
        dck_forward,
        delta_kernel_bias,
        msdp_forward,
        msdp_level_backward,
    )
    from .depth_pipeline import DEPTH_MAX, DEPTH_MIN
    from .evaluator import nms
    from .losses import decode_box
    from .tensor_core import (
        RunningStats,
        Tensor,
        conv2d,
        conv2d_backward,
        norm_act,
        norm_act_backward,
        sigmoid,
        upsample2x,
        upsample2x_backward,
    )
except ImportError:
    from decodet_kernels import (
        DckConfig,
        DckWeights,
        MsdpLevel,
        MsdpParams,
        dck_backward,
        dck_forward,
        delta_kernel_bias,
        msdp_forward,
        msdp_level_backward,
    )
    from depth_pipeline import DEPTH_MAX, DEPTH_MIN
    from evaluator import nms
    from losses import decode_box
    from tensor_core import (
        RunningStats,
        Tensor,
        conv2d,
        conv2d_backward,
        norm_act,
        norm_act_backward,
        sigmoid,
        upsample2x,
        upsample2x_backward,
    )

LEVELS = (2, 3, 4)
BACKBONE_STAGES = 4
CHECKPOINT_FORMAT = "hazy-decodet-model/1"
INDEX_NAME = "model.json"
BLOB_NAME = "model.bin"

PRIOR_PROB = 0.01
DEPTH_INIT = math.log(50.0)
LOG_DEPTH_MIN = math.log(DEPTH_MIN)
LOG_DEPTH_MAX = math.log(DEPTH_MAX)

StatsUpdate = Callable[[str], bool]


@dataclass
class ToyConfig:
    input_size: int = 64
    num_classes: int = 3
    widths: tuple[int, ...] = (8, 16, 32, 64)
    neck_channels: int = 16
    msdp_convs: int = 3
    dck_kernel: int = 3
    dck_groups: int = 4
    dck_reduction: int = 4
    # kernels start as centered deltas plus the depth-conditioned term
    dck_identity_start: bool = True
    use_msdp: bool = True
    use_dck: bool = True
    seed: int = 0

    def validate(self) -> None:
        coarsest = 2 ** max(LEVELS)
        if self.input_size < 2 * coarsest or self.input_size % coarsest:
            raise ValueError(f"input_size must be a multiple of {coarsest} and >= {2 * coarsest}, got {self.input_size}")
        if len(self.widths) != BACKBONE_STAGES or min(self.widths) < 1:
            raise ValueError(f"widths must list {BACKBONE_STAGES} positive stage widths, got {self.widths}")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")
        if self.msdp_convs < 1:
            raise ValueError(f"MSDP needs M >= 1 depth-specific convolutions, got {self.msdp_convs}")
        self.dck_config().validate()

    def dck_config(self) -> DckConfig:
        return DckConfig(
            kernel_size=self.dck_kernel,
            groups=self.dck_groups,
            reduction=self.dck_reduction,
            channels=self.neck_channels,
        )

    def level_shapes(self) -> dict[int, tuple[int, int]]:
        return {n: (self.input_size >> n, self.input_size >> n) for n in LEVELS}

    @classmethod
    def from_dict(cls, data: dict) -> "ToyConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown model config keys: {', '.join(sorted(unknown))}")
        values = dict(data)
        if "widths" in values:
            values["widths"] = tuple(int(w) for w in values["widths"])
        config = cls(**values)
        config.validate()
        return config

    def to_dict(self) -> dict:
        data = asdict(self)
        data["widths"] = list(self.widths)
        return data


# ---------------------------------------------------------------------------
# Parameter table
# ---------------------------------------------------------------------------

def _he(rng, shape):
    return rng.normal(0.0, math.sqrt(2.0 / int(np.prod(shape[1:]))), shape)


def _small(rng, shape):
    return rng.normal(0.0, 0.01, shape)


def _const(value: float):
    return lambda rng, shape: np.full(shape, value)


def _norm_specs(prefix: str, channels: int):
    return [(f"{prefix}.gamma", (channels,), _const(1.0)), (f"{prefix}.beta", (channels,), _const(0.0))]


def _param_specs(config: ToyConfig) -> list[tuple[str, tuple[int, ...], Callable]]:
    c = config.neck_channels
    specs = []
    c_in = 3
    for s, width in enumerate(config.widths, start=1):
        specs += [
            (f"backbone.{s}.conv.weight", (width, c_in, 3, 3), _he),
            (f"backbone.{s}.conv.bias", (width,), _const(0.0)),
        ]
        specs += _norm_specs(f"backbone.{s}.norm", width)
        c_in = width
    for n in LEVELS:
        specs += [
            (f"neck.lateral{n}.weight", (c, config.widths[n - 1], 1, 1), _he),
            (f"neck.lateral{n}.bias", (c,), _const(0.0)),
        ]
    if config.use_msdp:
        for n in LEVELS:
            for m in range(config.msdp_convs):
                specs += [
                    (f"head.msdp.{n}.conv{m}.weight", (c, c, 3, 3), _he),
                    (f"head.msdp.{n}.conv{m}.bias", (c,), _const(0.0)),
                ]
                specs += _norm_specs(f"head.msdp.{n}.norm{m}", c)
            specs += [
                (f"head.msdp.{n}.depth.weight", (1, c, 1, 1), _small),
                (f"head.msdp.{n}.depth.bias", (1,), _const(DEPTH_INIT)),
            ]
    specs += [("head.tower.conv.weight", (c, c, 3, 3), _he), ("head.tower.conv.bias", (c,), _const(0.0))]
    specs += _norm_specs("head.tower.norm", c)
    if config.use_dck:
        dck = config.dck_config()
        specs += [("head.dck.reduce.weight", (dck.hidden, c), _he)]
        specs += _norm_specs("head.dck.norm", dck.hidden)
        specs += [("head.dck.expand.weight", (dck.kernel_numel, dck.hidden), _small)]
        if config.dck_identity_start:
            bias = delta_kernel_bias(dck)
            specs += [("head.dck.expand.bias", (dck.kernel_numel,), lambda rng, shape: bias.copy())]
    specs += [
        ("head.cls.weight", (config.num_classes, c, 1, 1), _small),
        ("head.cls.bias", (config.num_classes,), _const(-math.log((1.0 - PRIOR_PROB) / PRIOR_PROB))),
        ("head.box.weight", (4, c, 1, 1), _small),
        ("head.box.bias", (4,), _const(0.0)),
    ]
    return specs


def _f32(x: np.ndarray) -> Tensor:
    """Round to float32 precision so a saved and reloaded model is the same model."""
    return np.asarray(x, dtype=np.float32).astype(np.float64)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass
class ModelOutput:
    cls: dict[int, Tensor]
    box: dict[int, Tensor]
    depth: dict[int, Tensor]  # meters, [H, W]; empty without MSDP


@dataclass
class _LevelCache:
    pyramid: Tensor
    tower_pre: Tensor | None = None
    tower: Tensor | None = None
    dck_src: Tensor | None = None
    head_in: Tensor | None = None
    log_depth: Tensor | None = None
    depth: Tensor | None = None


@dataclass
class ForwardCache:
    stats_mode: str
    backbone: list[tuple[Tensor, Tensor]] = field(default_factory=list)
    stages: dict[int, Tensor] = field(default_factory=dict)
    levels: dict[int, _LevelCache] = field(default_factory=dict)


@dataclass
class ToyModel:
    config: ToyConfig
    params: dict[str, Tensor]
    buffers: dict[str, Tensor]

    @classmethod
    def init(cls, config: ToyConfig) -> "ToyModel":
        """
        Seeded random initialisation.

        Every tensor draws from its own generator seeded by (config.seed,
        crc32(name)), so variants that add or drop modules share the values
        of every tensor they have in common.
        """
        config.validate()
        params = {}
        buffers = {}
        for name, shape, initializer in _param_specs(config):
            rng = np.random.default_rng([config.seed, zlib.crc32(name.encode("ascii"))])
            params[name] = _f32(initializer(rng, shape))
            if name.endswith(".gamma"):
                prefix = name[: -len(".gamma")]
                buffers[f"{prefix}.running_mean"] = np.zeros(shape)
                buffers[f"{prefix}.running_var"] = np.ones(shape)
        return cls(config=config, params=params, buffers=buffers)

    def copy(self) -> "ToyModel":
        return ToyModel(
            config=self.config,
            params={k: v.copy() for k, v in self.params.items()},
            buffers={k: v.copy() for k, v in self.buffers.items()},
        )

    def parameter_names(self) -> list[str]:
        return sorted(self.params)

    def _running(self, prefix: str, stats_mode: str, update: StatsUpdate | None) -> RunningStats | None:
        if stats_mode == "running" or (update is not None and update(prefix)):
            return RunningStats(self.buffers[f"{prefix}.running_mean"], self.buffers[f"{prefix}.running_var"])
        return None

    def _msdp_level(self, n: int, stats_mode: str, update: StatsUpdate | None) -> MsdpLevel:
        p = self.params
        pre = f"head.msdp.{n}"
        convs = range(self.config.msdp_convs)
        return MsdpLevel(
            conv_weights=[p[f"{pre}.conv{m}.weight"] for m in convs],
            conv_biases=[p[f"{pre}.conv{m}.bias"] for m in convs],
            gammas=[p[f"{pre}.norm{m}.gamma"] for m in convs],
            betas=[p[f"{pre}.norm{m}.beta"] for m in convs],
            head_weight=p[f"{pre}.depth.weight"],
            head_bias=p[f"{pre}.depth.bias"],
            running=[self._running(f"{pre}.norm{m}", stats_mode, update) for m in convs],
        )

    def _dck_weights(self) -> DckWeights:
        p = self.params
        return DckWeights(
            reduce=p["head.dck.reduce.weight"],
            norm_gamma=p["head.dck.norm.gamma"],
            norm_beta=p["head.dck.norm.beta"],
            expand=p["head.dck.expand.weight"],
            expand_bias=p.get("head.dck.expand.bias"),
        )

    # -- forward -----------------------------------------------------------

    def forward(
        self, image: Tensor, stats_mode: str = "batch", update_stats: StatsUpdate | None = None
    ) -> tuple[ModelOutput, ForwardCache]:
        """
        Run one [3, S, S] image through the network.

        ``update_stats(prefix)`` decides which norm layers fold this image's
        statistics into their running buffers (training only).
        """
        size = self.config.input_size
        if image.shape != (3, size, size):
            raise ValueError(f"input must be [3, {size}, {size}], got shape {image.shape}")
        p = self.params
        cache = ForwardCache(stats_mode=stats_mode)
        x = image
        for s in range(1, BACKBONE_STAGES + 1):
            pre = conv2d(x, p[f"backbone.{s}.conv.weight"], p[f"backbone.{s}.conv.bias"], 2, 1)
            cache.backbone.append((x, pre))
            running = self._running(f"backbone.{s}.norm", stats_mode, update_stats)
            x = norm_act(pre, p[f"backbone.{s}.norm.gamma"], p[f"backbone.{s}.norm.beta"], stats_mode, running=running)
            cache.stages[s] = x

        pyramid = {}
        top = None
        for n in reversed(LEVELS):
            lateral = conv2d(cache.stages[n], p[f"neck.lateral{n}.weight"], p[f"neck.lateral{n}.bias"], 1, 0)
            pyramid[n] = lateral if top is None else lateral + upsample2x(top)
            top = pyramid[n]

        out = ModelOutput(cls={}, box={}, depth={})
        for n in LEVELS:
            level = self._head_forward(n, pyramid[n], stats_mode, update_stats)
            cache.levels[n] = level
            out.cls[n] = conv2d(level.head_in, p["head.cls.weight"], p["head.cls.bias"], 1, 0)
            out.box[n] = conv2d(level.head_in, p["head.box.weight"], p["head.box.bias"], 1, 0)
            if level.depth is not None:
                out.depth[n] = level.depth
        return out, cache

    def _head_forward(self, n: int, feature: Tensor, stats_mode: str, update: StatsUpdate | None) -> _LevelCache:
        p = self.params
        level = _LevelCache(pyramid=feature)
        depth_src = feature
        if self.config.use_msdp:
            msdp = MsdpParams(levels={n: self._msdp_level(n, stats_mode, update)})
            depth_features, depth_maps = msdp_forward({n: feature}, msdp, stats_mode, update is not None)
            depth_src = depth_features[n]
            level.log_depth = depth_maps[n][0]
            level.depth = np.exp(np.clip(level.log_depth, LOG_DEPTH_MIN, LOG_DEPTH_MAX))
        level.tower_pre = conv2d(feature, p["head.tower.conv.weight"], p["head.tower.conv.bias"], 1, 1)
        level.tower = norm_act(
            level.tower_pre,
            p["head.tower.norm.gamma"],
            p["head.tower.norm.beta"],
            stats_mode,
            running=self._running("head.tower.norm", stats_mode, update),
        )
        if self.config.use_dck:
            level.dck_src = depth_src
            level.head_in = dck_forward(
                level.tower,
                depth_src,
                self._dck_weights(),
                self.config.dck_config(),
                stats_mode,
                self._running("head.dck.norm", stats_mode, update),
            )
        else:
            level.head_in = level.tower
        return level

    # -- backward ----------------------------------------------------------

    def backward(
        self,
        cache: ForwardCache,
        grad_cls: dict[int, Tensor],
        grad_box: dict[int, Tensor],
        grad_depth: dict[int, Tensor] | None = None,
    ) -> dict[str, Tensor]:
        """
        Gradients of every parameter given output gradients.

        ``grad_depth`` holds d loss / d depth (meters) per level.
        """
        grads = {name: np.zeros_like(value) for name, value in self.params.items()}
        mode = cache.stats_mode
        p = self.params
        grad_pyramid = {}
        for n in LEVELS:
            level = cache.levels[n]
            g_cls_in, g_w, g_b = conv2d_backward(grad_cls[n], level.head_in, p["head.cls.weight"], 1, 0)
            grads["head.cls.weight"] += g_w
            grads["head.cls.bias"] += g_b
            g_box_in, g_w, g_b = conv2d_backward(grad_box[n], level.head_in, p["head.box.weight"], 1, 0)
            grads["head.box.weight"] += g_w
            grads["head.box.bias"] += g_b
            g_depth = None if grad_depth is None else grad_depth.get(n)
            grad_pyramid[n] = self._head_backward(n, level, g_cls_in + g_box_in, g_depth, grads, mode)

        grad_stages = {}
        carry = None
        for n in LEVELS:
            g = grad_pyramid[n] if carry is None else grad_pyramid[n] + carry
            g_stage, g_w, g_b = conv2d_backward(g, cache.stages[n], p[f"neck.lateral{n}.weight"], 1, 0)
            grads[f"neck.lateral{n}.weight"] += g_w
            grads[f"neck.lateral{n}.bias"] += g_b
            grad_stages[n] = g_stage
            carry = upsample2x_backward(g)

        g = np.zeros_like(cache.stages[BACKBONE_STAGES])
        for s in range(BACKBONE_STAGES, 0, -1):
            if s in grad_stages:
                g = g + grad_stages[s]
            x_in, pre = cache.backbone[s - 1]
            prefix = f"backbone.{s}"
            g_pre, g_gamma, g_beta = norm_act_backward(
                g, pre, p[f"{prefix}.norm.gamma"], p[f"{prefix}.norm.beta"], mode,
                running=self._running(f"{prefix}.norm", mode, None),
            )
            grads[f"{prefix}.norm.gamma"] += g_gamma
            grads[f"{prefix}.norm.beta"] += g_beta
            g, g_w, g_b = conv2d_backward(g_pre, x_in, p[f"{prefix}.conv.weight"], 2, 1)
            grads[f"{prefix}.conv.weight"] += g_w
            grads[f"{prefix}.conv.bias"] += g_b
        return grads

    def _head_backward(
        self,
        n: int,
        level: _LevelCache,
        grad_head_in: Tensor,
        grad_depth: Tensor | None,
        grads: dict[str, Tensor],
        mode: str,
    ) -> Tensor:
        p = self.params
        grad_src = None
        if self.config.use_dck:
            dg = dck_backward(
                grad_head_in,
                level.tower,
                level.dck_src,
                self._dck_weights(),
                self.config.dck_config(),
                mode,
                self._running("head.dck.norm", mode, None),
            )
            grad_tower = dg.features
            grad_src = dg.depth_feature
            grads["head.dck.reduce.weight"] += dg.weights.reduce
            grads["head.dck.norm.gamma"] += dg.weights.norm_gamma
            grads["head.dck.norm.beta"] += dg.weights.norm_beta
            grads["head.dck.expand.weight"] += dg.weights.expand
            if dg.weights.expand_bias is not None:
                grads["head.dck.expand.bias"] += dg.weights.expand_bias
        else:
            grad_tower = grad_head_in

        g_pre, g_gamma, g_beta = norm_act_backward(
            grad_tower, level.tower_pre, p["head.tower.norm.gamma"], p["head.tower.norm.beta"], mode,
            running=self._running("head.tower.norm", mode, None),
        )
        grads["head.tower.norm.gamma"] += g_gamma
        grads["head.tower.norm.beta"] += g_beta
        grad_feature, g_w, g_b = conv2d_backward(g_pre, level.pyramid, p["head.tower.conv.weight"], 1, 1)
        grads["head.tower.conv.weight"] += g_w
        grads["head.tower.conv.bias"] += g_b

        if not self.config.use_msdp:
            return grad_feature if grad_src is None else grad_feature + grad_src

        grad_map = None
        if grad_depth is not None:
            inside = (level.log_depth >= LOG_DEPTH_MIN) & (level.log_depth <= LOG_DEPTH_MAX)
            grad_map = (grad_depth * level.depth * inside)[None]
        if grad_src is None and grad_map is None:
            return grad_feature
        g_in, lg = msdp_level_backward(grad_src, grad_map, level.pyramid, self._msdp_level(n, mode, None), mode)
        pre = f"head.msdp.{n}"
        for m in range(lg.num_convs):
            grads[f"{pre}.conv{m}.weight"] += lg.conv_weights[m]
            grads[f"{pre}.conv{m}.bias"] += lg.conv_biases[m]
            grads[f"{pre}.norm{m}.gamma"] += lg.gammas[m]
            grads[f"{pre}.norm{m}.beta"] += lg.betas[m]
        grads[f"{pre}.depth.weight"] += lg.head_weight
        grads[f"{pre}.depth.bias"] += lg.head_bias
        return grad_feature + g_in


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------

def detect(
    model: ToyModel,
    image: Tensor,
    score_threshold: float = 0.05,
    nms_iou: float = 0.5,
    max_detections: int = 100,
    stats_mode: str = "batch",
) -> list[tuple[list[float], int, float]]:
    """
    Decode cell predictions into (bbox [x, y, w, h], class index, score) in
    input-image pixels, with per-class NMS, highest score first.
    """
    out, _ = model.forward(image, stats_mode)
    size = float(model.config.input_size)
    candidates: dict[int, list[tuple[list[float], float]]] = {}
    for n in LEVELS:
        scores = sigmoid(out.cls[n])
        for k, i, j in np.argwhere(scores > score_threshold):
            x, y, w, h = decode_box(out.box[n][:, i, j], n, int(i), int(j))
            x0, y0 = max(x, 0.0), max(y, 0.0)
            x1, y1 = min(x + w, size), min(y + h, size)
            if x1 - x0 <= 0 or y1 - y0 <= 0:
                continue
            candidates.setdefault(int(k), []).append(([x0, y0, x1 - x0, y1 - y0], float(scores[k, i, j])))

    results = []
    for k in sorted(candidates):
        boxes = np.array([b for b, _ in candidates[k]])
        scores = np.array([s for _, s in candidates[k]])
        for idx in nms(boxes, scores, nms_iou):
            results.append((candidates[k][idx][0], k, candidates[k][idx][1]))
    results.sort(key=lambda r: -r[2])
    return results[:max_detections]


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------

def save_checkpoint(model: ToyModel, out_dir: str | Path) -> Path:
    """
    Write ``model.json`` (index: name -> shape, dtype, byte offset, kind) and
    ``model.bin`` (little-endian float32 tensors in index order).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stores = {**{k: ("param", v) for k, v in model.params.items()}, **{k: ("buffer", v) for k, v in model.buffers.items()}}
    index = {}
    chunks = []
    offset = 0
    for name in sorted(stores):
        kind, value = stores[name]
        data = np.ascontiguousarray(value, dtype="<f4").tobytes()
        index[name] = {"shape": list(value.shape), "dtype": "float32", "offset": offset, "kind": kind}
        chunks.append(data)
        offset += len(data)
    (out_dir / BLOB_NAME).write_bytes(b"".join(chunks))
    document = {"format": CHECKPOINT_FORMAT, "config": model.config.to_dict(), "tensors": index}
    (out_dir / INDEX_NAME).write_text(json.dumps(document, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out_dir


def _checkpoint_paths(path: str | Path) -> tuple[Path, Path]:
    path = Path(path)
    index_path = path / INDEX_NAME if path.is_dir() else path
    return index_path, index_path.with_name(BLOB_NAME)


def read_tensor_bytes(path: str | Path) -> dict[str, bytes]:
    """Raw serialized bytes of every tensor in a checkpoint."""
    index_path, blob_path = _checkpoint_paths(path)
    document = json.loads(index_path.read_text(encoding="utf-8"))
    blob = blob_path.read_bytes()
    out = {}
    for name, entry in document["tensors"].items():
        size = 4 * int(np.prod(entry["shape"], dtype=np.int64))
        out[name] = blob[entry["offset"]:entry["offset"] + size]
    return out


def load_checkpoint(path: str | Path) -> ToyModel:
    """Read a model container; every tensor must match the declared config."""
    index_path, blob_path = _checkpoint_paths(path)
    document = json.loads(index_path.read_text(encoding="utf-8"))
    if document.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{index_path}: unsupported checkpoint format {document.get('format')!r}")
    model = ToyModel.init(ToyConfig.from_dict(document["config"]))
    blob = blob_path.read_bytes()
    tensors = document["tensors"]
    expected = set(model.params) | set(model.buffers)
    if set(tensors) != expected:
        missing = sorted(expected - set(tensors))
        extra = sorted(set(tensors) - expected)
        raise ValueError(f"{index_path}: tensor names do not match the config (missing {missing}, unexpected {extra})")
    used = 0
    for name, entry in tensors.items():
        store = model.params if name in model.params else model.buffers
        shape = tuple(entry["shape"])
        if shape != store[name].shape or entry.get("dtype") != "float32":
            raise ValueError(f"{index_path}: tensor {name} is {entry.get('dtype')}{list(shape)}, expected float32{list(store[name].shape)}")
        count = int(np.prod(shape, dtype=np.int64))
        end = entry["offset"] + 4 * count
        if entry["offset"] < 0 or end > len(blob):
            raise ValueError(f"{blob_path}: tensor {name} runs past the end of the blob")
        store[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=entry["offset"]).astype(np.float64).reshape(shape)
        used += 4 * count
    if used != len(blob):
        raise ValueError(f"{blob_path}: blob holds {len(blob)} bytes, index describes {used}")
    return model
