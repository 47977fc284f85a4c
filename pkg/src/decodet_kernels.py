"""
Depth-conditioned detection kernels.

Multi-Scale Depth Prior (MSDP): per pyramid level, M blocks of
Conv3x3 -> norm -> ReLU turn the level's feature into a depth feature D^M,
and a 1x1 head maps D^M to a single-channel depth map.

Depth-Conditioned Kernel (DCK): at every position the C-vector D^M[:, i, j]
goes through a bottleneck W2 . sigma(W1 . D) and is reshaped into K x K x G
kernel weights. Channel c (0-based) of the detection feature is correlated
with the kernel of group c // (C / G) at that position; counting both from 1
that is group ceil(c * G / C). Output keeps all C channels.

All forward functions are pure; backward functions recompute what they need
from the forward inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from numpy.typing import NDArray

try:
    from .tensor_core import (
        GradCase,
        RunningStats,
        Tensor,
        conv2d,
        conv2d_backward,
        linear,
        linear_backward,
        norm_act,
        norm_act_backward,
        register_gradcase,
    )
except ImportError:
    from tensor_core import (
        GradCase,
        RunningStats,
        Tensor,
        conv2d,
        conv2d_backward,
        linear,
        linear_backward,
        norm_act,
        norm_act_backward,
        register_gradcase,
    )

KernelField = NDArray[np.float64]  # [H, W, K, K, G]


@dataclass
class DckConfig:
    kernel_size: int = 7
    groups: int = 16
    reduction: int = 16
    channels: int = 16

    def validate(self) -> None:
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"DCK kernel size must be odd, got {self.kernel_size}")
        if not 1 <= self.groups <= self.channels:
            raise ValueError(f"DCK groups must be in [1, {self.channels}], got {self.groups}")
        if self.channels % self.groups:
            raise ValueError(f"channels ({self.channels}) must be divisible by groups ({self.groups})")
        if self.reduction < 1 or self.channels // self.reduction < 1:
            raise ValueError(
                f"reduction {self.reduction} leaves no bottleneck channels for C={self.channels}"
            )

    @property
    def hidden(self) -> int:
        return self.channels // self.reduction

    @property
    def kernel_numel(self) -> int:
        return self.kernel_size * self.kernel_size * self.groups


@dataclass
class DckWeights:
    reduce: Tensor       # W1 [C/r, C]
    norm_gamma: Tensor   # [C/r]
    norm_beta: Tensor    # [C/r]
    expand: Tensor                    # W2 [K*K*G, C/r]
    expand_bias: Tensor | None = None  # [K*K*G], only with an identity start


def group_of_channel(channels: int, groups: int) -> NDArray[np.intp]:
    return np.arange(channels) // (channels // groups)


def delta_kernel_bias(config: DckConfig) -> Tensor:
    """Expand bias that makes an untrained generator emit identity kernels."""
    k = config.kernel_size
    bias = np.zeros((k, k, config.groups))
    bias[k // 2, k // 2, :] = 1.0
    return bias.reshape(-1)


def init_dck_weights(config: DckConfig, rng: np.random.Generator, identity_start: bool = False) -> DckWeights:
    """
    Random bottleneck weights. With ``identity_start`` the generator also
    gets a learnable offset initialised to centered delta kernels.
    """
    config.validate()
    return DckWeights(
        reduce=rng.normal(0.0, np.sqrt(2.0 / config.channels), (config.hidden, config.channels)),
        norm_gamma=np.ones(config.hidden),
        norm_beta=np.zeros(config.hidden),
        expand=rng.normal(0.0, 0.01, (config.kernel_numel, config.hidden)),
        expand_bias=delta_kernel_bias(config) if identity_start else None,
    )


# ---------------------------------------------------------------------------
# Kernel generation
# ---------------------------------------------------------------------------

def _check_generator(depth_feature: Tensor, weights: DckWeights, config: DckConfig) -> None:
    config.validate()
    if depth_feature.ndim != 3 or depth_feature.shape[0] != config.channels:
        raise ValueError(
            f"depth feature must be [{config.channels}, H, W], got shape {depth_feature.shape}"
        )
    if weights.reduce.shape != (config.hidden, config.channels):
        raise ValueError(f"W1 shape {weights.reduce.shape}, expected {(config.hidden, config.channels)}")
    if weights.expand.shape != (config.kernel_numel, config.hidden):
        raise ValueError(
            f"W2 has {weights.expand.shape[0]} rows, K*K*G = {config.kernel_numel} "
            f"(shape {weights.expand.shape}, expected {(config.kernel_numel, config.hidden)})"
        )


def _generate_parts(depth_feature, weights, config, stats_mode, running):
    positions = depth_feature.transpose(1, 2, 0)                      # [H, W, C]
    hidden = linear(positions, weights.reduce, None).transpose(2, 0, 1)  # [C/r, H, W]
    activated = norm_act(hidden, weights.norm_gamma, weights.norm_beta, stats_mode, running=running)
    flat = linear(activated.transpose(1, 2, 0), weights.expand, weights.expand_bias)
    return positions, hidden, activated, flat


def dck_generate(
    depth_feature: Tensor,
    weights: DckWeights,
    config: DckConfig,
    stats_mode: str = "batch",
    running: RunningStats | None = None,
) -> KernelField:
    """
    Per-position kernels K[i, j] = W2 . sigma(W1 . D[:, i, j]).

    sigma normalizes each bottleneck channel over all positions of the map,
    then applies ReLU. When the weights carry an expand bias b, every kernel
    becomes b + W2 . sigma(W1 . D): the depth-conditioned term then acts as a
    residual around b, and with b a centered delta an untrained DCK leaves
    the features unchanged.
    """
    _check_generator(depth_feature, weights, config)
    _, h, w = depth_feature.shape
    *_, flat = _generate_parts(depth_feature, weights, config, stats_mode, running)
    k = config.kernel_size
    return flat.reshape(h, w, k, k, config.groups)


def dck_generate_backward(
    grad_kernels: KernelField,
    depth_feature: Tensor,
    weights: DckWeights,
    config: DckConfig,
    stats_mode: str = "batch",
    running: RunningStats | None = None,
) -> tuple[Tensor, DckWeights]:
    """Returns (grad_depth_feature, weight gradients)."""
    _check_generator(depth_feature, weights, config)
    _, h, w = depth_feature.shape
    k = config.kernel_size
    if grad_kernels.shape != (h, w, k, k, config.groups):
        raise ValueError(
            f"kernel gradient shape {grad_kernels.shape}, expected {(h, w, k, k, config.groups)}"
        )
    running = running if stats_mode == "running" else None
    positions, hidden, activated, _ = _generate_parts(depth_feature, weights, config, stats_mode, running)
    g_flat = grad_kernels.reshape(h, w, config.kernel_numel)
    g_act, g_expand, g_expand_bias = linear_backward(g_flat, activated.transpose(1, 2, 0), weights.expand)
    g_hidden, g_gamma, g_beta = norm_act_backward(
        g_act.transpose(2, 0, 1), hidden, weights.norm_gamma, weights.norm_beta, stats_mode, running=running
    )
    g_pos, g_reduce, _ = linear_backward(g_hidden.transpose(1, 2, 0), positions, weights.reduce)
    grads = DckWeights(
        reduce=g_reduce,
        norm_gamma=g_gamma,
        norm_beta=g_beta,
        expand=g_expand,
        expand_bias=g_expand_bias if weights.expand_bias is not None else None,
    )
    return g_pos.transpose(2, 0, 1), grads


# ---------------------------------------------------------------------------
# Modulation
# ---------------------------------------------------------------------------

def _check_modulation(features: Tensor, kernels: KernelField, config: DckConfig) -> None:
    config.validate()
    if features.ndim != 3 or features.shape[0] != config.channels:
        raise ValueError(f"features must be [{config.channels}, H, W], got shape {features.shape}")
    k = config.kernel_size
    expected = features.shape[1:] + (k, k, config.groups)
    if kernels.shape != expected:
        raise ValueError(f"resolution mismatch: kernels {kernels.shape}, features need {expected}")


def _channel_kernels(kernels: KernelField, config: DckConfig) -> Tensor:
    """[C, H, W, K, K]: each channel's view of its group's kernel."""
    return kernels[..., group_of_channel(config.channels, config.groups)].transpose(4, 0, 1, 2, 3)


def dck_modulate(features: Tensor, kernels: KernelField, config: DckConfig) -> Tensor:
    """
    out[c, i, j] = sum_{u, v} kernels[i, j, u + K//2, v + K//2, group(c)] * features[c, i + u, j + v]

    with zero padding at the borders.
    """
    _check_modulation(features, kernels, config)
    r = config.kernel_size // 2
    padded = np.pad(features, ((0, 0), (r, r), (r, r)))
    windows = sliding_window_view(padded, (config.kernel_size,) * 2, axis=(1, 2))  # [C, H, W, K, K]
    return np.einsum("chwuv,chwuv->chw", windows, _channel_kernels(kernels, config))


def dck_modulate_backward(
    grad_out: Tensor, features: Tensor, kernels: KernelField, config: DckConfig
) -> tuple[Tensor, KernelField]:
    """Returns (grad_features, grad_kernels)."""
    _check_modulation(features, kernels, config)
    if grad_out.shape != features.shape:
        raise ValueError(f"grad_out shape {grad_out.shape} does not match features {features.shape}")
    c, h, w = features.shape
    k = config.kernel_size
    r = k // 2
    padded = np.pad(features, ((0, 0), (r, r), (r, r)))
    windows = sliding_window_view(padded, (k, k), axis=(1, 2))
    per_channel = grad_out[..., None, None] * windows                   # [C, H, W, K, K]
    grad_kernels = per_channel.reshape(config.groups, c // config.groups, h, w, k, k).sum(axis=1)
    grad_kernels = grad_kernels.transpose(1, 2, 3, 4, 0)

    taps = grad_out[..., None, None] * _channel_kernels(kernels, config)
    grad_padded = np.zeros_like(padded)
    for u in range(k):
        for v in range(k):
            grad_padded[:, u:u + h, v:v + w] += taps[..., u, v]
    return grad_padded[:, r:r + h, r:r + w].copy(), grad_kernels


@dataclass
class DckGrads:
    features: Tensor
    depth_feature: Tensor
    weights: DckWeights


def dck_forward(
    features: Tensor,
    depth_feature: Tensor,
    weights: DckWeights,
    config: DckConfig,
    stats_mode: str = "batch",
    running: RunningStats | None = None,
) -> Tensor:
    """Generate kernels from the depth feature and modulate ``features`` with them."""
    kernels = dck_generate(depth_feature, weights, config, stats_mode, running)
    return dck_modulate(features, kernels, config)


def dck_backward(
    grad_out: Tensor,
    features: Tensor,
    depth_feature: Tensor,
    weights: DckWeights,
    config: DckConfig,
    stats_mode: str = "batch",
    running: RunningStats | None = None,
) -> DckGrads:
    """Exact VJPs through modulation and kernel generation jointly."""
    # backward never folds statistics into the running buffers
    running = running if stats_mode == "running" else None
    kernels = dck_generate(depth_feature, weights, config, stats_mode, running)
    grad_features, grad_kernels = dck_modulate_backward(grad_out, features, kernels, config)
    grad_depth, grad_weights = dck_generate_backward(
        grad_kernels, depth_feature, weights, config, stats_mode, running
    )
    return DckGrads(features=grad_features, depth_feature=grad_depth, weights=grad_weights)


# ---------------------------------------------------------------------------
# Multi-scale depth prior
# ---------------------------------------------------------------------------

@dataclass
class MsdpLevel:
    conv_weights: list[Tensor]   # M x [C, C, 3, 3]
    conv_biases: list[Tensor]    # M x [C]
    gammas: list[Tensor]
    betas: list[Tensor]
    head_weight: Tensor          # [1, C, 1, 1]
    head_bias: Tensor            # [1]
    running: list[RunningStats | None] | None = field(default=None, compare=False)

    @property
    def num_convs(self) -> int:
        return len(self.conv_weights)


@dataclass
class MsdpParams:
    levels: dict[int, MsdpLevel]

    @property
    def num_convs(self) -> int:
        return next(iter(self.levels.values())).num_convs if self.levels else 0

    def validate(self) -> None:
        counts = {level.num_convs for level in self.levels.values()}
        if len(counts) > 1:
            raise ValueError(f"all levels must share M, got {sorted(counts)}")
        if not counts or counts.pop() < 1:
            raise ValueError("MSDP needs M >= 1 depth-specific convolutions")


def init_msdp_params(
    levels, channels: int, num_convs: int, rng: np.random.Generator, head_bias: float = 0.0
) -> MsdpParams:
    if num_convs < 1:
        raise ValueError(f"MSDP needs M >= 1 depth-specific convolutions, got {num_convs}")
    std = np.sqrt(2.0 / (channels * 9))
    out = {}
    for n in levels:
        out[n] = MsdpLevel(
            conv_weights=[rng.normal(0.0, std, (channels, channels, 3, 3)) for _ in range(num_convs)],
            conv_biases=[np.zeros(channels) for _ in range(num_convs)],
            gammas=[np.ones(channels) for _ in range(num_convs)],
            betas=[np.zeros(channels) for _ in range(num_convs)],
            head_weight=rng.normal(0.0, 0.01, (1, channels, 1, 1)),
            head_bias=np.full(1, head_bias),
            running=[RunningStats.fresh(channels) for _ in range(num_convs)],
        )
    return MsdpParams(levels=out)


def _level_forward(x: Tensor, level: MsdpLevel, stats_mode: str, update_stats: bool):
    """Returns (depth feature D^M, depth map, per-block (input, conv output))."""
    blocks = []
    h = x
    for m in range(level.num_convs):
        pre = conv2d(h, level.conv_weights[m], level.conv_biases[m], 1, 1)
        running = level.running[m] if level.running is not None else None
        if stats_mode == "batch" and not update_stats:
            running = None
        blocks.append((h, pre))
        h = norm_act(pre, level.gammas[m], level.betas[m], stats_mode, running=running)
    depth_map = conv2d(h, level.head_weight, level.head_bias, 1, 0)
    return h, depth_map, blocks


def msdp_forward(
    pyramid: dict[int, Tensor],
    params: MsdpParams,
    stats_mode: str = "batch",
    update_stats: bool = False,
) -> tuple[dict[int, Tensor], dict[int, Tensor]]:
    """
    Returns (depth_features, depth_maps) per level.

    D^0 is the level's pyramid feature; depth_features are D^M, the input of
    the kernel generator.
    """
    params.validate()
    features, maps = {}, {}
    for n, x in pyramid.items():
        if n not in params.levels:
            raise ValueError(f"no MSDP parameters for pyramid level {n}")
        features[n], maps[n], _ = _level_forward(x, params.levels[n], stats_mode, update_stats)
    return features, maps


def _zeros_like_level(level: MsdpLevel) -> MsdpLevel:
    return MsdpLevel(
        conv_weights=[np.zeros_like(w) for w in level.conv_weights],
        conv_biases=[np.zeros_like(b) for b in level.conv_biases],
        gammas=[np.zeros_like(g) for g in level.gammas],
        betas=[np.zeros_like(b) for b in level.betas],
        head_weight=np.zeros_like(level.head_weight),
        head_bias=np.zeros_like(level.head_bias),
    )


def msdp_level_backward(
    grad_feature: Tensor | None,
    grad_map: Tensor | None,
    x: Tensor,
    level: MsdpLevel,
    stats_mode: str = "batch",
) -> tuple[Tensor, MsdpLevel]:
    """Returns (grad of the level's pyramid feature, parameter gradients)."""
    feature, depth_map, blocks = _level_forward(x, level, stats_mode, update_stats=False)
    grads = _zeros_like_level(level)
    g = np.zeros_like(feature) if grad_feature is None else grad_feature.copy()
    if grad_map is not None:
        g_head, grads.head_weight, grads.head_bias = conv2d_backward(grad_map, feature, level.head_weight, 1, 0)
        g += g_head
    for m in reversed(range(level.num_convs)):
        h_in, pre = blocks[m]
        running = level.running[m] if (level.running is not None and stats_mode == "running") else None
        g_pre, grads.gammas[m], grads.betas[m] = norm_act_backward(
            g, pre, level.gammas[m], level.betas[m], stats_mode, running=running
        )
        g, grads.conv_weights[m], grads.conv_biases[m] = conv2d_backward(g_pre, h_in, level.conv_weights[m], 1, 1)
    return g, grads


def msdp_backward(
    grad_features: dict[int, Tensor | None],
    grad_maps: dict[int, Tensor | None],
    pyramid: dict[int, Tensor],
    params: MsdpParams,
    stats_mode: str = "batch",
) -> tuple[dict[int, Tensor], MsdpParams]:
    params.validate()
    grad_pyramid, grad_levels = {}, {}
    for n, x in pyramid.items():
        grad_pyramid[n], grad_levels[n] = msdp_level_backward(
            grad_features.get(n), grad_maps.get(n), x, params.levels[n], stats_mode
        )
    return grad_pyramid, MsdpParams(levels=grad_levels)


# ---------------------------------------------------------------------------
# Gradient cases
# ---------------------------------------------------------------------------

def _msdp_case() -> GradCase:
    def build(rng, channels=2, size=8, num_convs=2):
        t = {"x": rng.standard_normal((channels, size, size))}
        for m in range(num_convs):
            t[f"conv{m}.weight"] = rng.normal(0.0, 0.5, (channels, channels, 3, 3))
            t[f"conv{m}.bias"] = 0.1 * rng.standard_normal(channels)
            t[f"norm{m}.gamma"] = 1.0 + 0.3 * rng.standard_normal(channels)
            t[f"norm{m}.beta"] = 0.3 * rng.standard_normal(channels)
        t["head.weight"] = rng.standard_normal((1, channels, 1, 1))
        t["head.bias"] = rng.standard_normal(1)
        t["cot_feature"] = rng.standard_normal((channels, size, size))
        t["cot_map"] = rng.standard_normal((1, size, size))
        return t

    def level_of(t) -> MsdpLevel:
        m = sum(1 for name in t if name.endswith(".weight") and name.startswith("conv"))
        return MsdpLevel(
            conv_weights=[t[f"conv{i}.weight"] for i in range(m)],
            conv_biases=[t[f"conv{i}.bias"] for i in range(m)],
            gammas=[t[f"norm{i}.gamma"] for i in range(m)],
            betas=[t[f"norm{i}.beta"] for i in range(m)],
            head_weight=t["head.weight"],
            head_bias=t["head.bias"],
        )

    def loss(t):
        features, maps = msdp_forward({0: t["x"]}, MsdpParams(levels={0: level_of(t)}))
        return float(np.sum(features[0] * t["cot_feature"]) + np.sum(maps[0] * t["cot_map"]))

    def grads(t):
        g_x, g = msdp_level_backward(t["cot_feature"], t["cot_map"], t["x"], level_of(t))
        out = {"x": g_x, "head.weight": g.head_weight, "head.bias": g.head_bias}
        for i in range(g.num_convs):
            out[f"conv{i}.weight"] = g.conv_weights[i]
            out[f"conv{i}.bias"] = g.conv_biases[i]
            out[f"norm{i}.gamma"] = g.gammas[i]
            out[f"norm{i}.beta"] = g.betas[i]
        return out

    return GradCase(build, loss, grads)


def _dck_case() -> GradCase:
    def build(rng, channels=2, groups=1, kernel_size=3, reduction=1, size=4):
        config = DckConfig(kernel_size=kernel_size, groups=groups, reduction=reduction, channels=channels)
        config.validate()
        return {
            "features": rng.standard_normal((channels, size, size)),
            "depth_feature": rng.standard_normal((channels, size, size)),
            "reduce": rng.standard_normal((config.hidden, channels)),
            "norm_gamma": 1.0 + 0.3 * rng.standard_normal(config.hidden),
            "norm_beta": 0.3 * rng.standard_normal(config.hidden),
            "expand": rng.standard_normal((config.kernel_numel, config.hidden)),
            "expand_bias": rng.standard_normal(config.kernel_numel),
            "cotangent": rng.standard_normal((channels, size, size)),
            "_config": np.array([kernel_size, groups, reduction, channels]),
        }

    def unpack(t):
        k, g, r, c = (int(v) for v in t["_config"])
        weights = DckWeights(t["reduce"], t["norm_gamma"], t["norm_beta"], t["expand"], t["expand_bias"])
        return weights, DckConfig(kernel_size=k, groups=g, reduction=r, channels=c)

    def loss(t):
        weights, config = unpack(t)
        out = dck_forward(t["features"], t["depth_feature"], weights, config)
        return float(np.sum(out * t["cotangent"]))

    def grads(t):
        weights, config = unpack(t)
        g = dck_backward(t["cotangent"], t["features"], t["depth_feature"], weights, config)
        return {
            "features": g.features,
            "depth_feature": g.depth_feature,
            "reduce": g.weights.reduce,
            "norm_gamma": g.weights.norm_gamma,
            "norm_beta": g.weights.norm_beta,
            "expand": g.weights.expand,
            "expand_bias": g.weights.expand_bias,
        }

    return GradCase(build, loss, grads)


register_gradcase("msdp_forward", _msdp_case())
register_gradcase("dck", _dck_case())
