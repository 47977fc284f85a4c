"""
Dense-tensor kernels for the depth-conditioned detector.

Tensors are float64 numpy arrays in channel-first layout ([C, H, W]). There
is no autodiff graph: every differentiable op has a hand-written backward
returning exact vector-Jacobian products, and the gradcheck harness at the
bottom of this module compares each of them against central finite
differences on seeded random instances.

Float32 is used only when rasters or model tensors are written to disk.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from numpy.typing import NDArray

Tensor = NDArray[np.float64]

# Exponential-moving-average weight kept on the old running statistics
BN_MOMENTUM = 0.9
BN_EPS = 1e-5


@dataclass
class GradPair:
    """A parameter value together with the gradient that annotates it."""

    value: Tensor
    gradient: Tensor

    def __post_init__(self):
        if self.value.shape != self.gradient.shape:
            raise ValueError(
                f"gradient shape {self.gradient.shape} does not match value shape {self.value.shape}"
            )


@dataclass
class RunningStats:
    """Per-channel running mean/variance, updated in place (single writer)."""

    mean: Tensor
    var: Tensor

    @classmethod
    def fresh(cls, channels: int) -> "RunningStats":
        return cls(mean=np.zeros(channels), var=np.ones(channels))


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _check_conv(input: Tensor, weight: Tensor, stride: int, padding: int) -> tuple[int, int]:
    if input.ndim != 3:
        raise ValueError(f"conv2d input must be [C_in, H, W], got shape {input.shape}")
    if weight.ndim != 4:
        raise ValueError(f"conv2d weight must be [C_out, C_in, k, k], got shape {weight.shape}")
    _, c_in, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"kernel size must be square and odd, got {kh}x{kw}")
    if input.shape[0] != c_in:
        raise ValueError(
            f"C_in mismatch: input has {input.shape[0]} channels, weight expects {c_in}"
        )
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    h_out = conv_output_size(input.shape[1], kh, stride, padding)
    w_out = conv_output_size(input.shape[2], kh, stride, padding)
    if h_out < 1:
        raise ValueError(f"H too small: {input.shape[1]} with kernel {kh}, padding {padding}")
    if w_out < 1:
        raise ValueError(f"W too small: {input.shape[2]} with kernel {kh}, padding {padding}")
    return h_out, w_out


def _windows(x: Tensor, k: int, stride: int, padding: int) -> Tensor:
    """[C, H', W', k, k] view of every receptive field (zero padded)."""
    padded = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    return sliding_window_view(padded, (k, k), axis=(1, 2))[:, ::stride, ::stride]


def conv2d(input: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """
    2-D cross-correlation with zero padding.

    Args:
        input: [C_in, H, W]
        weight: [C_out, C_in, k, k], k odd
        bias: [C_out] or None

    Returns:
        [C_out, H', W'] with H' = floor((H + 2*padding - k) / stride) + 1
    """
    _check_conv(input, weight, stride, padding)
    c_out = weight.shape[0]
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"C_out mismatch: bias shape {bias.shape}, weight has {c_out} output channels")
    win = _windows(input, weight.shape[2], stride, padding)
    out = np.tensordot(weight, win, axes=([1, 2, 3], [0, 3, 4]))
    if bias is not None:
        out = out + bias[:, None, None]
    return out


def conv2d_backward(
    grad_out: Tensor, input: Tensor, weight: Tensor, stride: int = 1, padding: int = 0
) -> tuple[Tensor, Tensor, Tensor]:
    """Returns (grad_input, grad_weight, grad_bias) for conv2d."""
    h_out, w_out = _check_conv(input, weight, stride, padding)
    c_out, c_in, k, _ = weight.shape
    if grad_out.shape != (c_out, h_out, w_out):
        raise ValueError(
            f"grad_out shape {grad_out.shape} does not match conv2d output {(c_out, h_out, w_out)}"
        )
    win = _windows(input, k, stride, padding)
    grad_weight = np.tensordot(grad_out, win, axes=([1, 2], [1, 2]))
    grad_bias = grad_out.sum(axis=(1, 2))

    per_tap = np.tensordot(weight, grad_out, axes=([0], [0]))  # [C_in, k, k, H', W']
    _, h, w = input.shape
    padded = np.zeros((c_in, h + 2 * padding, w + 2 * padding))
    for i in range(k):
        for j in range(k):
            padded[:, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += per_tap[:, i, j]
    grad_input = np.ascontiguousarray(padded[:, padding:padding + h, padding:padding + w])
    return grad_input, grad_weight, grad_bias


# ---------------------------------------------------------------------------
# Affine map over the trailing axis
# ---------------------------------------------------------------------------

def linear(input: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    if weight.ndim != 2:
        raise ValueError(f"linear weight must be [C_out, C_in], got shape {weight.shape}")
    if input.shape[-1] != weight.shape[1]:
        raise ValueError(
            f"C_in mismatch: input trailing axis is {input.shape[-1]}, weight expects {weight.shape[1]}"
        )
    out = input @ weight.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ValueError(f"C_out mismatch: bias shape {bias.shape}, weight rows {weight.shape[0]}")
        out = out + bias
    return out


def linear_backward(grad_out: Tensor, input: Tensor, weight: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Returns (grad_input, grad_weight, grad_bias) for linear."""
    c_out, c_in = weight.shape
    if grad_out.shape != input.shape[:-1] + (c_out,):
        raise ValueError(
            f"grad_out shape {grad_out.shape} does not match linear output {input.shape[:-1] + (c_out,)}"
        )
    flat_grad = grad_out.reshape(-1, c_out)
    grad_weight = flat_grad.T @ input.reshape(-1, c_in)
    grad_bias = flat_grad.sum(axis=0)
    grad_input = grad_out @ weight
    return grad_input, grad_weight, grad_bias


# ---------------------------------------------------------------------------
# Normalization + ReLU
# ---------------------------------------------------------------------------

def _norm_stats(
    input: Tensor, stats_mode: str, running: RunningStats | None
) -> tuple[Tensor, Tensor]:
    axes = tuple(range(1, input.ndim))
    if stats_mode == "batch":
        return input.mean(axis=axes), input.var(axis=axes)
    if stats_mode == "running":
        if running is None:
            raise ValueError("running stats_mode requires stored running statistics")
        return running.mean, running.var
    raise ValueError(f"unknown stats_mode: {stats_mode!r} (expected 'batch' or 'running')")


def _check_norm(input: Tensor, gamma: Tensor, beta_aff: Tensor, eps: float):
    channels = input.shape[0]
    if gamma.shape != (channels,):
        raise ValueError(f"C mismatch: gamma shape {gamma.shape}, input has {channels} channels")
    if beta_aff.shape != (channels,):
        raise ValueError(f"C mismatch: beta shape {beta_aff.shape}, input has {channels} channels")
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")


def norm_act(
    input: Tensor,
    gamma: Tensor,
    beta_aff: Tensor,
    stats_mode: str = "batch",
    eps: float = BN_EPS,
    running: RunningStats | None = None,
) -> Tensor:
    """
    Per-channel normalization, affine transform, then ReLU.

    Channel axis is 0; statistics are taken over every remaining axis. In
    batch mode the supplied tensor's statistics are used and, when
    ``running`` is given, folded into it by EMA with momentum BN_MOMENTUM.
    """
    _check_norm(input, gamma, beta_aff, eps)
    mean, var = _norm_stats(input, stats_mode, running)
    if stats_mode == "batch" and running is not None:
        running.mean[...] = BN_MOMENTUM * running.mean + (1.0 - BN_MOMENTUM) * mean
        running.var[...] = BN_MOMENTUM * running.var + (1.0 - BN_MOMENTUM) * var
    bcast = (slice(None),) + (None,) * (input.ndim - 1)
    x_hat = (input - mean[bcast]) / np.sqrt(var[bcast] + eps)
    return np.maximum(gamma[bcast] * x_hat + beta_aff[bcast], 0.0)


def norm_act_backward(
    grad_out: Tensor,
    input: Tensor,
    gamma: Tensor,
    beta_aff: Tensor,
    stats_mode: str = "batch",
    eps: float = BN_EPS,
    running: RunningStats | None = None,
) -> tuple[Tensor, Tensor, Tensor]:
    """Returns (grad_input, grad_gamma, grad_beta). Never touches running stats."""
    _check_norm(input, gamma, beta_aff, eps)
    if grad_out.shape != input.shape:
        raise ValueError(f"grad_out shape {grad_out.shape} does not match input {input.shape}")
    axes = tuple(range(1, input.ndim))
    bcast = (slice(None),) + (None,) * (input.ndim - 1)
    mean, var = _norm_stats(input, stats_mode, running)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (input - mean[bcast]) * inv_std[bcast]
    pre = gamma[bcast] * x_hat + beta_aff[bcast]
    g = grad_out * (pre > 0)
    grad_beta = g.sum(axis=axes)
    grad_gamma = (g * x_hat).sum(axis=axes)
    d_xhat = g * gamma[bcast]
    if stats_mode == "running":
        return d_xhat * inv_std[bcast], grad_gamma, grad_beta
    n = int(np.prod(input.shape[1:]))
    grad_input = (inv_std[bcast] / n) * (
        n * d_xhat
        - d_xhat.sum(axis=axes)[bcast]
        - x_hat * (d_xhat * x_hat).sum(axis=axes)[bcast]
    )
    return grad_input, grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# Elementwise, resampling, pooling
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0)


def relu_backward(grad_out: Tensor, x: Tensor) -> Tensor:
    return grad_out * (x > 0)


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of the two trailing axes."""
    return np.repeat(np.repeat(x, 2, axis=-2), 2, axis=-1)


def upsample2x_backward(grad_out: Tensor) -> Tensor:
    *lead, h, w = grad_out.shape
    if h % 2 or w % 2:
        raise ValueError(f"upsample2x gradient must have even H and W, got {h}x{w}")
    return grad_out.reshape(*lead, h // 2, 2, w // 2, 2).sum(axis=(-3, -1))


def avg_pool2d(x: Tensor, window: int) -> Tensor:
    """
    Average pool with window == stride over the two trailing axes.

    Output size is ceil(H / window) x ceil(W / window); edge windows are
    averaged over the pixels that exist.
    """
    if window < 1:
        raise ValueError(f"pool window must be >= 1, got {window}")
    h, w = x.shape[-2:]
    oh, ow = -(-h // window), -(-w // window)
    spatial_pad = [(0, oh * window - h), (0, ow * window - w)]
    lead = x.shape[:-2]
    padded = np.pad(x, [(0, 0)] * len(lead) + spatial_pad)
    sums = padded.reshape(*lead, oh, window, ow, window).sum(axis=(-3, -1))
    counts = np.pad(np.ones((h, w)), spatial_pad).reshape(oh, window, ow, window).sum(axis=(1, 3))
    return sums / counts


# ---------------------------------------------------------------------------
# Gradient verification harness
# ---------------------------------------------------------------------------

@dataclass
class GradCase:
    """
    A differentiable op wrapped for finite-difference checking.

    ``build`` draws a seeded random instance (a dict of named arrays),
    ``loss`` maps that instance to a scalar, and ``grads`` returns the
    analytic gradient of that scalar for every array it covers. Arrays
    absent from ``grads`` (cotangents, targets) are held fixed.
    """

    build: Callable[..., dict[str, Tensor]]
    loss: Callable[[dict[str, Tensor]], float]
    grads: Callable[[dict[str, Tensor]], dict[str, Tensor]]


@dataclass
class GradcheckReport:
    op_id: str
    max_rel_error: float
    max_abs_error: float
    checked: int
    tolerance: float
    passed: bool
    worst: str = ""

    def to_dict(self) -> dict:
        return {
            "op": self.op_id,
            "max_rel_error": self.max_rel_error,
            "max_abs_error": self.max_abs_error,
            "checked": self.checked,
            "tolerance": self.tolerance,
            "pass": self.passed,
            "worst": self.worst,
        }


_GRADCASES: dict[str, GradCase] = {}


def register_gradcase(op_id: str, case: GradCase) -> None:
    _GRADCASES[op_id] = case


def registered_ops() -> list[str]:
    return sorted(_GRADCASES)


def gradcheck(
    op_id: str,
    input_spec: dict | None = None,
    tolerance: float = 1e-5,
    step: float = 1e-5,
    seed: int = 0,
) -> GradcheckReport:
    """
    Compare every analytic gradient element of a registered op with central
    finite differences.

    Relative error per element is |a - fd| / max(|a|, |fd|, 1e-8); the op
    passes iff the maximum is below ``tolerance``.
    """
    case = _GRADCASES.get(op_id)
    if case is None:
        raise ValueError(f"unknown op: {op_id!r} (registered: {', '.join(registered_ops())})")
    if not 0 < step <= 1e-3:
        raise ValueError(f"step must be in (0, 1e-3], got {step}")

    rng = np.random.default_rng(seed)
    inputs = case.build(rng, **(input_spec or {}))
    analytic = {name: np.array(g, dtype=np.float64) for name, g in case.grads(inputs).items()}

    max_rel = 0.0
    max_abs = 0.0
    worst = ""
    checked = 0
    for name, grad in analytic.items():
        x = inputs[name]
        if grad.shape != x.shape:
            raise ValueError(f"{op_id}: gradient for {name} has shape {grad.shape}, expected {x.shape}")
        for idx in np.ndindex(x.shape):
            original = x[idx]
            x[idx] = original + step
            f_plus = case.loss(inputs)
            x[idx] = original - step
            f_minus = case.loss(inputs)
            x[idx] = original
            fd = (f_plus - f_minus) / (2.0 * step)
            a = grad[idx]
            abs_err = abs(a - fd)
            rel_err = abs_err / max(abs(a), abs(fd), 1e-8)
            checked += 1
            max_abs = max(max_abs, abs_err)
            if rel_err > max_rel:
                max_rel = rel_err
                worst = f"{name}{list(idx)}"
    return GradcheckReport(
        op_id=op_id,
        max_rel_error=float(max_rel),
        max_abs_error=float(max_abs),
        checked=checked,
        tolerance=tolerance,
        passed=bool(max_rel < tolerance),
        worst=worst,
    )


def _scalar_projection(out: Tensor, cotangent: Tensor) -> float:
    return float(np.sum(out * cotangent))


def _conv2d_case() -> GradCase:
    def build(rng, channels=2, size=4, out_channels=3, kernel=3, stride=1, padding=1):
        h_out = conv_output_size(size, kernel, stride, padding)
        return {
            "input": rng.standard_normal((channels, size, size)),
            "weight": rng.standard_normal((out_channels, channels, kernel, kernel)),
            "bias": rng.standard_normal(out_channels),
            "cotangent": rng.standard_normal((out_channels, h_out, h_out)),
            "_geometry": np.array([stride, padding]),
        }

    def loss(t):
        stride, padding = (int(v) for v in t["_geometry"])
        return _scalar_projection(conv2d(t["input"], t["weight"], t["bias"], stride, padding), t["cotangent"])

    def grads(t):
        stride, padding = (int(v) for v in t["_geometry"])
        gi, gw, gb = conv2d_backward(t["cotangent"], t["input"], t["weight"], stride, padding)
        return {"input": gi, "weight": gw, "bias": gb}

    return GradCase(build, loss, grads)


def _linear_case() -> GradCase:
    def build(rng, rows=5, c_in=4, c_out=3):
        return {
            "input": rng.standard_normal((rows, c_in)),
            "weight": rng.standard_normal((c_out, c_in)),
            "bias": rng.standard_normal(c_out),
            "cotangent": rng.standard_normal((rows, c_out)),
        }

    def loss(t):
        return _scalar_projection(linear(t["input"], t["weight"], t["bias"]), t["cotangent"])

    def grads(t):
        gi, gw, gb = linear_backward(t["cotangent"], t["input"], t["weight"])
        return {"input": gi, "weight": gw, "bias": gb}

    return GradCase(build, loss, grads)


def _norm_act_case() -> GradCase:
    def build(rng, channels=3, size=4):
        return {
            "input": rng.standard_normal((channels, size, size)),
            "gamma": 1.0 + 0.5 * rng.standard_normal(channels),
            "beta": 0.5 * rng.standard_normal(channels),
            "cotangent": rng.standard_normal((channels, size, size)),
        }

    def loss(t):
        return _scalar_projection(norm_act(t["input"], t["gamma"], t["beta"]), t["cotangent"])

    def grads(t):
        gi, gg, gb = norm_act_backward(t["cotangent"], t["input"], t["gamma"], t["beta"])
        return {"input": gi, "gamma": gg, "beta": gb}

    return GradCase(build, loss, grads)


register_gradcase("conv2d", _conv2d_case())
register_gradcase("linear", _linear_case())
register_gradcase("norm_act", _norm_act_case())
