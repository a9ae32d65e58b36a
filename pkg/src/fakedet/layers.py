"""Neural-network layers and activations over the autodiff tensor core.

Convention: NCHW (batch, channels, height, width) for all spatial ops.
Convolution is cross-correlation (no kernel flip). Output extents follow

    H_out = (H + pad_total - kH) // stride + 1

with ``padding="valid"`` meaning pad_total = 0 and ``padding="same"``
meaning H_out = ceil(H / stride) with the extra pad row/column at the
bottom/right when the total is odd.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from . import tensor as tt
from .tensor import Tensor


# ---- parameter containers ------------------------------------------------


@dataclass
class Conv2dParams:
    """Filters [out_ch, in_ch, kH, kW] plus one bias per output channel."""

    kernels: Tensor
    bias: Tensor
    stride: int = 1
    padding: str = "valid"

    def __post_init__(self):
        if self.kernels.ndim != 4:
            raise ValueError(f"kernels must be rank 4, got {self.kernels.shape}")
        out_ch, _, kh, kw = self.kernels.shape
        if kh < 1 or kw < 1:
            raise ValueError("kernel extents must be >= 1")
        if self.bias.shape != (out_ch,):
            raise ValueError(f"bias shape {self.bias.shape} != ({out_ch},)")
        if self.stride < 1:
            raise ValueError("stride must be positive")
        if self.padding not in ("valid", "same"):
            raise ValueError(f"unknown padding {self.padding!r}")

    @classmethod
    def init(cls, in_ch, out_ch, k, stride=1, padding="valid", *, rng):
        limit = np.sqrt(6.0 / ((in_ch + out_ch) * k * k))
        kernels = tt.uniform((out_ch, in_ch, k, k), -limit, limit, seed=rng, requires_grad=True)
        return cls(kernels, tt.zeros((out_ch,), requires_grad=True), stride, padding)


@dataclass
class DepthwiseConv2dParams:
    """One kH x kW filter per channel, [C, kH, kW], channels unmixed."""

    kernels: Tensor
    bias: Tensor
    stride: int = 1
    padding: str = "same"

    def __post_init__(self):
        if self.kernels.ndim != 3:
            raise ValueError(f"kernels must be rank 3, got {self.kernels.shape}")
        if self.bias.shape != (self.kernels.shape[0],):
            raise ValueError("bias length must match channel count")

    @classmethod
    def init(cls, channels, k, stride=1, padding="same", *, rng):
        limit = np.sqrt(6.0 / (2 * k * k))
        kernels = tt.uniform((channels, k, k), -limit, limit, seed=rng, requires_grad=True)
        return cls(kernels, tt.zeros((channels,), requires_grad=True), stride, padding)


@dataclass
class DenseParams:
    weight: Tensor  # [N1, N2]
    bias: Tensor    # [N2]

    def __post_init__(self):
        if self.weight.ndim != 2:
            raise ValueError(f"weight must be rank 2, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[1],):
            raise ValueError(f"bias shape {self.bias.shape} != ({self.weight.shape[1]},)")

    @classmethod
    def init(cls, n_in, n_out, *, rng):
        limit = np.sqrt(6.0 / (n_in + n_out))
        weight = tt.uniform((n_in, n_out), -limit, limit, seed=rng, requires_grad=True)
        return cls(weight, tt.zeros((n_out,), requires_grad=True))


@dataclass
class LayerNormParams:
    gain: Tensor    # [C]
    offset: Tensor  # [C]
    epsilon: float = 1e-5

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")

    @classmethod
    def init(cls, dim, epsilon=1e-5):
        return cls(tt.ones((dim,), requires_grad=True),
                   tt.zeros((dim,), requires_grad=True), epsilon)


@dataclass
class AttentionParams:
    """Query/key/value projections plus output projection for MSA.

    The [C, C] projection matrices hold all heads side by side: head h
    owns columns [h * C/H, (h+1) * C/H).
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bq: Tensor
    bk: Tensor
    bv: Tensor
    bo: Tensor
    heads: int = 1

    def __post_init__(self):
        dim = self.wq.shape[0]
        for name in ("wq", "wk", "wv", "wo"):
            if getattr(self, name).shape != (dim, dim):
                raise ValueError(f"{name} must be [{dim}, {dim}]")
        if dim % self.heads != 0:
            raise ValueError(f"embed dim {dim} not divisible by {self.heads} heads")

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def init(cls, dim, heads, *, rng):
        limit = np.sqrt(6.0 / (2 * dim))
        def w():
            return tt.uniform((dim, dim), -limit, limit, seed=rng, requires_grad=True)
        def b():
            return tt.zeros((dim,), requires_grad=True)
        return cls(w(), w(), w(), w(), b(), b(), b(), b(), heads)


@dataclass
class FfnParams:
    """Per-token two-layer perceptron, C -> r*C -> C with GELU between."""

    fc1: DenseParams
    fc2: DenseParams

    def __post_init__(self):
        if self.fc1.weight.shape[1] < self.fc1.weight.shape[0]:
            raise ValueError("hidden width must be >= embed dim")
        if self.fc2.weight.shape[::-1] != self.fc1.weight.shape:
            raise ValueError("fc2 must mirror fc1")

    @classmethod
    def init(cls, dim, expansion, *, rng):
        return cls(DenseParams.init(dim, dim * expansion, rng=rng),
                   DenseParams.init(dim * expansion, dim, rng=rng))


@dataclass
class BatchNormParams:
    """Per-channel affine plus running statistics (momentum 0.9)."""

    gain: Tensor
    offset: Tensor
    running_mean: np.ndarray = field(repr=False, default=None)
    running_var: np.ndarray = field(repr=False, default=None)
    momentum: float = 0.9
    epsilon: float = 1e-5

    def __post_init__(self):
        c = self.gain.shape[0]
        if self.running_mean is None:
            self.running_mean = np.zeros(c, dtype=np.float32)
        if self.running_var is None:
            self.running_var = np.ones(c, dtype=np.float32)

    @classmethod
    def init(cls, channels):
        return cls(tt.ones((channels,), requires_grad=True),
                   tt.zeros((channels,), requires_grad=True))


# ---- padding helpers -----------------------------------------------------


def _pad_extents(size, k, stride, padding):
    if padding == "valid":
        return 0, 0
    out = -(-size // stride)  # ceil
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def _padded(x_data, kh, kw, stride, padding):
    _, _, h, w = x_data.shape
    ph = _pad_extents(h, kh, stride, padding)
    pw = _pad_extents(w, kw, stride, padding)
    if ph == (0, 0) and pw == (0, 0):
        return x_data, ph, pw
    return np.pad(x_data, ((0, 0), (0, 0), ph, pw)), ph, pw


def _window_view(xp, kh, kw, stride):
    """[B, C, H', W', kH, kW] strided view of every window."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


# ---- spatial layers ------------------------------------------------------


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """Multi-channel 2-D cross-correlation with bias.

    Each output channel j sums the per-channel correlations of the input
    with its filters and adds bias[j]; activation is applied separately.

        y[b, j, i, l] = sum_k corr(x[b, k], kernels[j, k])[i, l] + bias[j]
    """
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be [B, C, H, W], got {x.shape}")
    out_ch, in_ch, kh, kw = p.kernels.shape
    if x.shape[1] != in_ch:
        raise ValueError(f"input has {x.shape[1]} channels, kernels expect {in_ch}")
    xp, ph, pw = _padded(x.data, kh, kw, p.stride, p.padding)
    b, _, hp, wp = xp.shape
    if hp < kh or wp < kw:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    h_out = (hp - kh) // p.stride + 1
    w_out = (wp - kw) // p.stride + 1

    cols = _window_view(xp, kh, kw, p.stride)            # [B,C,H',W',kh,kw]
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(b * h_out * w_out, in_ch * kh * kw)
    cols = np.ascontiguousarray(cols)
    wmat = p.kernels.data.reshape(out_ch, -1)
    out = cols @ wmat.T + p.bias.data
    out = out.reshape(b, h_out, w_out, out_ch).transpose(0, 3, 1, 2)

    kernels, bias, stride = p.kernels, p.bias, p.stride
    x_shape, pad_shape = x.shape, xp.shape

    def bwd(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, out_ch)
        if bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))
        if kernels.requires_grad:
            kernels._accumulate((g2.T @ cols).reshape(kernels.shape))
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(b, h_out, w_out, in_ch, kh, kw)
            dcols = dcols.transpose(0, 3, 1, 2, 4, 5)    # [B,C,H',W',kh,kw]
            dxp = np.zeros(pad_shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * h_out:stride,
                        j:j + stride * w_out:stride] += dcols[:, :, :, :, i, j]
            x._accumulate(np.ascontiguousarray(
                dxp[:, :, ph[0]:ph[0] + x_shape[2], pw[0]:pw[0] + x_shape[3]]))

    return Tensor._op(out, (x, kernels, bias), bwd)


def depthwise_conv2d(x: Tensor, p: DepthwiseConv2dParams) -> Tensor:
    """Per-channel 2-D cross-correlation; channel c sees only filter c."""
    if x.shape[1] != p.kernels.shape[0]:
        raise ValueError(f"input has {x.shape[1]} channels, kernels expect {p.kernels.shape[0]}")
    c, kh, kw = p.kernels.shape
    xp, ph, pw = _padded(x.data, kh, kw, p.stride, p.padding)
    b, _, hp, wp = xp.shape
    h_out = (hp - kh) // p.stride + 1
    w_out = (wp - kw) // p.stride + 1

    win = _window_view(xp, kh, kw, p.stride)             # [B,C,H',W',kh,kw]
    out = np.einsum("bchwij,cij->bchw", win, p.kernels.data, optimize=True)
    out = out + p.bias.data[None, :, None, None]

    kernels, bias, stride = p.kernels, p.bias, p.stride
    x_shape, pad_shape = x.shape, xp.shape

    def bwd(g):
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if kernels.requires_grad:
            kernels._accumulate(np.einsum("bchw,bchwij->cij", g, win, optimize=True))
        if x.requires_grad:
            dxp = np.zeros(pad_shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * h_out:stride,
                        j:j + stride * w_out:stride] += g * kernels.data[None, :, i, j, None, None]
            x._accumulate(np.ascontiguousarray(
                dxp[:, :, ph[0]:ph[0] + x_shape[2], pw[0]:pw[0] + x_shape[3]]))

    return Tensor._op(out, (x, kernels, bias), bwd)


def maxpool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Max over each window; backward routes the gradient to the argmax
    only, first element in row-major order on ties."""
    if stride is None:
        stride = window
    _, _, h, w = x.shape
    if window > h or window > w:
        raise ValueError(f"window {window} exceeds input {h}x{w}")
    h_out = (h - window) // stride + 1
    w_out = (w - window) // stride + 1

    win = _window_view(x.data, window, window, stride)
    flat = win.reshape(*win.shape[:4], -1)
    arg = np.argmax(flat, axis=-1)                       # first max wins ties
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bwd(g):
        if not x.requires_grad:
            return
        b, c = x.shape[:2]
        bi, ci, oi, oj = np.ogrid[:b, :c, :h_out, :w_out]
        rows = oi * stride + arg // window
        cols = oj * stride + arg % window
        dx = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(dx, (np.broadcast_to(bi, arg.shape), np.broadcast_to(ci, arg.shape),
                       rows, cols), g)
        x._accumulate(dx)

    return Tensor._op(np.ascontiguousarray(out), (x,), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """[B, C, H, W] -> [B, C], mean over the spatial extent."""
    return x.mean(axis=(2, 3))


# ---- dense / flatten / dropout ------------------------------------------


def dense(x: Tensor, p: DenseParams) -> Tensor:
    """x[B, N1] @ weight[N1, N2] + bias, the fully connected layer."""
    if x.ndim != 2:
        raise ValueError(f"dense input must be [B, N1], got {x.shape}")
    if x.shape[1] != p.weight.shape[0]:
        raise ValueError(f"dense expects {p.weight.shape[0]} features, got {x.shape[1]}")
    out = tt.matmul(x, p.weight)
    return out + tt.broadcast_to(p.bias, out.shape)


def flatten(x: Tensor) -> Tensor:
    """[B, ...] -> [B, prod(rest)], row-major."""
    if x.ndim < 2:
        raise ValueError(f"flatten needs rank >= 2, got {x.shape}")
    return x.reshape(x.shape[0], -1)


def dropout(x: Tensor, rate: float, training: bool, seed) -> Tensor:
    """Inverted dropout: drop with probability ``rate`` and scale the
    survivors by 1/(1-rate) so inference is a pure identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    scale = 1.0 / (1.0 - rate)
    mask = (rng.random(x.shape) >= rate).astype(x.data.dtype) * scale

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * mask)

    return Tensor._op(x.data * mask, (x,), bwd)


# ---- activations ---------------------------------------------------------


def relu(z: Tensor) -> Tensor:
    return tt.maximum(z, 0.0)


def leaky_relu(z: Tensor, alpha: float = 0.01) -> Tensor:
    """z for z > 0, alpha * z otherwise."""
    slope = np.where(z.data > 0, 1.0, alpha)

    def bwd(g):
        if z.requires_grad:
            z._accumulate(g * slope)

    return Tensor._op(z.data * slope, (z,), bwd)


def sigmoid(z: Tensor) -> Tensor:
    """1 / (1 + exp(-z)), computed without overflow on large |z|."""
    d = z.data
    out = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                   np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def bwd(g):
        if z.requires_grad:
            z._accumulate(g * out * (1.0 - out))

    return Tensor._op(out, (z,), bwd)


def tanh(z: Tensor) -> Tensor:
    out = np.tanh(z.data)

    def bwd(g):
        if z.requires_grad:
            z._accumulate(g * (1.0 - out * out))

    return Tensor._op(out, (z,), bwd)


def gelu(z: Tensor) -> Tensor:
    """Exact Gaussian-CDF GELU: z * Phi(z)."""
    d = z.data
    cdf = 0.5 * (1.0 + erf(d / np.sqrt(2.0)))

    def bwd(g):
        if z.requires_grad:
            pdf = np.exp(-0.5 * d * d) / np.sqrt(2.0 * np.pi)
            z._accumulate(g * (cdf + d * pdf))

    return Tensor._op(d * cdf, (z,), bwd)


def hard_swish(z: Tensor) -> Tensor:
    """z * relu6(z + 3) / 6, the MobileNetV3 activation."""
    d = z.data
    inner = np.clip(d + 3.0, 0.0, 6.0)

    def bwd(g):
        if z.requires_grad:
            slope = np.where(d <= -3.0, 0.0, np.where(d >= 3.0, 1.0, (2.0 * d + 3.0) / 6.0))
            z._accumulate(g * slope)

    return Tensor._op(d * inner / 6.0, (z,), bwd)


ACTIVATIONS = {
    "relu": relu,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "gelu": gelu,
    "hard_swish": hard_swish,
}


def activation(kind: str, z: Tensor, **kwargs) -> Tensor:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(z, **kwargs)


# ---- normalization -------------------------------------------------------


def layer_norm(x: Tensor, p: LayerNormParams) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply
    the learned per-feature gain and offset."""
    c = p.gain.shape[0]
    if x.shape[-1] != c:
        raise ValueError(f"last axis {x.shape[-1]} != normalized dim {c}")
    mu = np.mean(x.data, axis=-1, keepdims=True)
    var = np.var(x.data, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + p.epsilon)
    xhat = (x.data - mu) * inv
    out = p.gain.data * xhat + p.offset.data

    gain, offset = p.gain, p.offset
    red = tuple(range(x.ndim - 1))

    def bwd(g):
        if offset.requires_grad:
            offset._accumulate(g.sum(axis=red))
        if gain.requires_grad:
            gain._accumulate((g * xhat).sum(axis=red))
        if x.requires_grad:
            gy = g * gain.data
            x._accumulate(inv * (gy - np.mean(gy, axis=-1, keepdims=True)
                                 - xhat * np.mean(gy * xhat, axis=-1, keepdims=True)))

    return Tensor._op(out, (x, gain, offset), bwd)


def batch_norm2d(x: Tensor, p: BatchNormParams, training: bool) -> Tensor:
    """Per-channel batch normalization over [B, C, H, W].

    Training mode normalizes with the current batch statistics and folds
    them into the running buffers; eval mode uses the buffers only.
    """
    if x.ndim != 4 or x.shape[1] != p.gain.shape[0]:
        raise ValueError(f"batch_norm2d expects [B, {p.gain.shape[0]}, H, W], got {x.shape}")
    gain, offset = p.gain, p.offset
    g4 = gain.data[None, :, None, None]
    red = (0, 2, 3)

    if training:
        mu = np.mean(x.data, axis=red)
        var = np.var(x.data, axis=red)
        p.running_mean[:] = p.momentum * p.running_mean + (1 - p.momentum) * mu
        p.running_var[:] = p.momentum * p.running_var + (1 - p.momentum) * var
        inv = 1.0 / np.sqrt(var + p.epsilon)[None, :, None, None]
        xhat = (x.data - mu[None, :, None, None]) * inv

        def bwd(g):
            if offset.requires_grad:
                offset._accumulate(g.sum(axis=red))
            if gain.requires_grad:
                gain._accumulate((g * xhat).sum(axis=red))
            if x.requires_grad:
                gy = g * g4
                mean_gy = np.mean(gy, axis=red, keepdims=True)
                mean_gy_xhat = np.mean(gy * xhat, axis=red, keepdims=True)
                x._accumulate(inv * (gy - mean_gy - xhat * mean_gy_xhat))

    else:
        inv = 1.0 / np.sqrt(p.running_var + p.epsilon)[None, :, None, None]
        xhat = (x.data - p.running_mean[None, :, None, None]) * inv

        def bwd(g):
            if offset.requires_grad:
                offset._accumulate(g.sum(axis=red))
            if gain.requires_grad:
                gain._accumulate((g * xhat).sum(axis=red))
            if x.requires_grad:
                x._accumulate(g * g4 * inv)

    out = g4 * xhat + offset.data[None, :, None, None]
    return Tensor._op(out, (x, gain, offset), bwd)


# ---- transformer sub-blocks ---------------------------------------------


def _project(tokens: Tensor, w: Tensor, b: Tensor) -> Tensor:
    bsz, n, c = tokens.shape
    flat = tokens.reshape(bsz * n, c)
    out = tt.matmul(flat, w)
    out = out + tt.broadcast_to(b, out.shape)
    return out.reshape(bsz, n, w.shape[1])


def msa(tokens: Tensor, p: AttentionParams, return_weights: bool = False):
    """Multi-headed scaled dot-product self-attention over a token sequence.

    tokens: [B, N, C]. Each head attends with scale 1/sqrt(C/H); the head
    outputs are concatenated and passed through the output projection.
    With ``return_weights`` the [B, H, N, N] attention weights (each query
    row summing to 1) are returned alongside the output.
    """
    if tokens.ndim != 3 or tokens.shape[2] != p.dim:
        raise ValueError(f"tokens must be [B, N, {p.dim}], got {tokens.shape}")
    bsz, n, c = tokens.shape
    heads = p.heads
    dh = c // heads
    scale = 1.0 / np.sqrt(dh)

    def split_heads(t):
        return t.reshape(bsz, n, heads, dh).transpose((0, 2, 1, 3))  # [B,H,N,dh]

    q = split_heads(_project(tokens, p.wq, p.bq))
    k = split_heads(_project(tokens, p.wk, p.bk))
    v = split_heads(_project(tokens, p.wv, p.bv))

    scores = tt.matmul(q, k.transpose((0, 1, 3, 2))) * scale
    weights = tt.softmax(scores, axis=-1)
    context = tt.matmul(weights, v)                                  # [B,H,N,dh]
    merged = context.transpose((0, 2, 1, 3)).reshape(bsz, n, c)
    out = _project(merged, p.wo, p.bo)
    if return_weights:
        return out, weights
    return out


def ffn(tokens: Tensor, p: FfnParams) -> Tensor:
    """Token-wise perceptron: dense(C -> rC), GELU, dense(rC -> C)."""
    if tokens.ndim != 3 or tokens.shape[2] != p.fc1.weight.shape[0]:
        raise ValueError(f"tokens must be [B, N, {p.fc1.weight.shape[0]}], got {tokens.shape}")
    bsz, n, c = tokens.shape
    flat = tokens.reshape(bsz * n, c)
    hidden = gelu(dense(flat, p.fc1))
    out = dense(hidden, p.fc2)
    return out.reshape(bsz, n, c)
