"""Dense channel-last tensors and the primitive kernels.

Feature maps are 4-D arrays in (batch, height, width, channel) order so the
per-pixel channel vectors used by layer norm, channel attention, and prompt
broadcasting are contiguous.  Parameters reuse the same wrapper at other
ranks.  Every primitive is a pure function; when a tape is active it records
a vector-Jacobian product for the backward sweep.

Convolutions are direct (im2col); no FFT or Winograd paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from . import tape as _tape
from .errors import NonFiniteError, ShapeError

FLOAT_DTYPES = (np.float32, np.float64)

# Gate for the NaN/Inf guard that runs after each primitive.  Left on by
# default; benchmarks may disable it around timed regions.
finite_checks = True

LN_EPS = 1e-5


class Tensor:
    """Immutable wrapper around a contiguous float ndarray.

    ``name`` marks parameters so backward sweeps can key gradients by it.
    Treat ``data`` as read-only; in-place mutation between tapes is reserved
    for the owning WeightStore.
    """

    __slots__ = ("data", "name")

    def __init__(self, data, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        # ascontiguousarray promotes 0-d to 1-d; keep scalars 0-d
        self.data = np.ascontiguousarray(arr) if arr.ndim else arr
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), name=self.name)

    def item(self) -> float:
        return self.data.item()

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"


def _ensure_finite(arr: np.ndarray, op: str) -> None:
    if finite_checks and not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _out(data: np.ndarray, op: str) -> Tensor:
    _ensure_finite(data, op)
    return Tensor(data)


def _require_4d(x: Tensor, op: str) -> tuple[int, int, int, int]:
    if x.data.ndim != 4:
        raise ShapeError(f"{op} expects a (batch, h, w, channel) tensor, got {x.shape}")
    return x.data.shape


def _same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise ShapeError(f"{op}: mixed dtypes {a.dtype} and {b.dtype}")


# ---------------------------------------------------------------------------
# Convolution


@dataclass(frozen=True)
class ConvWeights:
    """Weights of one 2-D convolution.

    kernel extents are (out_ch, k_h, k_w, in_ch // groups); channels are
    group-major on both sides.  Depthwise convs set groups == in_ch == out_ch.
    """

    kernel: Tensor
    bias: Tensor | None = None
    groups: int = 1
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel.data.ndim != 4:
            raise ShapeError(f"conv kernel must be 4-D, got {self.kernel.shape}")
        out_ch = self.kernel.shape[0]
        if self.groups < 1 or out_ch % self.groups:
            raise ShapeError(f"out_ch {out_ch} not divisible by groups {self.groups}")
        if self.bias is not None and self.bias.shape != (out_ch,):
            raise ShapeError(f"conv bias must have shape ({out_ch},)")
        if self.stride < 1 or self.padding < 0:
            raise ShapeError("stride must be >= 1 and padding >= 0")

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[3] * self.groups


def _patches(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Sliding windows of a padded input: (B, Ho, Wo, kh, kw, C) view."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # view axes: (B, H', W', C, kh, kw) -> (B, H', W', kh, kw, C)
    win = win[:, ::stride, ::stride]
    return np.moveaxis(win, 3, 5)


def conv2d(x: Tensor, w: ConvWeights) -> Tensor:
    """Direct 2-D convolution (cross-correlation) in channel-last layout."""
    nb, h_in, w_in, c_in = _require_4d(x, "conv2d")
    co, kh, kw, cg = w.kernel.shape
    g = w.groups
    if c_in != w.in_channels:
        raise ShapeError(
            f"conv2d: input has {c_in} channels, kernel expects {w.in_channels}"
        )
    _same_dtype(x, w.kernel, "conv2d")
    s, p = w.stride, w.padding
    h_out = (h_in + 2 * p - kh) // s + 1
    w_out = (w_in + 2 * p - kw) // s + 1
    if h_out <= 0 or w_out <= 0:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} with padding {p} does not fit "
            f"input {h_in}x{w_in}"
        )

    kern = w.kernel.data
    if kh == 1 and kw == 1 and s == 1 and p == 0 and g == 1:
        # pointwise fast path: one matmul over the channel axis
        out = x.data.reshape(-1, c_in) @ kern.reshape(co, c_in).T
        out = out.reshape(nb, h_out, w_out, co)
    else:
        xp = x.data if p == 0 else np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0)))
        pat = _patches(xp, kh, kw, s)  # (B,Ho,Wo,kh,kw,C)
        pat = pat.reshape(nb, h_out, w_out, kh, kw, g, cg)
        kg = kern.reshape(g, co // g, kh, kw, cg)
        out = np.einsum("bijklgc,gaklc->bijga", pat, kg, optimize=True)
        out = out.reshape(nb, h_out, w_out, co)
    if w.bias is not None:
        out = out + w.bias.data

    result = _out(out, "conv2d")

    def vjp(grad):
        gg = grad.reshape(nb, h_out, w_out, g, co // g)
        kg = kern.reshape(g, co // g, kh, kw, cg)
        # input gradient: one strided accumulation pass per kernel offset
        hp, wp = h_in + 2 * p, w_in + 2 * p
        dxp = np.zeros((nb, hp, wp, c_in), dtype=grad.dtype)
        dxp_g = dxp.reshape(nb, hp, wp, g, cg)
        for dy in range(kh):
            for dx in range(kw):
                contrib = np.einsum(
                    "bijga,gac->bijgc", gg, kg[:, :, dy, dx, :], optimize=True
                )
                dxp_g[:, dy : dy + s * h_out : s, dx : dx + s * w_out : s] += contrib
        dx_arr = dxp[:, p : p + h_in, p : p + w_in, :]
        # kernel gradient against the recomputed patches
        xp = x.data if p == 0 else np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0)))
        pat = _patches(xp, kh, kw, s).reshape(nb, h_out, w_out, kh, kw, g, cg)
        dk = np.einsum("bijklgc,bijga->gaklc", pat, gg, optimize=True)
        dk = dk.reshape(co, kh, kw, cg)
        grads = [np.ascontiguousarray(dx_arr), dk]
        if w.bias is not None:
            grads.append(grad.sum(axis=(0, 1, 2)))
        return grads

    inputs = [x, w.kernel] + ([w.bias] if w.bias is not None else [])
    _tape.record(result, inputs, vjp, "conv2d")
    return result


# ---------------------------------------------------------------------------
# Normalization and activations


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize each per-pixel channel vector to zero mean, unit variance."""
    nb, h, w, c = _require_4d(x, "layer_norm")
    if c == 0:
        raise ShapeError("layer_norm: zero channel extent")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm: gamma/beta must have shape ({c},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _out(xhat * gamma.data + beta.data, "layer_norm")

    def vjp(grad):
        dbeta = grad.sum(axis=(0, 1, 2))
        dgamma = (grad * xhat).sum(axis=(0, 1, 2))
        dxhat = grad * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return [dx.astype(grad.dtype, copy=False), dgamma, dbeta]

    _tape.record(out, [x, gamma, beta], vjp, "layer_norm")
    return out


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

ACTIVATIONS = ("relu", "gelu", "silu", "sigmoid")


def activation(x: Tensor, kind: str) -> Tensor:
    """Element-wise nonlinearity: relu, gelu (exact erf), silu, or sigmoid."""
    xd = x.data
    if kind == "relu":
        mask = xd > 0
        trace = _tape.relu_trace_active()
        if trace is not None:
            trace.append(mask)
        out = _out(np.where(mask, xd, 0.0).astype(xd.dtype), "relu")
        vjp = lambda g: [np.where(mask, g, 0.0).astype(g.dtype)]
    elif kind == "sigmoid":
        s = _sigmoid(xd)
        out = _out(s, "sigmoid")
        vjp = lambda g: [(g * s * (1.0 - s)).astype(g.dtype)]
    elif kind == "silu":
        s = _sigmoid(xd)
        out = _out(xd * s, "silu")
        vjp = lambda g: [(g * (s + xd * s * (1.0 - s))).astype(g.dtype)]
    elif kind == "gelu":
        cdf = 0.5 * (1.0 + erf(xd / _SQRT2))
        out = _out(xd * cdf, "gelu")

        def vjp(g, _cdf=cdf, _x=xd):
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * _x * _x)
            return [(g * (_cdf + _x * pdf)).astype(g.dtype)]

    else:
        raise ShapeError(f"unknown activation kind {kind!r}")
    _tape.record(out, [x], vjp, kind)
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``; slices sum to one."""
    xd = x.data
    if not -xd.ndim <= axis < xd.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    # Reuse the shifted buffer for exp and the normalization: the map can
    # be as large as (pixels x pixels) and extra temporaries dominate peak
    # memory at benchmark sizes.
    y = xd - xd.max(axis=axis, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=axis, keepdims=True)
    out = _out(y, "softmax")

    def vjp(grad):
        dot = (grad * y).sum(axis=axis, keepdims=True)
        return [(y * (grad - dot)).astype(grad.dtype)]

    _tape.record(out, [x], vjp, "softmax")
    return out


# ---------------------------------------------------------------------------
# Pooling, pixel rearrange, resize


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: (B,H,W,C) -> (B,1,1,C)."""
    nb, h, w, c = _require_4d(x, "global_avg_pool")
    if h < 1 or w < 1:
        raise ShapeError("global_avg_pool: empty spatial extents")
    out = _out(x.data.mean(axis=(1, 2), keepdims=True), "global_avg_pool")

    def vjp(grad):
        return [np.broadcast_to(grad / (h * w), x.data.shape).astype(grad.dtype)]

    _tape.record(out, [x], vjp, "global_avg_pool")
    return out


def pixel_rearrange(x: Tensor, factor: int, direction: str) -> Tensor:
    """Lossless permutation between spatial resolution and channel depth.

    ``to_channel`` folds each factor x factor block into channels
    (downsample); ``to_space`` is its exact inverse (upsample).
    """
    nb, h, w, c = _require_4d(x, "pixel_rearrange")
    r = factor
    if r < 1:
        raise ShapeError("pixel_rearrange: factor must be positive")
    if direction == "to_channel":
        if h % r or w % r:
            raise ShapeError(
                f"pixel_rearrange to_channel: spatial {h}x{w} not divisible by {r}"
            )
        y = x.data.reshape(nb, h // r, r, w // r, r, c)
        y = y.transpose(0, 1, 3, 2, 4, 5).reshape(nb, h // r, w // r, r * r * c)
    elif direction == "to_space":
        if c % (r * r):
            raise ShapeError(
                f"pixel_rearrange to_space: {c} channels not divisible by {r * r}"
            )
        y = x.data.reshape(nb, h, w, r, r, c // (r * r))
        y = y.transpose(0, 1, 3, 2, 4, 5).reshape(nb, h * r, w * r, c // (r * r))
    else:
        raise ShapeError(f"pixel_rearrange: unknown direction {direction!r}")
    out = Tensor(np.ascontiguousarray(y))

    inverse = "to_space" if direction == "to_channel" else "to_channel"

    def vjp(grad):
        return [pixel_rearrange_raw(grad, r, inverse)]

    _tape.record(out, [x], vjp, "pixel_rearrange")
    return out


def pixel_rearrange_raw(arr: np.ndarray, r: int, direction: str) -> np.ndarray:
    nb, h, w, c = arr.shape
    if direction == "to_channel":
        y = arr.reshape(nb, h // r, r, w // r, r, c)
        return np.ascontiguousarray(
            y.transpose(0, 1, 3, 2, 4, 5).reshape(nb, h // r, w // r, r * r * c)
        )
    y = arr.reshape(nb, h, w, r, r, c // (r * r))
    return np.ascontiguousarray(
        y.transpose(0, 1, 3, 2, 4, 5).reshape(nb, h * r, w * r, c // (r * r))
    )


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resample of the spatial extents (half-pixel centers)."""
    nb, h, w, c = _require_4d(x, "bilinear_resize")
    if out_h == h and out_w == w:
        return x
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0).astype(x.dtype)
    wx = np.clip(xs - x0, 0.0, 1.0).astype(x.dtype)

    top = x.data[:, y0][:, :, x0] * (1 - wx)[None, None, :, None] + x.data[:, y0][
        :, :, x1
    ] * wx[None, None, :, None]
    bot = x.data[:, y1][:, :, x0] * (1 - wx)[None, None, :, None] + x.data[:, y1][
        :, :, x1
    ] * wx[None, None, :, None]
    out = _out(top * (1 - wy)[None, :, None, None] + bot * wy[None, :, None, None],
               "bilinear_resize")

    def vjp(grad):
        dx = np.zeros((nb, h, w, c), dtype=grad.dtype)
        for oy in range(out_h):
            gy = grad[:, oy]  # (B, out_w, C)
            for corner_y, wgt_y in ((y0[oy], 1 - wy[oy]), (y1[oy], wy[oy])):
                row = gy * wgt_y
                np.add.at(dx[:, corner_y], (slice(None), x0),
                          row * (1 - wx)[None, :, None])
                np.add.at(dx[:, corner_y], (slice(None), x1),
                          row * wx[None, :, None])
        return [dx]

    _tape.record(out, [x], vjp, "bilinear_resize")
    return out


def reflect_pad(x: Tensor, pad_h: int, pad_w: int) -> Tensor:
    """Reflect-pad the bottom/right spatial edges (divisibility shim)."""
    nb, h, w, c = _require_4d(x, "reflect_pad")
    if pad_h == 0 and pad_w == 0:
        return x
    if pad_h >= h or pad_w >= w:
        raise ShapeError("reflect_pad: padding exceeds image extent")
    y = np.pad(x.data, ((0, 0), (0, pad_h), (0, pad_w), (0, 0)), mode="reflect")
    out = _out(y, "reflect_pad")

    def vjp(grad):
        dx = grad[:, :h, :w, :].copy()
        if pad_h:
            dx[:, h - 1 - pad_h : h - 1, :, :] += grad[:, h:, :w, :][:, ::-1]
        if pad_w:
            dx[:, :, w - 1 - pad_w : w - 1, :] += grad[:, :h, w:, :][:, :, ::-1]
        if pad_h and pad_w:
            dx[:, h - 1 - pad_h : h - 1, w - 1 - pad_w : w - 1, :] += grad[
                :, h:, w:, :
            ][:, ::-1, ::-1]
        return [dx]

    _tape.record(out, [x], vjp, "reflect_pad")
    return out


def crop(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Keep the top-left out_h x out_w spatial region."""
    nb, h, w, c = _require_4d(x, "crop")
    if out_h > h or out_w > w:
        raise ShapeError("crop: target larger than input")
    if out_h == h and out_w == w:
        return x
    out = Tensor(np.ascontiguousarray(x.data[:, :out_h, :out_w, :]))

    def vjp(grad):
        dx = np.zeros_like(x.data)
        dx[:, :out_h, :out_w, :] = grad
        return [dx]

    _tape.record(out, [x], vjp, "crop")
    return out


# ---------------------------------------------------------------------------
# Element-wise algebra, concat, linear


_EW_KINDS = ("add", "sub", "mul", "div")


def ew(x: Tensor, y: Tensor, kind: str) -> Tensor:
    """Broadcasting element-wise op; extents of 1 broadcast."""
    if kind not in _EW_KINDS:
        raise ShapeError(f"ew: unknown kind {kind!r}")
    _same_dtype(x, y, "ew")
    xd, yd = x.data, y.data
    if xd.ndim != yd.ndim:
        raise ShapeError(f"ew: rank mismatch {xd.shape} vs {yd.shape}")
    for a, b in zip(xd.shape, yd.shape):
        if a != b and a != 1 and b != 1:
            raise ShapeError(f"ew: incompatible shapes {xd.shape} and {yd.shape}")
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        if kind == "add":
            data = xd + yd
        elif kind == "sub":
            data = xd - yd
        elif kind == "mul":
            data = xd * yd
        else:
            data = xd / yd
    out = _out(data, f"ew.{kind}")

    def vjp(grad):
        if kind == "add":
            gx, gy = grad, grad
        elif kind == "sub":
            gx, gy = grad, -grad
        elif kind == "mul":
            gx, gy = grad * yd, grad * xd
        else:
            gx = grad / yd
            gy = -grad * xd / (yd * yd)
        return [_unbroadcast(gx, xd.shape), _unbroadcast(gy, yd.shape)]

    _tape.record(out, [x, y], vjp, f"ew.{kind}")
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.astype(grad.dtype, copy=False)


def concat_channels(x: Tensor, y: Tensor) -> Tensor:
    """Join two feature maps along the channel extent."""
    _require_4d(x, "concat_channels")
    _require_4d(y, "concat_channels")
    _same_dtype(x, y, "concat_channels")
    if x.shape[:3] != y.shape[:3]:
        raise ShapeError(
            f"concat_channels: leading extents differ: {x.shape} vs {y.shape}"
        )
    cx = x.shape[3]
    out = Tensor(np.concatenate([x.data, y.data], axis=3))

    def vjp(grad):
        return [np.ascontiguousarray(grad[..., :cx]),
                np.ascontiguousarray(grad[..., cx:])]

    _tape.record(out, [x, y], vjp, "concat_channels")
    return out


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice of the channel extent."""
    c = x.shape[-1]
    if not 0 <= start < stop <= c:
        raise ShapeError(f"channel_slice: [{start}:{stop}] invalid for {c} channels")
    out = Tensor(np.ascontiguousarray(x.data[..., start:stop]))

    def vjp(grad):
        dx = np.zeros_like(x.data)
        dx[..., start:stop] = grad
        return [dx]

    _tape.record(out, [x], vjp, "channel_slice")
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the channel (last) extent; weight is (out, in)."""
    if weight.data.ndim != 2:
        raise ShapeError(f"linear: weight must be 2-D, got {weight.shape}")
    out_c, in_c = weight.shape
    if x.shape[-1] != in_c:
        raise ShapeError(f"linear: input has {x.shape[-1]} channels, weight expects {in_c}")
    _same_dtype(x, weight, "linear")
    data = x.data @ weight.data.T
    if bias is not None:
        data = data + bias.data
    out = _out(data, "linear")

    def vjp(grad):
        dx = grad @ weight.data
        dw = grad.reshape(-1, out_c).T @ x.data.reshape(-1, in_c)
        grads = [dx, dw]
        if bias is not None:
            grads.append(grad.reshape(-1, out_c).sum(axis=0))
        return grads

    inputs = [x, weight] + ([bias] if bias is not None else [])
    _tape.record(out, inputs, vjp, "linear")
    return out


# ---------------------------------------------------------------------------
# Shape moves and batched matmul (attention plumbing)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def vjp(grad):
        return [grad.reshape(x.data.shape)]

    _tape.record(out, [x], vjp, "reshape")
    return out


def permute(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))
    inv = np.argsort(axes)

    def vjp(grad):
        return [np.ascontiguousarray(grad.transpose(inv))]

    _tape.record(out, [x], vjp, "permute")
    return out


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul on (..., m, k) x (..., k, n) with equal batch dims."""
    if a.data.shape[:-2] != b.data.shape[:-2] or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"bmm: incompatible shapes {a.shape} and {b.shape}")
    _same_dtype(a, b, "bmm")
    out = _out(a.data @ b.data, "bmm")

    def vjp(grad):
        da = grad @ np.swapaxes(b.data, -1, -2)
        db = np.swapaxes(a.data, -1, -2) @ grad
        return [da, db]

    _tape.record(out, [a, b], vjp, "bmm")
    return out


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale slices along ``axis`` to unit Euclidean norm."""
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True) + eps)
    y = x.data / n
    out = _out(y, "l2_normalize")

    def vjp(grad):
        dot = (grad * y).sum(axis=axis, keepdims=True)
        return [((grad - y * dot) / n).astype(grad.dtype)]

    _tape.record(out, [x], vjp, "l2_normalize")
    return out


# ---------------------------------------------------------------------------
# Reductions and scalar helpers (losses, gates)


def scale(x: Tensor, s: float) -> Tensor:
    out = _out(x.data * s, "scale")
    _tape.record(out, [x], lambda g: [g * s], "scale")
    return out


def add_scalar(x: Tensor, s: float) -> Tensor:
    out = _out(x.data + s, "add_scalar")
    _tape.record(out, [x], lambda g: [g], "add_scalar")
    return out


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    out = _out(np.abs(x.data), "absolute")
    _tape.record(out, [x], lambda g: [g * sign], "absolute")
    return out


def reduce_sum(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))

    def vjp(grad):
        return [np.full(x.data.shape, grad, dtype=x.dtype)]

    _tape.record(out, [x], vjp, "reduce_sum")
    return out


def reduce_mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = Tensor(np.asarray(x.data.mean(), dtype=x.dtype))

    def vjp(grad):
        return [np.full(x.data.shape, grad / n, dtype=x.dtype)]

    _tape.record(out, [x], vjp, "reduce_mean")
    return out


def codebook_mix(weights: Tensor, codebook: Tensor) -> Tensor:
    """Convex mixture of codebook entries: (B,N) x (N,...) -> (B,...)."""
    if weights.data.ndim != 2 or weights.shape[1] != codebook.shape[0]:
        raise ShapeError(
            f"codebook_mix: weights {weights.shape} vs codebook {codebook.shape}"
        )
    _same_dtype(weights, codebook, "codebook_mix")
    out = _out(np.tensordot(weights.data, codebook.data, axes=(1, 0)), "codebook_mix")

    def vjp(grad):
        rest = tuple(range(1, codebook.data.ndim))
        dw = np.tensordot(grad, codebook.data, axes=(rest, rest))
        dc = np.tensordot(weights.data, grad, axes=(0, 0))
        return [dw, dc]

    _tape.record(out, [weights, codebook], vjp, "codebook_mix")
    return out
