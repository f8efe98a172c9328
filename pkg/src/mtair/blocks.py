"""Hybrid blocks: dual-interaction fusion, gated feed-forward, and the two
block types the network stacks.

The dual hybrid block normalizes once and runs two parallel branches over
the shared normalized tensor — channel attention (global channel mixing)
and the scan module (long-range spatial mixing) — then fuses them by
cross-gating: each branch is modulated by an attention map computed from
the *other* branch, so information flows between them before the residual.
Deep levels use the simpler pre-norm attention + feed-forward block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .attention import ChannelAttnWeights, channel_attention, init_channel_attn
from .errors import ShapeError
from .ssm import VSSWeights, init_vss, vss_module
from .tensor import ConvWeights, Tensor
from .weights import trunc_normal

GDFN_EXPANSION = 2.66
DIM_REDUCTION = 4


def _pointwise(rng, in_ch, out_ch, add, name, zero_bias=True):
    return ConvWeights(
        kernel=add(name + ".kernel", trunc_normal(rng, (out_ch, 1, 1, in_ch))),
        bias=add(name + ".bias", np.zeros(out_ch, dtype=np.float32)),
    )


@dataclass(frozen=True)
class DimWeights:
    """Squeeze weights for the two gates: w1/w2 build the channel gate from
    pooled statistics, w3/w4 build the single-channel spatial gate."""

    w1: ConvWeights  # 1x1, C -> C/r
    w2: ConvWeights  # 1x1, C/r -> C
    w3: ConvWeights  # 1x1, C -> C/r
    w4: ConvWeights  # 1x1, C/r -> 1
    reduction: int = DIM_REDUCTION

    def __post_init__(self):
        c = self.w1.in_channels
        if c % self.reduction:
            raise ShapeError(
                f"reduction {self.reduction} must divide channel count {c}"
            )
        if self.w2.out_channels != c or self.w4.out_channels != 1:
            raise ShapeError("gate weights must map back to C and to 1 channel")


def init_dim(rng, channels, add=None, prefix="", reduction=DIM_REDUCTION):
    if add is None:
        add = lambda _n, a: Tensor(a)
    mid = channels // reduction
    return DimWeights(
        w1=_pointwise(rng, channels, mid, add, prefix + "w1"),
        w2=_pointwise(rng, mid, channels, add, prefix + "w2"),
        w3=_pointwise(rng, channels, mid, add, prefix + "w3"),
        w4=_pointwise(rng, mid, 1, add, prefix + "w4"),
        reduction=reduction,
    )


def atten_c(xc: Tensor, w: DimWeights) -> Tensor:
    """Channel gate in (0,1): squeeze spatially, excite per channel."""
    pooled = tc.global_avg_pool(xc)
    hidden = tc.activation(tc.conv2d(pooled, w.w1), "relu")
    return tc.activation(tc.conv2d(hidden, w.w2), "sigmoid")


def atten_s(xs: Tensor, w: DimWeights) -> Tensor:
    """Spatial gate in (0,1): one value per pixel."""
    hidden = tc.activation(tc.conv2d(xs, w.w3), "relu")
    return tc.activation(tc.conv2d(hidden, w.w4), "sigmoid")


@dataclass(frozen=True)
class MTDimWeights:
    dim: DimWeights
    fuse: ConvWeights  # 1x1, C -> C


def init_mt_dim(rng, channels, add=None, prefix="", reduction=DIM_REDUCTION):
    if add is None:
        add = lambda _n, a: Tensor(a)
    return MTDimWeights(
        dim=init_dim(rng, channels, add, prefix, reduction),
        fuse=_pointwise(rng, channels, channels, add, prefix + "fuse"),
    )


def mt_dim(xc: Tensor, xs: Tensor, x0: Tensor, w: MTDimWeights) -> Tensor:
    """Cross-gated fusion of the two branches plus the residual.

    The wiring is deliberately crossed: the channel branch is gated by the
    spatial branch's map and vice versa, so each branch modulates the other.
    """
    if xc.shape != xs.shape or xc.shape != x0.shape:
        raise ShapeError(
            f"mt_dim: branch shapes differ: {xc.shape}, {xs.shape}, {x0.shape}"
        )
    gated_c = tc.ew(xc, atten_s(xs, w.dim), "mul")
    gated_s = tc.ew(xs, atten_c(xc, w.dim), "mul")
    fused = tc.conv2d(tc.ew(gated_c, gated_s, "add"), w.fuse)
    return tc.ew(fused, x0, "add")


@dataclass(frozen=True)
class GdfnWeights:
    """Pre-norm gated feed-forward: expand, split, depthwise-filter both
    halves, gate one by the other's smooth activation, contract."""

    ln_gamma: Tensor
    ln_beta: Tensor
    expand: ConvWeights  # 1x1, C -> 2*hidden
    dw_gate: ConvWeights  # 3x3 depthwise on hidden
    dw_value: ConvWeights
    contract: ConvWeights  # 1x1, hidden -> C


def init_gdfn(rng, channels, add=None, prefix="", expansion=GDFN_EXPANSION):
    if add is None:
        add = lambda _n, a: Tensor(a)
    hidden = int(channels * expansion)

    def depthwise(name):
        return ConvWeights(
            kernel=add(name + ".kernel", trunc_normal(rng, (hidden, 3, 3, 1))),
            bias=add(name + ".bias", np.zeros(hidden, dtype=np.float32)),
            groups=hidden,
            padding=1,
        )

    return GdfnWeights(
        ln_gamma=add(prefix + "norm.gamma", np.ones(channels, dtype=np.float32)),
        ln_beta=add(prefix + "norm.beta", np.zeros(channels, dtype=np.float32)),
        expand=_pointwise(rng, channels, 2 * hidden, add, prefix + "expand"),
        dw_gate=depthwise(prefix + "dw_gate"),
        dw_value=depthwise(prefix + "dw_value"),
        contract=_pointwise(rng, hidden, channels, add, prefix + "contract"),
    )


def gdfn(x: Tensor, w: GdfnWeights) -> Tensor:
    normed = tc.layer_norm(x, w.ln_gamma, w.ln_beta)
    expanded = tc.conv2d(normed, w.expand)
    hidden = expanded.shape[-1] // 2
    gate = tc.conv2d(tc.channel_slice(expanded, 0, hidden), w.dw_gate)
    value = tc.conv2d(tc.channel_slice(expanded, hidden, 2 * hidden), w.dw_value)
    mixed = tc.ew(tc.activation(gate, "gelu"), value, "mul")
    return tc.ew(tc.conv2d(mixed, w.contract), x, "add")


@dataclass(frozen=True)
class BlockWeights:
    """One dual hybrid block.

    residual_prenorm selects which tensor the fusion residual adds back:
    the default adds the normalized tensor; the flag adds the raw block
    input instead, which makes a zero-weight block an exact identity.
    """

    ln_gamma: Tensor
    ln_beta: Tensor
    attn: ChannelAttnWeights
    vss: VSSWeights
    dim: MTDimWeights
    gdfn: GdfnWeights
    residual_prenorm: bool = False


def init_mt_dhb(
    rng,
    channels,
    heads,
    d_state=8,
    dt_rank=None,
    add=None,
    prefix="",
    reduction=DIM_REDUCTION,
    expansion=GDFN_EXPANSION,
    residual_prenorm=False,
    qk_norm=False,
):
    if add is None:
        add = lambda _n, a: Tensor(a)
    if dt_rank is None:
        dt_rank = max(1, channels // 4)
    return BlockWeights(
        ln_gamma=add(prefix + "norm.gamma", np.ones(channels, dtype=np.float32)),
        ln_beta=add(prefix + "norm.beta", np.zeros(channels, dtype=np.float32)),
        attn=init_channel_attn(rng, channels, heads, add, prefix + "attn.", qk_norm),
        vss=init_vss(rng, channels, d_state, dt_rank, add, prefix + "vss."),
        dim=init_mt_dim(rng, channels, add, prefix + "dim.", reduction),
        gdfn=init_gdfn(rng, channels, add, prefix + "gdfn.", expansion),
        residual_prenorm=residual_prenorm,
    )


def mt_dhb(x: Tensor, w: BlockWeights) -> Tensor:
    """Normalize once; run both branches on it; cross-gate; feed-forward."""
    x0 = tc.layer_norm(x, w.ln_gamma, w.ln_beta)
    xc = channel_attention(x0, w.attn)
    xs = vss_module(x0, w.vss)
    residual = x if w.residual_prenorm else x0
    fused = mt_dim(xc, xs, residual, w.dim)
    return gdfn(fused, w.gdfn)


@dataclass(frozen=True)
class TBWeights:
    """Deep-level block: pre-norm channel attention with residual, then the
    gated feed-forward."""

    ln_gamma: Tensor
    ln_beta: Tensor
    attn: ChannelAttnWeights
    gdfn: GdfnWeights


def init_tb(
    rng,
    channels,
    heads,
    add=None,
    prefix="",
    expansion=GDFN_EXPANSION,
    qk_norm=False,
):
    if add is None:
        add = lambda _n, a: Tensor(a)
    return TBWeights(
        ln_gamma=add(prefix + "norm.gamma", np.ones(channels, dtype=np.float32)),
        ln_beta=add(prefix + "norm.beta", np.zeros(channels, dtype=np.float32)),
        attn=init_channel_attn(rng, channels, heads, add, prefix + "attn.", qk_norm),
        gdfn=init_gdfn(rng, channels, add, prefix + "gdfn.", expansion),
    )


def restormer_tb(x: Tensor, w: TBWeights) -> Tensor:
    attended = channel_attention(tc.layer_norm(x, w.ln_gamma, w.ln_beta), w.attn)
    return gdfn(tc.ew(x, attended, "add"), w.gdfn)
