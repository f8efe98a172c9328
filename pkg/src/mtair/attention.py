"""Transposed multi-head channel attention and its prompt-fed variant.

Attention runs across the channel axis, not space: per head, queries and
keys are flattened to (head_ch x HW) matrices and their product forms a
(head_ch x head_ch) map, so cost scales linearly in pixel count.  The map
is row-stochastic: row i mixes the value channels that produce output
channel i.  Logits are divided by a learnable per-head temperature.

The cross variant feeds the key/value path from a second tensor (the
fused prompt) while queries still come from the features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .errors import ShapeError
from .tensor import ConvWeights, Tensor
from .weights import trunc_normal


@dataclass(frozen=True)
class ChannelAttnWeights:
    """Pointwise + depthwise projection pairs for q/k/v, output projection,
    and one temperature per head."""

    heads: int
    q_point: ConvWeights  # 1x1, C -> C
    k_point: ConvWeights
    v_point: ConvWeights
    q_depth: ConvWeights  # 3x3 depthwise on C
    k_depth: ConvWeights
    v_depth: ConvWeights
    out_point: ConvWeights  # 1x1, C -> C
    beta: Tensor  # (heads,)
    qk_norm: bool = False  # unit-normalize q/k rows before the product

    def __post_init__(self):
        c = self.q_point.out_channels
        if self.heads < 1 or c % self.heads:
            raise ShapeError(
                f"channel count {c} not divisible by head count {self.heads}"
            )
        if self.beta.shape != (self.heads,):
            raise ShapeError(f"beta must hold one scalar per head ({self.heads},)")
        if np.any(self.beta.data <= 0):
            raise ShapeError("beta temperatures must be positive at initialization")

    @property
    def channels(self) -> int:
        return self.q_point.out_channels


def _conv_pair(rng, channels, add, prefix):
    point = ConvWeights(
        kernel=add(prefix + ".point.kernel", trunc_normal(rng, (channels, 1, 1, channels))),
        bias=add(prefix + ".point.bias", np.zeros(channels, dtype=np.float32)),
    )
    depth = ConvWeights(
        kernel=add(prefix + ".depth.kernel", trunc_normal(rng, (channels, 3, 3, 1))),
        bias=add(prefix + ".depth.bias", np.zeros(channels, dtype=np.float32)),
        groups=channels,
        padding=1,
    )
    return point, depth


def init_channel_attn(
    rng: np.random.Generator,
    channels: int,
    heads: int,
    add=None,
    prefix: str = "",
    qk_norm: bool = False,
) -> ChannelAttnWeights:
    if add is None:
        add = lambda _name, arr: Tensor(arr)
    q_point, q_depth = _conv_pair(rng, channels, add, prefix + "q")
    k_point, k_depth = _conv_pair(rng, channels, add, prefix + "k")
    v_point, v_depth = _conv_pair(rng, channels, add, prefix + "v")
    out_point = ConvWeights(
        kernel=add(prefix + "out.kernel", trunc_normal(rng, (channels, 1, 1, channels))),
        bias=add(prefix + "out.bias", np.zeros(channels, dtype=np.float32)),
    )
    head_ch = channels // heads
    beta = add(
        prefix + "beta", np.full(heads, np.sqrt(head_ch), dtype=np.float32)
    )
    return ChannelAttnWeights(
        heads=heads,
        q_point=q_point,
        k_point=k_point,
        v_point=v_point,
        q_depth=q_depth,
        k_depth=k_depth,
        v_depth=v_depth,
        out_point=out_point,
        beta=beta,
        qk_norm=qk_norm,
    )


def _to_heads(x: Tensor, heads: int) -> Tensor:
    """(B,H,W,C) -> (B, heads, C/heads, HW) with head-major channel split."""
    nb, h, w, c = x.shape
    seq = tc.reshape(x, (nb, h * w, heads, c // heads))
    return tc.permute(seq, (0, 2, 3, 1))


def _from_heads(x: Tensor, h: int, w: int) -> Tensor:
    nb, heads, head_ch, hw = x.shape
    seq = tc.permute(x, (0, 3, 1, 2))
    return tc.reshape(seq, (nb, h, w, heads * head_ch))


def _attend(q: Tensor, k: Tensor, v: Tensor, w: ChannelAttnWeights,
            return_map: bool):
    """Shared core on (B, heads, head_ch, HW) projections."""
    if w.qk_norm:
        q = tc.l2_normalize(q, axis=-1)
        k = tc.l2_normalize(k, axis=-1)
    logits = tc.bmm(q, tc.permute(k, (0, 1, 3, 2)))  # (B, heads, hc, hc)
    inv_beta = tc.reshape(w.beta, (1, w.heads, 1, 1))
    scaled = tc.ew(logits, inv_beta, "div")
    attn = tc.softmax(scaled, axis=-1)  # rows sum to one
    mixed = tc.bmm(attn, v)  # (B, heads, hc, HW)
    return (mixed, attn) if return_map else (mixed, None)


def channel_attention(
    x: Tensor, w: ChannelAttnWeights, return_map: bool = False
):
    """Self attention over channels; optionally also return the per-head map."""
    nb, h, ww, c = tc._require_4d(x, "channel_attention")
    if c != w.channels:
        raise ShapeError(
            f"channel_attention: input has {c} channels, weights expect {w.channels}"
        )
    q = _to_heads(tc.conv2d(tc.conv2d(x, w.q_point), w.q_depth), w.heads)
    k = _to_heads(tc.conv2d(tc.conv2d(x, w.k_point), w.k_depth), w.heads)
    v = _to_heads(tc.conv2d(tc.conv2d(x, w.v_point), w.v_depth), w.heads)
    mixed, attn = _attend(q, k, v, w, return_map)
    out = tc.conv2d(_from_heads(mixed, h, ww), w.out_point)
    return (out, attn) if return_map else out


def cross_prompt_attention(
    x: Tensor, p: Tensor, w: ChannelAttnWeights, return_map: bool = False
):
    """Queries from the features, keys/values from the prompt tensor."""
    if x.shape != p.shape:
        raise ShapeError(
            f"cross_prompt_attention: feature {x.shape} and prompt {p.shape} differ"
        )
    nb, h, ww, c = tc._require_4d(x, "cross_prompt_attention")
    if c != w.channels:
        raise ShapeError(
            f"cross_prompt_attention: {c} channels, weights expect {w.channels}"
        )
    q = _to_heads(tc.conv2d(tc.conv2d(x, w.q_point), w.q_depth), w.heads)
    k = _to_heads(tc.conv2d(tc.conv2d(p, w.k_point), w.k_depth), w.heads)
    v = _to_heads(tc.conv2d(tc.conv2d(p, w.v_point), w.v_depth), w.heads)
    mixed, attn = _attend(q, k, v, w, return_map)
    out = tc.conv2d(_from_heads(mixed, h, ww), w.out_point)
    return (out, attn) if return_map else out


def naive_spatial_attention(x: Tensor, w: ChannelAttnWeights) -> Tensor:
    """Benchmark baseline: token attention with an (HW x HW) map.

    Same projections as channel_attention, but the softmax runs over a
    pixel-by-pixel matrix, so cost and memory grow quadratically in the
    pixel count.  Used only to make the efficiency comparison measurable.
    """
    nb, h, ww, c = tc._require_4d(x, "naive_spatial_attention")
    q = _to_heads(tc.conv2d(tc.conv2d(x, w.q_point), w.q_depth), w.heads)
    k = _to_heads(tc.conv2d(tc.conv2d(x, w.k_point), w.k_depth), w.heads)
    v = _to_heads(tc.conv2d(tc.conv2d(x, w.v_point), w.v_depth), w.heads)
    qs = tc.permute(q, (0, 1, 3, 2))  # (B, heads, HW, hc)
    inv_beta = tc.reshape(w.beta, (1, w.heads, 1, 1))
    # The (HW x HW) logits are nested rather than bound to locals so each
    # gigabyte-scale temporary is released as soon as the next op consumed
    # it; otherwise large benchmark sizes hold several such maps at once.
    attn = tc.softmax(
        tc.ew(tc.bmm(qs, k), inv_beta, "div"), axis=-1
    )  # (B, heads, HW, HW)
    mixed = tc.bmm(attn, tc.permute(v, (0, 1, 3, 2)))  # (B, heads, HW, hc)
    out = _from_heads(tc.permute(mixed, (0, 1, 3, 2)), h, ww)
    return tc.conv2d(out, w.out_point)
