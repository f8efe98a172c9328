"""Spatial-channel prompt block.

A small gating head turns pooled features into a convex weighting over N
learnable prompt pairs: a channel codebook (N,1,1,C) and a spatial codebook
(N,Hp,Wp,1).  The selected prompts are broadcast-multiplied into the
features, cross-gated the same way the dual-interaction fusion works,
fused by a pointwise conv, and finally injected through cross attention
where the features supply queries and the fused prompt supplies keys and
values.  The block preserves shape, so it can sit on any skip connection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .attention import ChannelAttnWeights, cross_prompt_attention, init_channel_attn
from .blocks import DIM_REDUCTION, MTDimWeights, atten_c, atten_s, init_mt_dim
from .errors import ShapeError
from .tensor import ConvWeights, Tensor
from .weights import trunc_normal


@dataclass(frozen=True)
class PromptCodebook:
    p_c: Tensor  # (N, 1, 1, C) channel prompts
    p_s: Tensor  # (N, Hp, Wp, 1) spatial prompts
    w5: ConvWeights  # 1x1, C -> C/r
    w6: ConvWeights  # 1x1, C/r -> N
    dim: MTDimWeights  # interaction gates + fusion conv
    attn: ChannelAttnWeights  # final cross attention

    def __post_init__(self):
        n, one_a, one_b, c = self.p_c.shape
        if n < 1 or (one_a, one_b) != (1, 1):
            raise ShapeError(f"channel codebook must be (N,1,1,C), got {self.p_c.shape}")
        if self.p_s.shape[0] != n or self.p_s.shape[3] != 1:
            raise ShapeError(
                f"spatial codebook must be (N,Hp,Wp,1), got {self.p_s.shape}"
            )
        if self.w6.out_channels != n:
            raise ShapeError(
                f"weight head emits {self.w6.out_channels} logits for {n} prompts"
            )

    @property
    def count(self) -> int:
        return self.p_c.shape[0]

    @property
    def channels(self) -> int:
        return self.p_c.shape[3]


def init_prompt_codebook(
    rng: np.random.Generator,
    channels: int,
    count: int,
    prompt_hw: tuple[int, int],
    heads: int,
    add=None,
    prefix: str = "",
    reduction: int = DIM_REDUCTION,
    qk_norm: bool = False,
) -> PromptCodebook:
    if add is None:
        add = lambda _n, a: Tensor(a)
    mid = channels // reduction
    hp, wp = prompt_hw
    return PromptCodebook(
        p_c=add(prefix + "p_c", trunc_normal(rng, (count, 1, 1, channels))),
        p_s=add(prefix + "p_s", trunc_normal(rng, (count, hp, wp, 1))),
        w5=ConvWeights(
            kernel=add(prefix + "w5.kernel", trunc_normal(rng, (mid, 1, 1, channels))),
            bias=add(prefix + "w5.bias", np.zeros(mid, dtype=np.float32)),
        ),
        w6=ConvWeights(
            kernel=add(prefix + "w6.kernel", trunc_normal(rng, (count, 1, 1, mid))),
            bias=add(prefix + "w6.bias", np.zeros(count, dtype=np.float32)),
        ),
        dim=init_mt_dim(rng, channels, add, prefix + "dim.", reduction),
        attn=init_channel_attn(rng, channels, heads, add, prefix + "attn.", qk_norm),
    )


def pam(x: Tensor, cb: PromptCodebook):
    """Prompt weights and both weighted codebook mixtures.

    Returns (p_c1, p_s1, weights): weights is (B, N), each row a convex
    combination (sigmoid squashes the logits, softmax normalizes them —
    applied literally in that order).
    """
    nb, h, w, c = tc._require_4d(x, "pam")
    if c != cb.channels:
        raise ShapeError(f"pam: input has {c} channels, codebook expects {cb.channels}")
    pooled = tc.global_avg_pool(x)
    hidden = tc.activation(tc.conv2d(pooled, cb.w5), "gelu")
    squashed = tc.activation(tc.conv2d(hidden, cb.w6), "sigmoid")
    weights4 = tc.softmax(squashed, axis=-1)  # (B,1,1,N)
    weights = tc.reshape(weights4, (nb, cb.count))
    p_c1 = tc.codebook_mix(weights, cb.p_c)  # (B, 1, 1, C)
    p_s1 = tc.codebook_mix(weights, cb.p_s)  # (B, Hp, Wp, 1)
    return p_c1, p_s1, weights


def sc_pim(x: Tensor, p_c1: Tensor, p_s1: Tensor, cb: PromptCodebook) -> Tensor:
    """Interact the selected prompts with the features, then inject them.

    The spatial prompt is resized to the feature grid before broadcasting.
    """
    nb, h, w, c = tc._require_4d(x, "sc_pim")
    p_s1 = tc.bilinear_resize(p_s1, h, w)
    if p_s1.shape[1:3] != (h, w):
        raise ShapeError(
            f"sc_pim: spatial prompt {p_s1.shape} does not cover feature grid "
            f"{(h, w)}"
        )
    lifted_c = tc.ew(x, p_c1, "mul")  # channel prompt, broadcast over space
    lifted_s = tc.ew(x, p_s1, "mul")  # spatial prompt, broadcast over channels
    gated_c = tc.ew(lifted_c, atten_s(lifted_s, cb.dim.dim), "mul")
    gated_s = tc.ew(lifted_s, atten_c(lifted_c, cb.dim.dim), "mul")
    fused = tc.conv2d(tc.ew(gated_c, gated_s, "add"), cb.dim.fuse)
    return cross_prompt_attention(x, fused, cb.attn)


def sc_prompt_block(x: Tensor, cb: PromptCodebook) -> Tensor:
    """Select prompts from the features, then interact and inject them."""
    p_c1, p_s1, _ = pam(x, cb)
    return sc_pim(x, p_c1, p_s1, cb)
