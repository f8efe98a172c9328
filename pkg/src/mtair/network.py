"""Full restoration network: U-shaped encoder-decoder with prompt skips.

Layout for an L-level config: a 3x3 stem lifts RGB to the base width, the
encoder halves resolution and doubles width between levels, the deepest
level is the latent, and the decoder mirrors the encoder with the same
per-level block counts.  Each of the L-1 skip connections passes the
encoder feature through a spatial-channel prompt block before it is
concatenated with the upsampled decoder feature and squeezed back by a
1x1 bottleneck conv.  A final 3x3 conv maps to RGB.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .blocks import (
    DIM_REDUCTION,
    GDFN_EXPANSION,
    BlockWeights,
    TBWeights,
    _pointwise,
    init_mt_dhb,
    init_tb,
    mt_dhb,
    restormer_tb,
)
from .errors import ConfigError, NonFiniteError, ShapeError
from .prompt import PromptCodebook, init_prompt_codebook, sc_prompt_block
from .tape import Tape
from .tensor import ConvWeights, Tensor
from .weights import WeightStore, trunc_normal

BLOCK_TYPES = ("mt_dhb", "tb")


@dataclass(frozen=True)
class NetworkConfig:
    levels: int = 4
    blocks: tuple = (4, 6, 6, 8)
    channels: tuple = (48, 96, 192, 384)
    heads: tuple = (1, 2, 4, 8)
    block_types: tuple = ("mt_dhb", "mt_dhb", "tb", "tb")
    prompt_count: int = 5
    d_state: int = 8
    dt_rank: int | None = None  # default: max(1, channels // 4) per level
    reduction: int = DIM_REDUCTION
    expansion: float = GDFN_EXPANSION
    patch_size: int = 128
    scale: int = 2
    residual_prenorm: bool = False
    qk_norm: bool = False
    global_residual: bool = False
    latent_prompt: bool = False

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        for name in ("blocks", "channels", "heads", "block_types"):
            seq = getattr(self, name)
            if len(seq) != self.levels:
                raise ConfigError(
                    f"{name} has {len(seq)} entries for {self.levels} levels"
                )
        if self.scale != 2:
            raise ConfigError("only downsample scale 2 is supported")
        for i in range(self.levels - 1):
            if self.channels[i + 1] != 2 * self.channels[i]:
                raise ConfigError(
                    f"channels must double between levels, got "
                    f"{self.channels[i]} -> {self.channels[i + 1]}"
                )
        for c, h in zip(self.channels, self.heads):
            if c < 1 or h < 1 or c % h:
                raise ConfigError(f"channels {c} not divisible by heads {h}")
        for b in self.blocks:
            if b < 1:
                raise ConfigError("every level needs at least one block")
        for t in self.block_types:
            if t not in BLOCK_TYPES:
                raise ConfigError(f"unknown block type {t!r}")
        if self.prompt_count < 1:
            raise ConfigError("prompt_count must be >= 1")
        if self.channels[0] < self.reduction:
            raise ConfigError(
                f"base width {self.channels[0]} below gate reduction "
                f"{self.reduction}"
            )
        if self.levels > 1 and self.patch_size >> (self.levels - 2) < 1:
            raise ConfigError("patch_size too small for the level count")

    @property
    def size_multiple(self) -> int:
        """Inputs must be padded to a multiple of this spatial extent."""
        return self.scale ** (self.levels - 1)

    def prompt_hw(self, level: int) -> tuple[int, int]:
        """Native spatial extent of the skip-level prompt codebook."""
        s = max(1, self.patch_size >> (level - 1))
        return (s, s)


@dataclass(frozen=True)
class NetworkWeights:
    """Typed view of every parameter, grouped the way forward consumes them."""

    stem: ConvWeights
    enc: tuple  # per level: tuple of block weight structs
    down: tuple  # between levels i and i+1 (levels-1 entries)
    dec: tuple  # per level, same indexing as enc
    up: tuple  # up[i] carries level i+2 back to level i+1
    prompts: tuple  # skip-level prompt codebooks (levels-1 entries)
    fuse: tuple  # skip-level bottleneck convs (levels-1 entries)
    head: ConvWeights
    latent_prompt: PromptCodebook | None = None


class _NullRng:
    """Zero-cost stand-in used when parameters are fetched, not drawn."""

    def normal(self, loc, scale, size=None):
        return np.zeros(size if size is not None else ())

    def standard_normal(self, size=None):
        return np.zeros(size if size is not None else ())

    def uniform(self, low=0.0, high=1.0, size=None):
        mid = (low + high) / 2.0
        return np.full(size, mid) if size is not None else mid


def _conv3x3(rng, in_ch, out_ch, add, name):
    return ConvWeights(
        kernel=add(name + ".kernel", trunc_normal(rng, (out_ch, 3, 3, in_ch))),
        bias=add(name + ".bias", np.zeros(out_ch, dtype=np.float32)),
        padding=1,
    )


def _init_block(cfg, rng, level, add, prefix):
    c, h = cfg.channels[level - 1], cfg.heads[level - 1]
    kind = cfg.block_types[level - 1]
    if kind == "mt_dhb":
        return init_mt_dhb(
            rng, c, h, cfg.d_state, cfg.dt_rank, add, prefix,
            cfg.reduction, cfg.expansion, cfg.residual_prenorm, cfg.qk_norm,
        )
    return init_tb(rng, c, h, add, prefix, cfg.expansion, cfg.qk_norm)


def _structure(cfg: NetworkConfig, rng, add) -> NetworkWeights:
    """Single source of truth for parameter names, shapes, and draw order."""
    ch = cfg.channels
    r2 = cfg.scale * cfg.scale
    stem = _conv3x3(rng, 3, ch[0], add, "stem")
    enc, down = [], []
    for i in range(1, cfg.levels + 1):
        enc.append(tuple(
            _init_block(cfg, rng, i, add, f"level{i}.enc.block{j}.")
            for j in range(cfg.blocks[i - 1])
        ))
        if i < cfg.levels:
            down.append(_pointwise(rng, r2 * ch[i - 1], ch[i], add, f"level{i}.down"))
    dec, up = [], []
    for i in range(1, cfg.levels + 1):
        dec.append(tuple(
            _init_block(cfg, rng, i, add, f"level{i}.dec.block{j}.")
            for j in range(cfg.blocks[i - 1])
        ))
        if i < cfg.levels:
            up.append(_pointwise(rng, ch[i], r2 * ch[i - 1], add, f"level{i + 1}.up"))
    prompts, fuse = [], []
    for i in range(1, cfg.levels):
        prompts.append(init_prompt_codebook(
            rng, ch[i - 1], cfg.prompt_count, cfg.prompt_hw(i),
            cfg.heads[i - 1], add, f"level{i}.prompt.",
            cfg.reduction, cfg.qk_norm,
        ))
        fuse.append(_pointwise(rng, 2 * ch[i - 1], ch[i - 1], add, f"level{i}.fuse"))
    latent = None
    if cfg.latent_prompt:
        latent = init_prompt_codebook(
            rng, ch[-1], cfg.prompt_count, cfg.prompt_hw(cfg.levels),
            cfg.heads[-1], add, "latent.prompt.", cfg.reduction, cfg.qk_norm,
        )
    head = _conv3x3(rng, ch[0], 3, add, "head")
    return NetworkWeights(
        stem=stem, enc=tuple(enc), down=tuple(down), dec=tuple(dec),
        up=tuple(up), prompts=tuple(prompts), fuse=tuple(fuse),
        head=head, latent_prompt=latent,
    )


def build(cfg: NetworkConfig, seed: int) -> WeightStore:
    """Draw a fresh, deterministically seeded parameter set."""
    ws = WeightStore()
    rng = np.random.default_rng(seed)
    _structure(cfg, rng, ws.add)
    return ws


def assemble(ws: WeightStore, cfg: NetworkConfig) -> NetworkWeights:
    """Wire stored tensors into the typed structure forward consumes."""

    def fetch(name, arr):
        if name not in ws:
            raise ShapeError(f"weights are missing parameter {name!r}")
        t = ws[name]
        if t.shape != np.shape(arr):
            raise ShapeError(
                f"parameter {name!r} has shape {t.shape}, config expects "
                f"{np.shape(arr)}"
            )
        return t

    return _structure(cfg, _NullRng(), fetch)


_stage_name = None


@contextlib.contextmanager
def _stage(name: str):
    """Label the running layer so finite guards can point at it."""
    global _stage_name
    prev, _stage_name = _stage_name, name
    try:
        yield
    except NonFiniteError as e:
        raise NonFiniteError(f"{name}: {e}") from None
    finally:
        _stage_name = prev


_BLOCK_FNS = {BlockWeights: mt_dhb, TBWeights: restormer_tb}


def _run_level(x, blocks, label):
    for j, bw in enumerate(blocks):
        with _stage(f"{label}.block{j}"):
            x = _BLOCK_FNS[type(bw)](x, bw)
    return x


def forward(image: Tensor, ws, cfg: NetworkConfig,
            trace: dict | None = None) -> Tensor:
    """Restore a (B,H,W,3) image; spatial extents are preserved exactly.

    ``ws`` may be a WeightStore or an already-assembled NetworkWeights.
    Sizes not divisible by the level stride are reflect-padded on the
    bottom/right and cropped back after the head conv.  Pass a dict as
    ``trace`` to record the feature shape after every stage.
    """
    nb, h, w, c = tc._require_4d(image, "forward")
    if c != 3:
        raise ShapeError(f"forward expects 3 input channels, got {c}")
    nw = assemble(ws, cfg) if isinstance(ws, WeightStore) else ws
    mult = cfg.size_multiple
    pad_h, pad_w = (-h) % mult, (-w) % mult
    x = tc.reflect_pad(image, pad_h, pad_w)

    def note(label, t):
        if trace is not None:
            trace[label] = t.shape

    with _stage("stem"):
        f = tc.conv2d(x, nw.stem)
    skips = []
    for i in range(1, cfg.levels + 1):
        f = _run_level(f, nw.enc[i - 1], f"level{i}.enc")
        note(f"level{i}.enc", f)
        if i < cfg.levels:
            skips.append(f)
            with _stage(f"level{i}.down"):
                f = tc.conv2d(tc.pixel_rearrange(f, cfg.scale, "to_channel"),
                              nw.down[i - 1])
    note("latent", f)
    if nw.latent_prompt is not None:
        with _stage("latent.prompt"):
            f = sc_prompt_block(f, nw.latent_prompt)
    for i in range(cfg.levels, 0, -1):
        f = _run_level(f, nw.dec[i - 1], f"level{i}.dec")
        note(f"level{i}.dec", f)
        if i > 1:
            with _stage(f"level{i}.up"):
                f = tc.pixel_rearrange(tc.conv2d(f, nw.up[i - 2]),
                                       cfg.scale, "to_space")
            with _stage(f"level{i - 1}.prompt"):
                s = sc_prompt_block(skips[i - 2], nw.prompts[i - 2])
            with _stage(f"level{i - 1}.fuse"):
                f = tc.conv2d(tc.concat_channels(s, f), nw.fuse[i - 2])
    with _stage("head"):
        out = tc.conv2d(f, nw.head)
    if cfg.global_residual:
        out = tc.ew(out, x, "add")
    return tc.crop(out, h, w)


def parameter_census(ws: WeightStore) -> dict:
    """Per-group (first name component) and total parameter counts."""
    groups: dict[str, int] = {}
    for name, t in ws.items():
        key = name.split(".", 1)[0]
        groups[key] = groups.get(key, 0) + int(t.data.size)
    return {"total": ws.total_parameters(), "groups": groups}


def audit_parameter_access(cfg: NetworkConfig, ws: WeightStore,
                           image: Tensor | None = None) -> dict:
    """Count how many recorded operations consume each stored parameter.

    A correct wiring touches every parameter exactly once per forward;
    orphans (never touched) and reuses (touched more than once) are
    reported by name.
    """
    if image is None:
        m = cfg.size_multiple
        image = Tensor(np.zeros((1, m, m, 3), dtype=np.float32))
    counts = {name: 0 for name in ws.names()}
    ids = {id(t): name for name, t in ws.items()}
    with Tape() as tape:
        forward(image, ws, cfg)
        nodes = list(tape.nodes)
    for node in nodes:
        for inp in node.inputs:
            name = ids.get(id(inp))
            if name is not None:
                counts[name] += 1
    return {
        "counts": counts,
        "orphans": sorted(n for n, k in counts.items() if k == 0),
        "reused": sorted(n for n, k in counts.items() if k > 1),
        "total_parameters": ws.total_parameters(),
    }
