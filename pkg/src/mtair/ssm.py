"""Four-direction 2-D selective scan and the vision state-space module.

The grid is flattened along four scan routes (each a bijection between grid
cells and sequence positions); each route runs an input-conditioned
state-space recurrence

    h_t = exp(delta_t * A) * h_{t-1} + delta_t * B_t * x_t
    y_t = C_t . h_t + D * x_t

with delta_t, B_t, C_t projected from the sequence element itself
(zero-order hold on the state matrix, Euler on the input).  The four
directional outputs are realigned to grid coordinates and summed.

The recurrence is sequential along its route but vectorized over batch,
channel, and state; runtime is linear in the pixel count.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tape as _tape
from . import tensor as tc
from .errors import NonFiniteError, ShapeError
from .tensor import Tensor
from .weights import inv_softplus, trunc_normal

ROUTE_DIRECTIONS = ("tl_br", "br_tl", "tr_bl", "bl_tr")

# Test hook: name a route whose merge contribution is negated, deliberately
# breaking the reversal-duality property so the check suite's failure path
# can be exercised.  Never set outside tests.
_fault_negate_route: str | None = None


@contextmanager
def inject_route_fault(direction: str):
    global _fault_negate_route
    if direction not in ROUTE_DIRECTIONS:
        raise ShapeError(f"unknown scan direction {direction!r}")
    _fault_negate_route = direction
    try:
        yield
    finally:
        _fault_negate_route = None


@lru_cache(maxsize=64)
def route_perm(h: int, w: int, direction: str) -> np.ndarray:
    """Flat row-major cell index visited at each sequence position."""
    grid = np.arange(h * w, dtype=np.int64).reshape(h, w)
    if direction == "tl_br":
        perm = grid.ravel()
    elif direction == "br_tl":
        perm = grid.ravel()[::-1]
    elif direction == "tr_bl":
        # columns right-to-left, top-to-bottom within each column
        perm = grid[:, ::-1].T.ravel()
    elif direction == "bl_tr":
        perm = grid[:, ::-1].T.ravel()[::-1]
    else:
        raise ShapeError(f"unknown scan direction {direction!r}")
    perm = np.ascontiguousarray(perm)
    perm.setflags(write=False)
    return perm


@lru_cache(maxsize=64)
def route_inverse(h: int, w: int, direction: str) -> np.ndarray:
    inv = np.argsort(route_perm(h, w, direction), kind="stable")
    inv = np.ascontiguousarray(inv)
    inv.setflags(write=False)
    return inv


def route_flatten(x: Tensor, direction: str) -> Tensor:
    """Reorder grid cells into the route's visit sequence: (B,H,W,C)->(B,L,C)."""
    nb, h, w, c = tc._require_4d(x, "route_flatten")
    perm = route_perm(h, w, direction)
    flat = x.data.reshape(nb, h * w, c)
    out = Tensor(np.ascontiguousarray(flat[:, perm]))
    inv = route_inverse(h, w, direction)

    def vjp(grad):
        return [np.ascontiguousarray(grad[:, inv]).reshape(nb, h, w, c)]

    _tape.record(out, [x], vjp, "route_flatten")
    return out


def route_unflatten(y: Tensor, direction: str, h: int, w: int) -> Tensor:
    """Inverse of route_flatten: (B,L,C) sequence back to the (B,H,W,C) grid."""
    if y.data.ndim != 3 or y.shape[1] != h * w:
        raise ShapeError(
            f"route_unflatten expects (batch, {h * w}, channel), got {y.shape}"
        )
    nb, length, c = y.shape
    inv = route_inverse(h, w, direction)
    out = Tensor(np.ascontiguousarray(y.data[:, inv]).reshape(nb, h, w, c))
    perm = route_perm(h, w, direction)

    def vjp(grad):
        return [np.ascontiguousarray(grad.reshape(nb, length, c)[:, perm])]

    _tape.record(out, [y], vjp, "route_unflatten")
    return out


# ---------------------------------------------------------------------------
# Parameters


@dataclass(frozen=True)
class SSMParams:
    """One scan direction's recurrence parameters.

    C channels each carry an independent length-S state; A is stored in log
    form so -exp(a_log) is strictly negative and the per-step decay
    exp(delta*A) stays in (0,1] for positive delta.  B_t, C_t, and the
    pre-softplus step size are linear in the sequence element; the step
    size projection is low-rank (through dt_rank) with a learnable bias.
    """

    a_log: Tensor  # (C, S)
    d: Tensor  # (C,) skip path
    w_b: Tensor  # (S, C)
    b_b: Tensor  # (S,)
    w_c: Tensor  # (S, C)
    b_c: Tensor  # (S,)
    w_dt_low: Tensor  # (R, C)
    w_dt: Tensor  # (C, R)
    b_dt: Tensor  # (C,)

    def __post_init__(self):
        c, s = self.a_log.shape
        r = self.w_dt_low.shape[0]
        expected = {
            "d": (c,),
            "w_b": (s, c),
            "b_b": (s,),
            "w_c": (s, c),
            "b_c": (s,),
            "w_dt_low": (r, c),
            "w_dt": (c, r),
            "b_dt": (c,),
        }
        for field, shape in expected.items():
            got = getattr(self, field).shape
            if got != shape:
                raise ShapeError(f"SSMParams.{field}: expected {shape}, got {got}")

    @property
    def channels(self) -> int:
        return self.a_log.shape[0]

    @property
    def d_state(self) -> int:
        return self.a_log.shape[1]

    def tensors(self) -> list[Tensor]:
        return [
            self.a_log,
            self.d,
            self.w_b,
            self.b_b,
            self.w_c,
            self.b_c,
            self.w_dt_low,
            self.w_dt,
            self.b_dt,
        ]


def init_ssm_params(
    rng: np.random.Generator,
    channels: int,
    d_state: int,
    dt_rank: int,
    add=None,
    prefix: str = "",
) -> SSMParams:
    """Fresh direction parameters: S4D-real state init, softplus(b_dt) in
    [0.001, 0.1], unit skip path, zero B/C biases."""
    if add is None:
        add = lambda _name, arr: Tensor(arr)
    a_log = np.tile(
        np.log(np.arange(1, d_state + 1, dtype=np.float64)), (channels, 1)
    ).astype(np.float32)
    dt = np.exp(
        rng.uniform(np.log(1e-3), np.log(1e-1), size=channels)
    ).astype(np.float64)
    scale = dt_rank**-0.5
    return SSMParams(
        a_log=add(prefix + "a_log", a_log),
        d=add(prefix + "d", np.ones(channels, dtype=np.float32)),
        w_b=add(prefix + "w_b", trunc_normal(rng, (d_state, channels))),
        b_b=add(prefix + "b_b", np.zeros(d_state, dtype=np.float32)),
        w_c=add(prefix + "w_c", trunc_normal(rng, (d_state, channels))),
        b_c=add(prefix + "b_c", np.zeros(d_state, dtype=np.float32)),
        w_dt_low=add(prefix + "w_dt_low", trunc_normal(rng, (dt_rank, channels))),
        w_dt=add(
            prefix + "w_dt",
            rng.uniform(-scale, scale, size=(channels, dt_rank)).astype(np.float32),
        ),
        b_dt=add(prefix + "b_dt", inv_softplus(dt).astype(np.float32)),
    )


# ---------------------------------------------------------------------------
# Selective scan


def selective_scan_1d(seq: Tensor, p: SSMParams) -> Tensor:
    """Run the recurrence along a (batch, length, channel) sequence.

    Recorded as a single differentiable node; the backward pass replays the
    recurrence in reverse over the saved per-step states.
    """
    if seq.data.ndim != 3:
        raise ShapeError(f"selective_scan_1d expects (B, L, C), got {seq.shape}")
    nb, length, c = seq.shape
    if length < 1:
        raise ShapeError("selective_scan_1d: empty sequence")
    if c != p.channels:
        raise ShapeError(
            f"selective_scan_1d: sequence has {c} channels, params expect {p.channels}"
        )
    u = seq.data
    dtype = u.dtype
    w_dt_low = p.w_dt_low.data.astype(dtype, copy=False)
    w_dt = p.w_dt.data.astype(dtype, copy=False)
    b_dt = p.b_dt.data.astype(dtype, copy=False)
    w_b = p.w_b.data.astype(dtype, copy=False)
    b_b = p.b_b.data.astype(dtype, copy=False)
    w_c = p.w_c.data.astype(dtype, copy=False)
    b_c = p.b_c.data.astype(dtype, copy=False)
    a = -np.exp(p.a_log.data.astype(dtype, copy=False))  # (C, S)
    d = p.d.data.astype(dtype, copy=False)

    dt_low = u @ w_dt_low.T  # (B, L, R)
    delta = np.logaddexp(dtype.type(0), dt_low @ w_dt.T + b_dt)  # (B, L, C)
    bt = u @ w_b.T + b_b  # (B, L, S)
    ct = u @ w_c.T + b_c  # (B, L, S)
    with np.errstate(over="ignore", invalid="ignore"):
        abar = np.exp(delta[..., None] * a)  # (B, L, C, S)
        bu = (delta * u)[..., None] * bt[:, :, None, :]  # (B, L, C, S)
        hs = np.empty_like(abar)
        hprev = np.zeros((nb, c, p.d_state), dtype=dtype)
        for t in range(length):
            ht = hs[:, t]
            np.multiply(abar[:, t], hprev, out=ht)
            ht += bu[:, t]
            hprev = ht
    if not np.isfinite(hs).all():
        step_ok = np.isfinite(hs).reshape(nb, length, -1).all(axis=(0, 2))
        first_bad = int(np.argmin(step_ok))
        raise NonFiniteError(
            f"selective_scan_1d: non-finite state first at step {first_bad}"
        )
    y = np.einsum("blcs,bls->blc", hs, ct, optimize=True) + d * u
    out = tc._out(y, "selective_scan_1d")

    def vjp(grad):
        dct = np.einsum("blc,blcs->bls", grad, hs, optimize=True)
        dd = np.einsum("blc,blc->c", grad, u, optimize=True)
        du = grad * d
        # adjoint of the recurrence: run it backward over the saved states
        dyc = grad[..., None] * ct[:, :, None, :]  # (B, L, C, S)
        ghs = np.empty_like(hs)
        gh = ghs[:, length - 1]
        gh[...] = dyc[:, length - 1]
        for t in range(length - 2, -1, -1):
            ght = ghs[:, t]
            np.multiply(abar[:, t + 1], gh, out=ght)
            ght += dyc[:, t]
            gh = ght
        hshift = np.concatenate([np.zeros_like(hs[:, :1]), hs[:, :-1]], axis=1)
        dabar_abar = ghs * hshift * abar  # grad wrt (delta*A) exponent
        ddelta = np.einsum("blcs,cs->blc", dabar_abar, a, optimize=True)
        ddelta += np.einsum("blcs,bls->blc", ghs, bt, optimize=True) * u
        da = np.einsum("blcs,blc->cs", dabar_abar, delta, optimize=True)
        da_log = da * a  # a == -exp(a_log)
        dbt = np.einsum("blcs,blc->bls", ghs, delta * u, optimize=True)
        du += np.einsum("blcs,bls->blc", ghs, bt, optimize=True) * delta
        # softplus'(pre) = sigmoid(pre) = 1 - exp(-softplus(pre))
        dpre = ddelta * (1.0 - np.exp(-delta))
        db_dt = dpre.sum(axis=(0, 1))
        dw_dt = np.einsum("blc,blr->cr", dpre, dt_low, optimize=True)
        ddt_low = dpre @ w_dt
        dw_dt_low = np.einsum("blr,blc->rc", ddt_low, u, optimize=True)
        du += ddt_low @ w_dt_low
        dw_b = np.einsum("bls,blc->sc", dbt, u, optimize=True)
        db_b = dbt.sum(axis=(0, 1))
        du += dbt @ w_b
        dw_c = np.einsum("bls,blc->sc", dct, u, optimize=True)
        db_c = dct.sum(axis=(0, 1))
        du += dct @ w_c
        return [du, da_log, dd, dw_b, db_b, dw_c, db_c, dw_dt_low, dw_dt, db_dt]

    _tape.record(out, [seq] + p.tensors(), vjp, "selective_scan_1d")
    return out


def ssm_2d(x: Tensor, params4) -> Tensor:
    """All four directional scans, realigned to the grid and summed."""
    nb, h, w, c = tc._require_4d(x, "ssm_2d")
    if len(params4) != 4:
        raise ShapeError(f"ssm_2d needs one parameter set per route, got {len(params4)}")
    total = None
    for direction, p in zip(ROUTE_DIRECTIONS, params4):
        seq = route_flatten(x, direction)
        scanned = selective_scan_1d(seq, p)
        aligned = route_unflatten(scanned, direction, h, w)
        if _fault_negate_route == direction:
            aligned = tc.scale(aligned, -1.0)
        total = aligned if total is None else tc.ew(total, aligned, "add")
    return total


# ---------------------------------------------------------------------------
# Vision state-space module


@dataclass(frozen=True)
class VSSWeights:
    """Expand to 2C, gate one half with the scanned-and-normalized other."""

    w_expand: Tensor  # (2C, C)
    b_expand: Tensor  # (2C,)
    scans: tuple  # four SSMParams
    ln_gamma: Tensor  # (C,)
    ln_beta: Tensor  # (C,)
    w_out: Tensor  # (C, C)
    b_out: Tensor  # (C,)

    def __post_init__(self):
        two_c, c = self.w_expand.shape
        if two_c % 2 or two_c != 2 * c:
            raise ShapeError(
                f"VSS expansion must map C to exactly 2C, got {self.w_expand.shape}"
            )
        if len(self.scans) != 4:
            raise ShapeError("VSS needs four scan-direction parameter sets")
        for p in self.scans:
            if p.channels != c:
                raise ShapeError(
                    f"scan params expect {p.channels} channels, module has {c}"
                )


def init_vss(
    rng: np.random.Generator,
    channels: int,
    d_state: int,
    dt_rank: int,
    add=None,
    prefix: str = "",
) -> VSSWeights:
    if add is None:
        add = lambda _name, arr: Tensor(arr)
    scans = tuple(
        init_ssm_params(
            rng, channels, d_state, dt_rank, add, f"{prefix}scan.{direction}."
        )
        for direction in ROUTE_DIRECTIONS
    )
    return VSSWeights(
        w_expand=add(prefix + "expand.weight", trunc_normal(rng, (2 * channels, channels))),
        b_expand=add(prefix + "expand.bias", np.zeros(2 * channels, dtype=np.float32)),
        scans=scans,
        ln_gamma=add(prefix + "norm.gamma", np.ones(channels, dtype=np.float32)),
        ln_beta=add(prefix + "norm.beta", np.zeros(channels, dtype=np.float32)),
        w_out=add(prefix + "out.weight", trunc_normal(rng, (channels, channels))),
        b_out=add(prefix + "out.bias", np.zeros(channels, dtype=np.float32)),
    )


def vss_module(x0: Tensor, w: VSSWeights) -> Tensor:
    """Expand, split; scan branch times gate branch; project back to C."""
    nb, h, ww, c = tc._require_4d(x0, "vss_module")
    expanded = tc.linear(x0, w.w_expand, w.b_expand)
    half1 = tc.channel_slice(expanded, 0, c)
    half2 = tc.channel_slice(expanded, c, 2 * c)
    scanned = ssm_2d(tc.activation(half1, "silu"), w.scans)
    branch1 = tc.layer_norm(scanned, w.ln_gamma, w.ln_beta)
    branch2 = tc.activation(half2, "silu")
    return tc.linear(tc.ew(branch1, branch2, "mul"), w.w_out, w.b_out)
