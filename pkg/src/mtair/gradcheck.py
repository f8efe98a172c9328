"""Central-finite-difference verification of the analytic gradients,
plus a single-pair overfitting smoke test for end-to-end learnability.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .errors import ConfigError, MtairError, NonFiniteError
from .network import NetworkConfig, assemble, build, forward
from .tape import Tape, trace_relu_masks
from .tensor import Tensor

FD_STEP = 1e-4
FD_TOL = 1e-6


@dataclass(frozen=True)
class FdEntry:
    """Finite-difference verdict for one probed tensor."""

    name: str
    size: int
    max_rel_err: float
    kink_count: int  # direction probes excluded: they flipped a ReLU pattern
    passed: bool


@dataclass(frozen=True)
class FdReport:
    h: float
    tol: float
    entries: tuple

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def kink_count(self) -> int:
        return sum(e.kink_count for e in self.entries)

    def failures(self) -> list:
        return [e for e in self.entries if not e.passed]

    def to_dict(self) -> dict:
        return {
            "h": self.h,
            "tol": self.tol,
            "passed": self.passed,
            "max_rel_err": self.max_rel_err,
            "entries": [
                {
                    "name": e.name,
                    "size": e.size,
                    "max_rel_err": e.max_rel_err,
                    "kink_count": e.kink_count,
                    "passed": e.passed,
                }
                for e in self.entries
            ],
        }

    def to_text(self) -> str:
        width = max([len(e.name) for e in self.entries] + [9])
        lines = [f"{'parameter':<{width}}  {'size':>6}  {'max rel err':>12}  "
                 f"{'kinks':>5}  verdict"]
        for e in self.entries:
            lines.append(
                f"{e.name:<{width}}  {e.size:>6}  {e.max_rel_err:>12.3e}  "
                f"{e.kink_count:>5}  {'pass' if e.passed else 'FAIL'}"
            )
        lines.append(
            f"overall: {'pass' if self.passed else 'FAIL'} "
            f"(h={self.h:g}, tol={self.tol:g}, "
            f"max rel err {self.max_rel_err:.3e})"
        )
        return "\n".join(lines)


def _masks_differ(a: list, b: list) -> bool:
    if len(a) != len(b):
        return True
    return any(x.shape != y.shape or bool((x != y).any()) for x, y in zip(a, b))


def randomize_probe_point(tensors, rng) -> None:
    """Redraw parameters at unit scale for finite-difference probing.

    At the training initialization several paths are nearly silent (tiny
    projection scales), leaving true gradients orders of magnitude below
    the rounding noise of a central difference at h=1e-4.  A generic
    unit-scale point exercises the same formulas with a measurable
    difference quotient.  Structured parameters keep their constraints:
    temperatures stay positive, decay rates stay stable, unit-like scales
    stay away from zero.

    ``tensors`` is an iterable of (dotted-name, Tensor) pairs, e.g.
    ``iter_tensors(weights)`` or ``WeightStore.items()``; tensors are
    overwritten in place.
    """
    for name, t in tensors:
        parts = name.split(".")
        leaf = parts[-1]
        if leaf == "beta":  # attention temperature: positive, moderate
            t.data[...] = 2.0 + 2.0 * rng.random(t.shape)
        elif leaf == "a_log":  # slow, non-vanishing decay: long state memory
            t.data[...] = rng.uniform(-1.2, -0.2, t.shape)
        elif leaf in ("d", "gamma", "ln_gamma"):
            t.data[...] = rng.uniform(0.8, 1.2, t.shape)
        elif leaf == "b_dt":  # step-size bias: softplus in its linear band
            t.data[...] = rng.uniform(0.2, 0.8, t.shape)
        elif len(parts) >= 2 and parts[-2] in ("w1", "w2", "w3", "w4"):
            # Gate projections feed sigmoids from pooled activations; keep
            # them moderate so the gates stay in their responsive band
            # instead of saturating (a saturated gate multiplies a whole
            # channel's gradient down to ~1e-13, below finite-difference
            # resolution).
            t.data[...] = 0.12 * rng.standard_normal(t.shape)
        else:
            # Everything else — including norm shifts — gets a generic
            # zero-mean draw.  A large positive norm shift would make the
            # q/k spatial rows nearly parallel constant vectors, and the
            # L2-normalization projector would then annihilate their
            # gradients below what central differences can resolve.
            t.data[...] = 0.25 * rng.standard_normal(t.shape)


FD_DIRECTIONS = 3


def _probe_directions(name: str, shape: tuple, count: int) -> np.ndarray:
    """Fixed unit-norm directions for one parameter, derived from its name."""
    rng = np.random.default_rng(zlib.crc32(name.encode("utf-8")))
    dirs = rng.standard_normal((count,) + tuple(shape))
    flat = dirs.reshape(count, -1)
    norms = np.sqrt((flat * flat).sum(axis=1, keepdims=True))
    flat /= np.maximum(norms, 1e-30)
    return dirs


def fd_check(fn, probes: dict, h: float = FD_STEP, tol: float = FD_TOL) -> FdReport:
    """Compare analytic gradients of ``fn()`` against central differences.

    ``fn`` must be a pure scalar function of the tensors in ``probes`` (a
    name -> Tensor mapping); every probe must be float64.  Each probed
    tensor is perturbed as a whole along a few fixed unit-norm directions,
    and the central difference of the scalar is compared with the tape's
    directional derivative along the same direction.  Probing whole
    tensors keeps both sides at the tensor's natural gradient scale;
    individual elements whose gradient sits many orders of magnitude below
    the tensor norm would otherwise drown in the difference's rounding
    noise and report spurious errors.  Each direction mixes the analytic
    gradient with a random draw, so the directional derivative always
    carries the full gradient magnitude (a purely random direction can
    land near-orthogonal to the gradient, again leaving nothing but
    rounding noise to compare).  Directions whose perturbation flips a
    ReLU activation pattern straddle a non-differentiable kink; they are
    excluded from the strict tolerance and reported in ``kink_count``.
    """
    for name, t in probes.items():
        if t.dtype != np.float64:
            raise MtairError(
                f"fd_check requires float64 probes, {name!r} is {t.dtype}"
            )
    with Tape() as tape:
        loss = fn()
    if loss.data.ndim != 0:
        raise MtairError("fd_check requires a scalar-valued function")
    grads = tape.backward(loss)

    entries = []
    for name, t in probes.items():
        analytic = grads.wrt(t)
        if analytic is None:
            analytic = np.zeros_like(t.data)
        max_rel = 0.0
        kinks = 0
        saved = t.data.copy()
        gnorm = float(np.linalg.norm(analytic))
        for u in _probe_directions(name, t.data.shape, FD_DIRECTIONS):
            if gnorm > 0.0:
                u = analytic / gnorm + 0.5 * u
                u = u / np.linalg.norm(u)
            t.data[...] = saved + h * u
            with trace_relu_masks() as plus:
                f_plus = float(fn().data)
            t.data[...] = saved - h * u
            with trace_relu_masks() as minus:
                f_minus = float(fn().data)
            t.data[...] = saved
            if _masks_differ(plus, minus):
                kinks += 1
                continue
            numeric = (f_plus - f_minus) / (2.0 * h)
            a_dir = float((analytic * u).sum())
            rel = abs(a_dir - numeric) / max(abs(a_dir), abs(numeric), 1e-8)
            max_rel = max(max_rel, rel)
        entries.append(FdEntry(
            name=name,
            size=int(t.data.size),
            max_rel_err=max_rel,
            kink_count=kinks,
            passed=max_rel <= tol,
        ))
    return FdReport(h=h, tol=tol, entries=tuple(entries))


def toy_fit(cfg: NetworkConfig, pair, steps: int, lr: float,
            seed: int = 0) -> list:
    """Plain gradient descent on the mean-L1 loss for one image pair.

    ``pair`` is (degraded, clean); returns the per-step loss trace.
    Guarded to desk-scale configs; a non-finite loss aborts with an error.
    """
    if cfg.levels > 2 or max(cfg.channels) > 16:
        raise ConfigError(
            "toy_fit is a smoke test: use <= 2 levels and <= 16 channels"
        )
    degraded, clean = pair
    degraded = degraded if isinstance(degraded, Tensor) else Tensor(degraded)
    clean = clean if isinstance(clean, Tensor) else Tensor(clean)
    ws = build(cfg, seed)
    nw = assemble(ws, cfg)
    losses = []
    for step in range(steps):
        with Tape() as tape:
            out = forward(degraded, nw, cfg)
            loss = tc.reduce_mean(tc.absolute(tc.ew(out, clean, "sub")))
        val = loss.item()
        if not np.isfinite(val):
            raise NonFiniteError(f"toy_fit diverged at step {step}")
        losses.append(val)
        if lr != 0.0:
            grads = tape.backward(loss)
            ws.sgd_step(grads, lr)
    return losses
