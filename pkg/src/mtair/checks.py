"""Named runtime invariant checks with a machine-readable report.

Each check exercises one structural property the engine is supposed to
guarantee — permutation round trips, attention-row normalization, convex
prompt mixing, agreement with the slow 64-bit reference implementations,
parameter wiring, weight-file round trips, and a finite-difference
gradient spot check — and records a (name, passed, tolerance, observed)
verdict.  ``run_checks`` bundles the verdicts into a ``CheckReport`` that
serializes to JSON and parses back losslessly, so automated gates can
consume the same artifact a human reads.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from . import oracles
from . import tensor as tc
from .attention import (
    channel_attention,
    cross_prompt_attention,
    init_channel_attn,
    naive_spatial_attention,
)
from .blocks import init_mt_dhb, mt_dhb
from .errors import FormatError
from .gradcheck import fd_check, randomize_probe_point
from .metrics import psnr, ssim
from .network import NetworkConfig, audit_parameter_access, build
from .prompt import init_prompt_codebook, pam, sc_prompt_block
from .ssm import ROUTE_DIRECTIONS, init_ssm_params, route_perm, ssm_2d
from .tensor import Tensor
from .weights import WeightStore, cast_struct, iter_tensors

SCHEMA = "mtair.checks/1"


@dataclass(frozen=True)
class CheckResult:
    """Verdict of one named invariant check."""

    name: str
    passed: bool
    tolerance: float
    observed: float
    detail: str = ""

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "tolerance": self.tolerance,
            "observed": self.observed,
            "detail": self.detail,
        }


@dataclass(frozen=True)
class CheckReport:
    seed: int
    results: tuple

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def names(self) -> list:
        return [r.name for r in self.results]

    def failures(self) -> list:
        return [r for r in self.results if not r.passed]

    def __getitem__(self, name: str) -> CheckResult:
        for r in self.results:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "seed": self.seed,
            "passed": self.passed,
            "checks": [r.to_dict() for r in self.results],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = []
        width = max((len(r.name) for r in self.results), default=0)
        for r in self.results:
            status = "PASS" if r.passed else "FAIL"
            line = (
                f"{status}  {r.name:<{width}}  "
                f"observed {r.observed:.3e}  tolerance {r.tolerance:.3e}"
            )
            if r.detail:
                line += f"  ({r.detail})"
            lines.append(line)
        verdict = "all checks passed" if self.passed else (
            f"{len(self.failures())} of {len(self.results)} checks FAILED"
        )
        lines.append(verdict)
        return "\n".join(lines) + "\n"


def parse_report(text: str) -> CheckReport:
    """Parse a JSON report produced by ``CheckReport.to_json``.

    Raises ``FormatError`` on malformed input so callers can distinguish a
    bad artifact from a failing check.
    """
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"check report is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise FormatError("check report must be a JSON object")
    if payload.get("schema") != SCHEMA:
        raise FormatError(
            f"unknown check-report schema {payload.get('schema')!r}"
        )
    for key in ("seed", "passed", "checks"):
        if key not in payload:
            raise FormatError(f"check report missing field {key!r}")
    if not isinstance(payload["checks"], list):
        raise FormatError("check report field 'checks' must be a list")
    results = []
    for item in payload["checks"]:
        if not isinstance(item, dict):
            raise FormatError("every check entry must be a JSON object")
        try:
            results.append(
                CheckResult(
                    name=str(item["name"]),
                    passed=bool(item["passed"]),
                    tolerance=float(item["tolerance"]),
                    observed=float(item["observed"]),
                    detail=str(item.get("detail", "")),
                )
            )
        except KeyError as exc:
            raise FormatError(f"check entry missing field {exc}") from exc
    report = CheckReport(seed=int(payload["seed"]), results=tuple(results))
    if bool(payload["passed"]) != report.passed:
        raise FormatError("check report verdict disagrees with its entries")
    return report


# ---------------------------------------------------------------------------
# Individual checks


def _result(name, tolerance, observed, detail="", extra_ok=True):
    ok = bool(extra_ok) and observed <= tolerance
    return CheckResult(name, ok, float(tolerance), float(observed), detail)


def check_pixel_rearrange_roundtrip(rng, trials=20) -> CheckResult:
    """Folding pixels into channels and back must be bit-exact."""
    worst = 0.0
    for _ in range(trials):
        r = int(rng.integers(1, 4))
        h = int(rng.integers(1, 5)) * r
        w = int(rng.integers(1, 5)) * r
        c = int(rng.integers(1, 7))
        x = Tensor(rng.standard_normal((1, h, w, c)).astype(np.float32))
        back = tc.pixel_rearrange(
            tc.pixel_rearrange(x, r, "to_channel"), r, "to_space"
        )
        worst = max(worst, float(np.max(np.abs(back.data - x.data))))
    return _result(
        "tensor.pixel_rearrange_roundtrip", 0.0, worst,
        f"{trials} random block sizes, bit-exact round trip",
    )


def check_route_bijection(rng, grids=100) -> CheckResult:
    """Every scan route flattens and unflattens without loss, bit-exact."""
    from .ssm import route_flatten, route_unflatten

    worst = 0.0
    for _ in range(grids):
        h = int(rng.integers(1, 17))
        w = int(rng.integers(1, 17))
        x = Tensor(rng.standard_normal((1, h, w, 3)).astype(np.float32))
        for direction in ROUTE_DIRECTIONS:
            back = route_unflatten(route_flatten(x, direction), direction, h, w)
            worst = max(worst, float(np.max(np.abs(back.data - x.data))))
    return _result(
        "ssm.route_bijection", 0.0, worst,
        f"{grids} random grids up to 16x16, all four routes",
    )


def check_route_reversal(rng, grids=100) -> CheckResult:
    """The two route pairs traverse exactly reversed index sequences."""
    mismatches = 0
    for _ in range(grids):
        h = int(rng.integers(1, 17))
        w = int(rng.integers(1, 17))
        a = route_perm(h, w, "tl_br")
        b = route_perm(h, w, "br_tl")
        c = route_perm(h, w, "tr_bl")
        d = route_perm(h, w, "bl_tr")
        mismatches += int(np.sum(a[::-1] != b)) + int(np.sum(c[::-1] != d))
    return _result(
        "ssm.route_reversal", 0.0, float(mismatches),
        f"{grids} random grids, index-level reversal of both route pairs",
    )


def check_route_duality(rng, grids=100) -> CheckResult:
    """With one parameter set shared by all four routes, the merged scan
    commutes with a 180-degree rotation of the grid.

    Rotating the image maps each route's visiting sequence onto its
    reversed partner's, so the four realigned outputs swap pairwise and
    their sum is unchanged.  Any asymmetry in the merge — a dropped,
    duplicated, or sign-flipped route — breaks the identity on random
    inputs, which makes this check sensitive to injected route faults.
    """
    params = cast_struct(init_ssm_params(rng, 3, 2, 1), np.float64)
    params4 = [params] * 4
    worst = 0.0
    for _ in range(grids):
        h = int(rng.integers(1, 17))
        w = int(rng.integers(1, 17))
        x = rng.standard_normal((1, h, w, 3))
        out = ssm_2d(Tensor(x), params4).data
        rot = ssm_2d(Tensor(np.rot90(x, 2, axes=(1, 2)).copy()), params4).data
        diff = np.abs(np.rot90(out, 2, axes=(1, 2)) - rot)
        scale = max(float(np.max(np.abs(out))), 1e-8)
        worst = max(worst, float(np.max(diff)) / scale)
    return _result(
        "ssm.route_duality", 1e-10, worst,
        f"{grids} random grids up to 16x16, rotation symmetry of the merge",
    )


def check_attention_row_sums(rng, trials=1000) -> CheckResult:
    """Every attention map row is a probability distribution (sums to 1)."""
    worst = 0.0
    w = None
    for trial in range(trials):
        if trial % 25 == 0:
            channels = int(rng.choice([4, 8]))
            heads = int(rng.choice([1, 2]))
            w = init_channel_attn(
                rng, channels, heads, qk_norm=bool(trial % 50 == 0)
            )
        h = int(rng.integers(1, 6))
        ww = int(rng.integers(1, 6))
        x = Tensor(rng.standard_normal((1, h, ww, w.channels)).astype(np.float32))
        if trial % 2:
            p = Tensor(rng.standard_normal(x.shape).astype(np.float32))
            _, amap = cross_prompt_attention(x, p, w, return_map=True)
        else:
            _, amap = channel_attention(x, w, return_map=True)
        sums = np.sum(amap.data.astype(np.float64), axis=-1)
        worst = max(worst, float(np.max(np.abs(sums - 1.0))))
    return _result(
        "attention.row_sums", 1e-6, worst,
        f"{trials} random trials, self and cross attention maps",
    )


def check_pam_convexity(rng, trials=1000) -> CheckResult:
    """Prompt selection weights form a convex combination: they sum to 1
    and every entry lies strictly inside (0, 1)."""
    worst = 0.0
    lo, hi = 1.0, 0.0
    cb = None
    for trial in range(trials):
        if trial % 25 == 0:
            channels = int(rng.choice([4, 8]))
            count = int(rng.integers(2, 7))
            cb = init_prompt_codebook(rng, channels, count, (3, 3), 1)
        h = int(rng.integers(1, 6))
        w = int(rng.integers(1, 6))
        x = Tensor(rng.standard_normal((1, h, w, cb.channels)).astype(np.float32))
        weights = pam(x, cb)[2].data.astype(np.float64)
        worst = max(worst, float(np.max(np.abs(np.sum(weights, axis=-1) - 1.0))))
        lo = min(lo, float(np.min(weights)))
        hi = max(hi, float(np.max(weights)))
    return _result(
        "prompt.pam_convexity", 1e-6, worst,
        f"{trials} trials, entries spanned [{lo:.3e}, {hi:.3e}]",
        extra_ok=(0.0 < lo and hi < 1.0),
    )


def _scale_err(got, want):
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    scale = max(float(np.max(np.abs(want))), 1e-8)
    return float(np.max(np.abs(got - want))) / scale


def check_ssm_2d_oracle(rng, trials=3) -> CheckResult:
    worst = 0.0
    for _ in range(trials):
        params4 = [init_ssm_params(rng, 4, 3, 2) for _ in range(4)]
        x = Tensor(rng.standard_normal((1, 5, 6, 4)).astype(np.float32))
        got = ssm_2d(x, params4).data
        want = oracles.ssm_2d_oracle(x, params4)
        worst = max(worst, _scale_err(got, want))
    return _result(
        "oracle.ssm_2d", 1e-5, worst,
        f"{trials} trials against the 64-bit reference scan",
    )


def check_channel_attention_oracle(rng, trials=3) -> CheckResult:
    worst = 0.0
    for _ in range(trials):
        w = init_channel_attn(rng, 8, 2)
        x = Tensor(rng.standard_normal((1, 4, 5, 8)).astype(np.float32))
        got = channel_attention(x, w).data
        want = oracles.channel_attention_oracle(x, w)
        worst = max(worst, _scale_err(got, want))
    return _result(
        "oracle.channel_attention", 1e-5, worst,
        f"{trials} trials against the 64-bit reference attention",
    )


def check_mt_dhb_oracle(rng, trials=3) -> CheckResult:
    worst = 0.0
    for _ in range(trials):
        w = init_mt_dhb(rng, 8, 2, d_state=3, dt_rank=2)
        x = Tensor(rng.standard_normal((1, 4, 4, 8)).astype(np.float32))
        got = mt_dhb(x, w).data
        want = oracles.mt_dhb_oracle(x, w)
        worst = max(worst, _scale_err(got, want))
    return _result(
        "oracle.mt_dhb", 1e-5, worst,
        f"{trials} trials against the 64-bit reference hybrid block",
    )


def check_sc_prompt_block_oracle(rng, trials=3) -> CheckResult:
    worst = 0.0
    for _ in range(trials):
        cb = init_prompt_codebook(rng, 8, 3, (4, 4), 2)
        x = Tensor(rng.standard_normal((1, 4, 4, 8)).astype(np.float32))
        got = sc_prompt_block(x, cb).data
        want = oracles.sc_prompt_block_oracle(x, cb)
        worst = max(worst, _scale_err(got, want))
    return _result(
        "oracle.sc_prompt_block", 1e-5, worst,
        f"{trials} trials against the 64-bit reference prompt block",
    )


def check_metric_oracles(rng, trials=3) -> CheckResult:
    worst = 0.0
    for _ in range(trials):
        a = rng.random((1, 16, 16, 3)).astype(np.float32)
        b = np.clip(a + 0.1 * rng.standard_normal(a.shape).astype(np.float32), 0, 1)
        worst = max(worst, abs(psnr(a, b) - oracles.psnr_oracle(a, b)))
        worst = max(worst, abs(ssim(a, b) - oracles.ssim_oracle(a, b)))
    return _result(
        "oracle.metrics", 1e-10, worst,
        f"{trials} image pairs, fidelity scores vs the references",
    )


def check_parameter_access(rng) -> CheckResult:
    """Every stored parameter is consumed exactly once per forward pass."""
    cfg = NetworkConfig(
        levels=2, blocks=(1, 1), channels=(4, 8), heads=(1, 2),
        block_types=("mt_dhb", "tb"), prompt_count=2, d_state=2,
        dt_rank=1, patch_size=8,
    )
    ws = build(cfg, seed=int(rng.integers(0, 2**31)))
    audit = audit_parameter_access(cfg, ws)
    bad = len(audit["orphans"]) + len(audit["reused"])
    detail = f"{len(ws)} parameters audited on a two-level network"
    if bad:
        names = (audit["orphans"] + audit["reused"])[:4]
        detail += "; offenders: " + ", ".join(names)
    return _result("network.parameter_access", 0.0, float(bad), detail)


def check_weight_file_roundtrip(rng) -> CheckResult:
    """Serialized weights reload identically and re-serialize to the same
    bytes, including mixed 32/64-bit entries."""
    ws = WeightStore()
    ws.add("conv.kernel", rng.standard_normal((4, 3, 3, 4)).astype(np.float32))
    ws.add("conv.bias", np.zeros(4, dtype=np.float32))
    ws.add("norm.gamma", rng.standard_normal(4).astype(np.float64))
    with tempfile.TemporaryDirectory() as tmp:
        p1 = os.path.join(tmp, "a.mtws")
        p2 = os.path.join(tmp, "b.mtws")
        ws.save(p1)
        with open(p1, "rb") as f:
            first = f.read()
        again = WeightStore.load(p1)
        again.save(p2)
        with open(p2, "rb") as f:
            second = f.read()
    diff = 0 if first == second else 1
    exact = all(
        np.array_equal(ws[name].data, again[name].data)
        and ws[name].dtype == again[name].dtype
        for name in ws.names()
    )
    return _result(
        "weights.file_roundtrip", 0.0, float(diff),
        "save -> load -> save reproduces the byte stream",
        extra_ok=exact,
    )


def check_fd_spot(rng) -> CheckResult:
    """Finite-difference spot check of the attention block's gradients."""
    w = cast_struct(init_channel_attn(rng, 8, 2), np.float64)
    randomize_probe_point(iter_tensors(w), rng)
    x = Tensor(rng.standard_normal((1, 4, 4, 8)))
    coeffs = Tensor(rng.standard_normal((1, 4, 4, 8)))
    probes = {"input": x}
    probes.update(dict(iter_tensors(w)))
    report = fd_check(
        lambda: tc.reduce_sum(tc.ew(channel_attention(x, w), coeffs, "mul")),
        probes,
    )
    return _result(
        "gradcheck.fd_spot", report.tol, report.max_rel_err,
        f"{len(report.entries)} probed tensors, {report.kink_count} kink exclusions",
        extra_ok=report.passed,
    )


def check_naive_attention_agreement(rng, trials=3) -> CheckResult:
    """The quadratic-cost spatial baseline shares the engine's projection
    stack, so its rows must normalize too (it is only a cost comparator,
    its output is not expected to match channel attention)."""
    worst = 0.0
    for _ in range(trials):
        w = init_channel_attn(rng, 4, 1)
        x = Tensor(rng.standard_normal((1, 4, 4, 4)).astype(np.float32))
        out = naive_spatial_attention(x, w)
        worst = max(worst, 0.0 if np.all(np.isfinite(out.data)) else 1.0)
    return _result(
        "attention.naive_baseline_finite", 0.0, worst,
        f"{trials} trials, quadratic baseline stays finite",
    )


# ---------------------------------------------------------------------------
# Suite driver


def run_checks(seed: int = 0, trials: int = 1000, grids: int = 100) -> CheckReport:
    """Run the whole invariant suite with one seeded generator.

    ``trials`` scales the statistical normalization checks and ``grids``
    the permutation/duality sweeps; the defaults match the documented
    guarantees.  A check that raises is reported as failed with the
    exception in its detail, so one broken module cannot mask the rest.
    """
    rng = np.random.default_rng(seed)
    steps = (
        ("tensor.pixel_rearrange_roundtrip",
         lambda: check_pixel_rearrange_roundtrip(rng)),
        ("ssm.route_bijection", lambda: check_route_bijection(rng, grids)),
        ("ssm.route_reversal", lambda: check_route_reversal(rng, grids)),
        ("ssm.route_duality", lambda: check_route_duality(rng, grids)),
        ("attention.row_sums", lambda: check_attention_row_sums(rng, trials)),
        ("prompt.pam_convexity", lambda: check_pam_convexity(rng, trials)),
        ("oracle.ssm_2d", lambda: check_ssm_2d_oracle(rng)),
        ("oracle.channel_attention",
         lambda: check_channel_attention_oracle(rng)),
        ("oracle.mt_dhb", lambda: check_mt_dhb_oracle(rng)),
        ("oracle.sc_prompt_block", lambda: check_sc_prompt_block_oracle(rng)),
        ("oracle.metrics", lambda: check_metric_oracles(rng)),
        ("attention.naive_baseline_finite",
         lambda: check_naive_attention_agreement(rng)),
        ("network.parameter_access", lambda: check_parameter_access(rng)),
        ("weights.file_roundtrip", lambda: check_weight_file_roundtrip(rng)),
        ("gradcheck.fd_spot", lambda: check_fd_spot(rng)),
    )
    results = []
    for name, step in steps:
        try:
            results.append(step())
        except Exception as exc:  # one broken check must not mask the rest
            results.append(
                CheckResult(
                    name=name,
                    passed=False,
                    tolerance=0.0,
                    observed=float("inf"),
                    detail=f"raised {exc!r}",
                )
            )
    return CheckReport(seed=seed, results=tuple(results))
