"""Wall-clock scaling measurement of the token-mixing kernels.

Times the directional scan and the transposed channel attention against a
conventional spatial attention whose map is pixels-by-pixels, over a
ladder of square inputs.  Fitting median runtimes against pixel count on
a log-log scale gives an empirical growth exponent per kernel: the two
production kernels should scale near-linearly while the spatial baseline
grows quadratically, which is the whole reason they are used.
"""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass

import numpy as np

from .attention import (
    channel_attention,
    init_channel_attn,
    naive_spatial_attention,
)
from .errors import ConfigError
from .ssm import init_ssm_params, ssm_2d
from .tensor import Tensor

BENCH_SIZES = (32, 64, 128)
BENCH_CHANNELS = 48
BENCH_REPS = 10

SCHEMA = "mtair.bench/1"


@dataclass(frozen=True)
class BenchRow:
    kernel: str
    side: int
    pixels: int
    median_s: float
    reps: int

    def to_dict(self) -> dict:
        return {
            "kernel": self.kernel,
            "side": self.side,
            "pixels": self.pixels,
            "median_s": self.median_s,
            "reps": self.reps,
        }


@dataclass(frozen=True)
class BenchReport:
    channels: int
    rows: tuple

    def kernels(self) -> list:
        seen = []
        for row in self.rows:
            if row.kernel not in seen:
                seen.append(row.kernel)
        return seen

    def exponents(self) -> dict:
        """Least-squares slope of log(median time) against log(pixels)."""
        out = {}
        for kernel in self.kernels():
            pts = [(r.pixels, r.median_s) for r in self.rows if r.kernel == kernel]
            xs = np.log([p for p, _ in pts])
            ys = np.log([max(t, 1e-9) for _, t in pts])
            out[kernel] = float(np.polyfit(xs, ys, 1)[0])
        return out

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "channels": self.channels,
            "rows": [r.to_dict() for r in self.rows],
            "exponents": self.exponents(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = [
            f"{'kernel':<26} {'side':>5} {'pixels':>7} {'median_s':>10} {'reps':>5}"
        ]
        for r in self.rows:
            lines.append(
                f"{r.kernel:<26} {r.side:>5} {r.pixels:>7} "
                f"{r.median_s:>10.4f} {r.reps:>5}"
            )
        lines.append("")
        lines.append("growth exponents (log-log fit of time vs pixels):")
        for kernel, e in self.exponents().items():
            lines.append(f"  {kernel:<26} {e:.3f}")
        return "\n".join(lines) + "\n"


def _median_time(fn, reps: int) -> float:
    fn()  # warm caches, the allocator, and any lazily built tables
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def run_bench(
    sizes=BENCH_SIZES,
    reps: int = BENCH_REPS,
    channels: int = BENCH_CHANNELS,
    seed: int = 0,
) -> BenchReport:
    """Measure all kernels over square inputs of the given side lengths."""
    if reps < 1:
        raise ConfigError("bench needs at least one repetition")
    if len(sizes) < 2:
        raise ConfigError("bench needs at least two sizes to fit an exponent")
    rng = np.random.default_rng(seed)
    params4 = [
        init_ssm_params(rng, channels, 8, max(1, channels // 4))
        for _ in range(4)
    ]
    attn_w = init_channel_attn(rng, channels, 1)
    kernels = (
        ("ssm_2d", lambda x: ssm_2d(x, params4)),
        ("channel_attention", lambda x: channel_attention(x, attn_w)),
        ("naive_spatial_attention", lambda x: naive_spatial_attention(x, attn_w)),
    )
    inputs = {
        side: Tensor(
            rng.standard_normal((1, side, side, channels)).astype(np.float32)
        )
        for side in sizes
    }
    rows = []
    for name, fn in kernels:
        for side in sizes:
            x = inputs[side]
            median = _median_time(lambda: fn(x), reps)
            rows.append(
                BenchRow(
                    kernel=name,
                    side=int(side),
                    pixels=int(side) * int(side),
                    median_s=median,
                    reps=reps,
                )
            )
    return BenchReport(channels=channels, rows=tuple(rows))
