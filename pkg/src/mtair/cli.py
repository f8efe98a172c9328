"""Command-line interface for restoration, synthesis, and verification.

This module stays import-light at the top level on purpose: the thread
count must land in the BLAS environment variables before numpy is first
imported, so numpy and the engine modules are imported inside the command
handlers only.

Exit codes
    0  success
    2  usage error (bad flags or arguments)
    3  file could not be read or written
    4  malformed weight file or report (bad magic, version, layout, CRC)
    5  invalid configuration or mismatched tensor shapes
    6  a verification check failed or a computation went non-finite
"""

from __future__ import annotations

import argparse
import json
import os
import sys

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_FORMAT = 4
EXIT_CONFIG = 5
EXIT_CHECK = 6

_EXIT_CODE_HELP = """\
exit codes:
  0  success
  2  usage error (bad flags or arguments)
  3  file could not be read or written
  4  malformed weight file or report (bad magic, version, layout, CRC)
  5  invalid configuration or mismatched tensor shapes
  6  a verification check failed or a computation went non-finite
"""

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)

TASKS = (
    "denoise15",
    "denoise25",
    "denoise50",
    "derain",
    "dehaze",
    "all-in-one",
)
TASK_SIGMA = {"denoise15": 15, "denoise25": 25, "denoise50": 50}


def _configure_threads(argv) -> None:
    """Pin the BLAS pools before numpy is imported anywhere.

    Reads ``--threads`` straight from raw argv (argparse has not run yet)
    and falls back to the MTAIR_THREADS environment variable.  Values that
    do not parse are left for argparse to reject properly.
    """
    value = None
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            value = argv[i + 1]
        elif arg.startswith("--threads="):
            value = arg.split("=", 1)[1]
    if value is None:
        value = os.environ.get("MTAIR_THREADS")
    if value is None:
        return
    try:
        n = int(value)
    except ValueError:
        return
    if n >= 1:
        for var in _THREAD_VARS:
            os.environ[var] = str(n)


# ---------------------------------------------------------------------------
# Run configuration


def default_run_config():
    from .network import NetworkConfig

    return RunConfig(task="all-in-one", network=NetworkConfig())


class RunConfig:
    """Task selection plus the network layout, loaded from JSON."""

    def __init__(self, task, network):
        self.task = task
        self.network = network

    @property
    def noise_sigma(self):
        return TASK_SIGMA.get(self.task)


def load_run_config(path=None) -> RunConfig:
    """Load a run configuration; ``None`` gives the reference layout.

    The file holds a JSON object with a ``task`` name and an optional
    ``network`` object whose keys override NetworkConfig fields.  Unknown
    keys and invalid values are rejected rather than ignored.
    """
    import dataclasses

    from .errors import ConfigError, FormatError
    from .network import NetworkConfig

    if path is None:
        return default_run_config()
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"run config is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise FormatError("run config must be a JSON object")
    unknown = set(payload) - {"task", "network"}
    if unknown:
        raise ConfigError(f"unknown run-config keys: {sorted(unknown)}")
    task = payload.get("task", "all-in-one")
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
    net = payload.get("network", {})
    if not isinstance(net, dict):
        raise ConfigError("run-config field 'network' must be an object")
    field_names = {f.name for f in dataclasses.fields(NetworkConfig)}
    bad = set(net) - field_names
    if bad:
        raise ConfigError(f"unknown network fields: {sorted(bad)}")
    kwargs = {
        k: tuple(v) if isinstance(v, list) else v for k, v in net.items()
    }
    return RunConfig(task=task, network=NetworkConfig(**kwargs))


# ---------------------------------------------------------------------------
# Commands


def _write_report(path, text) -> None:
    if path:
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)


def cmd_restore(args) -> int:
    import numpy as np

    from .imageio import read_image, write_image
    from .metrics import psnr, ssim
    from .network import forward
    from .weights import WeightStore

    cfg = load_run_config(args.config)
    image = read_image(args.input)
    if args.weights:
        ws = WeightStore.load(args.weights)
        restored = forward(image, ws, cfg.network)
        out = np.clip(restored.data, 0.0, 1.0).astype(np.float32)
    else:
        # Identity restore: pass the image through untouched.  Useful for
        # exercising the I/O pipeline and the degenerate metric case.
        out = image.data
    write_image(args.output, out)
    scores = {}
    if args.reference:
        ref = read_image(args.reference)
        scores["psnr_db"] = psnr(out, ref.data)
        scores["ssim"] = ssim(out, ref.data)
        print(f"PSNR: {scores['psnr_db']:.4f} dB")
        print(f"SSIM: {scores['ssim']:.6f}")
    _write_report(
        args.report,
        json.dumps(
            {"task": cfg.task, "input": args.input, "output": args.output,
             **scores},
            indent=2, sort_keys=True,
        ) + "\n",
    )
    return EXIT_OK


def cmd_synthesize(args) -> int:
    import numpy as np

    from .errors import ConfigError
    from .imageio import read_image, write_image

    sigma = args.sigma
    if sigma is None and args.config:
        cfg = load_run_config(args.config)
        sigma = cfg.noise_sigma
        if sigma is None:
            raise ConfigError(
                f"task {cfg.task!r} has no synthetic degradation; only the "
                "noise tasks can be synthesized"
            )
    if sigma is None:
        raise ConfigError("synthesize needs --sigma or a noise-task --config")
    if sigma < 0:
        raise ConfigError("noise level must be non-negative")
    clean = read_image(args.input).data
    if sigma == 0:
        noisy = clean
    else:
        rng = np.random.default_rng(args.seed)
        noise = rng.normal(0.0, sigma / 255.0, size=clean.shape)
        noisy = np.clip(clean + noise.astype(np.float32), 0.0, 1.0)
    write_image(args.output, noisy.astype(np.float32))
    print(f"wrote {args.output} (sigma={sigma}, seed={args.seed})")
    return EXIT_OK


def cmd_check(args) -> int:
    from .checks import parse_report, run_checks

    report = run_checks(seed=args.seed, trials=args.trials, grids=args.grids)
    print(report.to_text(), end="")
    payload = report.to_json()
    parse_report(payload)  # the emitted artifact must parse back
    _write_report(args.report, payload)
    return EXIT_OK if report.passed else EXIT_CHECK


def cmd_bench(args) -> int:
    from .bench import run_bench

    sizes = tuple(int(s) for s in args.sizes.split(","))
    report = run_bench(
        sizes=sizes, reps=args.reps, channels=args.channels, seed=args.seed
    )
    print(report.to_text(), end="")
    _write_report(args.report, report.to_json())
    return EXIT_OK


def _gradcheck_target(name, rng):
    """Build (fn, probes) for one named gradient-check target."""
    import numpy as np

    from . import tensor as tc
    from .attention import channel_attention, init_channel_attn
    from .blocks import init_mt_dhb, mt_dhb
    from .gradcheck import randomize_probe_point
    from .network import NetworkConfig, build, forward
    from .prompt import init_prompt_codebook, sc_prompt_block
    from .ssm import init_ssm_params, selective_scan_1d
    from .tensor import Tensor
    from .weights import cast_struct, iter_tensors

    def probed(struct):
        struct = cast_struct(struct, np.float64)
        randomize_probe_point(iter_tensors(struct), rng)
        return struct

    def weighted(out, coeffs):
        return tc.reduce_sum(tc.ew(out, coeffs, "mul"))

    if name == "selective_scan":
        p = probed(init_ssm_params(rng, 4, 3, 2))
        seq = Tensor(rng.standard_normal((1, 6, 4)))
        coeffs = Tensor(rng.standard_normal((1, 6, 4)))
        fn = lambda: weighted(selective_scan_1d(seq, p), coeffs)
        probes = {"input": seq, **dict(iter_tensors(p))}
        return fn, probes
    if name == "network":
        cfg = NetworkConfig(
            levels=1, blocks=(1,), channels=(4,), heads=(1,),
            block_types=("mt_dhb",), prompt_count=2, d_state=2,
            dt_rank=1, patch_size=4,
        )
        ws = build(cfg, seed=5).astype(np.float64)
        randomize_probe_point(ws.items(), rng)
        x = Tensor(rng.standard_normal((1, 4, 4, 3)))
        target = Tensor(rng.standard_normal((1, 4, 4, 3)))

        def fn():
            diff = tc.ew(forward(x, ws, cfg), target, "sub")
            return tc.reduce_mean(tc.ew(diff, diff, "mul"))

        probes = {"input": x, **{n: t for n, t in ws.items()}}
        return fn, probes
    x = Tensor(rng.standard_normal((1, 4, 4, 8)))
    coeffs = Tensor(rng.standard_normal((1, 4, 4, 8)))
    if name == "channel_attention":
        w = probed(init_channel_attn(rng, 8, 2))
        fn = lambda: weighted(channel_attention(x, w), coeffs)
    elif name == "mt_dhb":
        w = probed(init_mt_dhb(rng, 8, 2, d_state=3, dt_rank=2))
        fn = lambda: weighted(mt_dhb(x, w), coeffs)
    else:  # sc_prompt_block
        w = probed(init_prompt_codebook(rng, 8, 3, (4, 4), 2))
        fn = lambda: weighted(sc_prompt_block(x, w), coeffs)
    probes = {"input": x, **dict(iter_tensors(w))}
    return fn, probes


GRADCHECK_TARGETS = (
    "channel_attention",
    "selective_scan",
    "mt_dhb",
    "sc_prompt_block",
    "network",
)


def cmd_gradcheck(args) -> int:
    import numpy as np

    from .gradcheck import fd_check

    rng = np.random.default_rng(args.seed)
    fn, probes = _gradcheck_target(args.target, rng)
    report = fd_check(fn, probes)
    worst = max(report.entries, key=lambda e: e.max_rel_err, default=None)
    for entry in report.entries:
        status = "ok" if entry.passed else "FAIL"
        print(
            f"{status:>4}  {entry.name:<28} max rel err {entry.max_rel_err:.3e}"
            + (f"  ({entry.kink_count} kink-excluded)" if entry.kink_count else "")
        )
    print(
        f"{args.target}: max rel err {report.max_rel_err:.3e} over "
        f"{len(report.entries)} tensors (tolerance {report.tol:.0e}, "
        f"h={report.h:.0e}, {report.kink_count} kink exclusions)"
    )
    _write_report(
        args.report, json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    )
    return EXIT_OK if report.passed else EXIT_CHECK


def cmd_init(args) -> int:
    from .network import build

    cfg = load_run_config(args.config)
    ws = build(cfg.network, seed=args.seed)
    ws.save(args.output)
    print(
        f"wrote {args.output}: {len(ws)} tensors, "
        f"{ws.total_parameters()} parameters (task {cfg.task}, seed {args.seed})"
    )
    return EXIT_OK


def cmd_params(args) -> int:
    from .network import build, parameter_census
    from .weights import WeightStore

    if args.weights:
        ws = WeightStore.load(args.weights)
        source = args.weights
    else:
        cfg = load_run_config(args.config)
        ws = build(cfg.network, seed=args.seed)
        source = "fresh build"
    census = parameter_census(ws)
    print(f"parameters in {source}:")
    for group, count in sorted(census["groups"].items()):
        print(f"  {group:<16} {count:>12,}")
    print(f"  {'total':<16} {census['total']:>12,}")
    _write_report(
        args.report, json.dumps(census, indent=2, sort_keys=True) + "\n"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser and dispatch


def _add_common(p) -> None:
    p.add_argument(
        "--threads", type=int, metavar="N",
        help="BLAS thread count (default: MTAIR_THREADS or library default); "
             "use 1 for bit-reproducible runs",
    )
    p.add_argument("--seed", type=int, default=0, metavar="S",
                   help="random seed (default 0)")
    p.add_argument("--report", metavar="PATH",
                   help="also write a JSON report to PATH")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mtair",
        description="All-in-one image restoration: inference, synthetic "
                    "degradation, and verification of the engine's "
                    "documented guarantees.",
        epilog=_EXIT_CODE_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser(
        "restore", help="restore a degraded PNG with a trained network",
        epilog=_EXIT_CODE_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--config", metavar="PATH", help="run-config JSON")
    p.add_argument("--weights", metavar="PATH",
                   help="weight file; omitted = identity pass-through")
    p.add_argument("--input", required=True, metavar="PNG")
    p.add_argument("--output", required=True, metavar="PNG")
    p.add_argument("--reference", metavar="PNG",
                   help="clean image; prints PSNR/SSIM against it")
    _add_common(p)
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser(
        "synthesize", help="add seeded Gaussian noise to a clean PNG",
        epilog=_EXIT_CODE_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--config", metavar="PATH",
                   help="run-config JSON; a noise task supplies sigma")
    p.add_argument("--sigma", type=int, metavar="S",
                   help="noise standard deviation on the 0-255 scale "
                        "(15, 25, or 50 in the standard protocol; 0 copies)")
    p.add_argument("--input", required=True, metavar="PNG")
    p.add_argument("--output", required=True, metavar="PNG")
    _add_common(p)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser(
        "check", help="run the named invariant checks",
        epilog=_EXIT_CODE_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--trials", type=int, default=1000, metavar="N",
                   help="trials for the statistical checks (default 1000)")
    p.add_argument("--grids", type=int, default=100, metavar="N",
                   help="random grids for the permutation checks (default 100)")
    _add_common(p)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser(
        "bench", help="measure kernel runtime growth against pixel count",
        epilog=_EXIT_CODE_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--sizes", default="32,64,128", metavar="S1,S2,...",
                   help="square side lengths (default 32,64,128)")
    p.add_argument("--reps", type=int, default=10, metavar="N",
                   help="repetitions per point; the median is kept (default 10)")
    p.add_argument("--channels", type=int, default=48, metavar="C",
                   help="channel width (default 48)")
    _add_common(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser(
        "gradcheck", help="finite-difference check of one block's gradients",
        epilog=_EXIT_CODE_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("target", choices=GRADCHECK_TARGETS)
    _add_common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser(
        "init", help="write a freshly initialized weight file",
        epilog=_EXIT_CODE_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--config", metavar="PATH", help="run-config JSON")
    p.add_argument("--output", required=True, metavar="PATH")
    _add_common(p)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser(
        "params", help="summarize a weight file's parameter counts",
        epilog=_EXIT_CODE_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--weights", metavar="PATH")
    p.add_argument("--config", metavar="PATH",
                   help="count a fresh build of this config instead")
    _add_common(p)
    p.set_defaults(func=cmd_params)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    _configure_threads(argv)
    parser = build_parser()
    args = parser.parse_args(argv)

    from .errors import (
        CheckFailure,
        ConfigError,
        FormatError,
        MtairError,
        NonFiniteError,
        ShapeError,
    )

    try:
        return args.func(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (ShapeError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckFailure, NonFiniteError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except MtairError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
