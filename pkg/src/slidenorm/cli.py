"""Command-line interface: fit, normalize, batch, bench.

Exit codes
----------
0  success
1  batch finished with per-file failures
2  unreadable, unsupported, or invalid input (bad flags, bad config,
   missing file, unknown format, corrupt image, bad profile)
3  blank slide (no usable tissue pixels)
4  degenerate stain (a stain absent or with zero density spread)
5  output write failure

Standard output carries only data (paths and CSV); diagnostics go to
standard error.  Option precedence: command-line flags, then the --config
file, then the SLIDENORM_WORKERS environment variable (workers only), then
built-in defaults.
"""
from __future__ import annotations

import argparse
import os
import sys
import tempfile
import time
import warnings

from .errors import (
    BlankSlideError,
    CorruptImageError,
    DegenerateStainError,
    InsufficientPixelsError,
    ProfileError,
    SlideNormError,
    StainAbsentError,
    UnsupportedFormatError,
)
from .image_io import open_slide, open_writer
from .normalize import load_profile, save_profile
from .pipeline import RunStats, SamplePlan, fit, transform
from .stain_sep import SnmfConfig

_WORKERS_ENV = "SLIDENORM_WORKERS"

# (config-file key, dest, parser, default, help)
_OPTIONS = [
    ("lambda", "lam", float, 0.1, "sparsity weight for basis fitting"),
    ("code-lambda", "code_lam", float, 0.0,
     "sparsity weight for density coding in stats and transform"),
    ("white-threshold", "white_threshold", int, 220,
     "channel value above which a pixel counts as white"),
    ("sample-cap", "sample_cap", int, 100_000,
     "max bright pixels per channel for background estimation"),
    ("target-pixels", "target_pixels", int, 100_000,
     "non-white pixels to collect for fitting"),
    ("max-patches", "max_patches", int, 20,
     "max non-background patches visited while sampling"),
    ("patch-size", "patch_size", int, 1000, "sampling patch edge in pixels"),
    ("background-cutoff", "background_cutoff", float, 0.95,
     "white fraction at or above which a patch counts as background"),
    ("strip-height", "strip_height", int, 1024, "transform strip height in rows"),
    ("max-iters", "max_iters", int, 200, "max outer iterations for basis fitting"),
    ("rel-tol", "rel_tol", float, 1e-6, "relative objective tolerance"),
    ("seed", "seed", int, 0, "seed for sampling and solver initialization"),
    ("workers", "workers", int, 0, "worker threads for the transform (0 = cores)"),
]
_FLAG_OPTIONS = [
    ("verbose", "verbose", "print per-stage progress to stderr"),
    ("per-patch-stats", "per_patch_stats",
     "aggregate density stats as the median of per-patch 99th percentiles"),
]


class _OutputError(Exception):
    """Internal: an OSError raised while producing output."""


def _code_for(exc) -> int:
    if isinstance(exc, (BlankSlideError, InsufficientPixelsError)):
        return 3
    if isinstance(exc, (DegenerateStainError, StainAbsentError)):
        return 4
    return 2


def _add_common(parser):
    parser.add_argument("--config", metavar="FILE",
                        help="key = value file using the flag names below")
    for key, dest, typ, _default, help_ in _OPTIONS:
        parser.add_argument(f"--{key}", dest=dest, type=typ, default=None,
                            help=help_)
    for key, dest, help_ in _FLAG_OPTIONS:
        parser.add_argument(f"--{key}", dest=dest, action="store_true",
                            default=None, help=help_)


def _parse_bool(value, key):
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"invalid boolean for '{key}': {value}")


def _load_config_file(path) -> dict:
    by_key = {key: (dest, typ) for key, dest, typ, _d, _h in _OPTIONS}
    flag_keys = {key: dest for key, dest, _h in _FLAG_OPTIONS}
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key in by_key:
                dest, typ = by_key[key]
                try:
                    out[dest] = typ(value)
                except ValueError as exc:
                    raise ValueError(f"{path}:{lineno}: {exc}") from exc
            elif key in flag_keys:
                out[flag_keys[key]] = _parse_bool(value, key)
            else:
                raise ValueError(f"{path}:{lineno}: unknown option '{key}'")
    return out


def _resolve_config(args) -> dict:
    """Merge defaults, environment, config file, and flags; then validate."""
    cfg = {dest: default for _k, dest, _t, default, _h in _OPTIONS}
    cfg.update({dest: False for _k, dest, _h in _FLAG_OPTIONS})
    workers_set = False
    if args.config:
        file_cfg = _load_config_file(args.config)
        workers_set = "workers" in file_cfg
        cfg.update(file_cfg)
    for _key, dest, _typ, _default, _help in _OPTIONS:
        value = getattr(args, dest, None)
        if value is not None:
            cfg[dest] = value
            workers_set = workers_set or dest == "workers"
    for _key, dest, _help in _FLAG_OPTIONS:
        value = getattr(args, dest, None)
        if value is not None:
            cfg[dest] = value
    env_workers = os.environ.get(_WORKERS_ENV)
    if env_workers is not None and not workers_set:
        try:
            cfg["workers"] = int(env_workers)
        except ValueError:
            raise ValueError(f"{_WORKERS_ENV} must be an integer, got {env_workers!r}")

    if cfg["lam"] < 0 or cfg["code_lam"] < 0:
        raise ValueError("lambda values must be >= 0")
    if not 0 <= cfg["white_threshold"] < 255:
        raise ValueError("white-threshold must be in [0, 255)")
    for key in ("sample_cap", "target_pixels", "max_patches", "patch_size",
                "strip_height", "max_iters"):
        if cfg[key] < 1:
            raise ValueError(f"{key.replace('_', '-')} must be >= 1")
    if not 0.0 < cfg["background_cutoff"] <= 1.0:
        raise ValueError("background-cutoff must be in (0, 1]")
    if cfg["rel_tol"] <= 0:
        raise ValueError("rel-tol must be > 0")
    if cfg["workers"] < 0:
        raise ValueError("workers must be >= 0")
    return cfg


def _plan(cfg) -> SamplePlan:
    return SamplePlan(
        max_patches=cfg["max_patches"],
        patch_size=cfg["patch_size"],
        target_pixels=cfg["target_pixels"],
        background_fraction_cutoff=cfg["background_cutoff"],
        seed=cfg["seed"],
        white_threshold=cfg["white_threshold"],
        sample_cap=cfg["sample_cap"],
    )


def _snmf(cfg) -> SnmfConfig:
    return SnmfConfig(lam=cfg["lam"], max_outer_iters=cfg["max_iters"],
                      rel_tol=cfg["rel_tol"], seed=cfg["seed"])


def _say(cfg, msg):
    if cfg["verbose"]:
        print(f"[slidenorm] {msg}", file=sys.stderr)


def _fit_file(path, cfg, stats=None):
    with open_slide(path) as slide:
        _say(cfg, f"fitting {path} ({slide.width}x{slide.height})")
        t0 = time.perf_counter()
        params = fit(
            slide,
            _plan(cfg),
            _snmf(cfg),
            code_lam=cfg["code_lam"],
            per_patch_stats=cfg["per_patch_stats"],
            source_label=str(path),
            stats=stats,
        )
        _say(cfg, f"fit of {path} done in {time.perf_counter() - t0:.2f}s")
    return params


def _target_params(args, cfg, stats=None):
    if getattr(args, "profile", None):
        _say(cfg, f"loading target profile {args.profile}")
        return load_profile(args.profile)
    return _fit_file(args.target, cfg, stats=stats)


def _normalize_one(source_path, out_path, target_params, cfg, stats=None):
    stats = stats if stats is not None else RunStats()
    source_params = _fit_file(source_path, cfg, stats=stats)
    with open_slide(source_path) as slide:
        _say(cfg, f"normalizing {source_path} -> {out_path}")
        try:
            with open_writer(out_path, slide.width, slide.height) as sink:
                transform(
                    slide,
                    source_params,
                    target_params,
                    sink,
                    strip_height=cfg["strip_height"],
                    workers=cfg["workers"] or None,
                    code_lam=cfg["code_lam"],
                    stats=stats,
                    progress=(
                        (lambda done, total: _say(cfg, f"  rows {done}/{total}"))
                        if cfg["verbose"] else None
                    ),
                )
        except OSError as exc:
            raise _OutputError(f"cannot write {out_path}: {exc}") from exc
    _say(cfg, f"transform done in {stats.transform_s:.2f}s")
    return stats


def cmd_fit(args, cfg) -> int:
    params = _fit_file(args.input, cfg)
    try:
        save_profile(args.out, params)
    except OSError as exc:
        raise _OutputError(f"cannot write {args.out}: {exc}") from exc
    print(args.out)
    return 0


def cmd_normalize(args, cfg) -> int:
    target_params = _target_params(args, cfg)
    stats = _normalize_one(args.source, args.out, target_params, cfg)
    if args.stats_csv:
        try:
            with open(args.stats_csv, "w", encoding="utf-8") as fh:
                stats.write_csv(fh)
        except OSError as exc:
            raise _OutputError(f"cannot write {args.stats_csv}: {exc}") from exc
    print(args.out)
    return 0


def cmd_batch(args, cfg) -> int:
    suffixes = (".png", ".tif", ".tiff")
    try:
        entries = sorted(
            name for name in os.listdir(args.source_dir)
            if name.lower().endswith(suffixes)
        )
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if not entries:
        print(f"error: no images found in {args.source_dir}", file=sys.stderr)
        return 2

    target_params = _target_params(args, cfg)
    os.makedirs(args.out, exist_ok=True)
    failures = []
    for name in entries:
        src = os.path.join(args.source_dir, name)
        dst = os.path.join(args.out, name)
        try:
            _normalize_one(src, dst, target_params, cfg)
            print(dst)
        except (SlideNormError, _OutputError, OSError) as exc:
            failures.append((name, str(exc)))
            print(f"error: {name}: {exc}", file=sys.stderr)
    if failures:
        print(f"\n{len(failures)} of {len(entries)} files failed:", file=sys.stderr)
        for name, msg in failures:
            print(f"  FAILED {name}: {msg}", file=sys.stderr)
        return 1
    return 0


def cmd_bench(args, cfg) -> int:
    from .synthetic import write_slide_tiff

    try:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
        if not sizes or any(s < 64 for s in sizes):
            raise ValueError
    except ValueError:
        print(f"error: invalid size list {args.sizes!r}; expected e.g. "
              "512,1024,2048", file=sys.stderr)
        return 2

    workdir = args.workdir or tempfile.mkdtemp(prefix="slidenorm-bench-")
    os.makedirs(workdir, exist_ok=True)
    # serial timing by default so scaling in size is not confounded by how
    # many strips happen to run concurrently
    workers = cfg["workers"] or 1

    print("size,stage,seconds,pixels,patches")
    fit_times = {}
    for size in sizes:
        slide_path = os.path.join(workdir, f"synthetic_{size}.tiff")
        out_path = os.path.join(workdir, f"normalized_{size}.tiff")
        _say(cfg, f"generating {size}x{size} synthetic slide")
        write_slide_tiff(slide_path, size, size, cfg["seed"],
                         tissue_fraction=0.55)
        stats = RunStats()
        with open_slide(slide_path) as slide:
            params = fit(
                slide, _plan(cfg), _snmf(cfg),
                code_lam=cfg["code_lam"], source_label=slide_path, stats=stats,
            )
            with open_writer(out_path, slide.width, slide.height) as sink:
                transform(slide, params, params, sink,
                          strip_height=cfg["strip_height"], workers=workers,
                          code_lam=cfg["code_lam"], stats=stats)
        fit_times[size] = stats.sampling_s + stats.basis_fit_s
        for stage, seconds, pixels, patches in stats.csv_rows():
            print(f"{size},{stage},{seconds:.6f},{pixels},{patches}")
    ratio = fit_times[max(sizes)] / max(fit_times[min(sizes)], 1e-9)
    print(f"basis-fit time ratio ({max(sizes)} vs {min(sizes)}): {ratio:.2f}",
          file=sys.stderr)
    return 0


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="slidenorm",
        description="Structure-preserving stain color normalization for "
                    "large histology images.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a stain profile for one image")
    p.add_argument("input", help="source image (PNG or 8-bit RGB TIFF)")
    p.add_argument("--out", required=True, help="profile file to write")
    _add_common(p)
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("normalize", help="normalize one image against a target")
    p.add_argument("source", help="image to normalize")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--target", help="target image to fit and match")
    group.add_argument("--profile", help="previously fitted target profile")
    p.add_argument("--out", required=True, help="output image (.png/.tif/.tiff)")
    p.add_argument("--stats-csv", help="write per-stage timing CSV here")
    _add_common(p)
    p.set_defaults(handler=cmd_normalize)

    p = sub.add_parser("batch", help="normalize a directory against one target")
    p.add_argument("source_dir", help="directory of images to normalize")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--target", help="target image to fit and match")
    group.add_argument("--profile", help="previously fitted target profile")
    p.add_argument("--out", required=True, help="output directory")
    _add_common(p)
    p.set_defaults(handler=cmd_batch)

    p = sub.add_parser("bench", help="runtime scaling benchmark on synthetic slides")
    p.add_argument("sizes", help="comma-separated square edges, e.g. 512,1024,2048")
    p.add_argument("--workdir", help="directory for generated slides (kept)")
    _add_common(p)
    p.set_defaults(handler=cmd_bench)

    return parser


def _print_warning(message, category, filename, lineno, file=None, line=None):
    print(f"warning: {message}", file=sys.stderr)


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _resolve_config(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            warnings.showwarning = _print_warning
            return args.handler(args, cfg)
    except _OutputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5
    except (UnsupportedFormatError, CorruptImageError, ProfileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SlideNormError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _code_for(exc)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entrypoint():
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
