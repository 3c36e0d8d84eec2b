"""Command-line entry point: generate, register, bench, and plot.

Each command accepts an optional TOML config file whose sections mirror
the module config types; explicit flags override file values, and the
environment variable C2P_SEED serves as a global seed fallback. Every
command writes a run manifest (command line, effective config hash,
seeds, tool version) next to its outputs so runs can be reproduced
bit-exactly.

Exit codes: 0 success, 2 usage or configuration problems, 3 runtime
failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import time
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import evaluation, synthgen
from .baselines import cpd_nonrigid, icp, nicp
from .coarse import CoarseConfig
from .errors import C2PRegError, CloudFormatError, InvalidConfig
from .geom import DisplacementField, chamfer_distance
from .io import config_hash, read_cloud, write_field, write_json
from .ndp import PyramidConfig, c2p_register

_METHOD_KEYS = {
    "icp": {"max_iter", "tol"},
    "nicp": {"stiffness", "max_iter", "graph_neighbors", "inner_tol"},
    "cpd": {"beta", "lam", "w", "max_iter", "tol"},
    "c2p": {
        "coarse",
        "pyramid",
        "mask_strategy",
        "proximity_threshold",
        "min_structure_points",
        "allow_identity_init",
    },
}


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------

def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _jsonable(value):
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return _jsonable(dataclasses.asdict(value))
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    return value


def _load_config(path) -> dict:
    try:
        with open(path, "rb") as handle:
            return tomllib.load(handle)
    except OSError as exc:
        raise InvalidConfig(f"cannot read config file {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise InvalidConfig(f"config file {path} is not valid TOML: {exc}") from exc


def _build(cls, data: dict, context: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise InvalidConfig(f"unknown {context} keys: {', '.join(unknown)}")
    return cls(**{k: _tuplify(v) for k, v in data.items()})


def _generator_params(cfg: dict) -> synthgen.GeneratorParams:
    return synthgen.GeneratorParams(
        template=_build(synthgen.TemplateConfig, cfg.get("template", {}), "template"),
        nonrigid=_build(synthgen.NonRigidParams, cfg.get("nonrigid", {}), "nonrigid"),
        rigid=_build(synthgen.RigidParams, cfg.get("rigid", {}), "rigid"),
        sampling=_build(synthgen.SamplingParams, cfg.get("sampling", {}), "sampling"),
    )


def _method_options(cfg: dict, method: str) -> dict:
    data = dict(cfg.get(method, {}))
    unknown = sorted(set(data) - _METHOD_KEYS[method])
    if unknown:
        raise InvalidConfig(f"unknown {method} option keys: {', '.join(unknown)}")
    if method != "c2p":
        return {k: _tuplify(v) for k, v in data.items()}
    options = {}
    coarse = data.pop("coarse", None)
    pyramid = data.pop("pyramid", None)
    if coarse is not None:
        options["coarse_config"] = _build(CoarseConfig, coarse, "c2p.coarse")
    if pyramid is not None:
        options["pyramid_config"] = _build(PyramidConfig, pyramid, "c2p.pyramid")
    options.update({k: _tuplify(v) for k, v in data.items()})
    return options


def _resolve_seed(flag_value, config_value) -> int:
    if flag_value is not None:
        return int(flag_value)
    if config_value is not None:
        return int(config_value)
    env = os.environ.get("C2P_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise InvalidConfig(f"C2P_SEED must be an integer, got {env!r}") from exc
    return 0


def _write_run_manifest(out_dir, command: str, argv, effective: dict, seeds: dict) -> None:
    from c2preg import __version__

    payload = _jsonable(effective)
    manifest = {
        "command": command,
        "argv": list(argv),
        "effective_config": payload,
        "config_hash": config_hash(payload),
        "seeds": _jsonable(seeds),
        "version": __version__,
    }
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(manifest, out / "run_manifest.json")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_generate(args, argv) -> int:
    cfg = _load_config(args.config).get("generate", {}) if args.config else {}
    n = args.n if args.n is not None else int(cfg.get("n", 10))
    seed = _resolve_seed(args.seed, cfg.get("seed"))
    params = _generator_params(cfg)

    manifest = synthgen.generate_dataset(n, params, args.out, seed=seed)
    _write_run_manifest(
        args.out,
        "generate",
        argv,
        {"n": n, "seed": seed, "params": params},
        {"master_seed": seed},
    )
    summary = manifest["summary"]
    print(f"wrote {n} samples to {args.out} (manifest.json)")
    print(f"mean target displacement [mm]: {summary['mean_gt_displacement_mm']:.4f}")
    print(f"mean visible ratio: {summary['mean_visible_ratio']:.4f}")
    return 0


def _transform_payload(transform) -> dict:
    return {
        "rotation": transform.rotation.tolist(),
        "translation": transform.translation.tolist(),
    }


def cmd_register(args, argv) -> int:
    cfg = _load_config(args.config).get("register", {}) if args.config else {}
    options = _method_options(cfg, args.method)
    source = read_cloud(args.src)
    target = read_cloud(args.tgt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_run_manifest(
        out,
        "register",
        argv,
        {"method": args.method, "src": str(args.src), "tgt": str(args.tgt),
         "options": {k: repr(v) for k, v in options.items()}},
        {},
    )

    transform = None
    start = time.perf_counter()
    try:
        if args.method == "c2p":
            result = c2p_register(source, target, **options)
            field = result.composed_field
            transform = result.tau
            diagnostics = dict(result.diagnostics)
        elif args.method == "icp":
            transform, trace = icp(source.points, target.points, **options)
            field = DisplacementField(transform.apply(source.points) - source.points)
            diagnostics = {"iterations": len(trace), "final_rms_mm": trace[-1]}
        elif args.method == "nicp":
            field, trace = nicp(source.points, target.points, **options)
            diagnostics = {"steps": len(trace), "final_energy": trace[-1]}
        else:
            field, trace = cpd_nonrigid(source.points, target.points, **options)
            diagnostics = {"iterations": len(trace), "final_objective": trace[-1]}
    except C2PRegError as exc:
        write_json(
            {"status": "failed", "error": type(exc).__name__, "message": str(exc)},
            out / "diagnostics.json",
        )
        print(f"registration failed: {exc}", file=sys.stderr)
        return 3

    wall = time.perf_counter() - start
    diagnostics.update(
        status="ok",
        method=args.method,
        n_source=len(source),
        n_target=len(target),
        wall_time_s=wall,
        chamfer_before_mm=chamfer_distance(source.points, target.points),
        chamfer_after_mm=chamfer_distance(
            source.points + field.vectors, target.points
        ),
    )
    write_field(field, out / "field.txt")
    if transform is not None:
        write_json(_transform_payload(transform), out / "transform.json")
    write_json(_jsonable(diagnostics), out / "diagnostics.json")
    print(f"{args.method}: {len(source)} -> {len(target)} points, "
          f"wall time {wall:.2f} s")
    print(f"chamfer [mm]: {diagnostics['chamfer_before_mm']:.4f} -> "
          f"{diagnostics['chamfer_after_mm']:.4f}")
    return 0


def cmd_bench(args, argv) -> int:
    cfg = _load_config(args.config).get("bench", {}) if args.config else {}
    dataset = Path(args.dataset)
    manifest = synthgen.load_manifest(dataset / "manifest.json")

    if args.methods is not None:
        methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    else:
        methods = list(cfg.get("methods", evaluation.METHOD_NAMES))
    jobs = args.jobs if args.jobs is not None else int(cfg.get("jobs", 1))
    reproducible = not args.wall_times
    out = Path(args.out) if args.out is not None else dataset / "bench"
    method_options = {
        m: _method_options(cfg, m) for m in methods if m in cfg and m in _METHOD_KEYS
    }

    _write_run_manifest(
        out,
        "bench",
        argv,
        {
            "dataset": str(dataset),
            "dataset_hash": config_hash(manifest),
            "methods": methods,
            "jobs": jobs,
            "reproducible": reproducible,
            "options": {m: repr(o) for m, o in method_options.items()},
        },
        {"dataset_master_seed": manifest["master_seed"]},
    )
    report = evaluation.run_benchmark(
        manifest,
        dataset,
        methods,
        out_dir=out,
        jobs=jobs,
        method_options=method_options,
        reproducible=reproducible,
    )
    print(evaluation.summary_table(report.aggregates), end="")

    focus = "c2p" if "c2p" in methods else methods[0]
    rows = [r for r in report.records if r["method"] == focus and r["status"] == "ok"]
    if len(rows) >= 20:
        trends = evaluation.trend_analysis(rows)
        write_json(trends, out / "trends.json")
        vis = trends["visible_vs_mde"]
        init = trends["init_rigid_vs_mde"]
        (out / "mde_vs_visible.svg").write_text(
            evaluation.scatter_svg(
                vis["x"], vis["y"], "visible ratio",
                f"{focus} MDE [mm]", "MDE vs visible ratio",
            )
        )
        (out / "mde_vs_init_rigid.svg").write_text(
            evaluation.scatter_svg(
                init["x"], init["y"], "initial rigid Chamfer [mm]",
                f"{focus} MDE [mm]", "MDE vs initial rigid error",
            )
        )
        print(f"trends ({focus}): rho(visible, MDE) = {vis['rho']:.3f}, "
              f"rho(init rigid, MDE) = {init['rho']:.3f}")
    else:
        print(f"trend analysis skipped: needs >= 20 usable {focus} samples, "
              f"got {len(rows)}")
    print(f"reports written to {out}")
    return 0


def cmd_plot(args, argv) -> int:
    records = evaluation.read_csv(args.csv)
    if not records:
        raise InvalidConfig(f"{args.csv} contains no records")
    methods = []
    for record in records:
        if record["method"] not in methods:
            methods.append(record["method"])
    focus = args.method or ("c2p" if "c2p" in methods else methods[0])
    rows = [r for r in records if r["method"] == focus and r["status"] == "ok"]
    if not rows:
        raise InvalidConfig(f"no usable rows for method {focus!r} in {args.csv}")

    out = Path(args.out) if args.out is not None else Path(args.csv).parent
    out.mkdir(parents=True, exist_ok=True)
    _write_run_manifest(
        out, "plot", argv, {"csv": str(args.csv), "method": focus}, {}
    )
    mde_values = [r["mde_mm"] for r in rows]
    (out / "mde_vs_visible.svg").write_text(
        evaluation.scatter_svg(
            [r["visible_ratio"] for r in rows], mde_values,
            "visible ratio", f"{focus} MDE [mm]", "MDE vs visible ratio",
        )
    )
    (out / "mde_vs_init_rigid.svg").write_text(
        evaluation.scatter_svg(
            [r["init_rigid_chamfer_mm"] for r in rows], mde_values,
            "initial rigid Chamfer [mm]", f"{focus} MDE [mm]",
            "MDE vs initial rigid error",
        )
    )
    print(f"plots written to {out} (method: {focus}, {len(rows)} samples)")
    return 0


# ---------------------------------------------------------------------------
# Parser and entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="c2preg",
        description="Complete-to-partial registration of middle-ear point clouds",
    )
    from c2preg import __version__

    parser.add_argument("--version", action="version", version=f"c2preg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic dataset")
    gen.add_argument("--n", type=int, default=None, help="number of samples")
    gen.add_argument("--seed", type=int, default=None, help="master seed")
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--config", default=None, help="TOML config file")
    gen.set_defaults(func=cmd_generate)

    reg = sub.add_parser("register", help="register one source/target pair")
    reg.add_argument("--method", required=True, choices=evaluation.METHOD_NAMES)
    reg.add_argument("--src", required=True, help="source cloud file")
    reg.add_argument("--tgt", required=True, help="target cloud file")
    reg.add_argument("--out", default=".", help="output directory")
    reg.add_argument("--config", default=None, help="TOML config file")
    reg.set_defaults(func=cmd_register)

    bench = sub.add_parser("bench", help="run the benchmark harness")
    bench.add_argument("--dataset", required=True, help="dataset directory")
    bench.add_argument("--methods", default=None, help="comma-separated methods")
    bench.add_argument("--out", default=None, help="report directory")
    bench.add_argument("--jobs", type=int, default=None, help="parallel samples")
    bench.add_argument(
        "--wall-times",
        action="store_true",
        help="record real wall times (breaks byte-identical reruns)",
    )
    bench.add_argument("--config", default=None, help="TOML config file")
    bench.set_defaults(func=cmd_bench)

    plot = sub.add_parser("plot", help="re-render scatter SVGs from a CSV")
    plot.add_argument("--csv", required=True, help="benchmark.csv path")
    plot.add_argument("--method", default=None, help="method to plot")
    plot.add_argument("--out", default=None, help="output directory")
    plot.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, argv)
    except (InvalidConfig, CloudFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except C2PRegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
