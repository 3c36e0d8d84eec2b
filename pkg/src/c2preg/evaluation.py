"""Registration quality metrics, trend statistics, and the benchmark harness.

The metrics are the mean displacement error of an estimated field against
the generator's ground truth, the per-structure landmark error, and the
Chamfer distance already provided by the geometry core. The harness runs
any subset of the registration methods over a generated dataset and writes
per-sample CSV rows, an aggregate summary, and scatter data for the trend
plots.
"""

from __future__ import annotations

import csv
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats
from scipy.spatial import cKDTree

from . import synthgen
from .baselines import cpd_nonrigid, icp, nicp
from .errors import (
    BenchmarkAborted,
    C2PRegError,
    EmptyCloud,
    EmptyLandmarks,
    InvalidConfig,
    ShapeMismatch,
)
from .geom import DisplacementField, chamfer_distance
from .io import config_hash, write_json
from .ndp import c2p_register

METHOD_NAMES = ("icp", "nicp", "cpd", "c2p")

CSV_COLUMNS = (
    "sample_id",
    "method",
    "mde_mm",
    "chamfer_mm",
    "landmark_mm",
    "visible_ratio",
    "init_rigid_chamfer_mm",
    "wall_time_s",
    "status",
)


def _vectors(value) -> np.ndarray:
    if isinstance(value, DisplacementField):
        return value.vectors
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ShapeMismatch(f"expected an (n, 3) vector array, got {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def mde(estimated, ground_truth) -> float:
    """Mean Euclidean norm of the per-point field difference, in mm."""
    est = _vectors(estimated)
    gt = _vectors(ground_truth)
    if est.shape != gt.shape:
        raise ShapeMismatch(
            f"field lengths disagree: {est.shape[0]} vs {gt.shape[0]}"
        )
    if len(est) == 0:
        raise EmptyCloud("cannot average over an empty field")
    return float(np.linalg.norm(est - gt, axis=1).mean())


def landmark_error(
    source_points,
    source_labels,
    target_points,
    target_labels,
) -> tuple[float, list[int]]:
    """Per-structure minimum-distance landmark error, in mm.

    Every source landmark is scored by its distance to the closest target
    landmark carrying the same structure label; the returned value is the
    mean over all scored landmarks. Source structures with no target
    landmark cannot be scored; their ids come back in the second element
    so the caller can report them.
    """
    sp = np.asarray(source_points, dtype=np.float64)
    sl = np.asarray(source_labels, dtype=np.int64)
    tp = np.asarray(target_points, dtype=np.float64)
    tl = np.asarray(target_labels, dtype=np.int64)
    if len(sp) == 0 or len(tp) == 0:
        raise EmptyLandmarks("landmark sets must be non-empty")
    if len(sp) != len(sl) or len(tp) != len(tl):
        raise ShapeMismatch("landmark points and labels disagree in length")

    present = set(np.unique(tl).tolist())
    skipped = sorted(int(s) for s in np.unique(sl) if int(s) not in present)
    distances = []
    for sid in np.unique(sl):
        if int(sid) in skipped:
            continue
        src = sp[sl == sid]
        tgt = tp[tl == sid]
        d, _ = cKDTree(tgt).query(src)
        distances.append(np.atleast_1d(d))
    if not distances:
        raise EmptyLandmarks("no source landmark has a same-structure target")
    return float(np.concatenate(distances).mean()), skipped


def interpolate_field(field_vectors, support_points, query_points, k: int = 4) -> np.ndarray:
    """Inverse-distance interpolation of a displacement field.

    Reads the field at arbitrary positions by blending the vectors of the
    k nearest support points with 1/d weights; a query that coincides with
    a support point returns that point's vector exactly.
    """
    vectors = _vectors(field_vectors)
    support = np.asarray(support_points, dtype=np.float64)
    queries = np.asarray(query_points, dtype=np.float64)
    if len(vectors) != len(support):
        raise ShapeMismatch("field and support points disagree in length")
    if len(support) == 0:
        raise EmptyCloud("cannot interpolate over an empty support set")

    k_eff = min(int(k), len(support))
    if k_eff < 1:
        raise InvalidConfig("k must be at least 1")
    d, idx = cKDTree(support).query(queries, k=k_eff)
    d = np.atleast_2d(d)
    idx = np.atleast_2d(idx)
    if len(queries) == 1 and d.shape[0] != 1:
        d, idx = d.T, idx.T

    weights = 1.0 / np.maximum(d, 1e-300)
    weights /= weights.sum(axis=1, keepdims=True)
    out = (weights[:, :, None] * vectors[idx]).sum(axis=1)
    exact = d[:, 0] < 1e-12
    out[exact] = vectors[idx[exact, 0]]
    return out


# ---------------------------------------------------------------------------
# Trend analysis
# ---------------------------------------------------------------------------

def _spearman_block(x: np.ndarray, y: np.ndarray) -> dict:
    block = {"x": [float(v) for v in x], "y": [float(v) for v in y]}
    if np.all(x == x[0]) or np.all(y == y[0]):
        block.update(rho=float("nan"), pvalue=float("nan"), defined=False)
        return block
    rho, pvalue = stats.spearmanr(x, y)
    block.update(rho=float(rho), pvalue=float(pvalue), defined=True)
    return block


def trend_analysis(records) -> dict:
    """Spearman correlations of per-sample MDE against its drivers.

    Expects benchmark records (dicts) of a single method; failed records
    are dropped. Returns correlation blocks for visible ratio vs MDE and
    initial rigid error vs MDE, each with the raw scatter data. Constant
    series yield an undefined correlation flagged as such.
    """
    ok = [
        r
        for r in records
        if str(r.get("status", "ok")) == "ok" and np.isfinite(r["mde_mm"])
    ]
    if len(ok) < 20:
        raise InvalidConfig(
            f"trend analysis needs at least 20 usable samples, got {len(ok)}"
        )
    mde_arr = np.array([r["mde_mm"] for r in ok], dtype=np.float64)
    visible = np.array([r["visible_ratio"] for r in ok], dtype=np.float64)
    init_err = np.array([r["init_rigid_chamfer_mm"] for r in ok], dtype=np.float64)
    return {
        "n_samples": len(ok),
        "visible_vs_mde": _spearman_block(visible, mde_arr),
        "init_rigid_vs_mde": _spearman_block(init_err, mde_arr),
    }


# ---------------------------------------------------------------------------
# SVG scatter plots
# ---------------------------------------------------------------------------

def scatter_svg(x, y, xlabel: str, ylabel: str, title: str) -> str:
    """A self-contained SVG scatter plot as a string.

    Deterministic output: identical inputs yield identical bytes, which
    keeps plot files inside the reproducibility contract.
    """
    pairs = [
        (float(a), float(b))
        for a, b in zip(np.asarray(x, float), np.asarray(y, float))
        if np.isfinite(a) and np.isfinite(b)
    ]
    width, height = 640, 480
    left, right, top, bottom = 64, 20, 42, 52
    plot_w = width - left - right
    plot_h = height - top - bottom

    if pairs:
        xs = [p[0] for p in pairs]
        ys = [p[1] for p in pairs]
        x_lo, x_hi = min(xs), max(xs)
        y_lo, y_hi = min(ys), max(ys)
    else:
        x_lo = x_hi = y_lo = y_hi = 0.0
    if x_hi - x_lo < 1e-12:
        x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
    if y_hi - y_lo < 1e-12:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
    x_pad = 0.05 * (x_hi - x_lo)
    y_pad = 0.05 * (y_hi - y_lo)
    x_lo, x_hi = x_lo - x_pad, x_hi + x_pad
    y_lo, y_hi = y_lo - y_pad, y_hi + y_pad

    def sx(v: float) -> float:
        return left + (v - x_lo) / (x_hi - x_lo) * plot_w

    def sy(v: float) -> float:
        return top + (1.0 - (v - y_lo) / (y_hi - y_lo)) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="24" text-anchor="middle" '
        f'font-family="sans-serif" font-size="15">{title}</text>',
    ]
    axis = 'stroke="black" stroke-width="1"'
    parts.append(
        f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" '
        f'y2="{top + plot_h}" {axis}/>'
    )
    parts.append(f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" {axis}/>')
    for tick in np.linspace(x_lo, x_hi, 5):
        px = sx(float(tick))
        parts.append(
            f'<line x1="{px:.2f}" y1="{top + plot_h}" x2="{px:.2f}" '
            f'y2="{top + plot_h + 5}" {axis}/>'
        )
        parts.append(
            f'<text x="{px:.2f}" y="{top + plot_h + 20}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="11">{tick:.3g}</text>'
        )
    for tick in np.linspace(y_lo, y_hi, 5):
        py = sy(float(tick))
        parts.append(
            f'<line x1="{left - 5}" y1="{py:.2f}" x2="{left}" y2="{py:.2f}" {axis}/>'
        )
        parts.append(
            f'<text x="{left - 9}" y="{py + 4:.2f}" text-anchor="end" '
            f'font-family="sans-serif" font-size="11">{tick:.3g}</text>'
        )
    parts.append(
        f'<text x="{left + plot_w / 2:.1f}" y="{height - 12}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="13">{xlabel}</text>'
    )
    parts.append(
        f'<text x="18" y="{top + plot_h / 2:.1f}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="13" '
        f'transform="rotate(-90 18 {top + plot_h / 2:.1f})">{ylabel}</text>'
    )
    for px, py in pairs:
        parts.append(
            f'<circle cx="{sx(px):.2f}" cy="{sy(py):.2f}" r="3" '
            f'fill="#1f77b4" fill-opacity="0.7"/>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# Benchmark harness
# ---------------------------------------------------------------------------

@dataclass
class RunReport:
    """Per-sample benchmark records plus their aggregate means.

    The aggregates are redundant with the records by construction;
    `recompute_aggregates` re-derives them so consumers can audit the
    invariant.
    """

    records: list
    aggregates: dict
    provenance: dict = field(default_factory=dict)

    def recompute_aggregates(self) -> dict:
        return _aggregate(self.records)


def _aggregate(records) -> dict:
    methods = []
    for record in records:
        if record["method"] not in methods:
            methods.append(record["method"])
    out = {}
    for method in methods:
        rows = [r for r in records if r["method"] == method]
        ok = [r for r in rows if r["status"] == "ok"]
        entry = {"n_ok": len(ok), "n_failed": len(rows) - len(ok)}
        for key in ("mde_mm", "chamfer_mm", "landmark_mm", "wall_time_s"):
            values = [r[key] for r in ok if np.isfinite(r[key])]
            entry[key] = float(np.mean(values)) if values else float("nan")
        out[method] = entry
    return out


def _run_method(sample: synthgen.SyntheticSample, method: str, options: dict):
    """One registration; returns (estimated vectors, initial rigid error)."""
    src = sample.template
    tgt = sample.partial
    if method == "icp":
        transform, _ = icp(src.points, tgt.points, **options)
        vectors = transform.apply(src.points) - src.points
        init_chamfer = chamfer_distance(src.points, tgt.points)
    elif method == "nicp":
        result, _ = nicp(src.points, tgt.points, **options)
        vectors = result.vectors
        init_chamfer = chamfer_distance(src.points, tgt.points)
    elif method == "cpd":
        result, _ = cpd_nonrigid(src.points, tgt.points, **options)
        vectors = result.vectors
        init_chamfer = chamfer_distance(src.points, tgt.points)
    elif method == "c2p":
        result = c2p_register(src, tgt, **options)
        vectors = result.composed_field.vectors
        init_chamfer = float(result.diagnostics["init_rigid_chamfer_mm"])
    else:
        raise InvalidConfig(
            f"unknown method {method!r}; valid: {', '.join(METHOD_NAMES)}"
        )
    return vectors, init_chamfer


def _bench_sample(manifest, root, index, methods, method_options, reproducible):
    sample = synthgen.load_sample(manifest, root, index)
    sample_id = int(manifest["samples"][index]["id"])
    records = []
    for method in methods:
        record = {
            "sample_id": sample_id,
            "method": method,
            "mde_mm": float("nan"),
            "chamfer_mm": float("nan"),
            "landmark_mm": float("nan"),
            "visible_ratio": float(sample.visible_ratio),
            "init_rigid_chamfer_mm": float("nan"),
            "wall_time_s": 0.0,
            "status": "ok",
        }
        start = time.perf_counter()
        try:
            vectors, init_chamfer = _run_method(
                sample, method, method_options.get(method, {})
            )
        except C2PRegError as exc:
            record["status"] = f"failed:{type(exc).__name__}"
            if not reproducible:
                record["wall_time_s"] = time.perf_counter() - start
            records.append(record)
            continue
        if not reproducible:
            record["wall_time_s"] = time.perf_counter() - start

        record["init_rigid_chamfer_mm"] = float(init_chamfer)
        record["mde_mm"] = mde(vectors, sample.gt_field)
        record["chamfer_mm"] = chamfer_distance(
            sample.template.points + vectors, sample.partial.points
        )
        try:
            moved = sample.template.landmark_points + interpolate_field(
                vectors, sample.template.points, sample.template.landmark_points
            )
            value, _ = landmark_error(
                moved,
                sample.template.landmark_labels,
                sample.partial.landmark_points,
                sample.partial.landmark_labels,
            )
            record["landmark_mm"] = value
        except EmptyLandmarks:
            pass
        records.append(record)
    return records


def _bench_task(args):
    return _bench_sample(*args)


def _format_value(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(records, path) -> None:
    """Write benchmark records; float cells round-trip exactly via repr."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for record in records:
            writer.writerow([_format_value(record[c]) for c in CSV_COLUMNS])


def read_csv(path) -> list:
    """Read benchmark records back with floats restored."""
    records = []
    with open(path, newline="") as handle:
        for row in csv.DictReader(handle):
            record = dict(row)
            record["sample_id"] = int(record["sample_id"])
            for key in CSV_COLUMNS[2:-1]:
                record[key] = float(record[key])
            records.append(record)
    return records


def summary_table(aggregates: dict) -> str:
    header = f"{'method':<8}{'n_ok':>6}{'n_failed':>10}{'M_MDE[mm]':>12}" \
             f"{'M_CD[mm]':>12}{'M_L[mm]':>12}{'wall[s]':>10}"
    lines = [header, "-" * len(header)]
    for method, entry in aggregates.items():
        lines.append(
            f"{method:<8}{entry['n_ok']:>6}{entry['n_failed']:>10}"
            f"{entry['mde_mm']:>12.4f}{entry['chamfer_mm']:>12.4f}"
            f"{entry['landmark_mm']:>12.4f}{entry['wall_time_s']:>10.3f}"
        )
    return "\n".join(lines) + "\n"


def run_benchmark(
    manifest: dict,
    root,
    methods,
    out_dir=None,
    jobs: int = 1,
    method_options: dict | None = None,
    reproducible: bool = False,
) -> RunReport:
    """Run registration methods over a generated dataset.

    Writes benchmark.csv, summary.txt, and summary.json under out_dir when
    given. Per-sample failures are recorded as rows, not raised; a failure
    fraction above 20% aborts after the CSV is written. With reproducible
    set, wall times are written as zero so reruns are byte-identical.
    """
    methods = list(methods)
    if not methods:
        raise InvalidConfig("methods list must not be empty")
    for method in methods:
        if method not in METHOD_NAMES:
            raise InvalidConfig(
                f"unknown method {method!r}; valid: {', '.join(METHOD_NAMES)}"
            )
    if len(set(methods)) != len(methods):
        raise InvalidConfig("methods list contains duplicates")
    if jobs < 1:
        raise InvalidConfig("jobs must be at least 1")
    options = dict(method_options or {})
    for name in options:
        if name not in METHOD_NAMES:
            raise InvalidConfig(f"options given for unknown method {name!r}")

    n = int(manifest["n"])
    root = Path(root)
    tasks = [
        (manifest, root, i, methods, options, reproducible) for i in range(n)
    ]
    if jobs > 1 and n > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_sample = list(pool.map(_bench_task, tasks, chunksize=1))
    else:
        per_sample = [_bench_task(task) for task in tasks]

    records = [record for sample_records in per_sample for record in sample_records]
    aggregates = _aggregate(records)
    from c2preg import __version__

    provenance = {
        "dataset_hash": config_hash(manifest),
        "methods": methods,
        "jobs": jobs,
        "reproducible": reproducible,
        "method_options": {k: repr(v) for k, v in options.items()},
        "version": __version__,
    }
    report = RunReport(records=records, aggregates=aggregates, provenance=provenance)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(records, out / "benchmark.csv")
        (out / "summary.txt").write_text(summary_table(aggregates))
        write_json({"aggregates": aggregates, "provenance": provenance},
                   out / "summary.json")

    failed = sum(1 for r in records if r["status"] != "ok")
    if failed > 0.2 * len(records):
        raise BenchmarkAborted(
            f"{failed}/{len(records)} registrations failed (over 20%)"
        )
    return report
