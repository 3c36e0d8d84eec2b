"""Metric oracles, trend statistics, and benchmark harness tests."""

import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest

import c2preg.evaluation as ev
import c2preg.synthgen as sg
from c2preg.errors import (
    BenchmarkAborted,
    EmptyCloud,
    EmptyLandmarks,
    InvalidConfig,
    RegistrationFailed,
    ShapeMismatch,
)
from c2preg.geom import DisplacementField
from c2preg.ndp import PyramidConfig


def oracle_mde(est, gt):
    """Scalar-loop mean displacement error, no vectorized shortcuts."""
    total = 0.0
    for e, g in zip(est, gt):
        acc = 0.0
        for a, b in zip(e, g):
            acc += (float(a) - float(b)) ** 2
        total += math.sqrt(acc)
    return total / len(est)


def oracle_landmark(sp, sl, tp, tl):
    """Double-loop per-structure minimum landmark error."""
    dists = []
    for p, lab in zip(sp, sl):
        best = None
        for q, qlab in zip(tp, tl):
            if qlab != lab:
                continue
            d = math.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(p, q)))
            if best is None or d < best:
                best = d
        if best is not None:
            dists.append(best)
    return sum(dists) / len(dists)


# ---------------------------------------------------------------------------
# MDE
# ---------------------------------------------------------------------------

def test_mde_identity_is_zero():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(40, 3))
    assert ev.mde(f, f.copy()) == 0.0


def test_mde_constant_offset():
    gt = np.zeros((25, 3))
    est = gt + np.array([1.0, 0.0, 0.0])
    assert ev.mde(est, gt) == 1.0


def test_mde_matches_bruteforce_oracle():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n = int(rng.integers(1, 120))
        est = rng.normal(scale=3.0, size=(n, 3))
        gt = rng.normal(scale=3.0, size=(n, 3))
        assert abs(ev.mde(est, gt) - oracle_mde(est, gt)) < 1e-12


def test_mde_accepts_displacement_fields():
    rng = np.random.default_rng(2)
    est = DisplacementField(rng.normal(size=(15, 3)))
    gt = DisplacementField(rng.normal(size=(15, 3)))
    assert ev.mde(est, gt) == ev.mde(est.vectors, gt.vectors)


def test_mde_validates_shapes():
    with pytest.raises(ShapeMismatch):
        ev.mde(np.zeros((4, 3)), np.zeros((5, 3)))
    with pytest.raises(EmptyCloud):
        ev.mde(np.zeros((0, 3)), np.zeros((0, 3)))


# ---------------------------------------------------------------------------
# Landmark error
# ---------------------------------------------------------------------------

def test_landmark_error_coincident_sets():
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(12, 3))
    labels = rng.integers(0, 3, size=12)
    value, skipped = ev.landmark_error(pts, labels, pts.copy(), labels.copy())
    assert value == 0.0
    assert skipped == []


def test_landmark_error_singleton_pair():
    src = np.array([[0.0, 0.0, 0.0]])
    tgt = np.array([[-2.0, 0.0, 0.0]])
    value, skipped = ev.landmark_error(src, [4], tgt, [4])
    assert value == 2.0
    assert skipped == []


def test_landmark_error_matches_double_loop_oracle():
    rng = np.random.default_rng(4)
    for _ in range(50):
        ns = int(rng.integers(2, 20))
        nt = int(rng.integers(2, 25))
        sp = rng.normal(scale=4.0, size=(ns, 3))
        tp = rng.normal(scale=4.0, size=(nt, 3))
        sl = rng.integers(0, 4, size=ns)
        tl = rng.integers(0, 4, size=nt)
        if not set(sl.tolist()) & set(tl.tolist()):
            continue
        value, _ = ev.landmark_error(sp, sl, tp, tl)
        assert abs(value - oracle_landmark(sp, sl, tp, tl)) < 1e-12


def test_landmark_error_reports_skipped_structures():
    src = np.zeros((3, 3))
    tgt = np.ones((2, 3))
    value, skipped = ev.landmark_error(src, [0, 1, 5], tgt, [1, 1])
    assert skipped == [0, 5]
    assert value == pytest.approx(math.sqrt(3.0))


def test_landmark_error_empty_cases():
    with pytest.raises(EmptyLandmarks):
        ev.landmark_error(np.zeros((0, 3)), [], np.ones((2, 3)), [0, 0])
    with pytest.raises(EmptyLandmarks):
        ev.landmark_error(np.zeros((2, 3)), [0, 0], np.ones((2, 3)), [1, 1])
    with pytest.raises(ShapeMismatch):
        ev.landmark_error(np.zeros((2, 3)), [0], np.ones((2, 3)), [1, 1])


# ---------------------------------------------------------------------------
# Field interpolation
# ---------------------------------------------------------------------------

def test_interpolate_field_exact_at_support_points():
    rng = np.random.default_rng(5)
    support = rng.normal(size=(30, 3))
    vectors = rng.normal(size=(30, 3))
    out = ev.interpolate_field(vectors, support, support[[7, 2, 19]])
    assert np.array_equal(out, vectors[[7, 2, 19]])


def test_interpolate_field_constant_field():
    rng = np.random.default_rng(6)
    support = rng.normal(size=(40, 3))
    vectors = np.tile([0.5, -1.0, 2.0], (40, 1))
    queries = rng.normal(size=(10, 3))
    out = ev.interpolate_field(vectors, support, queries)
    assert np.abs(out - np.array([0.5, -1.0, 2.0])).max() < 1e-12


def test_interpolate_field_matches_hand_weights():
    support = np.array([[0.0, 0.0, 0.0], [3.0, 0.0, 0.0]])
    vectors = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    query = np.array([[1.0, 0.0, 0.0]])  # distances 1 and 2
    out = ev.interpolate_field(vectors, support, query, k=2)
    expected = (1.0 / 1.0 * vectors[0] + 1.0 / 2.0 * vectors[1]) / 1.5
    assert np.abs(out[0] - expected).max() < 1e-12


def test_interpolate_field_validates_inputs():
    with pytest.raises(ShapeMismatch):
        ev.interpolate_field(np.zeros((3, 3)), np.zeros((4, 3)), np.zeros((1, 3)))
    with pytest.raises(EmptyCloud):
        ev.interpolate_field(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((1, 3)))


# ---------------------------------------------------------------------------
# Trend analysis
# ---------------------------------------------------------------------------

def make_records(mde_values, visible, init_err, status="ok"):
    return [
        {
            "mde_mm": m,
            "visible_ratio": v,
            "init_rigid_chamfer_mm": e,
            "status": status,
        }
        for m, v, e in zip(mde_values, visible, init_err)
    ]


def test_trend_perfect_monotone_gives_minus_one():
    visible = np.linspace(0.3, 0.9, 30)
    mde_values = 5.0 - 4.0 * visible  # strictly decreasing in visibility
    records = make_records(mde_values, visible, np.linspace(0.1, 1.0, 30))
    out = ev.trend_analysis(records)
    assert out["visible_vs_mde"]["rho"] == -1.0
    assert out["visible_vs_mde"]["defined"]
    assert out["init_rigid_vs_mde"]["rho"] == -1.0


def test_trend_independent_random_is_near_zero():
    rng = np.random.default_rng(7)
    records = make_records(
        rng.normal(size=1000), rng.uniform(size=1000), rng.uniform(size=1000)
    )
    out = ev.trend_analysis(records)
    assert abs(out["visible_vs_mde"]["rho"]) < 0.1
    assert abs(out["init_rigid_vs_mde"]["rho"]) < 0.1


def test_trend_constant_series_reported_undefined():
    records = make_records(
        np.ones(25), np.linspace(0.3, 0.9, 25), np.linspace(0.1, 1.0, 25)
    )
    out = ev.trend_analysis(records)
    assert not out["visible_vs_mde"]["defined"]
    assert math.isnan(out["visible_vs_mde"]["rho"])


def test_trend_drops_failed_records_and_enforces_minimum():
    records = make_records(np.ones(30), np.ones(30), np.ones(30), status="failed:X")
    with pytest.raises(InvalidConfig):
        ev.trend_analysis(records)
    ok = make_records(
        np.linspace(1, 2, 19), np.linspace(0.3, 0.9, 19), np.ones(19)
    )
    with pytest.raises(InvalidConfig):
        ev.trend_analysis(ok)


# ---------------------------------------------------------------------------
# SVG scatter
# ---------------------------------------------------------------------------

def test_scatter_svg_is_valid_and_deterministic():
    rng = np.random.default_rng(8)
    x = rng.uniform(size=25)
    y = rng.normal(size=25)
    y[3] = np.nan  # dropped point
    first = ev.scatter_svg(x, y, "visible ratio", "MDE [mm]", "trend")
    second = ev.scatter_svg(x, y, "visible ratio", "MDE [mm]", "trend")
    assert first == second
    root = ET.fromstring(first)
    circles = [e for e in root.iter() if e.tag.endswith("circle")]
    assert len(circles) == 24


def test_scatter_svg_handles_degenerate_ranges():
    out = ev.scatter_svg([0.5, 0.5], [1.0, 1.0], "x", "y", "flat")
    ET.fromstring(out)


# ---------------------------------------------------------------------------
# Benchmark harness
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("dataset")
    params = sg.GeneratorParams(
        template=sg.TemplateConfig(
            membrane_points=60,
            malleus_points=50,
            incus_points=50,
            stapes_points=50,
            canal_points=70,
        )
    )
    manifest = sg.generate_dataset(3, params, out, seed=3)
    return manifest, out


def assert_same_aggregates(a, b):
    assert a.keys() == b.keys()
    for method in a:
        for key in a[method]:
            x, y = a[method][key], b[method][key]
            if isinstance(x, float) and math.isnan(x):
                assert math.isnan(y)
            else:
                assert x == y


def test_run_benchmark_records_and_aggregates(tiny_dataset, tmp_path):
    manifest, root = tiny_dataset
    out = tmp_path / "bench"
    report = ev.run_benchmark(
        manifest, root, ["icp", "cpd"], out_dir=out, reproducible=True
    )
    assert len(report.records) == 6
    assert all(r["status"] == "ok" for r in report.records)
    assert all(r["wall_time_s"] == 0.0 for r in report.records)
    assert_same_aggregates(report.aggregates, report.recompute_aggregates())

    # Aggregates must be recomputable exactly from the CSV rows.
    parsed = ev.read_csv(out / "benchmark.csv")
    assert_same_aggregates(report.aggregates, ev._aggregate(parsed))
    assert (out / "summary.txt").exists()
    assert (out / "summary.json").exists()


def test_run_benchmark_rerun_is_byte_identical(tiny_dataset, tmp_path):
    manifest, root = tiny_dataset
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        ev.run_benchmark(manifest, root, ["icp"], out_dir=out, reproducible=True)
        outs.append((out / "benchmark.csv").read_bytes())
    assert outs[0] == outs[1]


def test_run_benchmark_parallel_matches_serial(tiny_dataset, tmp_path):
    manifest, root = tiny_dataset
    serial = ev.run_benchmark(manifest, root, ["icp"], reproducible=True)
    parallel = ev.run_benchmark(manifest, root, ["icp"], jobs=2, reproducible=True)
    assert serial.records == parallel.records


def test_run_benchmark_c2p_row(tiny_dataset):
    manifest, root = tiny_dataset
    options = {"c2p": {"pyramid_config": PyramidConfig(levels=2, max_iterations=10)}}
    report = ev.run_benchmark(
        manifest, root, ["c2p"], method_options=options, reproducible=True
    )
    for record in report.records:
        assert record["status"] == "ok"
        assert np.isfinite(record["mde_mm"])
        assert np.isfinite(record["landmark_mm"])
        assert np.isfinite(record["init_rigid_chamfer_mm"])


def test_run_benchmark_validates_inputs(tiny_dataset):
    manifest, root = tiny_dataset
    with pytest.raises(InvalidConfig):
        ev.run_benchmark(manifest, root, [])
    with pytest.raises(InvalidConfig):
        ev.run_benchmark(manifest, root, ["warp"])
    with pytest.raises(InvalidConfig):
        ev.run_benchmark(manifest, root, ["icp", "icp"])
    with pytest.raises(InvalidConfig):
        ev.run_benchmark(manifest, root, ["icp"], jobs=0)
    with pytest.raises(InvalidConfig):
        ev.run_benchmark(manifest, root, ["icp"], method_options={"warp": {}})


def test_run_benchmark_aborts_on_failure_rate(tiny_dataset, tmp_path, monkeypatch):
    manifest, root = tiny_dataset

    def broken_icp(*args, **kwargs):
        raise RegistrationFailed("forced failure")

    monkeypatch.setattr(ev, "icp", broken_icp)
    out = tmp_path / "bench"
    with pytest.raises(BenchmarkAborted):
        ev.run_benchmark(manifest, root, ["icp"], out_dir=out, reproducible=True)
    # Failed rows are still recorded before the abort.
    parsed = ev.read_csv(out / "benchmark.csv")
    assert len(parsed) == 3
    assert all(r["status"] == "failed:RegistrationFailed" for r in parsed)
