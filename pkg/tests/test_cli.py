"""End-to-end tests of the command-line interface."""

import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

import c2preg.cli as cli
import c2preg.synthgen as sg
from c2preg.geom import RigidTransform
from c2preg.io import read_cloud, read_field, write_cloud

TINY_TEMPLATE_TOML = """
[generate]
n = 2

[generate.template]
membrane_points = 60
malleus_points = 50
incus_points = 50
stapes_points = 50
canal_points = 70
"""


@pytest.fixture()
def tiny_config(tmp_path):
    path = tmp_path / "config.toml"
    path.write_text(TINY_TEMPLATE_TOML)
    return path


@pytest.fixture(scope="module")
def cloud_pair(tmp_path_factory):
    root = tmp_path_factory.mktemp("clouds")
    template = sg.build_template(
        sg.TemplateConfig(
            membrane_points=60,
            malleus_points=50,
            incus_points=50,
            stapes_points=50,
            canal_points=70,
        ),
        seed=7,
    )
    shifted = template.replace_points(template.points + np.array([0.4, -0.2, 0.1]))
    src = root / "src.txt"
    tgt = root / "tgt.txt"
    write_cloud(template, src)
    write_cloud(shifted, tgt)
    return src, tgt


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def test_generate_writes_dataset_and_manifest(tmp_path, tiny_config, capsys):
    out = tmp_path / "data"
    code = cli.main(
        ["generate", "--config", str(tiny_config), "--seed", "5", "--out", str(out)]
    )
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["n"] == 2
    assert manifest["master_seed"] == 5
    run = json.loads((out / "run_manifest.json").read_text())
    assert run["command"] == "generate"
    assert run["seeds"] == {"master_seed": 5}
    printed = capsys.readouterr().out
    assert "mean target displacement" in printed
    assert "mean visible ratio" in printed


def test_generate_is_deterministic(tmp_path, tiny_config):
    blobs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli.main(
            ["generate", "--config", str(tiny_config), "--seed", "9",
             "--out", str(out)]
        ) == 0
        blobs.append(
            (out / "manifest.json").read_bytes()
            + (out / "partial_0000.txt").read_bytes()
        )
    assert blobs[0] == blobs[1]


def test_generate_flag_overrides_config(tmp_path, tiny_config):
    out = tmp_path / "data"
    assert cli.main(
        ["generate", "--config", str(tiny_config), "--n", "3", "--seed", "1",
         "--out", str(out)]
    ) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["n"] == 3


def test_generate_requires_out(tiny_config):
    with pytest.raises(SystemExit) as excinfo:
        cli.main(["generate", "--config", str(tiny_config)])
    assert excinfo.value.code == 2


def test_generate_seed_env_fallback(tmp_path, tiny_config, monkeypatch):
    monkeypatch.setenv("C2P_SEED", "77")
    out = tmp_path / "data"
    assert cli.main(
        ["generate", "--config", str(tiny_config), "--out", str(out)]
    ) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["master_seed"] == 77


def test_generate_rejects_unknown_config_keys(tmp_path):
    config = tmp_path / "config.toml"
    config.write_text("[generate.template]\nwall_points = 10\n")
    code = cli.main(
        ["generate", "--config", str(config), "--out", str(tmp_path / "d")]
    )
    assert code == 2


# ---------------------------------------------------------------------------
# register
# ---------------------------------------------------------------------------

def test_register_icp_writes_artifacts(cloud_pair, tmp_path, capsys):
    src, tgt = cloud_pair
    out = tmp_path / "reg"
    code = cli.main(
        ["register", "--method", "icp", "--src", str(src), "--tgt", str(tgt),
         "--out", str(out)]
    )
    assert code == 0
    field = read_field(out / "field.txt")
    assert len(field) == len(read_cloud(src))
    transform = json.loads((out / "transform.json").read_text())
    assert np.asarray(transform["rotation"]).shape == (3, 3)
    diagnostics = json.loads((out / "diagnostics.json").read_text())
    assert diagnostics["status"] == "ok"
    assert diagnostics["chamfer_after_mm"] < diagnostics["chamfer_before_mm"]
    assert "wall time" in capsys.readouterr().out


def test_register_c2p_writes_field_per_source_point(cloud_pair, tmp_path):
    src, tgt = cloud_pair
    config = tmp_path / "config.toml"
    config.write_text("[register.c2p.pyramid]\nlevels = 2\nmax_iterations = 10\n")
    out = tmp_path / "reg"
    code = cli.main(
        ["register", "--method", "c2p", "--src", str(src), "--tgt", str(tgt),
         "--out", str(out), "--config", str(config)]
    )
    assert code == 0
    assert len(read_field(out / "field.txt")) == len(read_cloud(src))
    assert (out / "transform.json").exists()


def test_register_unknown_method_lists_choices(cloud_pair, capsys):
    src, tgt = cloud_pair
    with pytest.raises(SystemExit) as excinfo:
        cli.main(["register", "--method", "warp", "--src", str(src),
                  "--tgt", str(tgt)])
    assert excinfo.value.code == 2
    assert "icp" in capsys.readouterr().err


def test_register_missing_file_is_usage_error(cloud_pair, tmp_path):
    src, _ = cloud_pair
    code = cli.main(
        ["register", "--method", "icp", "--src", str(src),
         "--tgt", str(tmp_path / "absent.txt"), "--out", str(tmp_path / "o")]
    )
    assert code == 2


def test_register_failure_exits_3_with_diagnostics(tmp_path):
    cloud = sg.build_template(seed=1)
    tiny = type(cloud)(
        points=cloud.points[:2],
        labels=cloud.labels[:2],
        structure_names=cloud.structure_names,
        support_points=cloud.support_points,
        landmark_labels=np.array([], dtype=np.int64),
        landmark_points=np.zeros((0, 3)),
    )
    src = tmp_path / "src.txt"
    tgt = tmp_path / "tgt.txt"
    write_cloud(tiny, src)
    write_cloud(tiny, tgt)
    out = tmp_path / "reg"
    code = cli.main(
        ["register", "--method", "icp", "--src", str(src), "--tgt", str(tgt),
         "--out", str(out)]
    )
    assert code == 3
    diagnostics = json.loads((out / "diagnostics.json").read_text())
    assert diagnostics["status"] == "failed"
    assert diagnostics["error"]


# ---------------------------------------------------------------------------
# bench and plot
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def cli_dataset(tmp_path_factory):
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
    sg.generate_dataset(3, params, out, seed=3)
    return out


def test_bench_writes_reports_and_is_deterministic(cli_dataset, tmp_path, capsys):
    csvs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code = cli.main(
            ["bench", "--dataset", str(cli_dataset), "--methods", "icp,cpd",
             "--out", str(out)]
        )
        assert code == 0
        csvs.append((out / "benchmark.csv").read_bytes())
    assert csvs[0] == csvs[1]
    printed = capsys.readouterr().out
    assert "method" in printed and "icp" in printed and "cpd" in printed
    assert "trend analysis skipped" in printed


def test_bench_rejects_unknown_method(cli_dataset, tmp_path):
    code = cli.main(
        ["bench", "--dataset", str(cli_dataset), "--methods", "warp",
         "--out", str(tmp_path / "b")]
    )
    assert code == 2


def test_plot_rerenders_from_csv(cli_dataset, tmp_path):
    bench_out = tmp_path / "bench"
    assert cli.main(
        ["bench", "--dataset", str(cli_dataset), "--methods", "icp",
         "--out", str(bench_out)]
    ) == 0
    plot_out = tmp_path / "plots"
    code = cli.main(
        ["plot", "--csv", str(bench_out / "benchmark.csv"), "--out", str(plot_out)]
    )
    assert code == 0
    for name in ("mde_vs_visible.svg", "mde_vs_init_rigid.svg"):
        ET.fromstring((plot_out / name).read_text())


def test_plot_missing_csv_is_usage_error(tmp_path):
    code = cli.main(["plot", "--csv", str(tmp_path / "absent.csv")])
    assert code == 2
