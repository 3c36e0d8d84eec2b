"""Generator tests: template, lattice warp, bone chain, partial sampling."""

import json

import numpy as np
import pytest

from c2preg.errors import InvalidConfig
from c2preg.geom import RigidTransform, rotation_about_axis
from c2preg.synthgen import (
    CANAL,
    GeneratorParams,
    MEMBRANE,
    NonRigidParams,
    RigidParams,
    SamplingParams,
    STAPES,
    TemplateConfig,
    build_template,
    chain_pivots,
    ffd_apply,
    generate_dataset,
    global_pose_of,
    load_manifest,
    load_sample,
    make_lattice,
    make_sample,
    sample_partial,
    simulate_nonrigid,
    simulate_rigid,
)

ZERO_NR = NonRigidParams(displacement_bounds=(0, 0, 0), scale_bounds=(1, 1), seed=3)
ZERO_RIGID = RigidParams(rotation_bounds=(0, 0, 0, 0), translation_bounds=(0, 0, 0, 0), seed=3)


# ---------------------------------------------------------------------------
# build_template
# ---------------------------------------------------------------------------

def test_template_shape_contract():
    t = build_template(seed=7)
    assert t.num_structures == 5
    assert t.is_complete()
    assert 2000 <= len(t) <= 5000
    assert 13.0 <= t.bounding_box_diagonal() <= 17.0
    # support point is the structure centroid
    for sid in range(5):
        centroid = t.points[t.structure_indices(sid)].mean(axis=0)
        assert np.allclose(t.support_points[sid], centroid, atol=1e-9)
    # at least 4 landmarks per structure
    assert np.all(np.bincount(t.landmark_labels, minlength=5) >= 4)


def test_template_deterministic():
    a = build_template(seed=11)
    b = build_template(seed=11)
    assert np.array_equal(a.points, b.points)
    assert np.array_equal(a.labels, b.labels)
    assert np.array_equal(a.landmark_points, b.landmark_points)
    c = build_template(seed=12)
    assert not np.array_equal(a.points, c.points)


def test_template_invalid_configs():
    with pytest.raises(InvalidConfig):
        TemplateConfig(stapes_points=0)
    with pytest.raises(InvalidConfig):
        TemplateConfig(malleus_points=49)
    with pytest.raises(InvalidConfig):
        TemplateConfig(scale=0.0)


# ---------------------------------------------------------------------------
# Trilinear lattice warp
# ---------------------------------------------------------------------------

def test_ffd_identity_lattice_is_identity():
    rng = np.random.default_rng(30)
    pts = rng.uniform(-2, 3, size=(200, 3))
    box_min, box_max, controls = make_lattice(pts, (4, 4, 4))
    out = ffd_apply(pts, box_min, box_max, controls)
    assert np.abs(out - pts).max() < 1e-12


def test_ffd_reproduces_affine_control_motion():
    rng = np.random.default_rng(31)
    pts = rng.uniform(0, 1, size=(300, 3))
    box_min, box_max, controls = make_lattice(pts, (4, 3, 5))
    mat = np.eye(3) + rng.normal(scale=0.2, size=(3, 3))
    shift = rng.normal(size=3)
    moved = controls @ mat.T + shift
    out = ffd_apply(pts, box_min, box_max, moved)
    assert np.abs(out - (pts @ mat.T + shift)).max() < 1e-9


def test_simulate_nonrigid_null_params_is_identity():
    t = build_template(seed=7)
    out = simulate_nonrigid(t, ZERO_NR)
    assert np.abs(out.points - t.points).max() < 1e-12
    assert np.abs(out.support_points - t.support_points).max() < 1e-12
    assert np.abs(out.landmark_points - t.landmark_points).max() < 1e-12


def test_simulate_nonrigid_respects_convexity_bound():
    # Per-point motion can never exceed the largest control-point motion,
    # because trilinear blending is a convex combination.
    t = build_template(seed=7)
    params = NonRigidParams(displacement_bounds=(0.8, 0.5, 0.4), scale_bounds=(0.9, 1.2), seed=5)
    out = simulate_nonrigid(t, params)
    moved = np.linalg.norm(out.points - t.points, axis=1)
    for sid in range(t.num_structures):
        idx = t.structure_indices(sid)
        pts = t.points[idx]
        lo = pts.min(axis=0)
        hi = pts.max(axis=0)
        extent = np.linalg.norm((hi - lo) * 1.1)
        # worst case: scale stretch of the half-diagonal plus all slice offsets
        bound = 0.2 * extent / 2 + np.linalg.norm([0.8, 0.5, 0.4]) * 3
        assert moved[idx].max() <= bound


def test_simulate_nonrigid_deterministic_and_labels_preserved():
    t = build_template(seed=7)
    p = NonRigidParams(seed=77)
    a = simulate_nonrigid(t, p)
    b = simulate_nonrigid(t, p)
    assert np.array_equal(a.points, b.points)
    assert np.array_equal(a.labels, t.labels)


# ---------------------------------------------------------------------------
# Bone chain
# ---------------------------------------------------------------------------

def test_simulate_rigid_null_params_is_identity():
    t = build_template(seed=7)
    out = simulate_rigid(t, ZERO_RIGID)
    assert np.abs(out.points - t.points).max() < 1e-12


def test_simulate_rigid_preserves_intra_structure_distances():
    t = build_template(seed=7)
    out = simulate_rigid(t, RigidParams(seed=9))
    rng = np.random.default_rng(9)
    for sid in range(t.num_structures):
        idx = t.structure_indices(sid)
        pick = rng.choice(idx, size=40, replace=False)
        before = np.linalg.norm(t.points[pick][:, None] - t.points[pick][None, :], axis=-1)
        after = np.linalg.norm(out.points[pick][:, None] - out.points[pick][None, :], axis=-1)
        assert np.abs(after - before).max() < 1e-9


def test_simulate_rigid_chain_locality():
    # Moving only the malleus bone must leave membrane and canal untouched
    # while the malleus and everything downstream of it moves.
    t = build_template(seed=7)
    params = RigidParams(
        rotation_bounds=(0, 0.4, 0, 0),
        translation_bounds=(0, 0, 0, 0),
        seed=15,
    )
    out = simulate_rigid(t, params)
    delta = np.linalg.norm(out.points - t.points, axis=1)
    assert delta[t.labels == MEMBRANE].max() < 1e-12
    assert delta[t.labels == CANAL].max() < 1e-12
    for sid in (1, 2, 3):
        assert delta[t.labels == sid].max() > 1e-3


def test_simulate_rigid_pivots_coincide_without_translation():
    t = build_template(seed=7)
    params = RigidParams(
        rotation_bounds=(0.3, 0.3, 0.3, 0.3),
        translation_bounds=(0, 0, 0, 0),
        seed=21,
    )
    pivots = chain_pivots(t)
    out = simulate_rigid(t, params)
    # Recover each structure's rigid motion from point correspondences and
    # check parent/child agreement at the shared pivot.
    from c2preg.geom import fit_rigid

    moves = {}
    for sid in range(4):
        idx = t.structure_indices(sid)
        moves[sid] = fit_rigid(t.points[idx], out.points[idx])
    for child, parent in ((1, 0), (2, 1), (3, 2)):
        p = pivots[child]
        child_pos = moves[child].apply(p[None, :])[0]
        parent_pos = moves[parent].apply(p[None, :])[0]
        assert np.linalg.norm(child_pos - parent_pos) < 1e-9


def test_global_pose_replay_matches_simulation():
    t = build_template(seed=7)
    params = RigidParams(
        rotation_bounds=(0, 0, 0, 0),
        translation_bounds=(0, 0, 0, 0),
        global_rotation_bound=0.3,
        global_translation_bound=1.5,
        seed=33,
    )
    out = simulate_rigid(t, params)
    pose = global_pose_of(t, params)
    assert np.abs(pose.apply(t.points) - out.points).max() < 1e-12
    assert pose.rotation_angle() > 0.01  # the draw actually moved something


# ---------------------------------------------------------------------------
# Partial sampling
# ---------------------------------------------------------------------------

def test_sample_partial_degenerate_params_keep_everything():
    t = build_template(seed=7)
    params = SamplingParams(
        visible_ratio_range=(1.0, 1.0),
        attenuation_rate=0.0,
        jitter=0.0,
        seed=40,
    )
    partial, ratio = sample_partial(t, params)
    assert ratio == 1.0
    assert np.array_equal(partial.points, t.points)
    assert np.array_equal(partial.labels, t.labels)


def test_sample_partial_hits_requested_ratio():
    t = build_template(seed=7)
    params = SamplingParams(
        visible_ratio_range=(0.5, 0.5),
        attenuation_rate=0.0,
        jitter=0.0,
        seed=41,
    )
    partial, ratio = sample_partial(t, params)
    assert 0.45 <= ratio <= 0.55
    assert len(partial) == round(0.5 * len(t))


def test_sample_partial_is_traceable_subset_without_jitter():
    t = build_template(seed=7)
    deformed = simulate_rigid(simulate_nonrigid(t, NonRigidParams(seed=1)), RigidParams(seed=2))
    params = SamplingParams(jitter=0.0, seed=42)
    partial, ratio = sample_partial(deformed, params)
    assert 0 < ratio <= 1
    # exact membership: every partial point is some deformed point
    view = {tuple(p) for p in deformed.points}
    assert all(tuple(p) in view for p in partial.points)


def test_sample_partial_thins_deep_structures_more():
    t = build_template(seed=7)
    kept_membrane = []
    kept_stapes = []
    counts = t.structure_counts()
    for i in range(100):
        partial, _ = sample_partial(t, SamplingParams(seed=1000 + i))
        pc = np.bincount(partial.labels, minlength=5)
        kept_membrane.append(pc[MEMBRANE] / counts[MEMBRANE])
        kept_stapes.append(pc[STAPES] / counts[STAPES])
    assert np.mean(kept_stapes) < np.mean(kept_membrane)


def test_sample_partial_deterministic():
    t = build_template(seed=7)
    a, ra = sample_partial(t, SamplingParams(seed=50))
    b, rb = sample_partial(t, SamplingParams(seed=50))
    assert ra == rb
    assert np.array_equal(a.points, b.points)


# ---------------------------------------------------------------------------
# Dataset assembly
# ---------------------------------------------------------------------------

def test_make_sample_invariants():
    t = build_template(seed=3)
    sample = make_sample(t, GeneratorParams(), {"nonrigid": 1, "rigid": 2, "sampling": 3})
    sample.validate()
    assert np.array_equal(sample.deformed.points, t.points + sample.gt_field.vectors)
    assert len(sample.gt_field) == len(t)
    assert sample.visible_ratio == len(sample.partial) / len(sample.deformed)


def test_generate_dataset_writes_consistent_tree(tmp_path):
    manifest = generate_dataset(3, GeneratorParams(), tmp_path / "d", seed=5)
    assert manifest["n"] == 3
    loaded = load_manifest(tmp_path / "d" / "manifest.json")
    assert loaded == json.loads(json.dumps(manifest))  # tuples become lists
    for i in range(3):
        s = load_sample(loaded, tmp_path / "d", i)
        assert len(s.gt_field) == len(s.template)
        # text round trip costs ~1e-7 mm, not more
        assert np.allclose(
            s.deformed.points, s.template.points + s.gt_field.vectors, atol=1e-6
        )
        assert abs(s.visible_ratio - len(s.partial) / len(s.deformed)) < 1e-12


def test_generate_dataset_is_byte_deterministic(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    generate_dataset(2, GeneratorParams(), a, seed=9)
    generate_dataset(2, GeneratorParams(), b, seed=9)
    files_a = sorted(p.name for p in a.iterdir())
    files_b = sorted(p.name for p in b.iterdir())
    assert files_a == files_b
    for name in files_a:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_generate_dataset_rejects_bad_n(tmp_path):
    with pytest.raises(InvalidConfig):
        generate_dataset(0, GeneratorParams(), tmp_path / "x", seed=1)


def test_default_calibration_smoke():
    # Cheap early-warning version of the dataset-level calibration check;
    # the full 200-sample band lives in the acceptance suite.
    t = build_template(seed=0)
    mags = [
        make_sample(t, GeneratorParams(), {"nonrigid": i, "rigid": 1000 + i, "sampling": 2000 + i})
        .gt_field.magnitudes().mean()
        for i in range(30)
    ]
    assert 0.9 <= float(np.mean(mags)) <= 2.2


def test_param_validation():
    with pytest.raises(InvalidConfig):
        NonRigidParams(resolution=(1, 4, 4))
    with pytest.raises(InvalidConfig):
        NonRigidParams(scale_bounds=(0.0, 1.0))
    with pytest.raises(InvalidConfig):
        RigidParams(rotation_bounds=(0.1, 0.1, 0.1, 2.0))
    with pytest.raises(InvalidConfig):
        SamplingParams(visible_ratio_range=(0.9, 0.3))
    with pytest.raises(InvalidConfig):
        SamplingParams(support_weight=1.5)
