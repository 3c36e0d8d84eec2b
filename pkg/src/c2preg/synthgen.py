"""Synthetic middle-ear data: template, deformations, partial sampling.

The generator replaces a scan-based modeling pipeline with procedural
geometry. A fixed five-structure template (tympanic membrane, malleus,
incus, stapes, canal wall) is deformed in two stages: per-structure
trilinear lattice warps (shape variation) followed by an articulated
chain of rigid bone motions (pose variation). A partial, jittered subset
of the deformed cloud then plays the role of the in-vivo measurement.

Every operation is deterministic given the seed recorded in its params.
All lengths are millimeters.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .errors import EmptyResult, InvalidConfig
from .geom import DisplacementField, LabeledCloud, RigidTransform, compose, rotation_about_axis
from .io import read_cloud, read_field, read_json, write_cloud, write_field, write_json

# Structure ids are fixed by build_template and relied on by the armature
# chain and the partial sampler.
MEMBRANE, MALLEUS, INCUS, STAPES, CANAL = 0, 1, 2, 3, 4
STRUCTURE_NAMES = ("tympanic_membrane", "malleus", "incus", "stapes", "canal_wall")
CHAIN_PARENTS = {MEMBRANE: None, MALLEUS: MEMBRANE, INCUS: MALLEUS, STAPES: INCUS}
POSTERIOR_STRUCTURES = (INCUS, STAPES)


# ---------------------------------------------------------------------------
# Parameter records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TemplateConfig:
    """Point budgets and global scale of the procedural template."""

    membrane_points: int = 600
    malleus_points: int = 350
    incus_points: int = 350
    stapes_points: int = 300
    canal_points: int = 700
    scale: float = 1.0
    roughness: float = 0.02  # mm of per-coordinate surface noise

    def counts(self) -> tuple[int, ...]:
        return (
            self.membrane_points,
            self.malleus_points,
            self.incus_points,
            self.stapes_points,
            self.canal_points,
        )

    def __post_init__(self):
        if any(c < 50 for c in self.counts()):
            raise InvalidConfig("every structure needs at least 50 points")
        if not (self.scale > 0.0 and np.isfinite(self.scale)):
            raise InvalidConfig("template scale must be positive and finite")
        if self.roughness < 0.0:
            raise InvalidConfig("roughness must be non-negative")


@dataclass(frozen=True)
class NonRigidParams:
    """Per-structure trilinear lattice warp parameters.

    Control points are grouped by lattice axis (length, width, thickness in
    the structure's principal frame). Each axis gets one random scale from
    scale_bounds and one random offset vector per lattice slice, bounded
    per coordinate by the axis entry of displacement_bounds.
    """

    resolution: tuple[int, int, int] = (4, 4, 4)
    displacement_bounds: tuple[float, float, float] = (0.55, 0.45, 0.40)
    scale_bounds: tuple[float, float] = (0.90, 1.12)
    seed: int = 0

    def __post_init__(self):
        if len(self.resolution) != 3 or any(r < 2 for r in self.resolution):
            raise InvalidConfig("lattice resolution must be >= 2 per axis")
        db = np.asarray(self.displacement_bounds, dtype=float)
        if db.shape != (3,) or not np.all(np.isfinite(db)) or np.any(db < 0):
            raise InvalidConfig("displacement bounds must be 3 finite non-negatives")
        lo, hi = self.scale_bounds
        if not (0.0 < lo <= hi) or not np.isfinite(hi):
            raise InvalidConfig("scale bounds must satisfy 0 < lo <= hi")


@dataclass(frozen=True)
class RigidParams:
    """Articulated-chain pose parameters.

    One bone per chain structure (membrane, malleus, incus, stapes), each
    with a rotation bound (radians, about the bone pivot, random axis) and
    a per-coordinate translation bound (mm). The canal wall never moves
    with the chain. An optional global pose (rotation about the cloud
    centroid plus translation) models patient placement and is applied to
    every structure including the canal; it defaults to none.
    """

    rotation_bounds: tuple[float, float, float, float] = (0.55, 0.80, 0.90, 1.00)
    translation_bounds: tuple[float, float, float, float] = (1.3, 1.0, 1.0, 1.0)
    global_rotation_bound: float = 0.0
    global_translation_bound: float = 0.0
    seed: int = 0

    def __post_init__(self):
        rb = np.asarray(self.rotation_bounds, dtype=float)
        tb = np.asarray(self.translation_bounds, dtype=float)
        if rb.shape != (4,) or np.any(rb < 0) or np.any(rb >= np.pi / 2):
            raise InvalidConfig("per-bone rotation bounds must lie in [0, pi/2)")
        if tb.shape != (4,) or np.any(tb < 0) or not np.all(np.isfinite(tb)):
            raise InvalidConfig("per-bone translation bounds must be non-negative")
        if self.global_rotation_bound < 0 or self.global_translation_bound < 0:
            raise InvalidConfig("global pose bounds must be non-negative")


@dataclass(frozen=True)
class SamplingParams:
    """Partial-view extraction parameters."""

    visible_ratio_range: tuple[float, float] = (0.3, 0.9)
    support_weight: float = 0.6      # alpha in the keep-score blend
    score_spread: float = 0.15       # std of the Gaussian score term
    attenuation_rate: float = 0.15   # per mm of depth; 0 disables thinning
    attenuation_factor_range: tuple[float, float] = (0.2, 1.0)
    jitter: float = 0.05             # eta, mm, uniform per coordinate
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.visible_ratio_range
        if not (0.0 < lo <= hi <= 1.0):
            raise InvalidConfig("visible ratio range must be within (0, 1]")
        if not (0.0 <= self.support_weight <= 1.0):
            raise InvalidConfig("support weight must lie in [0, 1]")
        if self.score_spread < 0 or self.attenuation_rate < 0 or self.jitter < 0:
            raise InvalidConfig("spread, attenuation and jitter must be non-negative")
        flo, fhi = self.attenuation_factor_range
        if not (0.0 <= flo <= fhi <= 1.0):
            raise InvalidConfig("attenuation factor range must be within [0, 1]")


@dataclass(frozen=True)
class GeneratorParams:
    """Bundle of all generation parameters for a dataset.

    The seeds inside the sub-params are overridden per sample by streams
    derived from the dataset master seed.
    """

    template: TemplateConfig = TemplateConfig()
    nonrigid: NonRigidParams = NonRigidParams()
    rigid: RigidParams = RigidParams()
    sampling: SamplingParams = SamplingParams()


@dataclass
class SyntheticSample:
    """One generated registration problem with its ground truth."""

    template: LabeledCloud
    deformed: LabeledCloud
    partial: LabeledCloud
    gt_field: DisplacementField
    visible_ratio: float
    seeds: dict
    params: dict

    def validate(self) -> None:
        if len(self.gt_field) != len(self.template):
            raise ValueError("ground-truth field length must match the template")
        if not np.array_equal(self.deformed.points, self.template.points + self.gt_field.vectors):
            raise ValueError("deformed points must equal template + field exactly")
        n, m = len(self.deformed), len(self.partial)
        if m == 0 or not (0.0 < self.visible_ratio <= 1.0):
            raise ValueError("partial cloud empty or visible ratio out of range")
        if abs(self.visible_ratio - m / n) > 1e-12:
            raise ValueError("visible ratio disagrees with point counts")


# ---------------------------------------------------------------------------
# Template construction
# ---------------------------------------------------------------------------

def _sample_capsule(rng, a, b, radius, n):
    """Surface points of a capsule (cylinder with hemispherical caps)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    axis = b - a
    length = np.linalg.norm(axis)
    axis = axis / length
    # Orthonormal frame around the axis.
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(axis, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(axis, e1)

    p_cyl = length / (length + 2.0 * radius)  # area-weighted split
    pts = np.empty((n, 3))
    kinds = rng.uniform(size=n)
    for i in range(n):
        if kinds[i] < p_cyl:
            h = rng.uniform(0.0, length)
            theta = rng.uniform(0.0, 2.0 * np.pi)
            pts[i] = a + axis * h + radius * (np.cos(theta) * e1 + np.sin(theta) * e2)
        else:
            d = rng.normal(size=3)
            norm = np.linalg.norm(d)
            while norm < 1e-12:
                d = rng.normal(size=3)
                norm = np.linalg.norm(d)
            d /= norm
            center, sign = (b, 1.0) if kinds[i] < p_cyl + (1 - p_cyl) / 2 else (a, -1.0)
            if np.dot(d, axis) * sign < 0:
                d = d - 2.0 * np.dot(d, axis) * axis
            pts[i] = center + radius * d
    return pts


def _sample_membrane(rng, rim_radius, apex_height, tilt, n):
    """Shallow cone shell, tilted about the y axis like a real eardrum."""
    u = rng.uniform(size=n)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    r = rim_radius * np.sqrt(u)
    x = apex_height * (1.0 - r / rim_radius)
    pts = np.stack([x, r * np.cos(theta), r * np.sin(theta)], axis=1)
    rot = rotation_about_axis([0.0, 1.0, 0.0], tilt)
    return pts @ rot.T


def _sample_canal(rng, x_lo, x_hi, radius, arc, gap_center, n):
    """Partial open cylinder; the angular gap models the missing wall."""
    start = gap_center + (2.0 * np.pi - arc) / 2.0
    theta = start + rng.uniform(0.0, arc, size=n)
    x = rng.uniform(x_lo, x_hi, size=n)
    return np.stack([x, radius * np.cos(theta), radius * np.sin(theta)], axis=1)


def _extremal_landmarks(points, min_count=4):
    """Indices of axis-extremal points, topped up by farthest-from-centroid."""
    picked = []
    for axis in range(3):
        for idx in (int(np.argmin(points[:, axis])), int(np.argmax(points[:, axis]))):
            if idx not in picked:
                picked.append(idx)
    if len(picked) < min_count:
        centroid = points.mean(axis=0)
        order = np.argsort(-np.linalg.norm(points - centroid, axis=1), kind="stable")
        for idx in order:
            if int(idx) not in picked:
                picked.append(int(idx))
            if len(picked) >= min_count:
                break
    return picked


def build_template(config: TemplateConfig = TemplateConfig(), seed: int = 0) -> LabeledCloud:
    """Procedural five-structure middle-ear template (~15 mm diagonal)."""
    rng = np.random.default_rng(seed)
    s = config.scale

    umbo = np.array([1.06, 0.0, -0.28]) * s  # cone apex after the tilt below
    parts = [
        _sample_membrane(rng, 3.6 * s, 1.1 * s, 0.26, config.membrane_points),
        _sample_capsule(rng, umbo, np.array([2.0, 0.7, 2.3]) * s, 0.6 * s,
                        config.malleus_points),
        _sample_capsule(rng, np.array([2.0, 0.7, 2.3]) * s, np.array([3.4, 1.3, 0.9]) * s,
                        0.55 * s, config.incus_points),
        _sample_capsule(rng, np.array([3.4, 1.3, 0.9]) * s, np.array([4.3, 1.6, 0.2]) * s,
                        0.45 * s, config.stapes_points),
        _sample_canal(rng, -6.0 * s, -0.3 * s, 3.8 * s, np.deg2rad(250.0),
                      np.pi / 2.0, config.canal_points),
    ]
    if config.roughness > 0:
        parts = [p + rng.uniform(-config.roughness * s, config.roughness * s, p.shape)
                 for p in parts]

    points = np.concatenate(parts)
    labels = np.concatenate([np.full(len(p), i, dtype=np.int64) for i, p in enumerate(parts)])
    supports = np.stack([p.mean(axis=0) for p in parts])

    lm_labels = []
    lm_points = []
    for sid, part in enumerate(parts):
        for idx in _extremal_landmarks(part):
            lm_labels.append(sid)
            lm_points.append(part[idx])

    return LabeledCloud(
        points=points,
        labels=labels,
        structure_names=STRUCTURE_NAMES,
        support_points=supports,
        landmark_labels=np.array(lm_labels, dtype=np.int64),
        landmark_points=np.array(lm_points, dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# Non-rigid stage: per-structure trilinear free-form deformation
# ---------------------------------------------------------------------------

def make_lattice(points: np.ndarray, resolution, margin: float = 0.05):
    """Axis-aligned lattice box and identity control grid over `points`.

    Returns (box_min, box_max, controls) where controls has shape
    (rx, ry, rz, 3) and holds the undisplaced control positions.
    """
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    extent = np.maximum(hi - lo, 1e-6)
    box_min = lo - margin * extent
    box_max = hi + margin * extent
    axes = [np.linspace(box_min[a], box_max[a], resolution[a]) for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    controls = np.stack([gx, gy, gz], axis=-1)
    return box_min, box_max, controls


def ffd_apply(points: np.ndarray, box_min, box_max, controls: np.ndarray) -> np.ndarray:
    """Trilinear free-form deformation of `points` by a displaced lattice.

    Each point is expressed in normalized lattice coordinates and mapped
    to the trilinear blend of its cell's eight control positions; with an
    identity lattice this is the identity map, and moving all controls by
    one affine map reproduces that map exactly.
    """
    res = np.array(controls.shape[:3])
    box_min = np.asarray(box_min, dtype=float)
    box_max = np.asarray(box_max, dtype=float)
    u = (points - box_min) / (box_max - box_min)
    if np.any(u < -1e-9) or np.any(u > 1.0 + 1e-9):
        raise RuntimeError("point outside its deformation lattice box")
    t = np.clip(u, 0.0, 1.0) * (res - 1)
    cell = np.minimum(t.astype(np.int64), res - 2)
    f = t - cell

    out = np.zeros_like(points)
    for dx in (0, 1):
        wx = f[:, 0] if dx else 1.0 - f[:, 0]
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1.0 - f[:, 1]
            for dz in (0, 1):
                wz = f[:, 2] if dz else 1.0 - f[:, 2]
                corner = controls[cell[:, 0] + dx, cell[:, 1] + dy, cell[:, 2] + dz]
                out += (wx * wy * wz)[:, None] * corner
    return out


def _principal_frame(points: np.ndarray):
    """Centroid and principal axes (columns, by decreasing variance).

    Signs are fixed so each axis's largest-magnitude component is positive,
    making the frame deterministic.
    """
    centroid = points.mean(axis=0)
    centered = points - centroid
    cov = centered.T @ centered / len(points)
    _, vecs = np.linalg.eigh(cov)
    vecs = vecs[:, ::-1]  # eigh sorts ascending
    for a in range(3):
        j = int(np.argmax(np.abs(vecs[:, a])))
        if vecs[j, a] < 0:
            vecs[:, a] = -vecs[:, a]
    return centroid, vecs


def simulate_nonrigid(template: LabeledCloud, params: NonRigidParams) -> LabeledCloud:
    """Warp each structure with a randomly displaced trilinear lattice.

    The lattice lives in the structure's principal frame, so the three
    control-point axis groups track the structure's length, width, and
    thickness. Each axis draws one scale (about the box center) and one
    offset vector per slice of control points.
    """
    if not template.is_complete():
        raise InvalidConfig("non-rigid simulation needs a complete template")
    rng = np.random.default_rng(params.seed)
    res = params.resolution
    bounds = np.asarray(params.displacement_bounds, dtype=float)
    lo, hi = params.scale_bounds

    new_points = template.points.copy()
    new_supports = template.support_points.copy()
    new_landmarks = template.landmark_points.copy()

    for sid in range(template.num_structures):
        idx = template.structure_indices(sid)
        pts = template.points[idx]
        centroid, frame = _principal_frame(pts)
        local = (pts - centroid) @ frame

        box_min, box_max, controls = make_lattice(local, res)
        center = (box_min + box_max) / 2.0
        scales = rng.uniform(lo, hi, size=3)
        controls = center + (controls - center) * scales
        for axis in range(3):
            offsets = rng.uniform(-bounds[axis], bounds[axis], size=(res[axis], 3))
            shape = [1, 1, 1, 3]
            shape[axis] = res[axis]
            controls = controls + offsets.reshape(shape)

        def warp(world):
            loc = (world - centroid) @ frame
            return ffd_apply(loc, box_min, box_max, controls) @ frame.T + centroid

        new_points[idx] = warp(pts)
        new_supports[sid] = warp(template.support_points[sid][None, :])[0]
        lm = np.nonzero(template.landmark_labels == sid)[0]
        if lm.size:
            new_landmarks[lm] = warp(template.landmark_points[lm])

    out = template.replace_points(new_points)
    out.support_points = new_supports
    out.landmark_points = new_landmarks
    return out


# ---------------------------------------------------------------------------
# Rigid stage: articulated bone chain plus optional global pose
# ---------------------------------------------------------------------------

def _closest_pair_midpoint(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Midpoint of the closest point pair between two sets (the joint pivot)."""
    d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    i, j = np.unravel_index(int(np.argmin(d)), d.shape)
    return (a[i] + b[j]) / 2.0


def chain_pivots(cloud: LabeledCloud) -> dict[int, np.ndarray]:
    """Articulation pivot per chain bone, from the cloud's own geometry."""
    pivots = {MEMBRANE: cloud.support_points[MEMBRANE].copy()}
    for child, parent in CHAIN_PARENTS.items():
        if parent is None:
            continue
        pivots[child] = _closest_pair_midpoint(
            cloud.points[cloud.structure_indices(child)],
            cloud.points[cloud.structure_indices(parent)],
        )
    return pivots


def _random_unit(rng) -> np.ndarray:
    d = rng.normal(size=3)
    norm = np.linalg.norm(d)
    while norm < 1e-12:
        d = rng.normal(size=3)
        norm = np.linalg.norm(d)
    return d / norm


def simulate_rigid(cloud: LabeledCloud, params: RigidParams) -> LabeledCloud:
    """Pose the ossicle chain by hierarchical rigid bone motions.

    Bone transforms rotate about their articulation pivot and compose
    parent to child (membrane, malleus, incus, stapes); the canal wall is
    chain-fixed. When translations are zero, a shared pivot lands on the
    same position under parent and child cumulative transforms. A global
    pose, when enabled, moves everything.
    """
    rng = np.random.default_rng(params.seed)
    pivots = chain_pivots(cloud)

    cumulative: dict[int, RigidTransform] = {}
    for bone in (MEMBRANE, MALLEUS, INCUS, STAPES):
        axis = _random_unit(rng)
        angle = rng.uniform(-params.rotation_bounds[bone], params.rotation_bounds[bone])
        tb = params.translation_bounds[bone]
        trans = rng.uniform(-tb, tb, size=3)
        rot = rotation_about_axis(axis, angle)
        pivot = pivots[bone]
        local = RigidTransform(rot, pivot - rot @ pivot + trans)
        parent = CHAIN_PARENTS[bone]
        cumulative[bone] = local if parent is None else compose(cumulative[parent], local)

    axis = _random_unit(rng)
    angle = rng.uniform(-params.global_rotation_bound, params.global_rotation_bound)
    gt = rng.uniform(-params.global_translation_bound, params.global_translation_bound, size=3)
    rot = rotation_about_axis(axis, angle)
    center = cloud.points.mean(axis=0)
    global_pose = RigidTransform(rot, center - rot @ center + gt)

    new_points = cloud.points.copy()
    new_supports = cloud.support_points.copy()
    new_landmarks = cloud.landmark_points.copy()
    for sid in range(cloud.num_structures):
        move = global_pose if sid == CANAL else compose(global_pose, cumulative[sid])
        idx = cloud.structure_indices(sid)
        new_points[idx] = move.apply(cloud.points[idx])
        new_supports[sid] = move.apply(cloud.support_points[sid][None, :])[0]
        lm = np.nonzero(cloud.landmark_labels == sid)[0]
        if lm.size:
            new_landmarks[lm] = move.apply(cloud.landmark_points[lm])

    out = cloud.replace_points(new_points)
    out.support_points = new_supports
    out.landmark_points = new_landmarks
    return out


def global_pose_of(cloud: LabeledCloud, params: RigidParams) -> RigidTransform:
    """The global pose simulate_rigid would draw for this cloud and seed.

    Replays the RNG stream; useful as ground truth when the per-bone
    bounds are zero and the whole motion is one rigid transform.
    """
    rng = np.random.default_rng(params.seed)
    for bone in (MEMBRANE, MALLEUS, INCUS, STAPES):
        _random_unit(rng)
        rng.uniform(-params.rotation_bounds[bone], params.rotation_bounds[bone])
        tb = params.translation_bounds[bone]
        rng.uniform(-tb, tb, size=3)
    axis = _random_unit(rng)
    angle = rng.uniform(-params.global_rotation_bound, params.global_rotation_bound)
    gt = rng.uniform(-params.global_translation_bound, params.global_translation_bound, size=3)
    rot = rotation_about_axis(axis, angle)
    center = cloud.points.mean(axis=0)
    return RigidTransform(rot, center - rot @ center + gt)


# ---------------------------------------------------------------------------
# Partial sampling
# ---------------------------------------------------------------------------

def _canal_depths(cloud: LabeledCloud) -> dict[int, float]:
    """Depth of each structure centroid behind the canal's front plane."""
    canal = cloud.points[cloud.structure_indices(CANAL)]
    centroid, frame = _principal_frame(canal)
    axis = frame[:, 0]  # canal length direction
    membrane_centroid = cloud.points[cloud.structure_indices(MEMBRANE)].mean(axis=0)
    if np.dot(membrane_centroid - centroid, axis) < 0:
        axis = -axis
    front = np.max((canal - centroid) @ axis)
    depths = {}
    for sid in range(cloud.num_structures):
        pts = cloud.points[cloud.structure_indices(sid)]
        if len(pts) == 0:
            depths[sid] = 0.0
            continue
        proj = np.dot(pts.mean(axis=0) - centroid, axis)
        depths[sid] = max(0.0, float(proj - front))
    return depths


def sample_partial(cloud: LabeledCloud, params: SamplingParams) -> tuple[LabeledCloud, float]:
    """Extract a partial, jittered view of a deformed cloud.

    Points are ranked by a blend of support-point proximity and Gaussian
    noise; the top fraction (a random target within the configured range)
    survives. Deeper structures behind the canal opening are thinned
    further, then per-coordinate uniform jitter is applied.
    """
    rng = np.random.default_rng(params.seed)
    n = len(cloud)
    if n == 0:
        raise EmptyResult("cannot sample from an empty cloud")

    target = rng.uniform(*params.visible_ratio_range)
    gauss = np.clip(rng.normal(0.5, params.score_spread, size=n), 0.0, 1.0)

    closeness = np.zeros(n)
    for sid in range(cloud.num_structures):
        idx = cloud.structure_indices(sid)
        if idx.size == 0:
            continue
        d = np.linalg.norm(cloud.points[idx] - cloud.support_points[sid], axis=1)
        d_max = d.max()
        closeness[idx] = 1.0 - d / d_max if d_max > 0 else 1.0

    alpha = params.support_weight
    scores = alpha * closeness + (1.0 - alpha) * gauss

    k = min(n, max(1, int(round(target * n))))
    # Highest score first; ties resolve to the lower index.
    order = np.lexsort((np.arange(n), -scores))
    kept = np.sort(order[:k])

    if params.attenuation_rate > 0:
        depths = _canal_depths(cloud)
        keep_mask = np.ones(kept.size, dtype=bool)
        for sid in POSTERIOR_STRUCTURES:
            factor = float(np.exp(-params.attenuation_rate * depths[sid]))
            factor *= rng.uniform(*params.attenuation_factor_range)
            in_struct = cloud.labels[kept] == sid
            draws = rng.uniform(size=int(in_struct.sum()))
            keep_mask[in_struct] = draws < factor
        kept = kept[keep_mask]

    if kept.size == 0:
        raise EmptyResult("partial sampling removed every point")

    points = cloud.points[kept] + rng.uniform(-params.jitter, params.jitter, (kept.size, 3))
    partial = LabeledCloud(
        points=points,
        labels=cloud.labels[kept],
        structure_names=cloud.structure_names,
        support_points=cloud.support_points.copy(),
        landmark_labels=cloud.landmark_labels.copy(),
        landmark_points=cloud.landmark_points.copy(),
    )
    return partial, kept.size / n


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------

def _sample_seeds(master_seed: int, index: int) -> dict:
    """Three decorrelated integer seeds for one sample's stages."""
    state = np.random.SeedSequence((master_seed, index)).generate_state(3)
    return {
        "nonrigid": int(state[0]),
        "rigid": int(state[1]),
        "sampling": int(state[2]),
    }


def make_sample(template: LabeledCloud, params: GeneratorParams, seeds: dict) -> SyntheticSample:
    """One deformed/partial pair with its exact ground-truth field."""
    warped = simulate_nonrigid(template, replace(params.nonrigid, seed=seeds["nonrigid"]))
    posed = simulate_rigid(warped, replace(params.rigid, seed=seeds["rigid"]))

    gt = DisplacementField(posed.points - template.points)
    # Rebuild so deformed == template + field holds bitwise.
    deformed = posed.replace_points(template.points + gt.vectors)

    partial, ratio = sample_partial(deformed, replace(params.sampling, seed=seeds["sampling"]))
    sample = SyntheticSample(
        template=template,
        deformed=deformed,
        partial=partial,
        gt_field=gt,
        visible_ratio=ratio,
        seeds=dict(seeds),
        params=asdict(params),
    )
    sample.validate()
    return sample


def generate_dataset(n: int, params: GeneratorParams, out_dir, seed: int = 0) -> dict:
    """Write n samples plus a manifest; same (n, seed) gives identical bytes.

    Layout: template.txt at the root, then deformed_XXXX.txt,
    partial_XXXX.txt, field_XXXX.txt per sample, and manifest.json tying
    everything together with seeds and summary statistics.
    """
    if n < 1:
        raise InvalidConfig("need at least one sample")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    template = build_template(params.template, seed=seed)
    write_cloud(template, out / "template.txt")

    entries = []
    mags = []
    ratios = []
    for i in range(n):
        seeds = _sample_seeds(seed, i)
        sample = make_sample(template, params, seeds)
        names = {
            "deformed": f"deformed_{i:04d}.txt",
            "partial": f"partial_{i:04d}.txt",
            "gt_field": f"field_{i:04d}.txt",
        }
        write_cloud(sample.deformed, out / names["deformed"])
        write_cloud(sample.partial, out / names["partial"])
        write_field(sample.gt_field, out / names["gt_field"])
        mean_mag = float(sample.gt_field.magnitudes().mean())
        mags.append(mean_mag)
        ratios.append(sample.visible_ratio)
        entries.append({
            "id": i,
            "seeds": seeds,
            "visible_ratio": sample.visible_ratio,
            "mean_gt_displacement_mm": mean_mag,
            **names,
        })

    manifest = {
        "format": "c2preg-dataset-v1",
        "n": n,
        "master_seed": seed,
        "template": "template.txt",
        "params": asdict(params),
        "samples": entries,
        "summary": {
            "mean_gt_displacement_mm": float(np.mean(mags)),
            "mean_visible_ratio": float(np.mean(ratios)),
        },
    }
    write_json(manifest, out / "manifest.json")
    return manifest


def load_sample(manifest: dict, root, index: int) -> SyntheticSample:
    """Read one sample of a written dataset back into memory."""
    root = Path(root)
    entry = manifest["samples"][index]
    sample = SyntheticSample(
        template=read_cloud(root / manifest["template"]),
        deformed=read_cloud(root / entry["deformed"]),
        partial=read_cloud(root / entry["partial"]),
        gt_field=read_field(root / entry["gt_field"]),
        visible_ratio=float(entry["visible_ratio"]),
        seeds=dict(entry["seeds"]),
        params=dict(manifest["params"]),
    )
    return sample


def load_manifest(path) -> dict:
    manifest = read_json(path)
    if manifest.get("format") != "c2preg-dataset-v1":
        raise InvalidConfig(f"{path} is not a dataset manifest")
    return manifest
