"""Coarse rigid alignment from multi-scale geometric descriptors.

Stage 1 of the pipeline: pair-angle histogram descriptors computed at
several radii, mutual matching with cross-scale voting, and a seeded
RANSAC rigid fit. The output is the rigid transform plus the sparse
inlier correspondence set consumed by the deformation stage.

Descriptors are deliberately classical (no learning): 33-bin histograms
of the three Darboux-frame angles between a keypoint and its neighbors,
soft-binned so that the vectors vary smoothly with the geometry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .errors import (
    DegenerateCorrespondences,
    InsufficientDensity,
    InvalidConfig,
    NoCorrespondences,
    RegistrationFailed,
)
from .geom import (
    CorrespondenceSet,
    LabeledCloud,
    RigidTransform,
    chamfer_distance,
    fit_rigid,
    _as_points,
)

_BINS_PER_FEATURE = 11  # three angle features -> 33-bin descriptor


@dataclass(frozen=True)
class CoarseConfig:
    radii: tuple[float, ...] = (0.75, 1.5, 3.0)
    keypoint_fraction: float = 0.3
    max_pairs: int = 512
    ransac_iterations: int = 2000
    inlier_threshold: float = 0.75  # mm
    dense_refine_iterations: int = 10
    seed: int = 0

    def __post_init__(self):
        r = np.asarray(self.radii, dtype=float)
        if r.size == 0 or np.any(r <= 0) or np.any(np.diff(r) <= 0):
            raise InvalidConfig("radii must be positive and strictly ascending")
        if not (0.0 < self.keypoint_fraction <= 1.0):
            raise InvalidConfig("keypoint fraction must lie in (0, 1]")
        if self.max_pairs < 3 or self.ransac_iterations < 1:
            raise InvalidConfig("need max_pairs >= 3 and at least one RANSAC iteration")
        if self.inlier_threshold <= 0:
            raise InvalidConfig("inlier threshold must be positive")
        if self.dense_refine_iterations < 0:
            raise InvalidConfig("dense refinement iterations must be non-negative")


@dataclass
class DescriptorSet:
    """Per-radius descriptor arrays for a common keypoint subsample."""

    features: tuple[np.ndarray, ...]  # one (n_keypoints, 33) array per radius
    radii: tuple[float, ...]
    keypoint_indices: np.ndarray


def estimate_normals(points: np.ndarray, radius: float) -> np.ndarray:
    """Unit normals by local plane fit, oriented away from the centroid.

    Neighborhoods are balls of the given radius, widened to the 6 nearest
    points where the ball is too sparse for a plane. Points whose offset
    from the centroid is (numerically) tangential keep a deterministic
    sign convention instead.
    """
    tree = cKDTree(points)
    centroid = points.mean(axis=0)
    neighborhoods = tree.query_ball_point(points, radius)
    _, knn = tree.query(points, k=min(6, len(points)))
    normals = np.empty_like(points)
    for i, neigh in enumerate(neighborhoods):
        idx = neigh if len(neigh) >= 4 else knn[i]
        local = points[idx] - points[idx].mean(axis=0)
        cov = local.T @ local
        _, vecs = np.linalg.eigh(cov)
        n = vecs[:, 0]  # smallest-variance direction
        outward = points[i] - centroid
        d = np.dot(n, outward)
        if abs(d) > 1e-9:
            n = n if d > 0 else -n
        else:
            j = int(np.argmax(np.abs(n)))
            n = n if n[j] > 0 else -n
        normals[i] = n
    return normals


def _soft_histogram(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Linearly interpolated histogram; boundary mass stays in edge bins."""
    x = (values - lo) / (hi - lo) * _BINS_PER_FEATURE - 0.5
    i0 = np.floor(x).astype(np.int64)
    w1 = x - i0
    i1 = np.clip(i0 + 1, 0, _BINS_PER_FEATURE - 1)
    i0 = np.clip(i0, 0, _BINS_PER_FEATURE - 1)
    hist = np.bincount(i0, weights=1.0 - w1, minlength=_BINS_PER_FEATURE)
    hist += np.bincount(i1, weights=w1, minlength=_BINS_PER_FEATURE)
    return hist


def _pair_angle_features(p, n_p, neighbors, neighbor_normals):
    """Darboux-frame angles (alpha, phi, theta) for one keypoint."""
    d = neighbors - p
    dist = np.linalg.norm(d, axis=1)
    unit = d / dist[:, None]
    v = np.cross(unit, n_p)
    v_norm = np.linalg.norm(v, axis=1)
    # neighbor straight along the normal: any perpendicular works
    degenerate = v_norm < 1e-12
    if np.any(degenerate):
        helper = np.array([1.0, 0.0, 0.0]) if abs(n_p[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        v[degenerate] = np.cross(helper, n_p)
        v_norm = np.linalg.norm(v, axis=1)
    v = v / v_norm[:, None]
    w = np.cross(n_p, v)
    alpha = np.einsum("ij,ij->i", v, neighbor_normals)
    phi = unit @ n_p
    theta = np.arctan2(
        np.einsum("ij,ij->i", w, neighbor_normals), neighbor_normals @ n_p
    )
    return alpha, phi, theta, dist


def compute_descriptors(
    cloud, radii=(0.75, 1.5, 3.0), keypoint_fraction: float = 0.3
) -> DescriptorSet:
    """Multi-scale 33-bin pair-angle descriptors on a keypoint subsample.

    Angle features are computed once against the largest-radius
    neighborhood and histogrammed per radius by distance masking, so the
    scales are exactly nested.
    """
    points = _as_points(cloud)
    if len(points) < 30:
        raise InsufficientDensity("need at least 30 points for descriptors")
    radii = tuple(float(r) for r in radii)
    if any(r <= 0 for r in radii) or list(radii) != sorted(radii):
        raise InvalidConfig("radii must be positive ascending")

    n_keys = max(1, int(round(len(points) * keypoint_fraction)))
    keypoints = np.unique(np.round(np.linspace(0, len(points) - 1, n_keys)).astype(np.int64))

    normals = estimate_normals(points, radii[0])
    tree = cKDTree(points)
    neighborhoods = tree.query_ball_point(points[keypoints], radii[-1])

    feats = [np.zeros((len(keypoints), 3 * _BINS_PER_FEATURE)) for _ in radii]
    starved = np.zeros((len(radii), len(keypoints)), dtype=bool)
    for row, kp in enumerate(keypoints):
        neigh = [j for j in neighborhoods[row] if j != kp]
        if not neigh:
            for f in feats:
                f[row] = 1.0 / (3 * _BINS_PER_FEATURE)
            starved[:, row] = True
            continue
        neigh = np.asarray(neigh, dtype=np.int64)
        alpha, phi, theta, dist = _pair_angle_features(
            points[kp], normals[kp], points[neigh], normals[neigh]
        )
        for ri, r in enumerate(radii):
            mask = dist <= r
            count = int(mask.sum())
            starved[ri, row] = count < 5
            if count == 0:
                feats[ri][row] = 1.0 / (3 * _BINS_PER_FEATURE)
                continue
            hist = np.concatenate([
                _soft_histogram(alpha[mask], -1.0, 1.0),
                _soft_histogram(phi[mask], -1.0, 1.0),
                _soft_histogram(theta[mask], -np.pi, np.pi),
            ])
            feats[ri][row] = hist / hist.sum()

    for ri, r in enumerate(radii):
        if starved[ri].mean() > 0.5:
            raise InsufficientDensity(
                f"radius {r} mm captures < 5 neighbors for most keypoints"
            )

    return DescriptorSet(features=tuple(feats), radii=radii, keypoint_indices=keypoints)


def match_correspondences(src: DescriptorSet, tgt: DescriptorSet) -> CorrespondenceSet:
    """Mutual nearest-descriptor pairs that win at >= 2 of 3 scales.

    With fewer than two scales a single mutual vote suffices. Scores are
    the fraction of scales voting for the pair; indices refer to the full
    clouds, not the keypoint subsample. The densest max_pairs cap is
    applied by the caller.
    """
    if src.radii != tgt.radii:
        raise InvalidConfig("descriptor sets built with different radii")
    n_scales = len(src.radii)
    votes: dict[tuple[int, int], int] = {}
    for fs, ft in zip(src.features, tgt.features):
        d = cdist(fs, ft)
        row_nn = np.argmin(d, axis=1)
        col_nn = np.argmin(d, axis=0)
        mutual = np.nonzero(col_nn[row_nn] == np.arange(len(fs)))[0]
        for i in mutual:
            key = (int(i), int(row_nn[i]))
            votes[key] = votes.get(key, 0) + 1

    required = 2 if n_scales >= 2 else 1
    accepted = [(i, j, v) for (i, j), v in votes.items() if v >= required]
    if not accepted:
        raise NoCorrespondences("no pair won the cross-scale vote")
    accepted.sort(key=lambda t: (-t[2], t[0], t[1]))
    pairs = np.array(
        [[src.keypoint_indices[i], tgt.keypoint_indices[j]] for i, j, _ in accepted],
        dtype=np.int64,
    )
    scores = np.array([v / n_scales for _, _, v in accepted])
    return CorrespondenceSet(pairs=pairs, scores=scores)


def _batched_rigid_fit(x: np.ndarray, y: np.ndarray):
    """Kabsch fit per hypothesis; returns rotations, translations, validity."""
    cx = x.mean(axis=1, keepdims=True)
    cy = y.mean(axis=1, keepdims=True)
    h = np.einsum("bij,bik->bjk", x - cx, y - cy)
    u, s, vt = np.linalg.svd(h)
    valid = s[:, 1] > np.maximum(s[:, 0] * 1e-9, 1e-300)
    det = np.linalg.det(np.einsum("bij,bkj->bik", vt, u).transpose(0, 2, 1))
    flip = np.where(det < 0, -1.0, 1.0)
    vt_fixed = vt.copy()
    vt_fixed[:, 2, :] *= flip[:, None]
    rot = np.einsum("bij,bjk->bik", vt_fixed.transpose(0, 2, 1), u.transpose(0, 2, 1))
    t = cy[:, 0, :] - np.einsum("bij,bj->bi", rot, cx[:, 0, :])
    return rot, t, valid


def ransac_rigid(
    source,
    target,
    corr: CorrespondenceSet,
    iterations: int = 2000,
    inlier_threshold: float = 0.75,
    seed: int = 0,
) -> tuple[RigidTransform, CorrespondenceSet]:
    """Robust rigid fit on a correspondence set.

    Scores three-pair hypotheses by inlier count (ties go to the earliest
    iteration), then alternates closed-form refits with inlier
    re-collection until the inlier set stabilizes.
    """
    src = _as_points(source)
    tgt = _as_points(target)
    corr.validate_against(len(src), len(tgt))
    if len(corr) < 3:
        raise DegenerateCorrespondences("RANSAC needs at least 3 pairs")

    x = src[corr.source_indices]
    y = tgt[corr.target_indices]
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, len(corr), size=(iterations, 3))
    distinct = (
        (picks[:, 0] != picks[:, 1])
        & (picks[:, 0] != picks[:, 2])
        & (picks[:, 1] != picks[:, 2])
    )

    rot, t, valid = _batched_rigid_fit(x[picks], y[picks])
    valid &= distinct
    residuals = np.linalg.norm(np.einsum("bij,pj->bpi", rot, x) + t[:, None, :] - y, axis=2)
    inlier_counts = np.where(valid, (residuals <= inlier_threshold).sum(axis=1), -1)
    best = int(np.argmax(inlier_counts))
    if inlier_counts[best] < 3:
        raise RegistrationFailed("no RANSAC hypothesis reached 3 inliers")

    transform = RigidTransform(rot[best], t[best])
    mask = residuals[best] <= inlier_threshold
    for _ in range(5):
        try:
            refined = fit_rigid(x[mask], y[mask])
        except DegenerateCorrespondences:
            break
        new_mask = np.linalg.norm(refined.apply(x) - y, axis=1) <= inlier_threshold
        if new_mask.sum() < 3:
            break
        transform = refined
        if np.array_equal(new_mask, mask):
            break
        mask = new_mask

    inliers = CorrespondenceSet(pairs=corr.pairs[mask], scores=corr.scores[mask])
    return transform, inliers


def refine_rigid_dense(
    source,
    target,
    transform: RigidTransform,
    threshold: float = 0.75,
    iterations: int = 10,
) -> RigidTransform:
    """Trimmed dense nearest-neighbor refinement of a rigid estimate.

    Descriptor matches rarely land on rotationally smooth regions (the
    canal wall here), which leaves the RANSAC rotation under-constrained
    over a short lever arm. This step matches every target point to its
    nearest transformed source point, drops pairs beyond the threshold
    (occlusion-safe in that direction: the source is complete), and
    refits in closed form until the estimate stops moving.
    """
    src = _as_points(source)
    tgt = _as_points(target)
    for _ in range(iterations):
        tree = cKDTree(transform.apply(src))
        d, idx = tree.query(tgt)
        keep = d <= threshold
        if keep.sum() < 10:
            break
        try:
            refined = fit_rigid(src[idx[keep]], tgt[keep])
        except DegenerateCorrespondences:
            break
        delta = max(
            np.abs(refined.rotation - transform.rotation).max(),
            np.abs(refined.translation - transform.translation).max(),
        )
        transform = refined
        if delta < 1e-12:
            break
    return transform


def coarse_register(
    source: LabeledCloud, target: LabeledCloud, config: CoarseConfig = CoarseConfig()
) -> tuple[RigidTransform, CorrespondenceSet, dict]:
    """Full stage 1: descriptors, voting matcher, RANSAC.

    Returns the rigid alignment, the inlier correspondences in full-cloud
    indices, and a diagnostics record including the Chamfer distance
    after applying the transform.
    """
    src_desc = compute_descriptors(source, config.radii, config.keypoint_fraction)
    tgt_desc = compute_descriptors(target, config.radii, config.keypoint_fraction)
    candidates = match_correspondences(src_desc, tgt_desc)
    if len(candidates) > config.max_pairs:
        candidates = CorrespondenceSet(
            pairs=candidates.pairs[: config.max_pairs],
            scores=candidates.scores[: config.max_pairs],
        )
    transform, inliers = ransac_rigid(
        source,
        target,
        candidates,
        iterations=config.ransac_iterations,
        inlier_threshold=config.inlier_threshold,
        seed=config.seed,
    )
    src_pts = _as_points(source)
    tgt_pts = _as_points(target)
    chosen = "ransac"
    if config.dense_refine_iterations > 0:
        transform = refine_rigid_dense(
            src_pts,
            tgt_pts,
            transform,
            threshold=config.inlier_threshold,
            iterations=config.dense_refine_iterations,
        )
        # Descriptor matches can be unreliable under strong deformation;
        # a wrong consensus then seeds refinement in the wrong basin.
        # Starting a second refinement from identity and keeping whichever
        # aligns better makes the stage fail soft on hard pairs.
        from_identity = refine_rigid_dense(
            src_pts,
            tgt_pts,
            RigidTransform.identity(),
            threshold=config.inlier_threshold,
            iterations=config.dense_refine_iterations,
        )
        if chamfer_distance(from_identity.apply(src_pts), tgt_pts) < chamfer_distance(
            transform.apply(src_pts), tgt_pts
        ):
            transform = from_identity
            chosen = "identity_refined"
        # keep sigma consistent with the final transform
        x = src_pts[candidates.source_indices]
        y = tgt_pts[candidates.target_indices]
        mask = np.linalg.norm(transform.apply(x) - y, axis=1) <= config.inlier_threshold
        if mask.sum() >= 3:
            inliers = CorrespondenceSet(
                pairs=candidates.pairs[mask], scores=candidates.scores[mask]
            )
    diagnostics = {
        "raw_chamfer_mm": chamfer_distance(src_pts, tgt_pts),
        "post_tau_chamfer_mm": chamfer_distance(transform.apply(src_pts), tgt_pts),
        "n_source_keypoints": int(len(src_desc.keypoint_indices)),
        "n_target_keypoints": int(len(tgt_desc.keypoint_indices)),
        "n_candidate_pairs": int(len(candidates)),
        "n_inlier_pairs": int(len(inliers)),
        "rigid_init": chosen,
    }
    return transform, inliers, diagnostics
