"""Core geometry: labeled point clouds, SE(3) transforms, Chamfer distance.

Everything downstream (generator, registration stages, baselines, metrics)
is built on the types and the four operations in this module. All
coordinates are millimeters. Types are treated as immutable after
construction; operations are pure functions, so callers may freely share
instances across threads or processes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    DegenerateCorrespondences,
    EmptyCloud,
    InvalidTransform,
    ShapeMismatch,
)

_ROTATION_TOL = 1e-9


def _as_points(x) -> np.ndarray:
    """Coerce a LabeledCloud or array-like to an (N, 3) float64 array."""
    pts = x.points if isinstance(x, LabeledCloud) else np.asarray(x, dtype=np.float64)
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim == 1 and pts.size == 3:
        pts = pts.reshape(1, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeMismatch(f"expected an (N, 3) point array, got shape {pts.shape}")
    return pts


@dataclass
class LabeledCloud:
    """A point set with per-point structure labels and per-structure metadata.

    Attributes:
        points: (N, 3) float64 coordinates in mm.
        labels: (N,) int64 structure ids in 0..K-1.
        structure_names: K names, indexed by structure id.
        support_points: (K, 3) anchor per structure (centroid for templates).
        landmark_labels: (L,) structure id of each landmark.
        landmark_points: (L, 3) landmark coordinates in mm.

    Partial clouds may have structures with zero points; a complete
    (template) cloud has at least one point per structure.
    """

    points: np.ndarray
    labels: np.ndarray
    structure_names: tuple[str, ...]
    support_points: np.ndarray
    landmark_labels: np.ndarray
    landmark_points: np.ndarray

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        self.structure_names = tuple(str(s) for s in self.structure_names)
        self.support_points = np.ascontiguousarray(self.support_points, dtype=np.float64)
        self.landmark_labels = np.ascontiguousarray(self.landmark_labels, dtype=np.int64)
        self.landmark_points = np.ascontiguousarray(self.landmark_points, dtype=np.float64)

        k = len(self.structure_names)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ShapeMismatch(f"points must be (N, 3), got {self.points.shape}")
        if self.labels.shape != (self.points.shape[0],):
            raise ShapeMismatch("labels must have one entry per point")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("cloud contains non-finite coordinates")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= k):
            raise ValueError(f"labels must lie in 0..{k - 1}")
        if self.support_points.shape != (k, 3):
            raise ShapeMismatch(f"support_points must be ({k}, 3)")
        if self.landmark_points.shape != (self.landmark_labels.size, 3):
            raise ShapeMismatch("landmark_points must be (L, 3) matching landmark_labels")
        if self.landmark_labels.size and (
            self.landmark_labels.min() < 0 or self.landmark_labels.max() >= k
        ):
            raise ValueError("landmark labels reference unknown structures")

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def num_structures(self) -> int:
        return len(self.structure_names)

    def structure_indices(self, structure_id: int) -> np.ndarray:
        return np.nonzero(self.labels == structure_id)[0]

    def structure_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_structures)

    def is_complete(self) -> bool:
        """True when every structure has at least one point."""
        return bool(np.all(self.structure_counts() > 0))

    def bounding_box_diagonal(self) -> float:
        if len(self) == 0:
            raise EmptyCloud("empty cloud has no bounding box")
        return float(np.linalg.norm(self.points.max(axis=0) - self.points.min(axis=0)))

    def replace_points(self, points: np.ndarray) -> "LabeledCloud":
        """New cloud with the same labels/metadata and different coordinates."""
        return LabeledCloud(
            points=points,
            labels=self.labels.copy(),
            structure_names=self.structure_names,
            support_points=self.support_points.copy(),
            landmark_labels=self.landmark_labels.copy(),
            landmark_points=self.landmark_points.copy(),
        )


@dataclass(frozen=True)
class RigidTransform:
    """An element of SE(3): p -> rotation @ p + translation (mm)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.ascontiguousarray(self.rotation, dtype=np.float64)
        tra = np.ascontiguousarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tra)
        _check_rotation(rot)
        if not np.all(np.isfinite(tra)):
            raise InvalidTransform("translation contains non-finite values")

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = _as_points(points)
        return pts @ self.rotation.T + self.translation

    def compose(self, first: "RigidTransform") -> "RigidTransform":
        """Transform equivalent to applying `first`, then `self`."""
        return RigidTransform(
            self.rotation @ first.rotation,
            self.rotation @ first.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rot_inv = self.rotation.T
        return RigidTransform(rot_inv, -rot_inv @ self.translation)

    def rotation_angle(self) -> float:
        """Rotation magnitude in radians.

        Uses atan2 of the skew-symmetric part rather than arccos of the
        trace, which loses half the significant digits near identity.
        """
        r = self.rotation
        skew = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
        sin_t = 0.5 * np.linalg.norm(skew)
        cos_t = 0.5 * (np.trace(r) - 1.0)
        return float(np.arctan2(sin_t, cos_t))


def _check_rotation(rot: np.ndarray) -> None:
    if rot.shape != (3, 3) or not np.all(np.isfinite(rot)):
        raise InvalidTransform("rotation must be a finite 3x3 matrix")
    if np.abs(rot @ rot.T - np.eye(3)).max() > _ROTATION_TOL:
        raise InvalidTransform("rotation matrix is not orthonormal")
    if abs(np.linalg.det(rot) - 1.0) > _ROTATION_TOL:
        raise InvalidTransform("rotation matrix must have determinant +1")


def compose(second: RigidTransform, first: RigidTransform) -> RigidTransform:
    """compose(t2, t1).apply(x) == t2.apply(t1.apply(x))."""
    return second.compose(first)


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for a (not necessarily unit) axis."""
    a = np.asarray(axis, dtype=np.float64).reshape(3)
    norm = np.linalg.norm(a)
    if norm == 0.0:
        raise ValueError("rotation axis must be non-zero")
    a = a / norm
    k = np.array([
        [0.0, -a[2], a[1]],
        [a[2], 0.0, -a[0]],
        [-a[1], a[0], 0.0],
    ])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


@dataclass
class CorrespondenceSet:
    """Sparse index pairs (source index u, target index v) with confidences."""

    pairs: np.ndarray   # (P, 2) int64
    scores: np.ndarray  # (P,) float64 in [0, 1]

    def __post_init__(self):
        self.pairs = np.ascontiguousarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        self.scores = np.ascontiguousarray(self.scores, dtype=np.float64).reshape(-1)
        if self.scores.shape[0] != self.pairs.shape[0]:
            raise ShapeMismatch("one score per correspondence pair required")
        if self.scores.size and (self.scores.min() < 0.0 or self.scores.max() > 1.0):
            raise ValueError("scores must lie in [0, 1]")
        if self.pairs.size and len(np.unique(self.pairs, axis=0)) != len(self.pairs):
            raise ValueError("duplicate (u, v) correspondence pairs")

    def __len__(self) -> int:
        return self.pairs.shape[0]

    @property
    def source_indices(self) -> np.ndarray:
        return self.pairs[:, 0]

    @property
    def target_indices(self) -> np.ndarray:
        return self.pairs[:, 1]

    def validate_against(self, n_source: int, n_target: int) -> None:
        if len(self) == 0:
            return
        if self.source_indices.min() < 0 or self.source_indices.max() >= n_source:
            raise ValueError("source index out of range")
        if self.target_indices.min() < 0 or self.target_indices.max() >= n_target:
            raise ValueError("target index out of range")


@dataclass
class DisplacementField:
    """One 3-vector per source point, in mm."""

    vectors: np.ndarray

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("displacement field contains non-finite values")

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def magnitudes(self) -> np.ndarray:
        return np.linalg.norm(self.vectors, axis=1)


# ---------------------------------------------------------------------------
# Spatial queries
# ---------------------------------------------------------------------------

def build_index(points) -> cKDTree:
    """k-d tree over a point set; rebuilt per query cloud by convention."""
    pts = _as_points(points)
    if pts.shape[0] == 0:
        raise EmptyCloud("cannot index an empty cloud")
    return cKDTree(pts)

def nearest_neighbor(query, cloud) -> tuple[int, float]:
    """Index and distance (mm) of the cloud point closest to `query`.

    Equidistant candidates resolve to the lowest index so golden tests
    stay deterministic.
    """
    q = np.asarray(query, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(q)):
        raise ValueError("query point must be finite")
    pts = _as_points(cloud)
    if pts.shape[0] == 0:
        raise EmptyCloud("nearest_neighbor on an empty cloud")
    tree = cKDTree(pts)
    dist, idx = tree.query(q)
    # The tree breaks ties arbitrarily; re-check a whisker-sized ball and
    # pick the lowest index among exact minima.
    radius = dist * (1.0 + 1e-12) + 1e-300
    candidates = sorted(tree.query_ball_point(q, radius))
    exact = np.linalg.norm(pts[candidates] - q, axis=1)
    best = exact.min()
    winner = candidates[int(np.argmin(exact))]
    return int(winner), float(best)


def nn_distances(queries: np.ndarray, target_tree: cKDTree) -> tuple[np.ndarray, np.ndarray]:
    """Bulk nearest-neighbor query (no tie guarantees; used by distances/losses)."""
    d, i = target_tree.query(queries)
    return np.asarray(d, dtype=np.float64), np.asarray(i, dtype=np.int64)


def chamfer_distance(a, b) -> float:
    """Symmetric mean nearest-neighbor distance, with non-squared norms.

    CD(A, B) = mean_a min_b |a - b| + mean_b min_a |a - b|. Many libraries
    square the norms; this one deliberately does not.
    """
    pa = _as_points(a)
    pb = _as_points(b)
    if pa.shape[0] == 0 or pb.shape[0] == 0:
        raise EmptyCloud("chamfer_distance requires two non-empty sets")
    d_ab, _ = nn_distances(pa, cKDTree(pb))
    d_ba, _ = nn_distances(pb, cKDTree(pa))
    return float(d_ab.mean() + d_ba.mean())


# ---------------------------------------------------------------------------
# Rigid motion
# ---------------------------------------------------------------------------

def apply_rigid(transform: RigidTransform, cloud: LabeledCloud) -> LabeledCloud:
    """Map every point, support point, and landmark by p -> R p + t."""
    _check_rotation(transform.rotation)
    moved = cloud.replace_points(transform.apply(cloud.points))
    moved.support_points = transform.apply(cloud.support_points)
    if cloud.landmark_points.shape[0]:
        moved.landmark_points = transform.apply(cloud.landmark_points)
    return moved


def estimate_rigid_from_correspondences(
    source, target, corr: CorrespondenceSet
) -> RigidTransform:
    """Least-squares SE(3) fit of paired points (SVD, reflection corrected).

    Minimizes sum ||R x_u + t - y_v||^2 over the correspondence pairs.
    Raises DegenerateCorrespondences for fewer than 3 pairs or a collinear
    configuration.
    """
    src = _as_points(source)
    tgt = _as_points(target)
    corr.validate_against(src.shape[0], tgt.shape[0])
    if len(corr) < 3:
        raise DegenerateCorrespondences("need at least 3 correspondence pairs")
    x = src[corr.source_indices]
    y = tgt[corr.target_indices]
    return fit_rigid(x, y)


def fit_rigid(x: np.ndarray, y: np.ndarray) -> RigidTransform:
    """Kabsch/Umeyama rigid fit of y ~ R x + t for row-paired arrays."""
    if x.shape != y.shape or x.shape[0] < 3:
        raise DegenerateCorrespondences("paired arrays of at least 3 points required")
    cx = x.mean(axis=0)
    cy = y.mean(axis=0)
    h = (x - cx).T @ (y - cy)
    u, s, vt = np.linalg.svd(h)
    # Collinear or coincident points leave the rotation about the point axis
    # unconstrained: the second singular value vanishes.
    if s[1] <= max(s[0] * 1e-9, 1e-300):
        raise DegenerateCorrespondences("correspondences are collinear or coincident")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = cy - rot @ cx
    return RigidTransform(rot, t)
