"""Hierarchical per-instance deformation fitting (stage 2).

A pyramid of small per-level MLPs maps sinusoidal position encodings to
per-point displacement increments. Levels are optimized one at a time
with increasing encoding frequency, so early levels absorb slowly
varying, near-rigid motion and later levels the residual local
deformation. Each level's output head starts at zero, which makes the
untrained pyramid an exact identity map.

Everything here runs on unit-normalized coordinates; the normalization
is recorded on the pyramid and inverted before results leave the
module.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .coarse import (
    CoarseConfig,
    coarse_register,
    compute_descriptors,
    match_correspondences,
)
from .errors import C2PRegError, InvalidConfig, NoCorrespondences, NumericalError
from .geom import (
    CorrespondenceSet,
    DisplacementField,
    LabeledCloud,
    RigidTransform,
    apply_rigid,
    chamfer_distance,
    _as_points,
)

_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8


@dataclass(frozen=True)
class PyramidConfig:
    """Settings for the deformation pyramid.

    ``levels`` and ``max_iterations`` bound the total work; the level
    early-stop usually cuts well below the bound. ``base_exponent``
    shifts the whole frequency ladder: level k encodes positions at
    spatial frequency 2**(k + base_exponent) in unit coordinates.
    """

    levels: int = 8
    max_iterations: int = 100
    base_exponent: int = 0
    width: int = 128
    depth: int = 3
    learning_rate: float = 1e-3
    lr_decay: float = 0.99
    regularization_weight: float = 0.1
    graph_neighbors: int = 8
    early_stop_rel: float = 1e-4
    early_stop_window: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.levels < 1 or self.max_iterations < 0:
            raise InvalidConfig("need at least one level and a non-negative iteration cap")
        if self.width < 1 or self.depth < 1:
            raise InvalidConfig("MLP width and depth must be at least 1")
        if self.learning_rate <= 0 or not (0.0 < self.lr_decay <= 1.0):
            raise InvalidConfig("learning rate must be positive and decay in (0, 1]")
        if self.regularization_weight < 0:
            raise InvalidConfig("regularization weight must be non-negative")
        if self.graph_neighbors < 1:
            raise InvalidConfig("graph_neighbors must be at least 1")
        if self.early_stop_rel < 0 or self.early_stop_window < 1:
            raise InvalidConfig("early-stop settings out of range")


# ---------------------------------------------------------------------------
# Encodings and the tiny MLP
# ---------------------------------------------------------------------------

def sinusoidal_encode(points, level: int, base_exponent: int = 0) -> np.ndarray:
    """Component-wise (sin, cos) of 2**(level + base_exponent) * p.

    Accepts one 3-vector or an (N, 3) array and returns the matching
    (6,) or (N, 6) encoding. Doubling the position is exactly one level
    step: encode(2p, k) == encode(p, k + 1).
    """
    p = np.asarray(points, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ValueError("cannot encode non-finite coordinates")
    scaled = (2.0 ** (level + base_exponent)) * p
    return np.concatenate([np.sin(scaled), np.cos(scaled)], axis=-1)


def _init_mlp(rng: np.random.Generator, width: int, depth: int) -> list:
    """Xavier-uniform hidden layers, zero output head (identity start)."""
    sizes = [6] + [width] * depth + [3]
    weights = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        weights.append((w, np.zeros(fan_out)))
    head_w, head_b = weights[-1]
    weights[-1] = (np.zeros_like(head_w), head_b)
    return weights


def _mlp_forward(weights, inputs: np.ndarray):
    """Forward pass; returns outputs and the post-activation cache."""
    activations = [inputs]
    h = inputs
    for w, b in weights[:-1]:
        h = np.tanh(h @ w + b)
        activations.append(h)
    head_w, head_b = weights[-1]
    return h @ head_w + head_b, activations


def _mlp_backward(weights, activations, output_gradients):
    """Reverse-mode gradients for `_mlp_forward`.

    Returns (weight_gradients, input_gradients) with weight gradients in
    the same (W, b) layout as the weights.
    """
    grads = [None] * len(weights)
    g = output_gradients
    head_w, _ = weights[-1]
    grads[-1] = (activations[-1].T @ g, g.sum(axis=0))
    g = g @ head_w.T
    for layer in range(len(weights) - 2, -1, -1):
        h_out = activations[layer + 1]
        g = g * (1.0 - h_out * h_out)  # tanh'
        w, _ = weights[layer]
        grads[layer] = (activations[layer].T @ g, g.sum(axis=0))
        g = g @ w.T
    return grads, g


def mlp_forward_backward(weights, inputs, output_gradients, context: str = ""):
    """Dense forward pass plus reverse-mode gradients in one call.

    Returns (outputs, weight_gradients, input_gradients). Raises
    NumericalError if any array stops being finite; `context` (for
    example "level 3 iteration 41") is appended to the message.
    """
    outputs, activations = _mlp_forward(weights, np.asarray(inputs, dtype=np.float64))
    if not np.all(np.isfinite(outputs)):
        raise NumericalError(f"non-finite MLP outputs {context}".rstrip())
    weight_grads, input_grads = _mlp_backward(
        weights, activations, np.asarray(output_gradients, dtype=np.float64)
    )
    for w_g, b_g in weight_grads:
        if not (np.all(np.isfinite(w_g)) and np.all(np.isfinite(b_g))):
            raise NumericalError(f"non-finite MLP gradients {context}".rstrip())
    return outputs, weight_grads, input_grads


def _init_adam(weights) -> dict:
    return {
        "m": [(np.zeros_like(w), np.zeros_like(b)) for w, b in weights],
        "v": [(np.zeros_like(w), np.zeros_like(b)) for w, b in weights],
        "t": 0,
    }


def _adam_step(weights, grads, state, lr: float) -> list:
    """One Adam update; returns a new weight list, leaving inputs intact."""
    state["t"] += 1
    t = state["t"]
    bias1 = 1.0 - _ADAM_BETA1 ** t
    bias2 = 1.0 - _ADAM_BETA2 ** t
    new_weights = []
    for layer, ((w, b), (g_w, g_b)) in enumerate(zip(weights, grads)):
        m_w, m_b = state["m"][layer]
        v_w, v_b = state["v"][layer]
        m_w = _ADAM_BETA1 * m_w + (1.0 - _ADAM_BETA1) * g_w
        m_b = _ADAM_BETA1 * m_b + (1.0 - _ADAM_BETA1) * g_b
        v_w = _ADAM_BETA2 * v_w + (1.0 - _ADAM_BETA2) * g_w * g_w
        v_b = _ADAM_BETA2 * v_b + (1.0 - _ADAM_BETA2) * g_b * g_b
        state["m"][layer] = (m_w, m_b)
        state["v"][layer] = (v_w, v_b)
        w = w - lr * (m_w / bias1) / (np.sqrt(v_w / bias2) + _ADAM_EPS)
        b = b - lr * (m_b / bias1) / (np.sqrt(v_b / bias2) + _ADAM_EPS)
        new_weights.append((w, b))
    return new_weights


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def correspondence_loss(deformed_source, sigma: CorrespondenceSet, target):
    """Masked symmetric Chamfer loss and its gradient.

    Only the source points named by `sigma` participate; the target side
    is always the full cloud. Nearest-neighbor assignments are treated
    as fixed for differentiation, and coincident pairs contribute a zero
    subgradient. Returns (loss, gradient per deformed source point),
    with zero gradient rows for unmasked points.
    """
    src = _as_points(deformed_source)
    tgt = _as_points(target)
    if len(sigma) == 0:
        raise NoCorrespondences("correspondence loss needs a non-empty mask")
    sigma.validate_against(len(src), len(tgt))
    mask = np.unique(sigma.source_indices)
    x = src[mask]

    d_fwd, j_fwd = cKDTree(tgt).query(x)
    d_bwd, i_bwd = cKDTree(x).query(tgt)
    loss = float(d_fwd.mean() + d_bwd.mean())

    grad = np.zeros_like(src)
    diff_fwd = x - tgt[j_fwd]
    safe = (d_fwd > 0.0) & np.isfinite(d_fwd)
    unit_fwd = np.zeros_like(diff_fwd)
    unit_fwd[safe] = diff_fwd[safe] / d_fwd[safe, None]
    grad[mask] += unit_fwd / len(x)

    diff_bwd = x[i_bwd] - tgt
    safe = (d_bwd > 0.0) & np.isfinite(d_bwd)
    unit_bwd = np.zeros_like(diff_bwd)
    unit_bwd[safe] = diff_bwd[safe] / d_bwd[safe, None]
    np.add.at(grad, mask[i_bwd], unit_bwd / len(tgt))
    return loss, grad


def knn_edges(points, k: int) -> np.ndarray:
    """Directed k-nearest-neighbor edges (i, j) over a point set."""
    pts = _as_points(points)
    n = len(pts)
    k_eff = min(k, n - 1)
    if k_eff < 1:
        return np.empty((0, 2), dtype=np.int64)
    _, idx = cKDTree(pts).query(pts, k=k_eff + 1)
    neighbors = idx[:, 1:]
    sources = np.repeat(np.arange(n, dtype=np.int64), k_eff)
    return np.stack([sources, neighbors.reshape(-1).astype(np.int64)], axis=1)


def regularization_loss(displacements, edges: np.ndarray):
    """Motion coherence: mean squared displacement difference over edges.

    Returns (loss, gradient per point). A constant field costs nothing,
    so the term penalizes only spatially incoherent motion.
    """
    if isinstance(displacements, DisplacementField):
        phi = displacements.vectors
    else:
        phi = np.asarray(displacements, dtype=np.float64).reshape(-1, 3)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    grad = np.zeros_like(phi)
    if len(edges) == 0:
        return 0.0, grad
    diff = phi[edges[:, 0]] - phi[edges[:, 1]]
    loss = float((diff * diff).sum(axis=1).mean())
    scaled = (2.0 / len(edges)) * diff
    np.add.at(grad, edges[:, 0], scaled)
    np.add.at(grad, edges[:, 1], -scaled)
    return loss, grad


# ---------------------------------------------------------------------------
# Pyramid state and optimization
# ---------------------------------------------------------------------------

@dataclass
class DeformationPyramid:
    """Fitted per-level MLP weights plus the normalization record.

    The pyramid is a pure function of its weights: `transform` replays
    the level-by-level map on any points, so the object fully determines
    the deformation it was fitted to produce.
    """

    level_weights: list
    optimizer_states: list
    centroid: np.ndarray
    scale: float
    base_exponent: int = 0

    @classmethod
    def untrained(cls, config: PyramidConfig, centroid=None, scale: float = 1.0):
        """Freshly initialized pyramid; an exact identity map."""
        rng = np.random.default_rng(config.seed)
        weights = [_init_mlp(rng, config.width, config.depth) for _ in range(config.levels)]
        states = [_init_adam(w) for w in weights]
        c = np.zeros(3) if centroid is None else np.asarray(centroid, dtype=np.float64)
        return cls(weights, states, c, float(scale), config.base_exponent)

    def transform(self, points) -> np.ndarray:
        """Map points (input units) through every level in order."""
        pts = _as_points(points)
        current = (pts - self.centroid) / self.scale
        for level, weights in enumerate(self.level_weights, start=1):
            out, _ = _mlp_forward(
                weights, sinusoidal_encode(current, level, self.base_exponent)
            )
            current = current + out
        return current * self.scale + self.centroid


def fit_pyramid(
    source,
    target,
    sigma: CorrespondenceSet,
    config: PyramidConfig = PyramidConfig(),
):
    """Optimize the pyramid level by level; the workhorse behind
    `ndp_register`.

    Returns (pyramid, displacement field in input units, per-level loss
    trace). Each level keeps the weights of its best-seen loss, entry
    included, so the kept loss never increases across levels and the
    stored pyramid replays the returned field exactly.
    """
    src = _as_points(source)
    tgt = _as_points(target)
    if len(sigma) == 0:
        raise NoCorrespondences("stage 2 needs at least one masked source point")
    sigma.validate_against(len(src), len(tgt))

    merged = np.vstack([src, tgt])
    centroid = merged.mean(axis=0)
    scale = float(np.linalg.norm(merged - centroid, axis=1).max())
    if scale <= 0.0:
        scale = 1.0
    s_unit = (src - centroid) / scale
    t_unit = (tgt - centroid) / scale

    edges = knn_edges(s_unit, config.graph_neighbors)
    rng = np.random.default_rng(config.seed)
    current = s_unit.copy()
    total = np.zeros_like(s_unit)
    kept_weights = []
    kept_states = []
    trace = []

    for level in range(1, config.levels + 1):
        weights = _init_mlp(rng, config.width, config.depth)
        adam = _init_adam(weights)
        encoded = sinusoidal_encode(current, level, config.base_exponent)

        losses = []
        best_so_far = []
        best_loss = np.inf
        best_disp = np.zeros_like(current)
        best_weights = weights
        for iteration in range(config.max_iterations + 1):
            out, activations = _mlp_forward(weights, encoded)
            if not np.all(np.isfinite(out)):
                raise NumericalError(
                    f"non-finite displacement at level {level} iteration {iteration}"
                )
            cd_loss, cd_grad = correspondence_loss(current + out, sigma, t_unit)
            reg_loss, reg_grad = regularization_loss(total + out, edges)
            loss = cd_loss + config.regularization_weight * reg_loss
            if not np.isfinite(loss):
                raise NumericalError(
                    f"non-finite loss at level {level} iteration {iteration}"
                )
            losses.append(loss)
            if loss < best_loss:
                best_loss = loss
                best_disp = out.copy()
                best_weights = weights
            best_so_far.append(best_loss)
            if iteration == config.max_iterations:
                break
            window = config.early_stop_window
            if iteration >= window:
                anchor = best_so_far[iteration - window]
                if anchor - best_loss < config.early_stop_rel * max(abs(anchor), 1e-30):
                    break
            out_grad = cd_grad + config.regularization_weight * reg_grad
            weight_grads, _ = _mlp_backward(weights, activations, out_grad)
            for w_g, b_g in weight_grads:
                if not (np.all(np.isfinite(w_g)) and np.all(np.isfinite(b_g))):
                    raise NumericalError(
                        f"non-finite gradient at level {level} iteration {iteration}"
                    )
            lr = config.learning_rate * config.lr_decay ** iteration
            weights = _adam_step(weights, weight_grads, adam, lr)

        current = current + best_disp
        total = total + best_disp
        kept_weights.append(best_weights)
        kept_states.append(adam)
        trace.append(
            {
                "level": level,
                "entry_loss": losses[0],
                "exit_loss": best_loss,
                "iterations": len(losses) - 1,
                "losses": losses,
            }
        )

    pyramid = DeformationPyramid(
        kept_weights, kept_states, centroid, scale, config.base_exponent
    )
    return pyramid, DisplacementField(total * scale), trace


def ndp_register(
    source,
    target,
    sigma: CorrespondenceSet,
    config: PyramidConfig = PyramidConfig(),
):
    """Fit the deformation pyramid mapping `source` onto `target`.

    `source` is expected to be rigidly pre-aligned; the returned field
    contains only the non-rigid motion, in input units, one vector per
    source point. Also returns the per-level loss trace; each level's
    entry loss equals the previous level's exit loss, and the kept
    (best) loss never increases across levels.
    """
    _, displacement, trace = fit_pyramid(source, target, sigma, config)
    return displacement, trace


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------

@dataclass
class C2PResult:
    """Everything the two-stage registration produces for one pair."""

    tau: RigidTransform
    sigma: CorrespondenceSet
    phi_est: DisplacementField         # non-rigid part, aligned frame
    composed_field: DisplacementField  # full map on original coordinates
    diagnostics: dict = field(default_factory=dict)


def _proximity_mask(aligned_points, target_points, threshold: float) -> CorrespondenceSet:
    """Pair every aligned source point with its target neighbor within reach.

    Used to build the stage-2 mask: source points with no target point
    within `threshold` are treated as occluded and excluded from the
    Chamfer loss.
    """
    d, j = cKDTree(target_points).query(aligned_points)
    keep = np.nonzero(d <= threshold)[0]
    if len(keep) == 0:
        return CorrespondenceSet(np.empty((0, 2), dtype=np.int64), np.empty(0))
    pairs = np.stack([keep, j[keep]], axis=1)
    scores = 1.0 - d[keep] / max(threshold, 1e-30)
    return CorrespondenceSet(pairs, np.clip(scores, 0.0, 1.0))


def _descriptor_only_sigma(source, target, config: CoarseConfig) -> CorrespondenceSet:
    """Raw descriptor matches, for the identity-init fallback path."""
    try:
        src_desc = compute_descriptors(source, config.radii, config.keypoint_fraction)
        tgt_desc = compute_descriptors(target, config.radii, config.keypoint_fraction)
        return match_correspondences(src_desc, tgt_desc)
    except C2PRegError:
        return CorrespondenceSet(np.empty((0, 2), dtype=np.int64), np.empty(0))


def _structured_fields(
    aligned: LabeledCloud,
    target: LabeledCloud,
    pyramid_config: PyramidConfig,
    threshold: float,
    min_points: int,
):
    """One pyramid per structure present on both sides, composed.

    Returns (stacked displacement vectors, mask in full-cloud indices,
    per-structure summaries, names of skipped structures). Structures
    missing from the target keep a zero field: their motion is
    unobservable, so only the rigid stage moves them. Confining the
    Chamfer loss inside each structure stops rim points of one structure
    being dragged onto an adjacent one, which is the dominant failure of
    whole-cloud fitting here.
    """
    phi = np.zeros_like(aligned.points)
    all_pairs = []
    all_scores = []
    summaries = []
    skipped = []
    for k, name in enumerate(aligned.structure_names):
        s_idx = np.nonzero(aligned.labels == k)[0]
        t_idx = np.nonzero(target.labels == k)[0]
        if len(s_idx) < min_points or len(t_idx) < min_points:
            skipped.append(name)
            continue
        s_pts = aligned.points[s_idx]
        t_pts = target.points[t_idx]
        sigma = _proximity_mask(s_pts, t_pts, threshold)
        if len(sigma) == 0:
            # Structure visible but displaced beyond the reach radius;
            # let every point participate rather than dropping it.
            sigma = _proximity_mask(s_pts, t_pts, np.inf)
        fld, trace = ndp_register(s_pts, t_pts, sigma, pyramid_config)
        phi[s_idx] = fld.vectors
        all_pairs.append(
            np.stack([s_idx[sigma.source_indices], t_idx[sigma.target_indices]], axis=1)
        )
        all_scores.append(sigma.scores)
        summaries.append(
            {
                "structure": name,
                "mask_pairs": len(sigma),
                "final_loss": trace[-1]["exit_loss"],
                "levels": [
                    {key: lvl[key] for key in ("level", "entry_loss", "exit_loss", "iterations")}
                    for lvl in trace
                ],
            }
        )
    if all_pairs:
        mask = CorrespondenceSet(np.vstack(all_pairs), np.concatenate(all_scores))
    else:
        mask = CorrespondenceSet(np.empty((0, 2), dtype=np.int64), np.empty(0))
    return phi, mask, summaries, skipped


def c2p_register(
    source: LabeledCloud,
    target: LabeledCloud,
    coarse_config: CoarseConfig = CoarseConfig(),
    pyramid_config: PyramidConfig = PyramidConfig(),
    allow_identity_init: bool = True,
    mask_strategy: str = "structured",
    proximity_threshold: float = 1.5,
    min_structure_points: int = 5,
) -> C2PResult:
    """Complete-to-partial registration: coarse rigid stage, then pyramid.

    The composed field maps each original source point x to
    NDP(R x + t), so `source.points + composed_field.vectors` lands on
    the target. `phi_est` holds only the stage-2 motion and excludes the
    rigid part, which is reported separately as `tau`.

    Mask strategies for stage 2:
      * "structured" (default): one pyramid per structure present on
        both sides, Chamfer confined within the structure.
      * "proximity": one pyramid over the whole cloud; masked source
        points are those within `proximity_threshold` of the target.
      * "descriptor": one pyramid masked by the stage-1 correspondences.

    If the coarse stage fails and `allow_identity_init` is set, the
    pipeline continues from the identity transform with whatever raw
    descriptor matches exist.
    """
    if mask_strategy not in ("structured", "proximity", "descriptor"):
        raise InvalidConfig("mask_strategy must be 'structured', 'proximity' or 'descriptor'")
    started = time.perf_counter()
    try:
        tau, sigma_coarse, rigid_diag = coarse_register(source, target, coarse_config)
    except C2PRegError as exc:
        if not allow_identity_init:
            raise
        tau = RigidTransform.identity()
        sigma_coarse = _descriptor_only_sigma(source, target, coarse_config)
        rigid_diag = {"rigid_init": "identity_fallback", "stage1_error": str(exc)}
    rigid_done = time.perf_counter()

    aligned = apply_rigid(tau, source)
    structure_summaries = None
    skipped_structures = None
    if mask_strategy == "structured":
        vectors, sigma, structure_summaries, skipped_structures = _structured_fields(
            aligned, target, pyramid_config, proximity_threshold, min_structure_points
        )
        if len(sigma) == 0:
            raise NoCorrespondences("no structure is visible on both sides")
        phi_est = DisplacementField(vectors)
        level_summaries = [s["levels"] for s in structure_summaries]
        final_loss = float(np.mean([s["final_loss"] for s in structure_summaries]))
    else:
        if mask_strategy == "proximity":
            sigma = _proximity_mask(aligned.points, target.points, proximity_threshold)
            if len(sigma) == 0:
                sigma = sigma_coarse
        else:
            sigma = sigma_coarse
        if len(sigma) == 0:
            raise NoCorrespondences("no usable stage-2 mask for this pair")
        phi_est, trace = ndp_register(aligned.points, target.points, sigma, pyramid_config)
        level_summaries = [
            {k: level[k] for k in ("level", "entry_loss", "exit_loss", "iterations")}
            for level in trace
        ]
        final_loss = trace[-1]["exit_loss"]

    composed = DisplacementField(aligned.points + phi_est.vectors - source.points)
    finished = time.perf_counter()

    diagnostics = {
        "rigid": rigid_diag,
        "init_rigid_chamfer_mm": chamfer_distance(aligned.points, target.points),
        "final_chamfer_mm": chamfer_distance(
            aligned.points + phi_est.vectors, target.points
        ),
        "mask_strategy": mask_strategy,
        "mask_pairs": len(sigma),
        "levels": level_summaries,
        "final_loss": final_loss,
        "rigid_seconds": rigid_done - started,
        "pyramid_seconds": finished - rigid_done,
        "wall_time_s": finished - started,
    }
    if structure_summaries is not None:
        diagnostics["structures"] = structure_summaries
        diagnostics["skipped_structures"] = skipped_structures
    return C2PResult(tau, sigma, phi_est, composed, diagnostics)
