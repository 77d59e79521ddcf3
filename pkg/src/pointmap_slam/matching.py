"""Dense ray-based correspondence search, keyframe records, and fusion.

Matching walks a small local window over the target pixel grid looking for
the target point whose transformed ray best aligns with each source
pixel's ray; acceptance is gated by a maximum angular error. Matching on
unit rays is invariant to a global rescaling of either pointmap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import PinholeIntrinsics, Sim3

DEFAULT_THETA_MAX = math.radians(0.5)


@dataclass
class CorrespondenceSet:
    """Pixel matches from a source frame to a target frame."""

    source_frame: int
    target_frame: int
    source_pixels: np.ndarray  # (n, 2) int rows, cols
    target_pixels: np.ndarray  # (n, 2) int rows, cols
    angular_errors: np.ndarray  # (n,) radians
    weights: np.ndarray  # (n,) sqrt(conf_src * conf_tgt)
    valid_ratio: float

    def __len__(self) -> int:
        return len(self.source_pixels)

    def subsample(self, cap: int) -> "CorrespondenceSet":
        """Uniform subsample down to at most cap matches."""
        n = len(self)
        if n <= cap:
            return self
        keep = (np.arange(cap) * (n / cap)).astype(int)
        return CorrespondenceSet(
            self.source_frame,
            self.target_frame,
            self.source_pixels[keep],
            self.target_pixels[keep],
            self.angular_errors[keep],
            self.weights[keep],
            self.valid_ratio,
        )


@dataclass
class KeyframeRecord:
    """A retained frame: fused canonical pointmap in its own camera frame,
    fused confidence, recursively averaged intrinsics, absolute pose."""

    id: int
    pointmap: np.ndarray  # (H, W, 3)
    confidence: np.ndarray  # (H, W)
    intrinsics: PinholeIntrinsics
    pose: Sim3
    focal_samples: int = 1
    timestamp: float = 0.0
    descriptor: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.confidence.shape


def ray_match(
    source_points: np.ndarray,
    source_confidence: np.ndarray,
    source_intrinsics: PinholeIntrinsics,
    target_points: np.ndarray,
    target_confidence: np.ndarray,
    transform: Sim3,
    stride: int = 1,
    theta_max: float = DEFAULT_THETA_MAX,
    radius: int = 2,
    max_iters: int = 5,
    source_frame: int = -1,
    target_frame: int = -1,
) -> CorrespondenceSet:
    """Match source pixels to target pixels by minimizing ray angle.

    ``transform`` maps target-frame points into the source frame. Every
    stride-sampled valid source pixel is initialized by projecting its
    point into the target grid (through the source intrinsics, the only
    estimate available), then refined by an iterated local argmin over a
    (2r+1)^2 neighborhood until the argmin is interior or the iteration
    cap is reached. Matches with final angle below theta_max are kept,
    weighted by the geometric mean of the two confidences.
    """
    h, w = target_confidence.shape
    src_valid = source_confidence > 0
    if stride > 1:
        keep = np.zeros_like(src_valid)
        keep[::stride, ::stride] = True
        src_valid = src_valid & keep
    src_rows, src_cols = np.nonzero(src_valid)
    n_sampled = len(src_rows)
    if n_sampled == 0 or not np.any(target_confidence > 0):
        return CorrespondenceSet(
            source_frame,
            target_frame,
            np.zeros((0, 2), dtype=int),
            np.zeros((0, 2), dtype=int),
            np.zeros(0),
            np.zeros(0),
            0.0,
        )

    xs = source_points[src_rows, src_cols]  # (n, 3)
    src_norm = np.linalg.norm(xs, axis=1)
    finite = src_norm > 1e-12
    rays_src = np.zeros_like(xs)
    rays_src[finite] = xs[finite] / src_norm[finite, None]

    # Transformed target points and their rays in the source frame.
    tgt_flat = target_points.reshape(-1, 3)
    y = transform.apply(tgt_flat)
    y_norm = np.linalg.norm(y, axis=1)
    tgt_ok = (target_confidence.reshape(-1) > 0) & (y_norm > 1e-12)
    rays_tgt = np.zeros_like(y)
    rays_tgt[tgt_ok] = y[tgt_ok] / y_norm[tgt_ok, None]

    # Initialize: source point re-expressed in the target frame, projected.
    inv = transform.inverse()
    xt = inv.apply(xs)
    z = xt[:, 2]
    in_front = z > 1e-6
    safe_z = np.where(in_front, z, 1.0)
    u = source_intrinsics.fx * xt[:, 0] / safe_z + source_intrinsics.cx
    v = source_intrinsics.fy * xt[:, 1] / safe_z + source_intrinsics.cy
    cols0 = np.clip(np.floor(u).astype(int), 0, w - 1)
    rows0 = np.clip(np.floor(v).astype(int), 0, h - 1)
    alive = finite & in_front & (u >= -radius) & (u < w + radius) & (v >= -radius) & (v < h + radius)

    offsets = np.stack(
        np.meshgrid(
            np.arange(-radius, radius + 1), np.arange(-radius, radius + 1), indexing="ij"
        ),
        axis=-1,
    ).reshape(-1, 2)
    interior = (np.abs(offsets[:, 0]) < radius) & (np.abs(offsets[:, 1]) < radius)

    cur_r, cur_c = rows0.copy(), cols0.copy()
    best_dot = np.full(n_sampled, -np.inf)
    best_r, best_c = cur_r.copy(), cur_c.copy()
    converged = np.zeros(n_sampled, dtype=bool)
    for _ in range(max_iters):
        active = alive & ~converged
        if not np.any(active):
            break
        cand_r = np.clip(cur_r[active, None] + offsets[None, :, 0], 0, h - 1)
        cand_c = np.clip(cur_c[active, None] + offsets[None, :, 1], 0, w - 1)
        lin = cand_r * w + cand_c
        dots = np.einsum("nd,nkd->nk", rays_src[active], rays_tgt[lin])
        dots = np.where(tgt_ok[lin], dots, -np.inf)
        pick = np.argmax(dots, axis=1)
        rows_idx = np.arange(dots.shape[0])
        chosen_dot = dots[rows_idx, pick]
        sel_r = cand_r[rows_idx, pick]
        sel_c = cand_c[rows_idx, pick]
        idx = np.nonzero(active)[0]
        improved = chosen_dot > best_dot[idx]
        best_dot[idx[improved]] = chosen_dot[improved]
        best_r[idx[improved]] = sel_r[improved]
        best_c[idx[improved]] = sel_c[improved]
        converged[idx] |= interior[pick] | ~np.isfinite(chosen_dot)
        cur_r[idx] = sel_r
        cur_c[idx] = sel_c

    # Chord-based angle: exact zero for identical rays, accurate when small.
    lin_best = best_r * w + best_c
    chord = np.linalg.norm(rays_src - rays_tgt[lin_best], axis=1)
    angles = 2.0 * np.arcsin(np.clip(0.5 * chord, 0.0, 1.0))
    accepted = alive & np.isfinite(best_dot) & (angles < theta_max)
    accepted &= tgt_ok[lin_best]

    a_rows = src_rows[accepted]
    a_cols = src_cols[accepted]
    b_rows = best_r[accepted]
    b_cols = best_c[accepted]
    weights = np.sqrt(
        source_confidence[a_rows, a_cols]
        * target_confidence[b_rows, b_cols]
    )
    return CorrespondenceSet(
        source_frame,
        target_frame,
        np.stack([a_rows, a_cols], axis=1),
        np.stack([b_rows, b_cols], axis=1),
        angles[accepted],
        weights,
        float(accepted.sum()) / n_sampled,
    )


def keyframe_decision(valid_ratio: float, threshold: float = 0.7) -> bool:
    """Promote when the tracked valid-correspondence ratio drops strictly
    below the threshold."""
    if not 0.0 <= valid_ratio <= 1.0:
        raise ValueError("valid_ratio must lie in [0, 1]")
    return valid_ratio < threshold


def fuse_pointmap(
    record: KeyframeRecord, new_points: np.ndarray, new_confidence: np.ndarray
) -> None:
    """Confidence-weighted average of the canonical pointmap, in place.

    The new observation must already be expressed in the keyframe's own
    camera frame. Pixels with zero new confidence are untouched; first
    observations copy through.
    """
    if new_points.shape != record.pointmap.shape:
        raise ValueError("pointmap shape mismatch")
    if new_confidence.shape != record.confidence.shape:
        raise ValueError("confidence shape mismatch")
    c_old = record.confidence
    c_new = new_confidence
    total = c_old + c_new
    update = c_new > 0
    safe = np.where(update, total, 1.0)
    fused = (
        c_old[..., None] * record.pointmap + c_new[..., None] * new_points
    ) / safe[..., None]
    record.pointmap = np.where(update[..., None], fused, record.pointmap)
    record.confidence = np.where(update, total, c_old)


def update_intrinsics(record: KeyframeRecord, fx: float, fy: float) -> None:
    """Fold a fresh focal estimate into the running mean; the principal
    point stays pinned to the image center. Non-positive focals are
    skipped without advancing the sample count."""
    if fx <= 0 or fy <= 0:
        return
    n = record.focal_samples
    mean_fx = (record.intrinsics.fx * n + fx) / (n + 1)
    mean_fy = (record.intrinsics.fy * n + fy) / (n + 1)
    record.intrinsics = PinholeIntrinsics.centered(
        mean_fx, mean_fy, record.intrinsics.width, record.intrinsics.height
    )
    record.focal_samples = n + 1
