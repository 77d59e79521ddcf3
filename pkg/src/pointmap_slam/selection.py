"""Information-driven candidate re-ranking and adaptive window sizing.

Candidates retrieved by voxel overlap are re-ranked by the expected
entropy reduction of the last keyframe's low-confidence points when a
candidate view is added (an EKF covariance update per point), then
activated one at a time while a reduced chi-square statistic of the
window optimization says the extra view still improves stability.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateSystemError, SingularInnovationError, SlamError
from .geometry import PinholeIntrinsics, Sim3

COV_EIGENVALUE_CAP = 1e4


@dataclass(frozen=True)
class PointPrior:
    """A 3D point in the reference keyframe's camera frame with its prior
    covariance (symmetric positive definite)."""

    point: np.ndarray
    prior_cov: np.ndarray


@dataclass(frozen=True)
class InfoGainResult:
    candidate_id: int
    gamma: float
    valid_points: int


@dataclass(frozen=True)
class StabilityReport:
    kappa: float
    residual_count: int
    rank: int
    dof: int


@dataclass
class WindowState:
    """Active optimization window: the default triplet, the adaptively
    activated extras, and the remaining ranked candidates."""

    triplet: list[int]
    activated: list[int] = field(default_factory=list)
    candidates: list[int] = field(default_factory=list)
    report: StabilityReport | None = None

    @property
    def window(self) -> list[int]:
        return list(self.triplet) + list(self.activated)


def _ray_basis(ray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two unit vectors orthogonal to the ray, the first aligned with the
    image x direction where possible."""
    e1 = np.array([1.0, 0.0, 0.0]) - ray[0] * ray
    n1 = np.linalg.norm(e1)
    if n1 < 1e-9:
        e1 = np.array([0.0, 1.0, 0.0]) - ray[1] * ray
        n1 = np.linalg.norm(e1)
    e1 = e1 / n1
    e2 = np.cross(ray, e1)
    return e1, e2


def measurement_covariance(
    k: PinholeIntrinsics,
    depth: float,
    confidence: float,
    pixel_sigma: float,
    ray: np.ndarray | None = None,
    beta: float = 0.01,
    eps: float = 1e-9,
) -> np.ndarray:
    """Covariance of a backprojected point: pixel noise pushed through the
    inverse projection (lateral, scaled by depth/focal) plus a confidence-
    dependent variance along the viewing ray, plus eps * I for SPD."""
    if depth <= 0:
        raise ValueError("depth must be positive")
    if confidence <= 0:
        raise ValueError("confidence must be positive")
    if pixel_sigma <= 0:
        raise ValueError("pixel_sigma must be positive")
    if ray is None:
        ray = np.array([0.0, 0.0, 1.0])
    else:
        ray = np.asarray(ray, dtype=float)
        ray = ray / np.linalg.norm(ray)
    e1, e2 = _ray_basis(ray)
    lateral = (pixel_sigma * depth) ** 2
    cov = (
        lateral / k.fx**2 * np.outer(e1, e1)
        + lateral / k.fy**2 * np.outer(e2, e2)
        + (beta / confidence) * np.outer(ray, ray)
        + eps * np.eye(3)
    )
    return 0.5 * (cov + cov.T)


def measurement_covariance_batch(
    k: PinholeIntrinsics,
    depths: np.ndarray,
    confidences: np.ndarray,
    pixel_sigma: float,
    rays: np.ndarray,
    beta: float = 0.01,
    eps: float = 1e-9,
) -> np.ndarray:
    """Vectorized form over n points; rays must be unit (n, 3)."""
    n = len(depths)
    rays = np.asarray(rays, dtype=float)
    e1 = np.zeros((n, 3))
    e1[:, 0] = 1.0
    e1 -= rays[:, 0:1] * rays
    norms = np.linalg.norm(e1, axis=1, keepdims=True)
    fallback = norms[:, 0] < 1e-9
    if np.any(fallback):
        alt = np.zeros((fallback.sum(), 3))
        alt[:, 1] = 1.0
        alt -= rays[fallback, 1:2] * rays[fallback]
        e1[fallback] = alt
        norms = np.linalg.norm(e1, axis=1, keepdims=True)
    e1 /= norms
    e2 = np.cross(rays, e1)
    lateral = (pixel_sigma * np.asarray(depths, dtype=float)) ** 2
    cov = (
        (lateral / k.fx**2)[:, None, None] * (e1[:, :, None] * e1[:, None, :])
        + (lateral / k.fy**2)[:, None, None] * (e2[:, :, None] * e2[:, None, :])
        + (beta / np.asarray(confidences, dtype=float))[:, None, None]
        * (rays[:, :, None] * rays[:, None, :])
        + eps * np.eye(3)[None, :, :]
    )
    return 0.5 * (cov + np.transpose(cov, (0, 2, 1)))


def covariance_update(
    p_prior: np.ndarray, j_r: np.ndarray, sigma: np.ndarray
) -> np.ndarray:
    """Kalman covariance update P+ = P - P J^T (S + J P J^T)^-1 J P,
    symmetrized. Raises when the innovation matrix is singular."""
    p_prior = np.asarray(p_prior, dtype=float)
    j_r = np.asarray(j_r, dtype=float).reshape(-1, 3)
    sigma = np.asarray(sigma, dtype=float)
    innovation = sigma + j_r @ p_prior @ j_r.T
    try:
        gain = np.linalg.solve(innovation, j_r @ p_prior)
    except np.linalg.LinAlgError as exc:
        raise SingularInnovationError(str(exc)) from exc
    if not np.all(np.isfinite(gain)):
        raise SingularInnovationError("non-finite innovation solve")
    post = p_prior - p_prior @ j_r.T @ gain
    return 0.5 * (post + post.T)


def _cap_eigenvalues(cov: np.ndarray, cap: float) -> np.ndarray:
    vals, vecs = np.linalg.eigh(cov)
    if vals[-1] <= cap:
        return cov
    vals = np.minimum(vals, cap)
    return (vecs * vals) @ vecs.T


def select_low_confidence_subset(
    points: np.ndarray,
    confidence: np.ndarray,
    k: PinholeIntrinsics,
    pixel_sigma: float,
    beta: float = 0.01,
    cap: int = 512,
    cov_cap: float = COV_EIGENVALUE_CAP,
) -> list[PointPrior]:
    """Bottom-quartile-confidence points of a keyframe, spatially uniform
    subsampled to at most ``cap``, each with a prior covariance from the
    measurement propagation model at its current fused confidence."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    conf = np.asarray(confidence, dtype=float).reshape(-1)
    valid = (conf > 0) & (pts[:, 2] > 1e-6)
    idx = np.nonzero(valid)[0]
    if idx.size == 0:
        return []
    order = np.argsort(conf[idx], kind="stable")
    quartile = idx[order[: max(1, idx.size // 4)]]
    # Row-major order restores spatial layout; uniform stride subsample.
    quartile = np.sort(quartile)
    if quartile.size > cap:
        stride = quartile.size / cap
        quartile = quartile[(np.arange(cap) * stride).astype(int)]
    sel_pts = pts[quartile]
    sel_conf = conf[quartile]
    rays = sel_pts / np.linalg.norm(sel_pts, axis=1, keepdims=True)
    covs = measurement_covariance_batch(
        k, sel_pts[:, 2], sel_conf, pixel_sigma, rays, beta=beta
    )
    priors = []
    for p, c in zip(sel_pts, covs):
        priors.append(PointPrior(p, _cap_eigenvalues(c, cov_cap)))
    return priors


def information_gain(
    candidate_id: int,
    relative_pose: Sim3,
    candidate_intrinsics: PinholeIntrinsics,
    candidate_confidence: np.ndarray,
    subset: Sequence[PointPrior],
    pixel_sigma: float,
    beta: float = 0.01,
) -> InfoGainResult:
    """Entropy reduction of the subset when observed from the candidate.

    ``relative_pose`` maps reference-keyframe camera points into the
    candidate's camera frame. Points reprojecting inside the candidate
    image with positive depth contribute 0.5 * log det(P-) / det(P+)
    each, where P+ is the EKF update through the ray-residual Jacobian.
    """
    if not subset:
        return InfoGainResult(candidate_id, 0.0, 0)
    pts = np.stack([p.point for p in subset])
    transformed = relative_pose.apply(pts)
    z = transformed[:, 2]
    in_front = z > 1e-6
    safe_z = np.where(in_front, z, 1.0)
    u = candidate_intrinsics.fx * transformed[:, 0] / safe_z + candidate_intrinsics.cx
    v = candidate_intrinsics.fy * transformed[:, 1] / safe_z + candidate_intrinsics.cy
    cols = np.floor(u).astype(int)
    rows = np.floor(v).astype(int)
    h, w = candidate_confidence.shape
    in_bounds = (
        in_front & (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
    )
    gamma = 0.0
    valid = 0
    s_rot = relative_pose.scale * relative_pose.rotation
    for i in np.nonzero(in_bounds)[0]:
        y = transformed[i]
        norm_y = np.linalg.norm(y)
        ray = y / norm_y
        j_ray = (np.eye(3) - np.outer(ray, ray)) / norm_y
        j_r = j_ray @ s_rot
        conf = max(float(candidate_confidence[rows[i], cols[i]]), 1e-6)
        meas = measurement_covariance(
            candidate_intrinsics, float(z[i]), conf, pixel_sigma, ray=ray, beta=beta
        )
        prior = subset[i].prior_cov
        try:
            post = covariance_update(prior, j_r, meas)
        except SingularInnovationError:
            continue
        sign_prior, logdet_prior = np.linalg.slogdet(prior)
        sign_post, logdet_post = np.linalg.slogdet(post)
        if sign_prior <= 0 or sign_post <= 0:
            continue
        gamma += max(0.0, 0.5 * (logdet_prior - logdet_post))
        valid += 1
    return InfoGainResult(candidate_id, gamma, valid)


def rerank(
    candidates: Sequence[int],
    gains: Sequence[InfoGainResult],
    overlap_scores: dict[int, int] | None = None,
) -> list[int]:
    """Candidates ordered by descending gain; ties break on higher overlap
    score, then higher id. Ids without a gain entry sort last, stably."""
    overlap_scores = overlap_scores or {}
    gain_by_id = {g.candidate_id: g.gamma for g in gains}
    return sorted(
        candidates,
        key=lambda cid: (
            -gain_by_id.get(cid, -np.inf),
            -overlap_scores.get(cid, 0),
            -cid,
        ),
    )


def reduced_chi_square(b0: np.ndarray, a0: np.ndarray) -> StabilityReport:
    """kappa = |b0|^2 / (M - rank(A0)); rank from singular values above
    max(M, p) * sigma_max * 1e-10."""
    b0 = np.asarray(b0, dtype=float).reshape(-1)
    a0 = np.asarray(a0, dtype=float)
    m = b0.shape[0]
    if a0.size == 0:
        rank = 0
    else:
        sv = np.linalg.svd(a0, compute_uv=False)
        tol = max(a0.shape) * (sv[0] if sv.size else 0.0) * 1e-10
        rank = int(np.sum(sv > tol))
    dof = m - rank
    if dof <= 0:
        raise DegenerateSystemError(f"M={m} <= rank={rank}")
    kappa = float(b0 @ b0) / dof
    return StabilityReport(kappa=kappa, residual_count=m, rank=rank, dof=dof)


def adaptive_activation(
    state: WindowState,
    optimize_and_report: Callable[[list[int]], StabilityReport],
    rerank_remaining: Callable[[list[int]], list[int]] | None = None,
    window_max: int = 5,
    kappa_threshold: float = 1.0,
    revert_policy: str = "discard",
) -> WindowState:
    """Grow the window one candidate at a time while kappa keeps dropping.

    Starts from the default triplet. If its kappa clears the threshold the
    window stays put. Otherwise candidates are appended in rank order;
    a kappa decrease retains the view (and re-ranks what remains), an
    increase stops expansion: ``discard`` falls back to the triplet and
    its optimization result, ``best-kappa`` keeps the configuration with
    the smallest kappa seen. Optimizer failures abort expansion and keep
    the last configuration that optimized successfully.
    """
    if revert_policy not in ("discard", "best-kappa"):
        raise ValueError(f"unknown revert_policy {revert_policy!r}")
    triplet = list(state.triplet)
    candidates = [c for c in state.candidates if c not in triplet]
    base_report = optimize_and_report(triplet)
    result = WindowState(
        triplet=triplet, activated=[], candidates=candidates, report=base_report
    )
    if base_report.kappa <= kappa_threshold:
        return result
    best = result
    current = result
    kappa = base_report.kappa
    remaining = list(candidates)
    while len(current.window) < window_max and remaining:
        nxt = remaining[0]
        trial_window = current.window + [nxt]
        try:
            report = optimize_and_report(trial_window)
        except SlamError:
            break
        if report.kappa < kappa:
            remaining = remaining[1:]
            current = WindowState(
                triplet=triplet,
                activated=current.activated + [nxt],
                candidates=remaining,
                report=report,
            )
            kappa = report.kappa
            if kappa < best.report.kappa:
                best = current
            if kappa <= kappa_threshold:
                return current
            if rerank_remaining is not None and remaining:
                remaining = [c for c in rerank_remaining(list(remaining))]
                current.candidates = remaining
        else:
            if revert_policy == "discard":
                return WindowState(
                    triplet=triplet,
                    activated=[],
                    candidates=candidates,
                    report=base_report,
                )
            return best
    return current
