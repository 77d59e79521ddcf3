"""Joint Sim(3) window optimization over adjacent relative transforms.

The window is a temporal chain [I_m, ..., I_k, I_f]; each adjacent pair
(i, j) carries dense correspondences between i's canonical pointmap and
j's fresh pointmap, and one relative transform T^i_j mapping j-frame
points into i's frame. Residuals stack a ray term with a focal-normalized
pixel term, so both live on comparable angular scales. Each residual
block touches exactly one transform, which makes the Gauss-Newton system
block-diagonal: the damped solve runs independently per pair.

Whitening: rows are scaled by sqrt(w) (confidence as inverse variance,
the default) and divided by the angular pixel noise sigma0 = pixel_sigma
/ mean focal, so a residual of one pixel-equivalent has unit norm; the
Huber threshold and the reduced chi-square statistic both read in these
units.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BehindCameraError,
    DegenerateWindowError,
    InvalidPointError,
    NoProgressError,
)
from .geometry import PinholeIntrinsics, Sim3, point_action_jacobian, sim3_exp
from .selection import StabilityReport, reduced_chi_square

Z_MIN = 1e-6

RESIDUAL_ROWS = {"hybrid": 5, "ray": 3, "projection": 2}


@dataclass
class OptimizerConfig:
    residual_mode: str = "hybrid"
    huber_delta: float = 1.345
    lm_lambda0: float = 1e-4
    lm_lambda_max: float = 1e6
    lm_max_iters: int = 10
    step_tol: float = 1e-8
    pixel_sigma: float = 1.0
    weight_convention: str = "inverse-variance"  # or "literal"
    lambda_pix_mode: str = "inverse-focal"  # or "unit"
    min_pair_correspondences: int = 10

    def lambda_pix(self, k: PinholeIntrinsics) -> float:
        if self.lambda_pix_mode == "unit":
            return 1.0
        return 1.0 / k.mean_focal

    def sigma0(self, k: PinholeIntrinsics) -> float:
        return self.pixel_sigma / k.mean_focal


@dataclass
class PairObservations:
    """Correspondences of one adjacent window pair, as 3D points."""

    source_frame: int
    target_frame: int
    source_points: np.ndarray  # (n, 3) in the earlier frame
    target_points: np.ndarray  # (n, 3) in the later frame
    weights: np.ndarray  # (n,) confidence geometric means
    intrinsics: PinholeIntrinsics  # the earlier frame's estimate


@dataclass
class WindowChain:
    """Ordered window frames with the transforms between adjacent pairs."""

    frames: list[int]
    transforms: list[Sim3]
    pairs: list[PairObservations]

    def __post_init__(self):
        if len(self.transforms) != len(self.frames) - 1:
            raise ValueError("need one transform per adjacent frame pair")
        if len(self.pairs) != len(self.transforms):
            raise ValueError("need one correspondence set per pair")


@dataclass
class ResidualSystem:
    """Whitened residuals and stacked Jacobian in block-sparse form."""

    residuals: list[np.ndarray]  # per pair, (m_p,)
    jacobians: list[np.ndarray]  # per pair, (m_p, 7)
    cost: float

    @property
    def b0(self) -> np.ndarray:
        return np.concatenate(self.residuals) if self.residuals else np.zeros(0)

    def dense_jacobian(self) -> np.ndarray:
        rows = sum(len(r) for r in self.residuals)
        a0 = np.zeros((rows, 7 * len(self.jacobians)))
        offset = 0
        for p, jac in enumerate(self.jacobians):
            a0[offset : offset + len(jac), 7 * p : 7 * p + 7] = jac
            offset += len(jac)
        return a0

    def stability_report(self) -> StabilityReport:
        """Reduced chi-square of the stacked system, exploiting the block
        structure: singular values of a block-diagonal matrix are the
        union of the blocks' singular values."""
        m = sum(len(r) for r in self.residuals)
        cols = 7 * len(self.jacobians)
        svs = [np.linalg.svd(j, compute_uv=False) for j in self.jacobians if j.size]
        all_sv = np.concatenate(svs) if svs else np.zeros(0)
        sv_max = all_sv.max() if all_sv.size else 0.0
        tol = max(m, cols) * sv_max * 1e-10
        rank = int(np.sum(all_sv > tol))
        dof = m - rank
        if dof <= 0:
            raise DegenerateWindowError(f"M={m} <= rank={rank}")
        sq = float(sum(r @ r for r in self.residuals))
        return StabilityReport(kappa=sq / dof, residual_count=m, rank=rank, dof=dof)


def huber_weight(norm: np.ndarray, delta: float) -> np.ndarray:
    """IRLS weight psi(|e|)/|e| of the Huber norm: 1 inside, delta/|e| out."""
    norm = np.asarray(norm, dtype=float)
    out = np.ones_like(norm)
    outside = norm > delta
    np.divide(delta, norm, out=out, where=outside)
    return out


def huber_cost(norm: np.ndarray, delta: float) -> float:
    """Sum of Huber losses: |e|^2/2 inside, delta(|e| - delta/2) outside."""
    norm = np.asarray(norm, dtype=float)
    inside = norm <= delta
    return float(
        np.sum(np.where(inside, 0.5 * norm**2, delta * (norm - 0.5 * delta)))
    )


def hybrid_residual(
    x_a: np.ndarray,
    x_b: np.ndarray,
    transform: Sim3,
    k: PinholeIntrinsics,
    lambda_pix: float | None = None,
    mode: str = "hybrid",
) -> tuple[np.ndarray, np.ndarray]:
    """Residual of one correspondence and its active-row mask.

    Rows 0..2 compare unit rays, rows 3..4 compare pinhole projections
    scaled by lambda_pix (1 / mean focal by default). A transformed point
    behind the camera drops the pixel rows (zeros, flagged inactive)
    while the ray rows survive.
    """
    if lambda_pix is None:
        lambda_pix = 1.0 / k.mean_focal
    x_a = np.asarray(x_a, dtype=float).reshape(1, 3)
    x_b = np.asarray(x_b, dtype=float).reshape(1, 3)
    r, active, _ = batch_residuals(x_a, x_b, transform, k, lambda_pix, mode)
    if not np.isfinite(r).all():
        raise InvalidPointError("degenerate correspondence")
    return r[0], active[0]


def residual_jacobian(
    x_b: np.ndarray,
    transform: Sim3,
    k: PinholeIntrinsics,
    lambda_pix: float | None = None,
    mode: str = "hybrid",
) -> np.ndarray:
    """Analytic derivative of the residual with respect to the left
    perturbation exp(tau) o T, rows matching hybrid_residual."""
    if lambda_pix is None:
        lambda_pix = 1.0 / k.mean_focal
    x_b = np.asarray(x_b, dtype=float).reshape(1, 3)
    y = transform.apply(x_b)
    if np.linalg.norm(y[0]) <= 1e-12:
        raise InvalidPointError("transformed point at the camera center")
    jac, _ = batch_jacobians(y, k, lambda_pix, mode)
    return jac[0]


def batch_residuals(
    x_a: np.ndarray,
    x_b: np.ndarray,
    transform: Sim3,
    k: PinholeIntrinsics,
    lambda_pix: float,
    mode: str,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Residual rows, active-row masks, and transformed points (n, 3)."""
    n = len(x_a)
    rows = RESIDUAL_ROWS[mode]
    y = transform.apply(x_b)
    out = np.zeros((n, rows))
    active = np.zeros((n, rows), dtype=bool)

    norm_a = np.linalg.norm(x_a, axis=1)
    norm_y = np.linalg.norm(y, axis=1)
    ok = (norm_a > 1e-12) & (norm_y > 1e-12)
    safe_a = np.where(ok, norm_a, 1.0)
    safe_y = np.where(ok, norm_y, 1.0)
    ray_diff = x_a / safe_a[:, None] - y / safe_y[:, None]

    za, zy = x_a[:, 2], y[:, 2]
    front = ok & (za > Z_MIN) & (zy > Z_MIN)
    sa = np.where(front, za, 1.0)
    sy = np.where(front, zy, 1.0)
    pix_a = np.stack(
        [k.fx * x_a[:, 0] / sa + k.cx, k.fy * x_a[:, 1] / sa + k.cy], axis=1
    )
    pix_y = np.stack(
        [k.fx * y[:, 0] / sy + k.cx, k.fy * y[:, 1] / sy + k.cy], axis=1
    )
    pix_diff = lambda_pix * (pix_a - pix_y)

    if mode in ("hybrid", "ray"):
        out[:, :3] = np.where(ok[:, None], ray_diff, 0.0)
        active[:, :3] = ok[:, None]
    if mode == "hybrid":
        out[:, 3:] = np.where(front[:, None], pix_diff, 0.0)
        active[:, 3:] = front[:, None]
    elif mode == "projection":
        out[:, :] = np.where(front[:, None], pix_diff, 0.0)
        active[:, :] = front[:, None]
    return out, active, y


def point_action_jacobians(y: np.ndarray) -> np.ndarray:
    """Stacked d(exp(tau) o T)(x) / dtau at 0 = [I | -skew(y) | y], (n, 3, 7)."""
    n = len(y)
    j_act = np.zeros((n, 3, 7))
    j_act[:, 0, 0] = j_act[:, 1, 1] = j_act[:, 2, 2] = 1.0
    j_act[:, 0, 4] = y[:, 2]
    j_act[:, 0, 5] = -y[:, 1]
    j_act[:, 1, 3] = -y[:, 2]
    j_act[:, 1, 5] = y[:, 0]
    j_act[:, 2, 3] = y[:, 1]
    j_act[:, 2, 4] = -y[:, 0]
    j_act[:, :, 6] = y
    return j_act


def batch_residual_heads(
    y: np.ndarray, k: PinholeIntrinsics, lambda_pix: float, mode: str
) -> tuple[np.ndarray, np.ndarray]:
    """Derivatives of the residual rows with respect to the transformed
    point y: (n, rows, 3) plus the per-row active masks. The full
    Jacobian with respect to any parameterization is heads @ dy/dparam.
    """
    n = len(y)
    rows = RESIDUAL_ROWS[mode]
    heads = np.zeros((n, rows, 3))
    active = np.zeros((n, rows), dtype=bool)

    norm_y = np.linalg.norm(y, axis=1)
    ok = norm_y > 1e-12
    safe = np.where(ok, norm_y, 1.0)
    rays = y / safe[:, None]

    if mode in ("hybrid", "ray"):
        j_ray = (np.eye(3)[None] - rays[:, :, None] * rays[:, None, :]) / safe[
            :, None, None
        ]
        heads[:, :3] = np.where(ok[:, None, None], -j_ray, 0.0)
        active[:, :3] = ok[:, None]
    if mode in ("hybrid", "projection"):
        z = y[:, 2]
        front = ok & (z > Z_MIN)
        sz = np.where(front, z, 1.0)
        j_pi = np.zeros((n, 2, 3))
        j_pi[:, 0, 0] = k.fx / sz
        j_pi[:, 0, 2] = -k.fx * y[:, 0] / sz**2
        j_pi[:, 1, 1] = k.fy / sz
        j_pi[:, 1, 2] = -k.fy * y[:, 1] / sz**2
        lo = 3 if mode == "hybrid" else 0
        heads[:, lo:] = np.where(
            front[:, None, None], -lambda_pix * j_pi, 0.0
        )
        active[:, lo:] = front[:, None]
    return heads, active


def batch_jacobians(
    y: np.ndarray, k: PinholeIntrinsics, lambda_pix: float, mode: str
) -> tuple[np.ndarray, np.ndarray]:
    """Residual Jacobians (n, rows, 7) with respect to the left
    perturbation of the pair transform, plus per-row active masks."""
    heads, active = batch_residual_heads(y, k, lambda_pix, mode)
    jac = np.einsum("nab,nbc->nac", heads, point_action_jacobians(y))
    return jac, active


def _confidence_factor(weights: np.ndarray, convention: str) -> np.ndarray:
    if convention == "literal":
        return 1.0 / np.maximum(weights, 1e-12)
    return np.sqrt(np.maximum(weights, 0.0))


def _pair_rows(
    pair: PairObservations,
    transform: Sim3,
    config: OptimizerConfig,
    with_jacobian: bool,
):
    """Whitened, Huber-reweighted residual rows (and Jacobian rows) of one
    pair, flattened to (n * rows,). Returns (residuals, jacobians, cost)."""
    lam = config.lambda_pix(pair.intrinsics)
    sigma0 = config.sigma0(pair.intrinsics)
    r, active, y = batch_residuals(
        pair.source_points, pair.target_points, transform, pair.intrinsics,
        lam, config.residual_mode,
    )
    factor = _confidence_factor(pair.weights, config.weight_convention) / sigma0
    e = r * factor[:, None]
    e = np.where(active, e, 0.0)
    norms = np.linalg.norm(e, axis=1)
    cost = huber_cost(norms, config.huber_delta)
    hw = np.sqrt(huber_weight(norms, config.huber_delta))
    rows = (e * hw[:, None]).reshape(-1)
    if not with_jacobian:
        return rows, None, cost
    jac, jac_active = batch_jacobians(y, pair.intrinsics, lam, config.residual_mode)
    jac = jac * (factor * hw)[:, None, None]
    jac = np.where((active & jac_active)[:, :, None], jac, 0.0)
    return rows, jac.reshape(-1, 7), cost


def build_system(
    chain: WindowChain, config: OptimizerConfig | None = None
) -> ResidualSystem:
    """Assemble the whitened residual system at the chain's current
    transforms. A pair with too few correspondences marks the window
    degenerate."""
    config = config or OptimizerConfig()
    residuals, jacobians = [], []
    cost = 0.0
    for pair, transform in zip(chain.pairs, chain.transforms):
        if len(pair.weights) < config.min_pair_correspondences:
            raise DegenerateWindowError(
                f"pair ({pair.source_frame}, {pair.target_frame}) has "
                f"{len(pair.weights)} correspondences"
            )
        rows, jac, pair_cost = _pair_rows(pair, transform, config, True)
        residuals.append(rows)
        jacobians.append(jac)
        cost += pair_cost
    return ResidualSystem(residuals=residuals, jacobians=jacobians, cost=cost)


def _chain_cost(chain_pairs, transforms, config) -> float:
    return sum(
        _pair_rows(pair, t, config, False)[2]
        for pair, t in zip(chain_pairs, transforms)
    )


def fix_pair_scale_gauge(
    pair: PairObservations, transform: Sim3, config: OptimizerConfig | None = None
) -> Sim3:
    """Pin the pair's scale gauge against the pointmap magnitudes.

    Ray and projection residuals are homogeneous of degree zero, so
    scaling a transform's scale and translation together never changes
    the cost; that direction is pure gauge. The weighted least-squares
    factor c = sum(w <x_a, y>) / sum(w |y|^2) with y = T(x_b) matches the
    transformed cloud's magnitude to the source cloud, which restores
    exact correspondence geometry (including a pure-scale offset) and
    keeps the estimate metrically tied to the measured pointmaps. With a
    config, correspondences are additionally reweighted by their current
    Huber weights so outliers cannot bias the anchor.
    """
    y = transform.apply(pair.target_points)
    w = pair.weights.astype(float)
    if config is not None:
        r, active, _ = batch_residuals(
            pair.source_points, pair.target_points, transform, pair.intrinsics,
            config.lambda_pix(pair.intrinsics), config.residual_mode,
        )
        factor = _confidence_factor(pair.weights, config.weight_convention)
        e = np.where(active, r * factor[:, None], 0.0) / config.sigma0(pair.intrinsics)
        w = w * huber_weight(np.linalg.norm(e, axis=1), config.huber_delta)
    num = float(np.sum(w * np.einsum("nd,nd->n", pair.source_points, y)))
    den = float(np.sum(w * np.einsum("nd,nd->n", y, y)))
    if den <= 0.0 or num <= 0.0:
        return transform
    c = num / den
    return Sim3(c * transform.scale, transform.rotation, c * transform.translation)


def lm_irls_solve(
    chain: WindowChain, config: OptimizerConfig | None = None
) -> tuple[WindowChain, StabilityReport]:
    """Damped block Gauss-Newton with Huber IRLS over the chain transforms.

    Per iteration: rebuild residuals and robust weights, solve each pair's
    damped 7x7 normal equations, apply the left-plus update, and accept
    when the robust cost decreases (lambda /= 10) or retry with tenfold
    damping. Stops on the iteration cap, a tiny step, or damping
    overflow; overflow before any accepted step raises NoProgressError.
    The gauge stays fixed because only relative transforms are estimated;
    absolute poses are recovered by chaining from the earliest frame.
    """
    config = config or OptimizerConfig()
    transforms = [
        fix_pair_scale_gauge(p, t, config)
        for p, t in zip(chain.pairs, chain.transforms)
    ]
    lam = config.lm_lambda0
    system = build_system(
        WindowChain(chain.frames, transforms, chain.pairs), config
    )
    cost = system.cost
    accepted_any = False
    for _ in range(config.lm_max_iters):
        grads, hessians = [], []
        for rows, jac in zip(system.residuals, system.jacobians):
            hessians.append(jac.T @ jac)
            grads.append(jac.T @ rows)
        stepped = False
        while lam <= config.lm_lambda_max:
            taus = []
            for h, g in zip(hessians, grads):
                # The scale column is structurally null (joint scale and
                # translation rescaling is pure gauge), so solve the
                # well-posed 6-dof sub-block; the scale coordinate is set
                # by the norm gauge fix after each step.
                h6 = h[:6, :6]
                g6 = g[:6]
                damp = np.diag(np.maximum(np.diag(h6), 1e-12 * max(np.diag(h6).max(), 1.0)))
                tau = np.zeros(7)
                try:
                    tau[:6] = np.linalg.solve(h6 + lam * damp, -g6)
                except np.linalg.LinAlgError:
                    tau[:6], *_ = np.linalg.lstsq(h6 + lam * damp, -g6, rcond=None)
                taus.append(tau)
            max_step = max(float(np.linalg.norm(t)) for t in taus)
            if max_step < config.step_tol:
                report = system.stability_report()
                return WindowChain(chain.frames, transforms, chain.pairs), report
            candidate = [
                fix_pair_scale_gauge(p, sim3_exp(tau).compose(t), config)
                for p, tau, t in zip(chain.pairs, taus, transforms)
            ]
            new_cost = _chain_cost(chain.pairs, candidate, config)
            if new_cost < cost:
                transforms = candidate
                cost = new_cost
                lam = max(lam / 10.0, 1e-12)
                accepted_any = True
                stepped = True
                break
            lam *= 10.0
        if not stepped:
            if not accepted_any:
                raise NoProgressError("damping overflow without an accepted step")
            break
        system = build_system(
            WindowChain(chain.frames, transforms, chain.pairs), config
        )
        cost = system.cost
    report = system.stability_report()
    return WindowChain(chain.frames, transforms, chain.pairs), report
