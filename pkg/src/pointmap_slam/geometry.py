"""Sim(3) / sim(3) Lie-group arithmetic and camera projection functions.

Conventions
-----------
A similarity transform ``T = (s, R, t)`` acts on points as ``T(x) = s R x + t``
and is represented homogeneously as ``[[s R, t], [0, 1]]``. Tangent vectors
are ordered ``tau = [rho (3), phi (3), sigma (1)]``: translational part,
rotation vector, log-scale. The exponential map uses the generator

    hat(tau) = [[hat(phi) + sigma I, rho], [0, 0]]

so that ``exp(tau) = (e^sigma, exp(hat(phi)), W(phi, sigma) rho)`` where the
coupling matrix ``W = C I + A hat(phi) + B hat(phi)^2`` has closed-form
coefficients with Taylor fallbacks below ``SMALL_EPS`` to keep everything
accurate to ~1e-12 near the identity.

All operations are pure, all types immutable values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError, InvalidPointError

# Switch to series expansions below this threshold (angle / log-scale).
SMALL_EPS = 1e-6
# Re-orthonormalize rotations whose defect exceeds this.
ORTHO_TOL = 1e-10


def skew(v: np.ndarray) -> np.ndarray:
    """3x3 cross-product matrix of a 3-vector."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rodrigues formula with second-order series below SMALL_EPS."""
    phi = np.asarray(phi, dtype=float)
    theta2 = float(phi @ phi)
    theta = math.sqrt(theta2)
    k = skew(phi)
    if theta < SMALL_EPS:
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / theta2
    return np.eye(3) + a * k + b * (k @ k)


def so3_log(rot: np.ndarray) -> np.ndarray:
    """Rotation vector of R with norm in [0, pi].

    The angle-pi branch extracts the axis from (R + I)/2 using its largest
    diagonal entry; exact ties pick the sign making the first nonzero axis
    component positive.
    """
    rot = np.asarray(rot, dtype=float)
    vee = 0.5 * np.array(
        [rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]]
    )
    sin_theta = float(np.linalg.norm(vee))
    cos_theta = 0.5 * (float(np.trace(rot)) - 1.0)
    theta = math.atan2(sin_theta, cos_theta)
    if sin_theta >= SMALL_EPS:
        return vee * (theta / sin_theta)
    if cos_theta > 0.0:
        # theta ~ 0: vee already ~ phi/... use series of theta/sin(theta).
        return vee * (1.0 + theta * theta / 6.0)
    # theta ~ pi: R + I = 2 a a^T (exactly at pi).
    b = 0.5 * (rot + np.eye(3))
    k = int(np.argmax(np.diag(b)))
    axis = b[:, k] / math.sqrt(max(b[k, k], 1e-300))
    axis = axis / np.linalg.norm(axis)
    nz = np.nonzero(np.abs(axis) > 1e-12)[0]
    if nz.size and axis[nz[0]] < 0.0:
        axis = -axis
    return axis * theta


def _w_coefficients(theta: float, sigma: float) -> tuple[float, float, float]:
    """Coefficients (C, A, B) of W = C I + A hat(phi) + B hat(phi)^2.

    C = (e^s - 1)/s, A and B are the phi / phi^2 series sums. Evaluated
    with expm1 / 2 sin^2 to avoid cancellation; series branches keep the
    absolute error below ~1e-14 at the switch points.
    """
    scale = math.exp(sigma)
    if abs(sigma) < 1e-300:
        c = 1.0
    else:
        c = math.expm1(sigma) / sigma
    if theta < SMALL_EPS:
        if abs(sigma) < 1e-4:
            a = 0.5 + sigma / 3.0 + sigma * sigma / 8.0 + sigma**3 / 30.0
            b = (
                1.0 / 6.0
                + sigma / 8.0
                + sigma * sigma / 20.0
                + sigma**3 / 72.0
            )
        else:
            sigma2 = sigma * sigma
            a = ((sigma - 1.0) * scale + 1.0) / sigma2
            b = ((0.5 * sigma2 - sigma + 1.0) * scale - 1.0) / (sigma2 * sigma)
        return c, a, b
    theta2 = theta * theta
    # 1 - e^s cos(theta) without cancellation: 2 sin^2(t/2) - cos(t) expm1(s).
    one_minus_b = 2.0 * math.sin(0.5 * theta) ** 2 - math.cos(theta) * math.expm1(
        sigma
    )
    s_sin = scale * math.sin(theta)
    denom = theta2 + sigma * sigma
    a = (s_sin * sigma + one_minus_b * theta) / (theta * denom)
    b = (c - (-one_minus_b * sigma + s_sin * theta) / denom) / theta2
    return c, a, b


def _w_matrix(phi: np.ndarray, sigma: float) -> np.ndarray:
    theta = float(np.linalg.norm(phi))
    c, a, b = _w_coefficients(theta, sigma)
    k = skew(phi)
    return c * np.eye(3) + a * k + b * (k @ k)


@dataclass(frozen=True)
class PinholeIntrinsics:
    """Pinhole camera parameters; the principal point sits at the image
    center for every intrinsics value produced inside this system."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")

    @property
    def mean_focal(self) -> float:
        return 0.5 * (self.fx + self.fy)

    @staticmethod
    def centered(fx: float, fy: float, width: int, height: int) -> "PinholeIntrinsics":
        return PinholeIntrinsics(fx, fy, width / 2.0, height / 2.0, width, height)


@dataclass(frozen=True, eq=False)
class Sim3:
    """Similarity transform: positive scale, rotation matrix, translation."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        if not self.scale > 0.0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float))
        object.__setattr__(
            self, "translation", np.asarray(self.translation, dtype=float).reshape(3)
        )

    @staticmethod
    def identity() -> "Sim3":
        return Sim3(1.0, np.eye(3), np.zeros(3))

    def apply(self, x: np.ndarray) -> np.ndarray:
        """s R x + t for a single point or an (..., 3) array of points."""
        x = np.asarray(x, dtype=float)
        return self.scale * (x @ self.rotation.T) + self.translation

    def compose(self, other: "Sim3") -> "Sim3":
        """self after other: (self o other)(x) = self(other(x))."""
        rot = self.rotation @ other.rotation
        defect = rot @ rot.T - np.eye(3)
        if np.abs(defect).max() > ORTHO_TOL:
            u, _, vt = np.linalg.svd(rot)
            rot = u @ vt
        return Sim3(
            self.scale * other.scale,
            rot,
            self.scale * (self.rotation @ other.translation) + self.translation,
        )

    def inverse(self) -> "Sim3":
        inv_s = 1.0 / self.scale
        rt = self.rotation.T
        return Sim3(inv_s, rt, -inv_s * (rt @ self.translation))

    def matrix(self) -> np.ndarray:
        """Homogeneous 4x4 form [[s R, t], [0, 1]]."""
        m = np.eye(4)
        m[:3, :3] = self.scale * self.rotation
        m[:3, 3] = self.translation
        return m

    def log(self) -> np.ndarray:
        return sim3_log(self)

    def is_close(self, other: "Sim3", tol: float = 1e-9) -> bool:
        return (
            abs(self.scale - other.scale) <= tol * max(1.0, self.scale)
            and np.abs(self.rotation - other.rotation).max() <= tol
            and np.abs(self.translation - other.translation).max() <= tol
        )


def sim3_exp(tau: np.ndarray) -> Sim3:
    """Closed-form exponential map from a 7-vector [rho, phi, sigma]."""
    tau = np.asarray(tau, dtype=float).reshape(7)
    if not np.all(np.isfinite(tau)):
        raise ValueError("tangent must be finite")
    rho, phi, sigma = tau[:3], tau[3:6], float(tau[6])
    return Sim3(math.exp(sigma), so3_exp(phi), _w_matrix(phi, sigma) @ rho)


def sim3_log(transform: Sim3) -> np.ndarray:
    """Canonical logarithm; rotation part has norm in [0, pi]."""
    phi = so3_log(transform.rotation)
    sigma = math.log(transform.scale)
    rho = np.linalg.solve(_w_matrix(phi, sigma), transform.translation)
    return np.concatenate([rho, phi, [sigma]])


def sim3_hat(tau: np.ndarray) -> np.ndarray:
    """4x4 generator matrix; expm(sim3_hat(tau)) equals sim3_exp(tau)."""
    tau = np.asarray(tau, dtype=float).reshape(7)
    h = np.zeros((4, 4))
    h[:3, :3] = skew(tau[3:6]) + tau[6] * np.eye(3)
    h[:3, 3] = tau[:3]
    return h


def point_action_jacobian(y: np.ndarray) -> np.ndarray:
    """Derivative of (exp(tau) o T)(x) with respect to tau at tau = 0.

    Depends only on y = T(x): columns are translation (identity), rotation
    (negative skew of y), and scale (y itself), giving a 3x7 block.
    """
    y = np.asarray(y, dtype=float).reshape(3)
    jac = np.empty((3, 7))
    jac[:, :3] = np.eye(3)
    jac[:, 3:6] = -skew(y)
    jac[:, 6] = y
    return jac


def psi_ray(x: np.ndarray) -> np.ndarray:
    """Unit ray of a 3D point: x / ||x||."""
    x = np.asarray(x, dtype=float)
    norm = np.linalg.norm(x)
    if norm <= 1e-12:
        raise InvalidPointError("cannot normalize a near-zero point")
    return x / norm


def psi_ray_jacobian(x: np.ndarray) -> np.ndarray:
    """d(x/||x||)/dx = (I - r r^T)/||x|| with r the unit ray."""
    x = np.asarray(x, dtype=float)
    norm = np.linalg.norm(x)
    if norm <= 1e-12:
        raise InvalidPointError("cannot normalize a near-zero point")
    r = x / norm
    return (np.eye(3) - np.outer(r, r)) / norm


def psi_pi(k: PinholeIntrinsics, x: np.ndarray, z_min: float = 1e-6) -> np.ndarray:
    """Pinhole projection to continuous pixel coordinates (u, v)."""
    x = np.asarray(x, dtype=float)
    z = x[2]
    if z <= z_min:
        raise BehindCameraError(f"point depth {z:g} <= z_min {z_min:g}")
    return np.array([k.fx * x[0] / z + k.cx, k.fy * x[1] / z + k.cy])


def psi_pi_jacobian(
    k: PinholeIntrinsics, x: np.ndarray, z_min: float = 1e-6
) -> np.ndarray:
    """2x3 derivative of the pinhole projection."""
    x = np.asarray(x, dtype=float)
    z = x[2]
    if z <= z_min:
        raise BehindCameraError(f"point depth {z:g} <= z_min {z_min:g}")
    return np.array(
        [
            [k.fx / z, 0.0, -k.fx * x[0] / (z * z)],
            [0.0, k.fy / z, -k.fy * x[1] / (z * z)],
        ]
    )


# Vectorized helpers used by the dense matching / rendering paths. They
# operate on (..., 3) stacks and return masks instead of raising.


def rays_of(points: np.ndarray, min_norm: float = 1e-12):
    """Unit rays and validity mask for an (..., 3) stack of points."""
    points = np.asarray(points, dtype=float)
    norms = np.linalg.norm(points, axis=-1)
    ok = norms > min_norm
    safe = np.where(ok, norms, 1.0)
    return points / safe[..., None], ok


def project_points(k: PinholeIntrinsics, points: np.ndarray, z_min: float = 1e-6):
    """Vectorized pinhole projection: (u, v) array plus in-front mask."""
    points = np.asarray(points, dtype=float)
    z = points[..., 2]
    ok = z > z_min
    safe = np.where(ok, z, 1.0)
    u = k.fx * points[..., 0] / safe + k.cx
    v = k.fy * points[..., 1] / safe + k.cy
    return np.stack([u, v], axis=-1), ok
