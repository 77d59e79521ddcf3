"""Pointmap providers: synthetic ground-truth oracle and depth replay.

Both providers answer multi-view window requests with per-frame pointmaps
expressed in the first requested frame's coordinates, per-point
confidences, an intrinsics estimate, and a global descriptor.

The synthetic provider renders a fixed world point set (grids sampled on
room panels) by z-buffered projection. Pixels that capture exactly one
world point store that point exactly, so with the noise model switched
off, corresponding pixels across frames reference identical 3D points and
alignment residuals vanish. Pixels where two points collide are dropped,
which keeps every stored point angularly isolated from its neighbors and
makes wrong-point ray matches rejectable by the angular gate.

Noise model: multiplicative Gaussian depth noise and Gaussian pixel
jitter per frame (seeded by frame id, so re-inference of a growing window
is consistent, like a deterministic network), one shared log-normal scale
factor per window, and a uniform focal jitter per window mimicking
imperfect intrinsics prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DatasetError
from .geometry import PinholeIntrinsics, Sim3, so3_exp

DESCRIPTOR_CELLS = 16
DESCRIPTOR_DIM = DESCRIPTOR_CELLS * DESCRIPTOR_CELLS
CONFIDENCE_CURVATURE = 100.0  # kappa_c: 1% relative error -> conf ~ 0.5


@dataclass(frozen=True)
class NoiseModel:
    """Synthetic observation noise. All zeros reproduces exact geometry."""

    pixel_sigma: float = 0.0
    depth_sigma_rel: float = 0.0
    window_scale_sigma: float = 0.0
    intrinsics_jitter: float = 0.0

    @property
    def is_zero(self) -> bool:
        return (
            self.pixel_sigma == 0.0
            and self.depth_sigma_rel == 0.0
            and self.window_scale_sigma == 0.0
            and self.intrinsics_jitter == 0.0
        )


@dataclass
class FrameObservation:
    """One frame of a window inference; the pointmap is expressed in the
    window's reference-frame coordinates. Invalid pixels carry confidence
    exactly zero."""

    frame_id: int
    pointmap: np.ndarray  # (H, W, 3)
    confidence: np.ndarray  # (H, W)
    intrinsics: PinholeIntrinsics
    timestamp: float
    descriptor: np.ndarray | None = None


@dataclass
class WindowInference:
    reference_frame_id: int
    observations: list[FrameObservation]


def pooled_inverse_depth(depth: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """L2-normalized grid of mean inverse depth over valid pixels.

    An all-invalid frame returns the zero vector, which downstream
    retrieval treats as unusable.
    """
    h, w = depth.shape
    inv = np.where(valid & (depth > 1e-9), 1.0 / np.maximum(depth, 1e-9), 0.0)
    counts = valid.astype(float)
    desc = np.zeros((DESCRIPTOR_CELLS, DESCRIPTOR_CELLS))
    row_chunks = np.array_split(np.arange(h), DESCRIPTOR_CELLS)
    col_chunks = np.array_split(np.arange(w), DESCRIPTOR_CELLS)
    for i, rows in enumerate(row_chunks):
        inv_rows = inv[rows]
        cnt_rows = counts[rows]
        for j, cols in enumerate(col_chunks):
            c = cnt_rows[:, cols].sum()
            if c > 0:
                desc[i, j] = inv_rows[:, cols].sum() / c
    flat = desc.reshape(-1)
    norm = np.linalg.norm(flat)
    if norm < 1e-12:
        return np.zeros(DESCRIPTOR_DIM)
    return flat / norm


def frame_descriptor(observation: FrameObservation) -> np.ndarray:
    """Provider descriptor when present, else pooled inverse depth of the
    observation's pointmap (meaningful when the map is in its own camera
    frame, e.g. the window reference or a fused canonical map)."""
    if observation.descriptor is not None:
        return observation.descriptor
    depth = observation.pointmap[..., 2]
    return pooled_inverse_depth(depth, observation.confidence > 0)


def look_at_pose(position: np.ndarray, target: np.ndarray) -> Sim3:
    """Camera-to-world pose with +z toward the target, +y pointing along
    world +y (down), +x completing the right-handed frame."""
    position = np.asarray(position, dtype=float)
    forward = np.asarray(target, dtype=float) - position
    forward = forward / np.linalg.norm(forward)
    down = np.array([0.0, 1.0, 0.0])
    x_axis = np.cross(down, forward)
    nx = np.linalg.norm(x_axis)
    if nx < 1e-9:
        raise ValueError("camera forward axis may not be vertical")
    x_axis /= nx
    y_axis = np.cross(forward, x_axis)
    rot = np.stack([x_axis, y_axis, forward], axis=1)
    return Sim3(1.0, rot, position)


def _panel_points(
    origin: np.ndarray, u_axis: np.ndarray, v_axis: np.ndarray,
    u_extent: float, v_extent: float, spacing: float,
) -> np.ndarray:
    nu = max(2, int(round(2 * u_extent / spacing)) + 1)
    nv = max(2, int(round(2 * v_extent / spacing)) + 1)
    us = np.linspace(-u_extent, u_extent, nu)
    vs = np.linspace(-v_extent, v_extent, nv)
    uu, vv = np.meshgrid(us, vs, indexing="ij")
    return (
        origin[None, :]
        + uu.reshape(-1, 1) * u_axis[None, :]
        + vv.reshape(-1, 1) * v_axis[None, :]
    )


@dataclass
class SyntheticScene:
    """World point set, camera trajectory, true intrinsics, noise model."""

    points: np.ndarray  # (N, 3) world coordinates
    poses: list[Sim3]  # camera-to-world, unit scale, one per frame
    intrinsics: PinholeIntrinsics
    noise: NoiseModel = field(default_factory=NoiseModel)
    fps: float = 30.0

    @property
    def n_frames(self) -> int:
        return len(self.poses)

    def timestamp(self, frame_id: int) -> float:
        return frame_id / self.fps


def _room_panels(spacing: float) -> np.ndarray:
    """Five inset panels (four walls and a floor) around the origin.

    Panels are inset from the room corners so that, viewed from the
    central trajectory region, no two panels are angularly adjacent;
    wrong-point matches then always exceed the angular gate.
    """
    ex = np.array([1.0, 0.0, 0.0])
    ey = np.array([0.0, 1.0, 0.0])
    ez = np.array([0.0, 0.0, 1.0])
    panels = [
        _panel_points(np.array([0.0, 0.0, 2.2]), ex, ey, 1.6, 1.0, spacing),
        _panel_points(np.array([0.0, 0.0, -2.2]), ex, ey, 1.6, 1.0, spacing),
        _panel_points(np.array([2.2, 0.0, 0.0]), ez, ey, 1.6, 1.0, spacing),
        _panel_points(np.array([-2.2, 0.0, 0.0]), ez, ey, 1.6, 1.0, spacing),
        _panel_points(np.array([0.0, 1.6, 0.0]), ex, ez, 1.4, 1.4, spacing),
    ]
    return np.concatenate(panels, axis=0)


def _trajectory(kind: str, n_frames: int) -> list[Sim3]:
    """Camera paths confined to the room's central region."""
    poses = []
    for i in range(n_frames):
        t = i / max(n_frames - 1, 1)
        if kind == "static":
            pos = np.array([0.0, 0.0, 0.0])
            target = np.array([0.0, 0.0, 2.2])
        elif kind == "sweep":
            # Gentle arc with a slow pan across the front panels.
            ang = math.pi * (0.25 + 0.5 * t)
            pos = np.array(
                [0.55 * math.cos(ang), 0.15 * math.sin(2 * ang), 0.45 * math.sin(ang) - 0.2]
            )
            look = 2.0 * math.pi * (0.08 * math.sin(2 * math.pi * 0.5 * t))
            target = pos + np.array([math.sin(look + 0.35 * (t - 0.5)), 0.0, math.cos(look + 0.35 * (t - 0.5))])
        elif kind == "pan":
            # Oscillating yaw with positional drift: revisits earlier
            # viewing directions, so informative non-recent keyframes exist.
            yaw = 0.85 * math.sin(2.0 * math.pi * 1.25 * t)
            pos = np.array([0.5 * (t - 0.5), 0.1 * math.sin(2 * math.pi * t), 0.25 * math.sin(math.pi * t)])
            target = pos + np.array([math.sin(yaw), 0.0, math.cos(yaw)])
        elif kind == "orbit":
            # Full circle looking outward; ends where it started.
            ang = 2.0 * math.pi * t
            pos = np.array([0.6 * math.sin(ang), 0.0, 0.6 * math.cos(ang)])
            target = pos + np.array([math.sin(ang), 0.0, math.cos(ang)])
        else:
            raise ValueError(f"unknown trajectory kind {kind!r}")
        poses.append(look_at_pose(pos, target))
    return poses


def make_room_scene(
    kind: str = "sweep",
    n_frames: int = 100,
    resolution: int = 64,
    noise: NoiseModel | None = None,
    spacing: float = 0.07,
    fov_deg: float = 50.0,
) -> SyntheticScene:
    """Default desk-scale scene: five inset room panels, chosen trajectory."""
    f = 0.5 * resolution / math.tan(math.radians(fov_deg) / 2.0)
    intr = PinholeIntrinsics.centered(f, f, resolution, resolution)
    return SyntheticScene(
        points=_room_panels(spacing),
        poses=_trajectory(kind, n_frames),
        intrinsics=intr,
        noise=noise or NoiseModel(),
    )


class SyntheticProvider:
    """Window inference over a synthetic scene with a calibrated noise
    model. Read-only after construction; window requests are pure."""

    def __init__(self, scene: SyntheticScene, seed: int = 0, max_window: int = 5):
        self.scene = scene
        self.seed = int(seed)
        self.max_window = int(max_window)
        self._render_cache: dict[int, dict] = {}
        self._frame_noise_cache: dict[int, dict] = {}

    @property
    def n_frames(self) -> int:
        return self.scene.n_frames

    def timestamp(self, frame_id: int) -> float:
        return self.scene.timestamp(frame_id)

    def gt_pose(self, frame_id: int) -> Sim3:
        return self.scene.poses[frame_id]

    def _check_frame(self, frame_id: int) -> None:
        if not 0 <= frame_id < self.n_frames:
            raise KeyError(f"unknown frame id {frame_id}")

    def _render(self, frame_id: int) -> dict:
        """Exact z-buffered projection of the world point set.

        Pixels capturing more than one point are invalidated so every
        stored point is the unique point in its pixel.
        """
        cached = self._render_cache.get(frame_id)
        if cached is not None:
            return cached
        k = self.scene.intrinsics
        h, w = k.height, k.width
        cam = self.scene.poses[frame_id].inverse().apply(self.scene.points)
        z = cam[:, 2]
        ok = z > 0.05
        safe_z = np.where(ok, z, 1.0)
        u = k.fx * cam[:, 0] / safe_z + k.cx
        v = k.fy * cam[:, 1] / safe_z + k.cy
        cols = np.floor(u).astype(int)
        rows = np.floor(v).astype(int)
        ok &= (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
        idx = np.nonzero(ok)[0]
        lin = rows[idx] * w + cols[idx]
        order = np.lexsort((z[idx], lin))
        lin_sorted = lin[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = lin_sorted[1:] != lin_sorted[:-1]
        # Uniqueness: prune cells hit more than once.
        unique_cell = first.copy()
        counts = np.bincount(lin_sorted, minlength=h * w)
        unique_cell &= counts[lin_sorted] == 1
        winners = idx[order[unique_cell]]
        cells = lin_sorted[unique_cell]
        pix_u = np.full(h * w, np.nan)
        pix_v = np.full(h * w, np.nan)
        pix_z = np.full(h * w, np.nan)
        valid = np.zeros(h * w, dtype=bool)
        pix_u[cells] = u[winners]
        pix_v[cells] = v[winners]
        pix_z[cells] = z[winners]
        valid[cells] = True
        out = {
            "u": pix_u.reshape(h, w),
            "v": pix_v.reshape(h, w),
            "z": pix_z.reshape(h, w),
            "valid": valid.reshape(h, w),
        }
        self._render_cache[frame_id] = out
        return out

    def _frame_noise(self, frame_id: int) -> dict:
        """Per-frame depth/pixel noise draws, fixed across windows."""
        cached = self._frame_noise_cache.get(frame_id)
        if cached is not None:
            return cached
        k = self.scene.intrinsics
        h, w = k.height, k.width
        rng = np.random.default_rng(
            np.random.SeedSequence([self.seed, 1_000_003, frame_id])
        )
        noise = self.scene.noise
        out = {
            "depth_factor": 1.0 + noise.depth_sigma_rel * rng.standard_normal((h, w)),
            "du": noise.pixel_sigma * rng.standard_normal((h, w)),
            "dv": noise.pixel_sigma * rng.standard_normal((h, w)),
        }
        self._frame_noise_cache[frame_id] = out
        return out

    def _own_frame_observation(
        self, frame_id: int, k_est: PinholeIntrinsics
    ) -> tuple[np.ndarray, np.ndarray]:
        """Noisy pointmap in the frame's own camera coordinates, plus
        confidence from the applied noise magnitude."""
        render = self._render(frame_id)
        noise = self._frame_noise(frame_id)
        valid = render["valid"]
        z_true = render["z"]
        z_noisy = z_true * noise["depth_factor"]
        u = render["u"] + noise["du"]
        v = render["v"] + noise["dv"]
        x = z_noisy * (u - k_est.cx) / k_est.fx
        y = z_noisy * (v - k_est.cy) / k_est.fy
        pts = np.stack([x, y, np.where(valid, z_noisy, 0.0)], axis=-1)
        pts[~valid] = 0.0
        k_true = self.scene.intrinsics
        x_exact = z_true * (render["u"] - k_true.cx) / k_true.fx
        y_exact = z_true * (render["v"] - k_true.cy) / k_true.fy
        exact = np.stack([x_exact, y_exact, z_true], axis=-1)
        err = np.linalg.norm(np.where(valid[..., None], pts - exact, 0.0), axis=-1)
        rel = np.where(valid, err / np.maximum(z_true, 1e-9), 0.0)
        conf = np.where(valid, 1.0 / (1.0 + rel * rel * CONFIDENCE_CURVATURE), 0.0)
        return pts, conf

    def frame_depth_descriptor(self, frame_id: int) -> np.ndarray:
        """Pooled inverse-depth descriptor of the frame's own noisy depth;
        independent of the window it is requested from."""
        render = self._render(frame_id)
        noise = self._frame_noise(frame_id)
        depth = render["z"] * noise["depth_factor"]
        return pooled_inverse_depth(
            np.where(render["valid"], depth, 0.0), render["valid"]
        )

    def infer_window(self, frame_ids: list[int]) -> WindowInference:
        ids = list(frame_ids)
        if len(ids) < 2:
            raise ValueError("window needs at least two frames")
        if len(ids) > self.max_window:
            raise ValueError(
                f"window of {len(ids)} exceeds configured maximum {self.max_window}"
            )
        for fid in ids:
            self._check_frame(fid)
        noise = self.scene.noise
        window_rng = np.random.default_rng(
            np.random.SeedSequence([self.seed, 2_000_003] + sorted(ids))
        )
        scale_factor = float(
            np.exp(noise.window_scale_sigma * window_rng.standard_normal())
        )
        jitters = {
            fid: (
                1.0 + window_rng.uniform(-noise.intrinsics_jitter, noise.intrinsics_jitter),
                1.0 + window_rng.uniform(-noise.intrinsics_jitter, noise.intrinsics_jitter),
            )
            for fid in sorted(ids)
        }
        ref = ids[0]
        ref_pose = self.scene.poses[ref]
        k_true = self.scene.intrinsics
        observations = []
        for fid in ids:
            jx, jy = jitters[fid]
            k_est = PinholeIntrinsics.centered(
                k_true.fx * jx, k_true.fy * jy, k_true.width, k_true.height
            )
            pts, conf = self._own_frame_observation(fid, k_est)
            rel = ref_pose.inverse().compose(self.scene.poses[fid])
            valid = conf > 0
            expressed = rel.apply(pts.reshape(-1, 3)).reshape(pts.shape)
            expressed *= scale_factor
            expressed[~valid] = 0.0
            observations.append(
                FrameObservation(
                    frame_id=fid,
                    pointmap=expressed,
                    confidence=conf,
                    intrinsics=k_est,
                    timestamp=self.timestamp(fid),
                    descriptor=self.frame_depth_descriptor(fid),
                )
            )
        return WindowInference(reference_frame_id=ref, observations=observations)


def _quat_to_rot(qx: float, qy: float, qz: float, qw: float) -> np.ndarray:
    """Rotation matrix of a unit quaternion given w-last."""
    n = math.sqrt(qx * qx + qy * qy + qz * qz + qw * qw)
    if n < 1e-12:
        raise DatasetError("zero quaternion in trajectory")
    qx, qy, qz, qw = qx / n, qy / n, qz / n, qw / n
    return np.array(
        [
            [1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qz * qw), 2 * (qx * qz + qy * qw)],
            [2 * (qx * qy + qz * qw), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qx * qw)],
            [2 * (qx * qz - qy * qw), 2 * (qy * qz + qx * qw), 1 - 2 * (qx * qx + qy * qy)],
        ]
    )


def load_tum_trajectory(path: Path) -> tuple[np.ndarray, list[Sim3]]:
    """Timestamps and camera-to-world poses from a TUM-format file
    (timestamp tx ty tz qx qy qz qw; '#' comments allowed)."""
    stamps, poses = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise DatasetError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            try:
                vals = [float(p) for p in parts]
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from exc
            stamps.append(vals[0])
            poses.append(Sim3(1.0, _quat_to_rot(*vals[4:8]), np.array(vals[1:4])))
    if not poses:
        raise DatasetError(f"{path}: no poses")
    return np.array(stamps), poses


@dataclass(frozen=True)
class ReplayNoise:
    """Per-window relative-pose perturbation for replayed depth."""

    rotation_sigma: float = 0.0
    translation_sigma: float = 0.0
    log_scale_sigma: float = 0.0

    @property
    def is_zero(self) -> bool:
        return (
            self.rotation_sigma == 0.0
            and self.translation_sigma == 0.0
            and self.log_scale_sigma == 0.0
        )


class ReplayProvider:
    """Backprojects recorded 16-bit depth images; windows are expressed in
    the first frame's coordinates via the ground-truth relative pose,
    optionally perturbed by a seeded Sim(3) draw per window and frame."""

    def __init__(
        self,
        dataset_root: str | Path,
        seed: int = 0,
        noise: ReplayNoise | None = None,
        max_window: int = 5,
    ):
        root = Path(dataset_root)
        if not root.is_dir():
            raise DatasetError(f"dataset root {root} is not a directory")
        self.root = root
        self.seed = int(seed)
        self.noise = noise or ReplayNoise()
        self.max_window = int(max_window)
        self.intrinsics, self.depth_scale = self._load_intrinsics(root / "intrinsics.txt")
        self.timestamps, self.depth_paths = self._load_associations(
            root / "associations.txt"
        )
        gt_stamps, gt_poses = load_tum_trajectory(root / "groundtruth.txt")
        self._gt_stamps = gt_stamps
        self._gt_poses = gt_poses
        self._depth_cache: dict[int, np.ndarray] = {}

    @staticmethod
    def _load_intrinsics(path: Path) -> tuple[PinholeIntrinsics, float]:
        if not path.is_file():
            raise DatasetError(f"missing intrinsics file {path}")
        parts = path.read_text(encoding="utf-8").split()
        if len(parts) != 5:
            raise DatasetError(f"{path}: expected 'fx fy cx cy depth_scale'")
        fx, fy, cx, cy, scale = (float(p) for p in parts)
        if scale <= 0:
            raise DatasetError(f"{path}: depth scale must be positive")
        # Width/height are fixed by the first depth image at load time.
        return PinholeIntrinsics(fx, fy, cx, cy, 1, 1), scale

    def _load_associations(self, path: Path):
        if not path.is_file():
            raise DatasetError(f"missing association file {path}")
        stamps, paths = [], []
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split()
                if len(parts) != 2:
                    raise DatasetError(
                        f"{path}:{lineno}: expected 'timestamp depth_path', got {len(parts)} fields"
                    )
                try:
                    stamps.append(float(parts[0]))
                except ValueError as exc:
                    raise DatasetError(f"{path}:{lineno}: bad timestamp") from exc
                paths.append(self.root / parts[1])
        if not stamps:
            raise DatasetError(f"{path}: no associations")
        return np.array(stamps), paths

    @property
    def n_frames(self) -> int:
        return len(self.depth_paths)

    def timestamp(self, frame_id: int) -> float:
        return float(self.timestamps[frame_id])

    def gt_pose(self, frame_id: int) -> Sim3:
        stamp = self.timestamps[frame_id]
        idx = int(np.argmin(np.abs(self._gt_stamps - stamp)))
        return self._gt_poses[idx]

    def _depth(self, frame_id: int) -> np.ndarray:
        cached = self._depth_cache.get(frame_id)
        if cached is not None:
            return cached
        path = self.depth_paths[frame_id]
        if not path.is_file():
            raise DatasetError(f"missing depth image {path}")
        from PIL import Image

        img = np.asarray(Image.open(path))
        if img.ndim != 2:
            raise DatasetError(f"{path}: depth image must be single-channel")
        depth = img.astype(np.float64) / self.depth_scale
        self._depth_cache[frame_id] = depth
        if self.intrinsics.width == 1:
            h, w = depth.shape
            self.intrinsics = replace(self.intrinsics, width=w, height=h)
        return depth

    def _own_frame_observation(self, frame_id: int):
        depth = self._depth(frame_id)
        h, w = depth.shape
        k = self.intrinsics
        valid = depth > 0
        cols, rows = np.meshgrid(np.arange(w), np.arange(h))
        u = cols + 0.5
        v = rows + 0.5
        x = depth * (u - k.cx) / k.fx
        y = depth * (v - k.cy) / k.fy
        pts = np.stack([x, y, depth], axis=-1)
        pts[~valid] = 0.0
        # Radial confidence falloff from the principal point.
        r2 = (u - k.cx) ** 2 + (v - k.cy) ** 2
        r2_max = max(k.cx, w - k.cx) ** 2 + max(k.cy, h - k.cy) ** 2
        conf = np.where(valid, 1.0 - 0.5 * r2 / r2_max, 0.0)
        return pts, conf

    def _pose_perturbation(self, rng: np.random.Generator) -> Sim3:
        n = self.noise
        phi = n.rotation_sigma * rng.standard_normal(3)
        t = n.translation_sigma * rng.standard_normal(3)
        sigma = n.log_scale_sigma * rng.standard_normal()
        return Sim3(math.exp(sigma), so3_exp(phi), t)

    def infer_window(self, frame_ids: list[int]) -> WindowInference:
        ids = list(frame_ids)
        if len(ids) < 2:
            raise ValueError("window needs at least two frames")
        if len(ids) > self.max_window:
            raise ValueError(
                f"window of {len(ids)} exceeds configured maximum {self.max_window}"
            )
        for fid in ids:
            if not 0 <= fid < self.n_frames:
                raise KeyError(f"unknown frame id {fid}")
        rng = np.random.default_rng(
            np.random.SeedSequence([self.seed, 3_000_017] + sorted(ids))
        )
        perturbations = {fid: self._pose_perturbation(rng) for fid in sorted(ids)}
        ref = ids[0]
        ref_pose = self.gt_pose(ref)
        observations = []
        for fid in ids:
            pts, conf = self._own_frame_observation(fid)
            rel = ref_pose.inverse().compose(self.gt_pose(fid))
            if fid != ref and not self.noise.is_zero:
                rel = rel.compose(perturbations[fid])
            valid = conf > 0
            expressed = rel.apply(pts.reshape(-1, 3)).reshape(pts.shape)
            expressed[~valid] = 0.0
            depth = pts[..., 2]
            observations.append(
                FrameObservation(
                    frame_id=fid,
                    pointmap=expressed,
                    confidence=conf,
                    intrinsics=self.intrinsics,
                    timestamp=self.timestamp(fid),
                    descriptor=pooled_inverse_depth(depth, valid),
                )
            )
        return WindowInference(reference_frame_id=ref, observations=observations)
