"""Camera geometry: pinhole projection, depth lifting, pose algebra.

Conventions used throughout the package:

* Poses are camera-to-world: `x_world = R @ x_cam + t`.
* Camera frame is right-handed with +z looking forward, +x right, +y down.
* Pixel coordinates are continuous with (0, 0) at the CENTER of the top-left
  pixel; `u` runs along image width (columns), `v` along height (rows).
* Depth is distance along the camera z axis (not ray length).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

Z_MIN = 1e-4  # points closer than this to the image plane do not project

_ORTHO_TOL = 1e-6   # construction-time orthonormality tolerance
_DRIFT_TOL = 1e-9   # compose() re-orthonormalizes above this


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics for an image of `width` x `height` pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside image "
                f"{self.width}x{self.height}"
            )

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
            dtype=np.float64,
        )


def nearest_rotation(m: np.ndarray) -> np.ndarray:
    """Project a 3x3 matrix to the nearest rotation (Frobenius norm, via SVD)."""
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        r = u @ np.diag([1.0, 1.0, -1.0]) @ vt
    return r


@dataclass(frozen=True)
class CameraPose:
    """Camera-to-world rigid transform.

    rotation: (3, 3) with R R^T = I and det +1, checked at construction.
    translation: (3,) camera center in world coordinates.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        drift = np.abs(r @ r.T - np.eye(3)).max()
        if drift > _ORTHO_TOL or np.linalg.det(r) < 0:
            raise ValueError(f"rotation not orthonormal (drift {drift:.2e}, det {np.linalg.det(r):.4f})")
        r = r.copy()
        t = t.copy()
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "CameraPose":
        return CameraPose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(m: np.ndarray) -> "CameraPose":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"pose matrix must be 4x4, got {m.shape}")
        if np.abs(m[3] - np.array([0.0, 0.0, 0.0, 1.0])).max() > 1e-9:
            raise ValueError("last row of pose matrix must be [0, 0, 0, 1]")
        return CameraPose(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


def invert_pose(p: CameraPose) -> CameraPose:
    """World-to-camera of `p`, returned as a pose (so invert is an involution)."""
    rt = p.rotation.T
    return CameraPose(rt, -rt @ p.translation)


def compose(a: CameraPose, b: CameraPose) -> CameraPose:
    """Pose applying `b` first, then `a` (matrix product a @ b)."""
    r = a.rotation @ b.rotation
    drift = np.abs(r @ r.T - np.eye(3)).max()
    if drift > _DRIFT_TOL:
        r = nearest_rotation(r)
    return CameraPose(r, a.rotation @ b.translation + a.translation)


class Trajectory:
    """Non-empty ordered sequence of camera poses."""

    def __init__(self, poses: Sequence[CameraPose]):
        poses = tuple(poses)
        if not poses:
            raise ValueError("trajectory must contain at least one pose")
        for i, p in enumerate(poses):
            if not isinstance(p, CameraPose):
                raise TypeError(f"pose {i} is {type(p).__name__}, expected CameraPose")
        self._poses = poses

    def __len__(self) -> int:
        return len(self._poses)

    def __getitem__(self, i) -> CameraPose:
        return self._poses[i]

    def __iter__(self) -> Iterator[CameraPose]:
        return iter(self._poses)

    def matrices(self) -> np.ndarray:
        return np.stack([p.matrix() for p in self._poses])


@dataclass
class DepthMap:
    """Per-pixel depth (camera-z, world units) with a validity mask."""

    values: np.ndarray          # (H, W) float
    valid: np.ndarray = None    # (H, W) bool; defaults to all-valid

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"depth must be (H, W), got {self.values.shape}")
        if self.valid is None:
            self.valid = np.ones(self.values.shape, dtype=bool)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != self.values.shape:
                raise ValueError("depth/valid shape mismatch")
        # non-positive depth can never be lifted; fold it into the mask
        self.valid = self.valid & (self.values > 0) & np.isfinite(self.values)

    @property
    def shape(self):
        return self.values.shape


@dataclass
class PointCloud:
    """World-space points lifted from one view.

    pixel_index keeps the flat source pixel (row * W + col) of every point so
    renderers and warp maps can trace a point back to where it came from.
    """

    points: np.ndarray       # (P, 3) float64, world coordinates
    pixel_index: np.ndarray  # (P,) int64
    colors: np.ndarray = None  # (P, 3) float32 in [0, 1]

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.pixel_index = np.asarray(self.pixel_index, dtype=np.int64).reshape(-1)
        if self.colors is None:
            self.colors = np.zeros((len(self.points), 3), dtype=np.float32)
        self.colors = np.asarray(self.colors, dtype=np.float32).reshape(-1, 3)
        n = len(self.points)
        if len(self.pixel_index) != n or len(self.colors) != n:
            raise ValueError("points / pixel_index / colors length mismatch")

    def __len__(self) -> int:
        return len(self.points)


def pixel_grid(k: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """(u, v) coordinate arrays of all pixel centers, each (H, W)."""
    v, u = np.meshgrid(
        np.arange(k.height, dtype=np.float64),
        np.arange(k.width, dtype=np.float64),
        indexing="ij",
    )
    return u, v


def lift_depth(depth: DepthMap, pose: CameraPose, k: Intrinsics, image: np.ndarray | None = None) -> PointCloud:
    """Back-project valid depth pixels into a world-space point cloud.

    Args:
        depth: (H, W) depth map; only valid pixels contribute points.
        pose: camera-to-world pose of the view the depth belongs to.
        k: intrinsics; (H, W) must match the depth map.
        image: optional (H, W, 3) color source; zeros when omitted.

    Returns:
        PointCloud with one point per valid pixel, row-major pixel order.
    """
    h, w = depth.shape
    if (h, w) != (k.height, k.width):
        raise ValueError(f"depth {h}x{w} does not match intrinsics {k.height}x{k.width}")
    if image is not None and image.shape[:2] != (h, w):
        raise ValueError(f"image {image.shape[:2]} does not match depth {depth.shape}")
    u, v = pixel_grid(k)
    mask = depth.valid
    z = depth.values[mask]
    x = (u[mask] - k.cx) / k.fx * z
    y = (v[mask] - k.cy) / k.fy * z
    cam = np.stack([x, y, z], axis=-1)
    world = cam @ pose.rotation.T + pose.translation
    idx = np.flatnonzero(mask.reshape(-1))
    if image is None:
        colors = np.zeros((len(idx), 3), dtype=np.float32)
    else:
        colors = np.asarray(image, dtype=np.float32).reshape(-1, 3)[idx]
    return PointCloud(world, idx, colors)


def project_points(
    pc: PointCloud, pose: CameraPose, k: Intrinsics, z_min: float = Z_MIN
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Project world points into the view at `pose`.

    Returns:
        (u, v, z, valid): pixel coordinates, camera-z depth, and a mask that
        is False where z <= z_min. u/v are still filled (from the clamped z)
        for invalid points but must not be trusted there. Points behind the
        camera are invalid; image-bounds clipping is left to callers because
        warp targets may legitimately fall outside the frame.
    """
    cam = (pc.points - pose.translation) @ pose.rotation
    z = cam[:, 2]
    valid = z > z_min
    zs = np.where(valid, z, 1.0)
    u = k.fx * cam[:, 0] / zs + k.cx
    v = k.fy * cam[:, 1] / zs + k.cy
    return u, v, z, valid


def latent_frame_count(t: int, r: int) -> int:
    """Number of latent frames for a t-frame clip at temporal stride r."""
    if t < 1 or r < 1:
        raise ValueError(f"need t >= 1 and r >= 1, got t={t}, r={r}")
    return (t + r - 1) // r


def frame_groups(t: int, r: int) -> list[list[int]]:
    """Frame-index groups per latent frame.

    The clip is front-padded with repeats of frame 0 until it tiles into
    groups of r. For t = 1 (mod r), the usual case, that means the first
    latent frame is r copies of frame 0 (the conditioning anchor) and the
    remaining t-1 frames split into runs of r.
    """
    n = latent_frame_count(t, r)
    pad = n * r - t  # in [0, r-1]
    padded = [0] * pad + list(range(t))
    groups = [padded[g * r : (g + 1) * r] for g in range(n)]
    return groups


def pool_trajectory(traj: Trajectory, r: int) -> Trajectory:
    """Average camera poses over each latent-frame group.

    Translation is the arithmetic mean; rotation is the chordal mean
    (average matrix projected back to SO(3)).
    """
    groups = frame_groups(len(traj), r)
    pooled = []
    for g in groups:
        if len(g) == 1:
            pooled.append(traj[g[0]])
            continue
        rs = np.mean([traj[i].rotation for i in g], axis=0)
        ts = np.mean([traj[i].translation for i in g], axis=0)
        pooled.append(CameraPose(nearest_rotation(rs), ts))
    return Trajectory(pooled)


def normalize_relative(traj: Trajectory, eps: float = 1e-8) -> Trajectory:
    """Express poses relative to the first and scale translations to max-norm 1.

    The first output pose is exactly the identity. Translation scale divides
    by the maximum relative-translation norm (or 1 when all are below eps),
    which makes trajectories comparable regardless of scene scale.
    """
    inv0 = invert_pose(traj[0])
    rel = [compose(inv0, p) for p in traj]
    norms = [np.linalg.norm(p.translation) for p in rel]
    scale = max(norms)
    if scale < eps:
        scale = 1.0
    out = [CameraPose(p.rotation, p.translation / scale) for p in rel]
    return Trajectory(out)


def save_pose_file(path, k: Intrinsics, traj: Trajectory) -> None:
    """Write intrinsics + trajectory as JSON (4x4 row-major pose matrices)."""
    doc = {
        "intrinsics": {
            "fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
            "width": k.width, "height": k.height,
        },
        "poses": [p.matrix().reshape(-1).tolist() for p in traj],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)


def load_pose_file(path) -> tuple[Intrinsics, Trajectory]:
    """Inverse of save_pose_file. Raises ValueError on malformed documents."""
    with open(path) as f:
        doc = json.load(f)
    try:
        ki = doc["intrinsics"]
        k = Intrinsics(
            fx=float(ki["fx"]), fy=float(ki["fy"]),
            cx=float(ki["cx"]), cy=float(ki["cy"]),
            width=int(ki["width"]), height=int(ki["height"]),
        )
        raw = doc["poses"]
    except KeyError as e:
        raise ValueError(f"pose file {path} missing key {e}") from e
    if not raw:
        raise ValueError(f"pose file {path} has an empty pose list")
    poses = []
    for i, flat in enumerate(raw):
        m = np.asarray(flat, dtype=np.float64)
        if m.size != 16:
            raise ValueError(f"pose {i} in {path} has {m.size} values, expected 16")
        poses.append(CameraPose.from_matrix(m.reshape(4, 4)))
    return k, Trajectory(poses)
