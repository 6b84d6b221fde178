"""Memory bank, frustum-overlap retrieval, and viewpoint assignment.

Retrieval scores a stored frame by how much its camera frustum overlaps any
target frame's frustum. Overlap is a Monte-Carlo IoU: sample points
stratified-uniformly inside each frustum, count cross-containment, and
convert the mean containment fraction m into IoU = m / (2 - m), which is
exact for equal-volume frusta. Identical poses therefore score exactly 1.

Each memory frame is later warped into a single target view (its
assignment), chosen as the argmax of its IoU row over target frames 2..N;
frame 1 is reserved for the reference image. Frame numbering here is
1-based to match the conditioning layout in pe_warp.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as _rng
from .curation import (
    load_depth_raster,
    load_png,
    save_depth_raster,
    save_png,
)
from .geometry import (
    CameraPose,
    DepthMap,
    Intrinsics,
    Trajectory,
    load_pose_file,
    save_pose_file,
)

NEAR_DEFAULT = 0.1
FAR_DEFAULT = 20.0
IOU_SAMPLES_DEFAULT = 4096


def _tan_bounds(k: Intrinsics):
    """View-cone slopes covering the full pixel grid (pixel centers sit at
    integer coordinates, so the image spans [-0.5, size-0.5])."""
    tx = ((-0.5 - k.cx) / k.fx, (k.width - 0.5 - k.cx) / k.fx)
    ty = ((-0.5 - k.cy) / k.fy, (k.height - 0.5 - k.cy) / k.fy)
    return tx, ty


def frustum_points(
    pose: CameraPose,
    k: Intrinsics,
    seed: int,
    samples: int = IOU_SAMPLES_DEFAULT,
    near: float = NEAR_DEFAULT,
    far: float = FAR_DEFAULT,
) -> np.ndarray:
    """Stratified-uniform world-space samples of a camera frustum volume.

    Stratification uses a g^3 cell grid with one jittered sample per cell,
    where g = round(samples^(1/3)); the actual count is g^3. Uniformity in
    volume needs density proportional to z^2 along depth, hence the cube-root
    inverse CDF.
    """
    if not near < far:
        raise ValueError(f"need near < far, got {near} >= {far}")
    if near <= 0:
        raise ValueError(f"near plane must be positive, got {near}")
    if samples < 1:
        raise ValueError(f"samples must be >= 1, got {samples}")
    g = max(1, round(samples ** (1.0 / 3.0)))
    gen = _rng.stream(seed, "frustum")
    cells = np.stack(
        np.meshgrid(np.arange(g), np.arange(g), np.arange(g), indexing="ij"), axis=-1
    ).reshape(-1, 3)
    xi = (cells + gen.random((g**3, 3))) / g
    (tx0, tx1), (ty0, ty1) = _tan_bounds(k)
    z = np.cbrt(near**3 + xi[:, 2] * (far**3 - near**3))
    x = (tx0 + xi[:, 0] * (tx1 - tx0)) * z
    y = (ty0 + xi[:, 1] * (ty1 - ty0)) * z
    cam = np.stack([x, y, z], axis=1)
    return cam @ pose.rotation.T + pose.translation


def in_frustum(
    points: np.ndarray,
    pose: CameraPose,
    k: Intrinsics,
    near: float = NEAR_DEFAULT,
    far: float = FAR_DEFAULT,
) -> np.ndarray:
    """Boolean mask of world points inside the camera's viewing volume."""
    pc = (np.asarray(points) - pose.translation) @ pose.rotation
    z = pc[:, 2]
    (tx0, tx1), (ty0, ty1) = _tan_bounds(k)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = pc[:, 0] / z
        v = pc[:, 1] / z
    return (
        (z >= near)
        & (z <= far)
        & (u >= tx0)
        & (u <= tx1)
        & (v >= ty0)
        & (v <= ty1)
    )


def frustum_iou(
    a: CameraPose,
    b: CameraPose,
    k: Intrinsics,
    near: float = NEAR_DEFAULT,
    far: float = FAR_DEFAULT,
    samples: int = IOU_SAMPLES_DEFAULT,
    seed: int = 0,
) -> float:
    """Monte-Carlo frustum IoU, symmetric up to sampling noise.

    Clouds for a and b use seed and seed+1, so a pose's cloud depends only on
    its own seed slot and callers scoring many pairs can precompute.
    """
    pa = frustum_points(a, k, seed, samples, near, far)
    pb = frustum_points(b, k, seed + 1, samples, near, far)
    f_ab = in_frustum(pa, b, k, near, far).mean()
    f_ba = in_frustum(pb, a, k, near, far).mean()
    m = 0.5 * (f_ab + f_ba)
    return float(m / (2.0 - m))


# ---------------------------------------------------------------------------
# memory bank


@dataclass
class MemoryBank:
    """Append-only store of (frame, depth, pose, global time index)."""

    frames: list = field(default_factory=list)
    depths: list = field(default_factory=list)
    poses: list = field(default_factory=list)
    times: list = field(default_factory=list)

    def append(self, frame: np.ndarray, depth: DepthMap, pose: CameraPose, time: int):
        if self.times and time <= self.times[-1]:
            raise ValueError(
                f"time indices must be strictly increasing: {time} after {self.times[-1]}"
            )
        self.frames.append(np.asarray(frame, dtype=np.float32))
        self.depths.append(depth)
        self.poses.append(pose)
        self.times.append(int(time))

    def __len__(self) -> int:
        return len(self.frames)

    @staticmethod
    def from_clip(clip, times=None) -> "MemoryBank":
        bank = MemoryBank()
        t = len(clip.frames)
        times = range(t) if times is None else times
        for i, time in zip(range(t), times):
            bank.append(clip.frames[i], clip.depths[i], clip.poses[i], time)
        return bank


def save_bank(bank: MemoryBank, path, k: Intrinsics) -> None:
    """Persist a bank in the clip directory layout plus an index file."""
    path = Path(path)
    (path / "frames").mkdir(parents=True, exist_ok=True)
    (path / "depth").mkdir(exist_ok=True)
    for i, (frame, depth) in enumerate(zip(bank.frames, bank.depths)):
        save_png(path / "frames" / f"{i:05d}.png", frame)
        save_depth_raster(path / "depth" / f"{i:05d}.f32", depth)
    save_pose_file(path / "poses.json", k, Trajectory(bank.poses))
    with open(path / "index.json", "w") as f:
        json.dump({"time_indices": bank.times}, f)


def load_bank(path):
    """Load a persisted bank. Returns (bank, intrinsics)."""
    path = Path(path)
    k, traj = load_pose_file(path / "poses.json")
    with open(path / "index.json") as f:
        times = json.load(f)["time_indices"]
    if len(times) != len(traj):
        raise ValueError(f"{path}: index lists {len(times)} times for {len(traj)} poses")
    bank = MemoryBank()
    for i, (pose, time) in enumerate(zip(traj, times)):
        frame = load_png(path / "frames" / f"{i:05d}.png")
        depth = load_depth_raster(path / "depth" / f"{i:05d}.f32")
        bank.append(frame, depth, pose, time)
    return bank, k


# ---------------------------------------------------------------------------
# retrieval


@dataclass
class RetrievalResult:
    indices: np.ndarray      # (S,) bank positions, best first
    times: np.ndarray        # (S,) global time indices of the selection
    iou: np.ndarray          # (S, N) scores against every target frame
    assignments: np.ndarray  # (S,) 1-based target frame in [2, N]


def retrieve_topM(
    bank: MemoryBank,
    targets: Trajectory,
    m: int,
    k: Intrinsics,
    near: float = NEAR_DEFAULT,
    far: float = FAR_DEFAULT,
    samples: int = IOU_SAMPLES_DEFAULT,
    seed: int = 0,
) -> RetrievalResult:
    """Top-m bank frames by best frustum IoU against any target frame.

    Equivalent to exhaustive pairwise frustum_iou scoring (clouds are shared
    across pairs, which that function's seed split makes exact). Score ties
    break to the more recent frame. Assignment of each selected frame is the
    argmax of its IoU row over target frames 2..N, ties to the smaller index.
    """
    if len(bank) == 0:
        raise ValueError("cannot retrieve from an empty memory bank")
    n = len(targets)
    if n < 2:
        raise ValueError(f"need at least 2 target frames (reference + 1), got {n}")
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")

    bank_clouds = [
        frustum_points(p, k, seed, samples, near, far) for p in bank.poses
    ]
    target_clouds = [
        frustum_points(p, k, seed + 1, samples, near, far) for p in targets
    ]
    iou = np.zeros((len(bank), n))
    for j, tp in enumerate(targets):
        for i, bp in enumerate(bank.poses):
            f_ab = in_frustum(bank_clouds[i], tp, k, near, far).mean()
            f_ba = in_frustum(target_clouds[j], bp, k, near, far).mean()
            mm = 0.5 * (f_ab + f_ba)
            iou[i, j] = mm / (2.0 - mm)

    scores = iou.max(axis=1)
    times = np.asarray(bank.times)
    order = np.lexsort((-times, -scores))  # score desc, then recency
    sel = order[: min(m, len(bank))]
    sel_iou = iou[sel]
    assignments = 2 + np.argmax(sel_iou[:, 1:], axis=1)
    return RetrievalResult(
        indices=sel,
        times=times[sel],
        iou=sel_iou,
        assignments=assignments.astype(np.int64),
    )


def assign_viewpoints(result: RetrievalResult) -> np.ndarray:
    """Recompute assignments from the IoU matrix: per-row argmax over target
    frames 2..N (1-based), ties to the smaller frame."""
    if result.iou.shape[1] < 2:
        raise ValueError("IoU matrix must cover at least 2 target frames")
    return (2 + np.argmax(result.iou[:, 1:], axis=1)).astype(np.int64)
