"""Procedural room scenes, revisit curation, and the on-disk dataset.

Scenes are single rooms (a textured box) containing colored boxes, rendered
by ray casting so every frame comes with exact depth. Camera paths are
closed loops, which guarantees viewpoint revisits inside every clip.

Curation builds the training signal for memory conditioning: lift frame i to
a point cloud, re-render it by splatting from a pose near frame i+di, and
keep the splat-presence mask. The pair (render, mask) stands in for "what a
retrieved memory frame can tell you about this target view".

World coordinates are z-up; cameras follow the package convention (+z
forward, +y down).
"""

from __future__ import annotations

import colorsys
import json
import struct as _struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import rng as _rng
from .geometry import (
    CameraPose,
    DepthMap,
    Intrinsics,
    PointCloud,
    Trajectory,
    compose,
    lift_depth,
    project_points,
    save_pose_file,
    load_pose_file,
)

DEPTH_MAGIC = b"UCMD"
_LIGHT = np.array([0.45, 0.3, 0.85])
_LIGHT = _LIGHT / np.linalg.norm(_LIGHT)


def default_intrinsics(size: int = 64) -> Intrinsics:
    # ~55 degree horizontal field of view
    f = size / (2.0 * np.tan(np.radians(27.5)))
    c = (size - 1) / 2.0
    return Intrinsics(fx=f, fy=f, cx=c, cy=c, width=size, height=size)


# ---------------------------------------------------------------------------
# scene specification


@dataclass
class Box:
    bmin: np.ndarray
    bmax: np.ndarray
    color: np.ndarray


@dataclass
class LoopSpec:
    """One closed camera loop: eye and look-target circle the room center."""

    radius: np.ndarray   # (2,) x/y ellipse radii of the eye path
    height: float
    height_amp: float
    phase: float
    direction: float     # +1 or -1
    target_radius: float
    target_height: float
    target_phase: float


@dataclass
class SceneSpec:
    seed: int
    room_min: np.ndarray
    room_max: np.ndarray
    boxes: list
    wall_colors: np.ndarray  # (6, 3), face order -x +x -y +y -z +z
    checker: float           # checker tile size, world units
    loops: list = field(default_factory=list)


def make_scene(seed: int, n_clips: int = 2) -> SceneSpec:
    """Deterministic scene from a seed: room, boxes, and per-clip camera loops.

    Box placement keeps an annulus around the camera paths free: inner
    clutter stays within radius ~1.3 of the room center and wall-side boxes
    start beyond ~2.7, while eye loops run at radius 1.6-2.4.
    """
    g = _rng.stream(seed, "scene")
    half = g.uniform(3.6, 4.8, size=2)
    height = g.uniform(2.8, 3.6)
    room_min = np.array([-half[0], -half[1], 0.0])
    room_max = np.array([half[0], half[1], height])

    hues = (g.uniform(0, 1) + np.linspace(0, 1, 12, endpoint=False)) % 1.0
    g.shuffle(hues)
    palette = [np.array(colorsys.hsv_to_rgb(h, 0.75, 0.9)) for h in hues]
    wall_colors = np.stack(
        [np.array(colorsys.hsv_to_rgb(h, 0.35, 0.65)) for h in hues[6:12]]
    )

    boxes = []
    n_inner = int(g.integers(2, 4))
    for i in range(n_inner):
        ang = g.uniform(0, 2 * np.pi)
        rad = g.uniform(0.0, 0.8)
        cx, cy = rad * np.cos(ang), rad * np.sin(ang)
        hx, hy = g.uniform(0.25, 0.45, size=2)
        hz = g.uniform(0.4, 1.3)
        boxes.append(
            Box(
                np.array([cx - hx, cy - hy, 0.0]),
                np.array([cx + hx, cy + hy, hz]),
                palette[i],
            )
        )
    n_outer = int(g.integers(2, 5))
    for i in range(n_outer):
        ang = g.uniform(0, 2 * np.pi)
        rad = g.uniform(3.2, 3.6)
        cx = np.clip(rad * np.cos(ang), room_min[0] + 0.6, room_max[0] - 0.6)
        cy = np.clip(rad * np.sin(ang), room_min[1] + 0.6, room_max[1] - 0.6)
        # keep the camera annulus clear even after clamping to the walls
        d = np.hypot(cx, cy)
        if d < 3.1:
            s = 3.1 / max(d, 1e-6)
            cx, cy = cx * s, cy * s
        hx, hy = g.uniform(0.3, 0.5, size=2)
        hz = g.uniform(0.6, 1.8)
        boxes.append(
            Box(
                np.array([cx - hx, cy - hy, 0.0]),
                np.array([cx + hx, cy + hy, hz]),
                palette[n_inner + i],
            )
        )

    loops = []
    for c in range(n_clips):
        loops.append(
            LoopSpec(
                radius=g.uniform(1.7, 2.3, size=2),
                height=g.uniform(1.15, 1.6),
                height_amp=g.uniform(0.05, 0.2),
                phase=g.uniform(0, 2 * np.pi),
                direction=1.0 if g.random() < 0.5 else -1.0,
                target_radius=g.uniform(0.1, 0.45),
                target_height=g.uniform(0.9, 1.4),
                target_phase=g.uniform(0, 2 * np.pi),
            )
        )
    return SceneSpec(seed, room_min, room_max, boxes, wall_colors, checker=0.9, loops=loops)


def look_at(eye: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> CameraPose:
    """Camera at eye looking toward target, +y down, world z up."""
    f = np.asarray(target, dtype=np.float64) - eye
    nf = np.linalg.norm(f)
    if nf < 1e-9:
        raise ValueError("eye and target coincide")
    f = f / nf
    right = np.cross(f, np.asarray(up, dtype=np.float64))
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        raise ValueError("viewing direction parallel to up vector")
    right /= nr
    down = np.cross(f, right)
    r = np.stack([right, down, f], axis=1)
    return CameraPose(r, np.asarray(eye, dtype=np.float64))


def loop_pose(spec: SceneSpec, clip: int, theta: float) -> CameraPose:
    """Camera pose at loop parameter theta in [0, 1); theta wraps, so
    loop_pose(spec, c, 0.0) and loop_pose(spec, c, 1.0) are identical."""
    lp = spec.loops[clip]
    th = (theta % 1.0) * 2.0 * np.pi * lp.direction + lp.phase
    eye = np.array(
        [
            lp.radius[0] * np.cos(th),
            lp.radius[1] * np.sin(th),
            lp.height + lp.height_amp * np.sin(2.0 * (th - lp.phase)),
        ]
    )
    tt = (theta % 1.0) * 2.0 * np.pi * lp.direction + lp.target_phase
    target = np.array(
        [
            lp.target_radius * np.cos(tt),
            lp.target_radius * np.sin(tt),
            lp.target_height,
        ]
    )
    return look_at(eye, target)


def loop_trajectory(spec: SceneSpec, clip: int, n_frames: int) -> Trajectory:
    """n_frames poses covering the full loop (theta endpoint excluded)."""
    return Trajectory([loop_pose(spec, clip, i / n_frames) for i in range(n_frames)])


def palindrome_trajectory(spec: SceneSpec, clip: int, length: int, span: float = 0.5) -> Trajectory:
    """Out-and-back trajectory: pose i equals pose length-1-i bitwise.

    length must be odd; the path runs theta 0 -> span and mirrors back.
    """
    if length < 3 or length % 2 == 0:
        raise ValueError(f"palindrome length must be odd and >= 3, got {length}")
    mid = (length - 1) // 2
    thetas = [span * i / mid for i in range(mid + 1)]
    thetas = thetas + thetas[-2::-1]
    return Trajectory([loop_pose(spec, clip, t) for t in thetas])


# ---------------------------------------------------------------------------
# ray-cast rendering


def _raycast(spec: SceneSpec, origin: np.ndarray, dirs: np.ndarray):
    """Intersect rays (shared origin) with the room walls and boxes.

    dirs are camera-frame-z-normalized world directions, so the returned ray
    parameter t is camera-z depth directly.

    Returns (t, color) with color already shaded.
    """
    p = dirs.shape[0]
    d = np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)

    # room exit (origin is inside the room)
    bounds = np.where(d > 0, spec.room_max, spec.room_min)  # (P, 3)
    t_axes = (bounds - origin) / d
    room_axis = np.argmin(t_axes, axis=1)
    t_room = t_axes[np.arange(p), room_axis]

    best_t = t_room
    hit_axis = room_axis
    hit_sign = -np.sign(d[np.arange(p), room_axis])  # inward normal
    face = room_axis * 2 + (d[np.arange(p), room_axis] > 0)
    color = spec.wall_colors[face]
    checker_on = np.ones(p, dtype=bool)

    for box in spec.boxes:
        t1 = (box.bmin - origin) / d
        t2 = (box.bmax - origin) / d
        tlo = np.minimum(t1, t2)
        thi = np.maximum(t1, t2)
        t_near = tlo.max(axis=1)
        t_far = thi.min(axis=1)
        near_axis = np.argmax(tlo, axis=1)
        hit = (t_near <= t_far) & (t_near > 1e-6) & (t_near < best_t)
        best_t = np.where(hit, t_near, best_t)
        hit_axis = np.where(hit, near_axis, hit_axis)
        hit_sign = np.where(hit, -np.sign(d[np.arange(p), near_axis]), hit_sign)
        color = np.where(hit[:, None], box.color, color)
        checker_on = np.where(hit, False, checker_on)

    point = origin + best_t[:, None] * d
    normal = np.zeros((p, 3))
    normal[np.arange(p), hit_axis] = hit_sign
    shade = 0.55 + 0.45 * np.maximum(normal @ _LIGHT, 0.0)

    # checker modulation on walls/floor/ceiling, over the two in-face axes
    other = np.array([[1, 2], [0, 2], [0, 1]])[hit_axis]  # (P, 2)
    pc = np.take_along_axis(point, other, axis=1) / spec.checker
    parity = (np.floor(pc[:, 0]) + np.floor(pc[:, 1])).astype(np.int64) % 2
    factor = np.where(checker_on, np.where(parity == 0, 1.12, 0.88), 1.0)

    rgb = np.clip(color * (shade * factor)[:, None], 0.0, 1.0)
    return best_t, rgb


def render_scene_frame(spec: SceneSpec, pose: CameraPose, k: Intrinsics):
    """Ray-cast one view. Returns (image float32 (H,W,3) in [0,1], DepthMap)."""
    v, u = np.meshgrid(
        np.arange(k.height, dtype=np.float64), np.arange(k.width, dtype=np.float64), indexing="ij"
    )
    dirs_cam = np.stack(
        [(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=-1
    ).reshape(-1, 3)
    dirs_world = dirs_cam @ pose.rotation.T
    t, rgb = _raycast(spec, pose.translation, dirs_world)
    img = rgb.reshape(k.height, k.width, 3).astype(np.float32)
    depth = DepthMap(t.reshape(k.height, k.width))
    return img, depth


# ---------------------------------------------------------------------------
# splat rendering and revisit samples


def splat_render(pc: PointCloud, pose: CameraPose, k: Intrinsics):
    """Nearest-pixel point splatting with a z-buffer.

    Each point colors the pixel its projection rounds to; conflicts resolve
    to the smallest camera-z (ties to the lowest point index, so results are
    deterministic). Returns (image f32, mask bool, zbuffer f64 with +inf at
    empty pixels).
    """
    h, w = k.height, k.width
    u, v, z, valid = project_points(pc, pose, k)
    px = np.round(u).astype(np.int64)
    py = np.round(v).astype(np.int64)
    keep = valid & (px >= 0) & (px < w) & (py >= 0) & (py < h)
    idx = np.flatnonzero(keep)
    image = np.zeros((h, w, 3), dtype=np.float32)
    mask = np.zeros((h, w), dtype=bool)
    zbuf = np.full((h, w), np.inf)
    if len(idx) == 0:
        return image, mask, zbuf
    flat = py[idx] * w + px[idx]
    order = np.lexsort((idx, z[idx], flat))
    flat_sorted = flat[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    win = idx[order[first]]
    slots = flat_sorted[first]
    image.reshape(-1, 3)[slots] = pc.colors[win]
    mask.reshape(-1)[slots] = True
    zbuf.reshape(-1)[slots] = z[win]
    return image, mask, zbuf


@dataclass
class OffsetDistribution:
    """Random pose perturbation: uniform-axis rotation and box translation."""

    rot_max_deg: float = 15.0
    trans_max: float = 0.3


def sample_offset(gen: np.random.Generator, dist: OffsetDistribution = None) -> CameraPose:
    """Draw a perturbation pose: angle ~ U[0, rot_max] about a uniform axis,
    translation ~ U[-trans_max, trans_max]^3."""
    dist = dist or OffsetDistribution()
    axis = gen.normal(size=3)
    while np.linalg.norm(axis) < 1e-6:
        axis = gen.normal(size=3)
    axis /= np.linalg.norm(axis)
    ang = gen.uniform(0.0, np.radians(dist.rot_max_deg))
    kx = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
    )
    r = np.eye(3) + np.sin(ang) * kx + (1.0 - np.cos(ang)) * (kx @ kx)
    t = gen.uniform(-dist.trans_max, dist.trans_max, size=3)
    return CameraPose(r, t)


@dataclass
class ClipData:
    """One clip held in memory."""

    frames: np.ndarray       # (T, H, W, 3) float32
    depths: list             # T DepthMaps
    poses: Trajectory
    intrinsics: Intrinsics
    scene_class: int = 0


@dataclass
class CurationSample:
    """A simulated revisit: frame i re-rendered near the view of frame i+di."""

    source_index: int
    target_index: int
    delta_index: int
    delta_pose: CameraPose
    render_pose: CameraPose
    image: np.ndarray    # (H, W, 3) float32, zeros where mask is False
    mask: np.ndarray     # (H, W) bool splat presence
    zbuffer: np.ndarray  # (H, W) float64, +inf where empty


def make_revisit_sample(
    clip: ClipData, source_index: int, delta_pose: CameraPose, delta_index: int
) -> CurationSample:
    """Splat frame source_index into the perturbed view of its revisit target."""
    t = len(clip.frames)
    i = source_index
    j = i + delta_index
    if not (0 <= i < t and 0 <= j < t):
        raise ValueError(f"indices out of range: source {i}, target {j}, clip length {t}")
    render_pose = compose(clip.poses[j], delta_pose)
    pc = lift_depth(clip.depths[i], clip.poses[i], clip.intrinsics, image=clip.frames[i])
    image, mask, zbuf = splat_render(pc, render_pose, clip.intrinsics)
    return CurationSample(
        source_index=i,
        target_index=j,
        delta_index=delta_index,
        delta_pose=delta_pose,
        render_pose=render_pose,
        image=image,
        mask=mask,
        zbuffer=zbuf,
    )


def draw_curation_sample(
    clip: ClipData,
    gen: np.random.Generator,
    dist: OffsetDistribution = None,
    di_max: int = 8,
) -> CurationSample:
    """Random revisit draw: uniform source frame, index offset in [-8, 8]
    (clipped to the clip), pose offset from the given distribution."""
    t = len(clip.frames)
    i = int(gen.integers(0, t))
    di = int(gen.integers(-di_max, di_max + 1))
    j = int(np.clip(i + di, 0, t - 1))
    return make_revisit_sample(clip, i, sample_offset(gen, dist), j - i)


# ---------------------------------------------------------------------------
# disk formats


def save_png(path, img: np.ndarray) -> None:
    arr = np.clip(np.asarray(img) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def save_mask_png(path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask, dtype=np.uint8) * 255), mode="L").convert("1").save(path)


def load_mask_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L")) > 127


def save_depth_raster(path, depth: DepthMap) -> None:
    """Binary depth: magic 'UCMD', u32 width/height/reserved, then f32 LE values.

    Invalid pixels are stored as NaN and recovered by the loader.
    """
    h, w = depth.shape
    vals = np.where(depth.valid, depth.values, np.nan).astype("<f4")
    with open(path, "wb") as f:
        f.write(_struct.pack("<4sIII", DEPTH_MAGIC, w, h, 0))
        f.write(vals.tobytes())


def load_depth_raster(path) -> DepthMap:
    with open(path, "rb") as f:
        head = f.read(16)
        if len(head) != 16:
            raise ValueError(f"{path}: truncated depth header")
        magic, w, h, _ = _struct.unpack("<4sIII", head)
        if magic != DEPTH_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        data = np.frombuffer(f.read(4 * w * h), dtype="<f4")
        if data.size != w * h:
            raise ValueError(f"{path}: expected {w * h} values, got {data.size}")
    vals = data.reshape(h, w).astype(np.float64)
    return DepthMap(np.where(np.isfinite(vals), vals, 0.0), np.isfinite(vals))


# ---------------------------------------------------------------------------
# dataset generation and loading


def _write_curation_sample(dir_path: Path, sample: CurationSample) -> None:
    dir_path.mkdir(parents=True, exist_ok=True)
    save_png(dir_path / "render.png", sample.image)
    save_mask_png(dir_path / "mask.png", sample.mask)
    meta = {
        "source_index": sample.source_index,
        "target_index": sample.target_index,
        "delta_index": sample.delta_index,
        "delta_pose": sample.delta_pose.matrix().reshape(-1).tolist(),
    }
    with open(dir_path / "meta.json", "w") as f:
        json.dump(meta, f, indent=1)


def generate_synthetic_dataset(
    root,
    seed: int,
    n_scenes: int = 4,
    clips_per_scene: int = 2,
    frames_per_clip: int = 33,
    image_size: int = 64,
    curation_per_clip: int = 8,
    offsets: OffsetDistribution = None,
) -> dict:
    """Render scenes to the on-disk layout. Fully deterministic in seed.

    <root>/scene%03d/clip%03d/frames/%05d.png
                              depth/%05d.f32
                              poses.json
                              curation/%05d.sample/{render.png, mask.png, meta.json}
    plus scene%03d/scene.json carrying the scene seed for oracle re-rendering.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    k = default_intrinsics(image_size)
    offsets = offsets or OffsetDistribution()
    counts = {"scenes": n_scenes, "clips": 0, "frames": 0, "curation_samples": 0}
    for si in range(n_scenes):
        scene_seed = int(_rng.substream(seed, "scene-seeds", si).integers(0, 2**63 - 1))
        spec = make_scene(scene_seed, n_clips=clips_per_scene)
        scene_dir = root / f"scene{si:03d}"
        scene_dir.mkdir(exist_ok=True)
        with open(scene_dir / "scene.json", "w") as f:
            json.dump(
                {"seed": scene_seed, "n_clips": clips_per_scene, "class_id": si}, f, indent=1
            )
        for ci in range(clips_per_scene):
            clip_dir = scene_dir / f"clip{ci:03d}"
            (clip_dir / "frames").mkdir(parents=True, exist_ok=True)
            (clip_dir / "depth").mkdir(exist_ok=True)
            traj = loop_trajectory(spec, ci, frames_per_clip)
            frames, depths = [], []
            for fi, pose in enumerate(traj):
                img, depth = render_scene_frame(spec, pose, k)
                save_png(clip_dir / "frames" / f"{fi:05d}.png", img)
                save_depth_raster(clip_dir / "depth" / f"{fi:05d}.f32", depth)
                frames.append(img)
                depths.append(depth)
            save_pose_file(clip_dir / "poses.json", k, traj)
            clip = ClipData(np.stack(frames), depths, traj, k, scene_class=si)
            cur_gen = _rng.substream(seed, "curation", si * clips_per_scene + ci)
            for qi in range(curation_per_clip):
                sample = draw_curation_sample(clip, cur_gen, offsets)
                _write_curation_sample(clip_dir / "curation" / f"{qi:05d}.sample", sample)
            counts["clips"] += 1
            counts["frames"] += frames_per_clip
            counts["curation_samples"] += curation_per_clip
    return counts


@dataclass
class SceneData:
    class_id: int
    seed: int
    n_clips: int
    clips: list  # ClipData

    def spec(self) -> SceneSpec:
        return make_scene(self.seed, self.n_clips)


def load_clip(clip_dir, scene_class: int = 0) -> ClipData:
    clip_dir = Path(clip_dir)
    k, traj = load_pose_file(clip_dir / "poses.json")
    frame_paths = sorted((clip_dir / "frames").glob("*.png"))
    if len(frame_paths) != len(traj):
        raise ValueError(
            f"{clip_dir}: {len(frame_paths)} frames but {len(traj)} poses"
        )
    frames = np.stack([load_png(p) for p in frame_paths])
    depths = [
        load_depth_raster(clip_dir / "depth" / (p.stem + ".f32")) for p in frame_paths
    ]
    return ClipData(frames, depths, traj, k, scene_class=scene_class)


def load_dataset(root) -> list:
    """Load every scene under root. Returns a list of SceneData."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    scene_dirs = sorted(d for d in root.iterdir() if d.is_dir() and (d / "scene.json").exists())
    if not scene_dirs:
        raise ValueError(f"dataset root {root} contains no scenes")
    scenes = []
    for sd in scene_dirs:
        with open(sd / "scene.json") as f:
            meta = json.load(f)
        clips = [
            load_clip(cd, scene_class=int(meta["class_id"]))
            for cd in sorted(sd.glob("clip*"))
            if cd.is_dir()
        ]
        scenes.append(
            SceneData(int(meta["class_id"]), int(meta["seed"]), int(meta["n_clips"]), clips)
        )
    return scenes
