"""Time-aware positional-encoding warping and multi-level rotary embeddings.

The mechanism: a clean conditioning frame (the reference or a retrieved
memory frame) is lifted to a point cloud with its depth, projected into the
viewpoint of a target latent frame, and the resulting per-pixel target
coordinates are pooled to the latent grid. Those pooled (tau, u, v) triples
replace the frame's own positional encodings wherever noisy tokens attend to
it, so attention sees the clean content AS IF it were laid out in the target
view. Camera control and long-horizon memory then run through one code path:
both are "content at warped coordinates".

PEs are multi-level: level 0 pools the whole patch, level 1 pools 2x2
sub-cells, and attention heads are partitioned across (level, sub-cell)
slots, giving some heads a finer spatial binding at the same token count.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import CameraPose, DepthMap, Intrinsics, pixel_grid

PATCH = 8  # default spatial patch size (pixels per latent token side)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class MultiLevelPEConfig:
    """Level layout and head partition for multi-level PEs.

    factors: per-level sub-cell grid factor; level with factor f pools f*f
        sub-cells per patch. (1, 2) means level 0 = whole patch, level 1 =
        2x2 quadrants.
    n_heads: number of attention heads being partitioned.
    head_levels / head_cells: explicit per-head (level, cell) assignment;
        when omitted, heads are split evenly across levels and, within a
        level, evenly across its cells (row-major quadrant order).
    """

    factors: tuple[int, ...] = (1, 2)
    n_heads: int = 8
    head_levels: tuple[int, ...] = None
    head_cells: tuple[int, ...] = None

    def __post_init__(self):
        if not self.factors or any(f < 1 for f in self.factors):
            raise ValueError(f"factors must be positive, got {self.factors}")
        if self.n_heads < 1:
            raise ValueError("n_heads must be positive")
        if self.head_levels is None:
            levels, cells = self._even_split()
            object.__setattr__(self, "head_levels", levels)
            object.__setattr__(self, "head_cells", cells)
        else:
            object.__setattr__(self, "head_levels", tuple(self.head_levels))
            object.__setattr__(self, "head_cells", tuple(self.head_cells or ()))
        if len(self.head_levels) != self.n_heads or len(self.head_cells) != self.n_heads:
            raise ValueError("head assignment length must equal n_heads")
        for h, (lv, c) in enumerate(zip(self.head_levels, self.head_cells)):
            if not 0 <= lv < len(self.factors):
                raise ValueError(f"head {h}: level {lv} out of range")
            if not 0 <= c < self.factors[lv] ** 2:
                raise ValueError(f"head {h}: cell {c} out of range for factor {self.factors[lv]}")
        used = set(self.head_levels)
        if used != set(range(len(self.factors))):
            raise ValueError(f"head groups must cover every level, covered {sorted(used)}")

    def _even_split(self):
        n_levels = len(self.factors)
        if self.n_heads % n_levels:
            raise ValueError(f"{self.n_heads} heads do not split evenly over {n_levels} levels")
        per_level = self.n_heads // n_levels
        levels, cells = [], []
        for lv, f in enumerate(self.factors):
            n_cells = f * f
            if per_level % n_cells:
                raise ValueError(
                    f"level {lv}: {per_level} heads do not split evenly over {n_cells} sub-cells"
                )
            for h in range(per_level):
                levels.append(lv)
                cells.append(h % n_cells)
        return tuple(levels), tuple(cells)

    def validate_patch(self, patch: int) -> None:
        for f in self.factors:
            if patch % f:
                raise ValueError(f"sub-cell factor {f} does not divide patch size {patch}")


# ---------------------------------------------------------------------------
# coordinate containers


@dataclass
class WarpMaps:
    """Per-source-pixel target-view coordinates (pixel units) + validity."""

    u: np.ndarray      # (H, W) float64, target horizontal pixel coordinate
    v: np.ndarray      # (H, W)
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        if not (self.u.shape == self.v.shape == self.valid.shape) or self.u.ndim != 2:
            raise ValueError("warp map components must share one (H, W) shape")


@dataclass
class PELevel:
    u: np.ndarray      # (Hl, Wl, f, f) float64, latent units
    v: np.ndarray
    valid: np.ndarray  # (Hl, Wl, f, f) bool


@dataclass
class TimeAwarePE:
    """Pooled (tau, u, v) coordinates of one token grid at every PE level."""

    tau: float
    levels: tuple[PELevel, ...]

    @property
    def grid_shape(self):
        return self.levels[0].u.shape[:2]

    def token_valid(self) -> np.ndarray:
        """(Hl*Wl,) bool; a token is usable iff its full patch saw any pixel."""
        return self.levels[0].valid[:, :, 0, 0].reshape(-1)

    def head_coords(self, cfg: MultiLevelPEConfig) -> np.ndarray:
        """Per-head (tau, u, v) per token, shape (n_heads, Hl*Wl, 3).

        Sub-cells that pooled zero valid pixels fall back to the level-0
        coordinate of their token (coarse estimate beats garbage; the token
        is masked out entirely when even level 0 saw nothing).
        """
        hl, wl = self.grid_shape
        n_tok = hl * wl
        lv0 = self.levels[0]
        u0 = lv0.u[:, :, 0, 0].reshape(-1)
        v0 = lv0.v[:, :, 0, 0].reshape(-1)
        out = np.empty((cfg.n_heads, n_tok, 3), dtype=np.float64)
        out[:, :, 0] = self.tau
        for h in range(cfg.n_heads):
            lv = self.levels[cfg.head_levels[h]]
            f = lv.u.shape[2]
            cy, cx = divmod(cfg.head_cells[h], f)
            u = lv.u[:, :, cy, cx].reshape(-1)
            v = lv.v[:, :, cy, cx].reshape(-1)
            ok = lv.valid[:, :, cy, cx].reshape(-1)
            out[h, :, 1] = np.where(ok, u, u0)
            out[h, :, 2] = np.where(ok, v, v0)
        return out


@dataclass
class LatentClip:
    """Token grid for a clip: (N, Hl, Wl, C) plus stream kind and frame times."""

    tokens: np.ndarray
    kind: str                 # "noisy" | "clean"
    times: np.ndarray = None  # (N,) 1-based latent frame indices

    def __post_init__(self):
        if self.tokens.ndim != 4:
            raise ValueError(f"tokens must be (N, Hl, Wl, C), got {self.tokens.shape}")
        if self.kind not in ("noisy", "clean"):
            raise ValueError(f"kind must be noisy|clean, got {self.kind!r}")
        if self.times is None:
            self.times = np.arange(1, len(self.tokens) + 1)
        self.times = np.asarray(self.times)
        if self.times.shape != (len(self.tokens),):
            raise ValueError("times must have one entry per latent frame")


@dataclass
class CondEntry:
    """One clean conditioning entry: token grid + its two PE views."""

    tokens: np.ndarray      # (Hl, Wl, C)
    pe_warped: TimeAwarePE  # coordinates in the assigned target view
    pe_native: TimeAwarePE  # the entry's own grid (within-entry attention)
    assigned_frame: int     # 1-based target latent frame
    kind: str               # "ref" | "mem"
    mask: np.ndarray        # (Hl, Wl) pooled presence fraction in [0, 1]


@dataclass
class CondTokenSet:
    """Ordered conditioning entries: N reference replicas then M memory entries."""

    entries: list
    n_frames: int  # N, number of noisy latent frames being generated

    def __post_init__(self):
        n_ref = sum(1 for e in self.entries if e.kind == "ref")
        if n_ref != self.n_frames:
            raise ValueError(f"expected {self.n_frames} reference replicas, got {n_ref}")
        for i, e in enumerate(self.entries):
            if e.kind == "ref":
                if i >= self.n_frames or e.assigned_frame != i + 1:
                    raise ValueError(f"reference replica {i} misplaced or misassigned")
            elif e.kind == "mem":
                if i < self.n_frames:
                    raise ValueError("memory entries must follow the reference replicas")
                if not 2 <= e.assigned_frame <= self.n_frames:
                    raise ValueError(
                        f"memory entry assigned to frame {e.assigned_frame}, "
                        f"must be in [2, {self.n_frames}]"
                    )
            else:
                raise ValueError(f"unknown entry kind {e.kind!r}")

    @property
    def n_memory(self) -> int:
        return len(self.entries) - self.n_frames

    def assignments(self) -> np.ndarray:
        """(E,) 1-based target frame per entry."""
        return np.array([e.assigned_frame for e in self.entries], dtype=np.int64)


# ---------------------------------------------------------------------------
# warping and pooling


def compute_warp_maps(
    depth: DepthMap, src_pose: CameraPose, dst_pose: CameraPose, k: Intrinsics
) -> WarpMaps:
    """Where does each source pixel land in the target view?

    Lifts the source depth map to world points and projects them through the
    target camera. Coordinates may fall outside the image; that is fine for
    positional encodings. Pixels are invalid where the source depth is
    invalid or the point lands behind the target camera.
    """
    h, w = depth.shape
    if (h, w) != (k.height, k.width):
        raise ValueError(f"depth {h}x{w} does not match intrinsics {k.height}x{k.width}")
    u_src, v_src = pixel_grid(k)
    z = np.where(depth.valid, depth.values, 1.0)
    x = (u_src - k.cx) / k.fx * z
    y = (v_src - k.cy) / k.fy * z
    cam = np.stack([x, y, z], axis=-1)                       # (H, W, 3)
    world = cam @ src_pose.rotation.T + src_pose.translation
    tgt = (world - dst_pose.translation) @ dst_pose.rotation
    zt = tgt[..., 2]
    ok = depth.valid & (zt > 1e-4)
    zs = np.where(ok, zt, 1.0)
    u = k.fx * tgt[..., 0] / zs + k.cx
    v = k.fy * tgt[..., 1] / zs + k.cy
    return WarpMaps(u, v, ok)


def identity_warp_maps(k: Intrinsics) -> WarpMaps:
    """The warp of a view into itself: every pixel maps to its own center."""
    u, v = pixel_grid(k)
    return WarpMaps(u, v, np.ones((k.height, k.width), dtype=bool))


def pool_coords(maps: WarpMaps, patch: int, factor: int) -> PELevel:
    """Average warped coordinates over each (patch/factor)^2 sub-cell.

    Means are taken over valid pixels only and expressed in latent units
    (pixels / patch). A sub-cell with zero valid pixels is invalid; its
    coordinate slots hold zeros.
    """
    h, w = maps.u.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible by patch {patch}")
    if patch % factor:
        raise ValueError(f"factor {factor} does not divide patch {patch}")
    hl, wl = h // patch, w // patch
    sub = patch // factor
    # (Hl, f, sub, Wl, f, sub) -> (Hl, Wl, f, f, sub*sub)
    def cells(a):
        a = a.reshape(hl, factor, sub, wl, factor, sub)
        return a.transpose(0, 3, 1, 4, 2, 5).reshape(hl, wl, factor, factor, sub * sub)

    uu, vv, ok = cells(maps.u), cells(maps.v), cells(maps.valid)
    count = ok.sum(axis=-1)
    valid = count > 0
    denom = np.maximum(count, 1)
    u = np.where(valid, (uu * ok).sum(axis=-1) / denom, 0.0) / patch
    v = np.where(valid, (vv * ok).sum(axis=-1) / denom, 0.0) / patch
    return PELevel(u, v, valid)


def pool_mask(mask: np.ndarray, patch: int) -> np.ndarray:
    """Patch-mean of a (H, W) presence mask -> (Hl, Wl) fraction in [0, 1]."""
    h, w = mask.shape
    if h % patch or w % patch:
        raise ValueError(f"mask {h}x{w} not divisible by patch {patch}")
    return np.asarray(mask, dtype=np.float64).reshape(
        h // patch, patch, w // patch, patch
    ).mean(axis=(1, 3))


def warped_pe(tau: float, maps: WarpMaps, patch: int, cfg: MultiLevelPEConfig) -> TimeAwarePE:
    """Pool a pixel-level warp into per-level latent-grid PEs."""
    cfg.validate_patch(patch)
    return TimeAwarePE(float(tau), tuple(pool_coords(maps, patch, f) for f in cfg.factors))


def native_pe(tau: float, hl: int, wl: int, patch: int, cfg: MultiLevelPEConfig) -> TimeAwarePE:
    """The unwarped PE of an (hl, wl) token grid: analytic sub-cell centers.

    Matches warped_pe under an identity warp: with sub-cell pixel width
    w = patch/f, the mean pixel coordinate of sub-cell c inside patch g is
    g*patch + c*w + (w-1)/2, which in latent units is
    g + c/f + (1/f - 1/patch)/2.
    """
    cfg.validate_patch(patch)
    levels = []
    for f in cfg.factors:
        gy = np.arange(hl, dtype=np.float64)[:, None, None, None]
        gx = np.arange(wl, dtype=np.float64)[None, :, None, None]
        cy = np.arange(f, dtype=np.float64)[None, None, :, None]
        cx = np.arange(f, dtype=np.float64)[None, None, None, :]
        off = 0.5 * (1.0 / f - 1.0 / patch)
        u = np.broadcast_to(gx + cx / f + off, (hl, wl, f, f)).copy()
        v = np.broadcast_to(gy + cy / f + off, (hl, wl, f, f)).copy()
        levels.append(PELevel(u, v, np.ones((hl, wl, f, f), dtype=bool)))
    return TimeAwarePE(float(tau), tuple(levels))


def assemble_condition_set(
    ref_tokens: np.ndarray,
    ref_warps: Sequence[WarpMaps],
    memory_tokens: Sequence[np.ndarray] = (),
    memory_warps: Sequence[WarpMaps] = (),
    assignments: Sequence[int] = (),
    memory_masks: Sequence[np.ndarray] | None = None,
    *,
    patch: int = PATCH,
    cfg: MultiLevelPEConfig = None,
) -> CondTokenSet:
    """Build the full conditioning set for one generation window.

    The reference frame is replicated once per target latent frame i with its
    PE warped into view i (ref_warps[i-1]); memory frame j appears once,
    warped into its assigned frame assignments[j]. Entry order is the N
    reference replicas followed by the M memory entries.

    Args:
        ref_tokens: (Hl, Wl, C) clean latent tokens of the reference frame.
        ref_warps: N pixel-level warps, reference view -> target view i+1.
        memory_tokens: M clean token grids.
        memory_warps: M pixel-level warps, memory view j -> assigned view.
        assignments: M 1-based target frames, each in [2, N].
        memory_masks: optional M pixel masks (presence of splatted content);
            all-ones when omitted. The reference mask is always all-ones.
    """
    cfg = cfg or MultiLevelPEConfig()
    n = len(ref_warps)
    m = len(memory_tokens)
    if n < 1:
        raise ValueError("need at least one target frame")
    if not (len(memory_warps) == len(assignments) == m):
        raise ValueError("memory tokens / warps / assignments lengths disagree")
    if memory_masks is not None and len(memory_masks) != m:
        raise ValueError("memory_masks length disagrees with memory_tokens")
    hl, wl = ref_tokens.shape[:2]
    ones = np.ones((hl, wl), dtype=np.float64)
    entries = []
    for i in range(n):
        entries.append(
            CondEntry(
                tokens=ref_tokens,
                pe_warped=warped_pe(i + 1, ref_warps[i], patch, cfg),
                pe_native=native_pe(i + 1, hl, wl, patch, cfg),
                assigned_frame=i + 1,
                kind="ref",
                mask=ones,
            )
        )
    for j in range(m):
        k_j = int(assignments[j])
        if memory_tokens[j].shape[:2] != (hl, wl):
            raise ValueError(f"memory entry {j} grid {memory_tokens[j].shape[:2]} != ({hl}, {wl})")
        mask = ones if memory_masks is None else pool_mask(memory_masks[j], patch)
        entries.append(
            CondEntry(
                tokens=memory_tokens[j],
                pe_warped=warped_pe(k_j, memory_warps[j], patch, cfg),
                pe_native=native_pe(k_j, hl, wl, patch, cfg),
                assigned_frame=k_j,
                kind="mem",
                mask=mask,
            )
        )
    return CondTokenSet(entries, n)


# ---------------------------------------------------------------------------
# rotary embeddings over (tau, u, v)


def rope_pair_split(head_dim: int) -> tuple[int, int, int]:
    """Rotation-pair counts (time, u, v) for one head.

    A quarter of the channels encode time and the rest split evenly between
    u and v: head_dim 16 -> 4/6/6 channels -> (2, 3, 3) pairs. Pairing both
    spatial axes evenly requires head_dim % 16 == 0.
    """
    if head_dim % 16:
        raise ValueError(f"head_dim must be a multiple of 16 for the t/u/v split, got {head_dim}")
    pairs = head_dim // 2
    t = pairs // 4
    uv = (pairs - t) // 2
    return t, uv, uv


def rope_frequencies(head_dim: int, base: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Geometric frequency ladder per axis: omega_i = base**(-i/n_pairs)."""
    nt, nu, nv = rope_pair_split(head_dim)

    def ladder(n):
        return base ** (-np.arange(n, dtype=np.float64) / n)

    return ladder(nt), ladder(nu), ladder(nv)


def rope_angles(coords: np.ndarray, head_dim: int, base: float = 100.0) -> np.ndarray:
    """Rotation angles for (tau, u, v) coordinates.

    Args:
        coords: (..., 3) float coordinates.
    Returns:
        (..., head_dim // 2) angles, laid out [time pairs | u pairs | v pairs].
    """
    ft, fu, fv = rope_frequencies(head_dim, base)
    coords = np.asarray(coords, dtype=np.float64)
    return np.concatenate(
        [
            coords[..., 0:1] * ft,
            coords[..., 1:2] * fu,
            coords[..., 2:3] * fv,
        ],
        axis=-1,
    )


def rope_rotate(x: np.ndarray, sin: np.ndarray, cos: np.ndarray) -> np.ndarray:
    """Rotate interleaved channel pairs (2i, 2i+1) of x by the given angles.

    sin/cos have shape x.shape[:-1] + (head_dim // 2,) or broadcast to it.
    Preserves dtype of x.
    """
    shape = x.shape
    x2 = x.reshape(*shape[:-1], shape[-1] // 2, 2)
    a, b = x2[..., 0], x2[..., 1]
    out = np.empty_like(x2)
    out[..., 0] = a * cos - b * sin
    out[..., 1] = a * sin + b * cos
    return out.reshape(shape)


def apply_rope(
    x: np.ndarray, pe: TimeAwarePE, cfg: MultiLevelPEConfig, base: float = 100.0
) -> np.ndarray:
    """Rotate per-token per-head query/key rows by their PE coordinates.

    Args:
        x: (n_tokens, n_heads, head_dim) with n_tokens == Hl*Wl of the grid.
        pe: coordinate source; heads read the (level, cell) they own.
    """
    n_tok, n_heads, head_dim = x.shape
    if n_heads != cfg.n_heads:
        raise ValueError(f"x has {n_heads} heads, config expects {cfg.n_heads}")
    coords = pe.head_coords(cfg)          # (n_heads, n_tok, 3)
    if coords.shape[1] != n_tok:
        raise ValueError(f"pe grid has {coords.shape[1]} tokens, x has {n_tok}")
    ang = rope_angles(coords, head_dim, base)  # (n_heads, n_tok, hd/2)
    ang = np.swapaxes(ang, 0, 1)               # (n_tok, n_heads, hd/2)
    return rope_rotate(x, np.sin(ang).astype(x.dtype), np.cos(ang).astype(x.dtype))
