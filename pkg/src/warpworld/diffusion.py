"""Rectified-flow world model: codec, transformer, training, and sampling.

The generative core is a velocity-field transformer trained with the
rectified-flow objective: x_t = t*x1 + (1-t)*x0 interpolates noise to data,
and the model regresses v = x1 - x0. Sampling integrates the ODE with Euler
steps and classifier-free guidance over the class embedding only; camera and
memory conditioning stay active in both guidance branches.

Instead of a learned video VAE, frames pass through a fixed seeded
orthonormal patchify codec: space-to-channel rearrangement followed by an
orthogonal projection whose adjoint decodes exactly. All latent shapes match
the (T+r-1)/r grouping arithmetic.

Conditioning enters three ways: per-token (clean reference/memory tokens in
the second attention stream, with their splat masks as an extra input
channel), per-sample (adaLN modulation from the diffusion-time embedding),
and per-sample via cross-attention (the class embedding, standing in for a
text encoder).
"""

from __future__ import annotations

import json
import struct as _struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng as _rng
from .attention import (
    AttnStruct,
    RopeTables,
    _rot,
    _split_heads,
    _merge_heads,
    dit_block_backward,
    dit_block_forward,
    noisy_stream_attention,
)
from .curation import (
    OffsetDistribution,
    load_dataset,
    make_revisit_sample,
    render_scene_frame,
)
from .geometry import (
    CameraPose,
    DepthMap,
    Intrinsics,
    Trajectory,
    frame_groups,
    latent_frame_count,
    pool_trajectory,
)
from .memory import MemoryBank, retrieve_topM
from .nn import (
    AdamW,
    gelu_fwd,
    keep_large_allocs_on_heap,
    layernorm_bwd,
    layernorm_fwd,
    linear_bwd,
    linear_fwd,
    modulate_bwd,
    modulate_fwd,
    silu_bwd,
    silu_fwd,
    xavier_uniform,
)
from .pe_warp import (
    PATCH,
    MultiLevelPEConfig,
    assemble_condition_set,
    compute_warp_maps,
    native_pe,
    rope_angles,
)

CKPT_MAGIC = b"UCMC"
CKPT_VERSION = 1


# ---------------------------------------------------------------------------
# fixed orthonormal patchify codec


@dataclass(frozen=True)
class CodecConfig:
    """Space-to-channel patchify plus a seeded orthogonal channel mix."""

    patch: int = 8      # spatial stride s
    stride_t: int = 1   # temporal stride r
    seed: int = 0

    @property
    def channels(self) -> int:
        return 3 * self.patch * self.patch * self.stride_t


def codec_projection(cfg: CodecConfig) -> np.ndarray:
    """The fixed (C, C) orthonormal mixing matrix for this codec seed."""
    c = cfg.channels
    g = _rng.stream(cfg.seed, "codec")
    q, r = np.linalg.qr(g.normal(size=(c, c)))
    q = q * np.sign(np.diag(r))  # fix the QR sign ambiguity
    return q


def _group_frames(frames: np.ndarray, cfg: CodecConfig):
    t = frames.shape[0]
    groups = frame_groups(t, cfg.stride_t)
    return frames[np.asarray(groups).reshape(-1)].reshape(
        (len(groups), cfg.stride_t) + frames.shape[1:]
    ), groups


def encode_clip(frames: np.ndarray, cfg: CodecConfig, proj: np.ndarray = None) -> np.ndarray:
    """(T, H, W, 3) frames in [0,1] -> (N, H/s, W/s, C) latents, float64."""
    frames = np.asarray(frames, dtype=np.float64)
    t, h, w, _ = frames.shape
    s, r = cfg.patch, cfg.stride_t
    if h % s or w % s:
        raise ValueError(f"frame size {h}x{w} not divisible by patch {s}")
    x, groups = _group_frames(frames, cfg)
    n = len(groups)
    x = x.reshape(n, r, h // s, s, w // s, s, 3)
    x = x.transpose(0, 2, 4, 1, 3, 5, 6).reshape(n, h // s, w // s, cfg.channels)
    proj = codec_projection(cfg) if proj is None else proj
    return (x - 0.5) @ proj


def decode_latents(
    latents: np.ndarray, t: int, cfg: CodecConfig, proj: np.ndarray = None
) -> np.ndarray:
    """Exact adjoint of encode_clip. Output is (t, H, W, 3), unclipped."""
    n, hl, wl, c = latents.shape
    s, r = cfg.patch, cfg.stride_t
    if c != cfg.channels:
        raise ValueError(f"latent channels {c} != codec channels {cfg.channels}")
    if n != latent_frame_count(t, r):
        raise ValueError(f"{n} latent frames cannot decode to {t} frames at r={r}")
    proj = codec_projection(cfg) if proj is None else proj
    x = np.asarray(latents, dtype=np.float64) @ proj.T + 0.5
    x = x.reshape(n, hl, wl, r, s, s, 3).transpose(0, 3, 1, 4, 2, 5, 6)
    x = x.reshape(n * r, hl * s, wl * s, 3)
    groups = np.asarray(frame_groups(t, r)).reshape(-1)
    out = np.empty((t, hl * s, wl * s, 3))
    out[groups] = x
    return out


def encode_frame(frame: np.ndarray, cfg: CodecConfig, proj: np.ndarray = None) -> np.ndarray:
    """Encode a single frame as one latent frame (its own temporal group)."""
    reps = np.repeat(np.asarray(frame, dtype=np.float64)[None], cfg.stride_t, axis=0)
    return encode_clip(reps, cfg, proj)[0] if cfg.stride_t == 1 else _encode_group(reps, cfg, proj)


def _encode_group(group: np.ndarray, cfg: CodecConfig, proj: np.ndarray = None) -> np.ndarray:
    r, h, w, _ = group.shape
    s = cfg.patch
    x = group.reshape(r, h // s, s, w // s, s, 3)
    x = x.transpose(1, 3, 0, 2, 4, 5).reshape(h // s, w // s, cfg.channels)
    proj = codec_projection(cfg) if proj is None else proj
    return (np.asarray(x, dtype=np.float64) - 0.5) @ proj


# ---------------------------------------------------------------------------
# rectified flow


def forward_process(x0: np.ndarray, x1: np.ndarray, t) -> np.ndarray:
    """x_t = t*x1 + (1-t)*x0; t may be scalar or per-sample."""
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch {x0.shape} vs {x1.shape}")
    t = np.asarray(t, dtype=x0.dtype)
    t = t.reshape(t.shape + (1,) * (x0.ndim - t.ndim))
    return t * x1 + (1.0 - t) * x0


def velocity_target(x0: np.ndarray, x1: np.ndarray) -> np.ndarray:
    return x1 - x0


# ---------------------------------------------------------------------------
# model configuration and parameters


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 4
    dim: int = 128
    n_heads: int = 8
    n_classes: int = 4
    clip_len: int = 9
    image_size: int = 64
    patch: int = PATCH
    stride_t: int = 1
    codec_seed: int = 0
    rope_base: float = 100.0
    pe_factors: tuple = (1, 2)
    time_feat: int = 64

    def __post_init__(self):
        if self.dim % self.n_heads:
            raise ValueError(f"dim {self.dim} not divisible by {self.n_heads} heads")
        if (self.dim // self.n_heads) % 16:
            raise ValueError("head dim must be a multiple of 16 for the rotary split")
        if self.image_size % self.patch:
            raise ValueError(f"image size {self.image_size} not divisible by patch {self.patch}")
        if self.time_feat % 2:
            raise ValueError("time_feat must be even")

    @property
    def head_dim(self) -> int:
        return self.dim // self.n_heads

    @property
    def latent_size(self) -> int:
        return self.image_size // self.patch

    @property
    def n_latent(self) -> int:
        return latent_frame_count(self.clip_len, self.stride_t)

    @property
    def tokens_per_frame(self) -> int:
        return self.latent_size * self.latent_size

    @property
    def null_class(self) -> int:
        return self.n_classes

    def codec(self) -> CodecConfig:
        return CodecConfig(self.patch, self.stride_t, self.codec_seed)

    def pe(self) -> MultiLevelPEConfig:
        return MultiLevelPEConfig(factors=tuple(self.pe_factors), n_heads=self.n_heads)

    def to_dict(self) -> dict:
        return {
            "depth": self.depth, "dim": self.dim, "n_heads": self.n_heads,
            "n_classes": self.n_classes, "clip_len": self.clip_len,
            "image_size": self.image_size, "patch": self.patch,
            "stride_t": self.stride_t, "codec_seed": self.codec_seed,
            "rope_base": self.rope_base, "pe_factors": list(self.pe_factors),
            "time_feat": self.time_feat,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        d["pe_factors"] = tuple(d.get("pe_factors", (1, 2)))
        return ModelConfig(**d)


_BLOCK_SHAPES = [
    ("mod.w", "zeros", lambda d: (d, 6 * d)),
    ("mod.b", "zeros", lambda d: (6 * d,)),
    ("attn.qkv.w", "xavier", lambda d: (d, 3 * d)),
    ("attn.qkv.b", "zeros", lambda d: (3 * d,)),
    ("attn.out.w", "xavier", lambda d: (d, d)),
    ("attn.out.b", "zeros", lambda d: (d,)),
    ("cross.norm.g", "ones", lambda d: (d,)),
    ("cross.norm.b", "zeros", lambda d: (d,)),
    ("cross.q.w", "xavier", lambda d: (d, d)),
    ("cross.q.b", "zeros", lambda d: (d,)),
    ("cross.kv.w", "xavier", lambda d: (d, 2 * d)),
    ("cross.kv.b", "zeros", lambda d: (2 * d,)),
    ("cross.out.w", "zeros", lambda d: (d, d)),
    ("cross.out.b", "zeros", lambda d: (d,)),
    ("ffn.w1", "xavier", lambda d: (d, 4 * d)),
    ("ffn.b1", "zeros", lambda d: (4 * d,)),
    ("ffn.w2", "xavier", lambda d: (4 * d, d)),
    ("ffn.b2", "zeros", lambda d: (d,)),
]


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> dict:
    """All weights for the velocity model.

    Modulation linears, the cross-attention output projection, and the final
    head start at zero, so the untrained network predicts zero velocity and
    every block begins as the identity.
    """
    g = _rng.stream(seed, "init")
    d, c = cfg.dim, cfg.codec().channels

    def draw(kind, shape):
        if kind == "zeros":
            return np.zeros(shape, dtype=dtype)
        if kind == "ones":
            return np.ones(shape, dtype=dtype)
        return xavier_uniform(g, shape[0], shape[1], dtype)

    p = {}
    p["in.w"] = draw("xavier", (c + 1, d))
    p["in.b"] = np.zeros(d, dtype=dtype)
    p["tmlp.w1"] = draw("xavier", (cfg.time_feat, d))
    p["tmlp.b1"] = np.zeros(d, dtype=dtype)
    p["tmlp.w2"] = draw("xavier", (d, d))
    p["tmlp.b2"] = np.zeros(d, dtype=dtype)
    p["class.table"] = (g.normal(size=(cfg.n_classes + 1, d)) * 0.02).astype(dtype)
    for i in range(cfg.depth):
        for name, kind, shape_fn in _BLOCK_SHAPES:
            p[f"blocks.{i}.{name}"] = draw(kind, shape_fn(d))
    p["final.mod.w"] = np.zeros((d, 2 * d), dtype=dtype)
    p["final.mod.b"] = np.zeros(2 * d, dtype=dtype)
    p["final.head.w"] = np.zeros((d, c), dtype=dtype)
    p["final.head.b"] = np.zeros(c, dtype=dtype)
    # time-gated channel skip from x_t to the velocity: with d < c the token
    # projection is a rank bottleneck and the noise direction could never be
    # subtracted exactly, which floors the flow loss near (c - d) / c
    p["final.skip.w"] = np.zeros((d, c), dtype=dtype)
    p["final.skip.b"] = np.zeros(c, dtype=dtype)
    return p


def _block_params(params: dict, i: int) -> dict:
    pre = f"blocks.{i}."
    return {k[len(pre):]: v for k, v in params.items() if k.startswith(pre)}


# ---------------------------------------------------------------------------
# conditioning tensors


@dataclass
class ConditionTensors:
    """Batched conditioning inputs shared by every block and ODE step."""

    tokens: np.ndarray  # (B, Tc, C)
    mask: np.ndarray    # (B, Tc, 1)
    rope: RopeTables
    struct: AttnStruct


def _noisy_native_angles(cfg: ModelConfig):
    pe_cfg = cfg.pe()
    hl = cfg.latent_size
    coords = np.concatenate(
        [
            native_pe(i + 1.0, hl, hl, cfg.patch, pe_cfg).head_coords(pe_cfg)
            for i in range(cfg.n_latent)
        ],
        axis=1,
    )  # (H, Tn, 3)
    return rope_angles(coords, cfg.head_dim, cfg.rope_base)


def build_condition_tensors(csets, cfg: ModelConfig, dtype=np.float32) -> ConditionTensors:
    """Stack per-sample condition sets (equal entry counts) into batch arrays."""
    pe_cfg = cfg.pe()
    hd = cfg.head_dim
    toks, masks, warped, nat, kvalid, assigned = [], [], [], [], [], []
    for cs in csets:
        toks.append(
            np.stack([e.tokens for e in cs.entries]).reshape(-1, cfg.codec().channels)
        )
        masks.append(np.stack([e.mask for e in cs.entries]).reshape(-1, 1))
        warped.append(
            np.concatenate([e.pe_warped.head_coords(pe_cfg) for e in cs.entries], axis=1)
        )
        nat.append(
            np.concatenate([e.pe_native.head_coords(pe_cfg) for e in cs.entries], axis=1)
        )
        kvalid.append(np.stack([e.pe_warped.token_valid() for e in cs.entries]))
        assigned.append(cs.assignments() - 1)

    ang_w = rope_angles(np.stack(warped), hd, cfg.rope_base)
    ang_n = rope_angles(np.stack(nat), hd, cfg.rope_base)
    ang_noisy = _noisy_native_angles(cfg)
    rope = RopeTables(
        sin_n=np.sin(ang_noisy).astype(dtype),
        cos_n=np.cos(ang_noisy).astype(dtype),
        sin_cs=np.sin(ang_n).astype(dtype),
        cos_cs=np.cos(ang_n).astype(dtype),
        sin_ci=np.sin(ang_w).astype(dtype),
        cos_ci=np.cos(ang_w).astype(dtype),
    )
    struct = AttnStruct(
        n_frames=cfg.n_latent,
        tokens_per_frame=cfg.tokens_per_frame,
        assigned=np.stack(assigned),
        key_valid=np.stack(kvalid),
    )
    return ConditionTensors(
        tokens=np.stack(toks).astype(dtype),
        mask=np.stack(masks).astype(dtype),
        rope=rope,
        struct=struct,
    )


# ---------------------------------------------------------------------------
# timestep embedding


def time_features(t, n_feat: int) -> np.ndarray:
    """Sinusoidal features of the diffusion time, scaled by 1000."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = n_feat // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = 1000.0 * t[:, None] * freqs[None, :]
    return np.concatenate([np.cos(ang), np.sin(ang)], axis=-1)


def _emb_fwd(params, feat):
    h1 = linear_fwd(feat, params["tmlp.w1"], params["tmlp.b1"])
    s1 = silu_fwd(h1)
    emb = linear_fwd(s1, params["tmlp.w2"], params["tmlp.b2"])
    return emb, (feat, h1, s1)


def _emb_bwd(demb, cache, params, grads):
    feat, h1, s1 = cache
    ds1, dw2, db2 = linear_bwd(demb, s1, params["tmlp.w2"])
    grads["tmlp.w2"] += dw2
    grads["tmlp.b2"] += db2
    dh1 = silu_bwd(ds1, h1)
    _, dw1, db1 = linear_bwd(dh1, feat, params["tmlp.w1"])
    grads["tmlp.w1"] += dw1
    grads["tmlp.b1"] += db1


# ---------------------------------------------------------------------------
# full model forward / backward


def model_forward(
    params: dict,
    cfg: ModelConfig,
    xt_tokens: np.ndarray,
    cond: ConditionTensors,
    t: np.ndarray,
    class_ids: np.ndarray,
    need_cache: bool = False,
):
    """Velocity prediction. xt_tokens: (B, Tn, C) noisy latents, flattened
    frame-major. Returns ((B, Tn, C) velocity, cache)."""
    dtype = params["in.w"].dtype
    b, tn, _ = xt_tokens.shape
    class_ids = np.asarray(class_ids, dtype=np.int64)

    feat_t = time_features(t, cfg.time_feat).astype(dtype)
    feat_1 = time_features(np.ones(b), cfg.time_feat).astype(dtype)
    cn, emb_cache_n = _emb_fwd(params, feat_t)
    cc, emb_cache_c = _emb_fwd(params, feat_1)
    y = params["class.table"][class_ids]

    xn_in = np.concatenate([xt_tokens, np.ones((b, tn, 1), dtype=dtype)], axis=-1)
    xc_in = np.concatenate([cond.tokens, cond.mask], axis=-1)
    hn = linear_fwd(xn_in, params["in.w"], params["in.b"])
    hc = linear_fwd(xc_in, params["in.w"], params["in.b"])

    bcaches = []
    for i in range(cfg.depth):
        hn, hc, bc = dit_block_forward(
            hn, hc, _block_params(params, i), cond.rope, cond.struct,
            cn, cc, y, cfg.n_heads, need_cache=need_cache,
        )
        bcaches.append(bc)

    xhat, lnc = layernorm_fwd(hn)
    sfin = silu_fwd(cn)
    mvec = linear_fwd(sfin, params["final.mod.w"], params["final.mod.b"])
    shift, scale = np.split(mvec, 2, axis=-1)
    hmod = modulate_fwd(xhat, shift, scale)
    out = linear_fwd(hmod, params["final.head.w"], params["final.head.b"])
    gsk = linear_fwd(sfin, params["final.skip.w"], params["final.skip.b"])
    out += gsk[:, None, :] * xt_tokens

    cache = None
    if need_cache:
        cache = dict(
            emb_n=emb_cache_n, emb_c=emb_cache_c, cn=cn, cc=cc, y=y,
            class_ids=class_ids, xn_in=xn_in, xc_in=xc_in, xt=xt_tokens,
            bcaches=bcaches, xhat=xhat, lnc=lnc, sfin=sfin,
            scale=scale, hmod=hmod, hc_shape=hc.shape,
        )
    return out, cache


def model_backward(dout: np.ndarray, cache: dict, params: dict, cfg: ModelConfig) -> dict:
    grads = {k: np.zeros_like(v) for k, v in params.items()}

    dhmod, dwh, dbh = linear_bwd(dout, cache["hmod"], params["final.head.w"])
    grads["final.head.w"] += dwh
    grads["final.head.b"] += dbh
    dgsk = np.einsum("btc,btc->bc", dout, cache["xt"])
    dsfin_sk, dws, dbs = linear_bwd(dgsk, cache["sfin"], params["final.skip.w"])
    grads["final.skip.w"] += dws
    grads["final.skip.b"] += dbs
    dxhat, dshift, dscale = modulate_bwd(dhmod, cache["xhat"], cache["scale"])
    dmvec = np.concatenate([dshift, dscale], axis=-1)
    dsfin, dwm, dbm = linear_bwd(dmvec, cache["sfin"], params["final.mod.w"])
    dsfin += dsfin_sk
    grads["final.mod.w"] += dwm
    grads["final.mod.b"] += dbm
    dcn = silu_bwd(dsfin, cache["cn"])
    dhn = layernorm_bwd(dxhat, cache["lnc"])

    dhc = np.zeros(cache["hc_shape"], dtype=dhn.dtype)
    dcc = np.zeros_like(dcn)
    dy = np.zeros_like(cache["y"])
    for i in reversed(range(cfg.depth)):
        dhn, dhc, dcn_i, dcc_i, dy_i, bg = dit_block_backward(
            dhn, dhc, _block_params(params, i), cache["bcaches"][i]
        )
        dcn += dcn_i
        dcc += dcc_i
        dy += dy_i
        for name, g in bg.items():
            grads[f"blocks.{i}.{name}"] += g

    _, dwin, dbin = linear_bwd(dhn, cache["xn_in"], params["in.w"])
    _, dwic, dbic = linear_bwd(dhc, cache["xc_in"], params["in.w"])
    grads["in.w"] += dwin + dwic
    grads["in.b"] += dbin + dbic

    _emb_bwd(dcn, cache["emb_n"], params, grads)
    _emb_bwd(dcc, cache["emb_c"], params, grads)
    np.add.at(grads["class.table"], cache["class_ids"], dy)
    return grads


@dataclass
class TrainBatch:
    xt: np.ndarray        # (B, Tn, C)
    v_target: np.ndarray  # (B, Tn, C)
    t: np.ndarray         # (B,)
    class_ids: np.ndarray
    cond: ConditionTensors


def flow_loss_and_grads(params, cfg: ModelConfig, batch: TrainBatch, need_grads=True):
    out, cache = model_forward(
        params, cfg, batch.xt, batch.cond, batch.t, batch.class_ids,
        need_cache=need_grads,
    )
    diff = out - batch.v_target
    loss = float(np.mean(diff * diff))
    if not need_grads:
        return loss, None
    dout = (2.0 / diff.size) * diff
    return loss, model_backward(dout, cache, params, cfg)


# ---------------------------------------------------------------------------
# training batch assembly


@dataclass
class _Window:
    x1: np.ndarray          # (Tn, C) clean latent tokens
    ref_tokens: np.ndarray  # (Hl, Wl, C)
    ref_warps: list
    pooled: Trajectory
    scene_class: int


def _prepare_window(clip, w: int, cfg: ModelConfig, proj) -> _Window:
    t = cfg.clip_len
    frames = clip.frames[w : w + t]
    lat = encode_clip(frames, cfg.codec(), proj)
    pooled = pool_trajectory(
        Trajectory([clip.poses[w + i] for i in range(t)]), cfg.stride_t
    )
    ref_warps = [
        compute_warp_maps(clip.depths[w], clip.poses[w], pooled[i], clip.intrinsics)
        for i in range(cfg.n_latent)
    ]
    return _Window(
        x1=lat.reshape(-1, cfg.codec().channels),
        ref_tokens=lat[0],
        ref_warps=ref_warps,
        pooled=pooled,
        scene_class=clip.scene_class,
    )


def _keyframe_offsets(cfg: ModelConfig):
    # clip-frame offset represented by each latent frame (last group member)
    return [g[-1] for g in frame_groups(cfg.clip_len, cfg.stride_t)]


def _draw_memory(clip, w, cfg: ModelConfig, pooled, gen, offsets, proj, di_max=8):
    """One curated pseudo-memory: a splat revisit of a window frame, plus the
    warp of its z-buffer geometry into the assigned latent frame's view."""
    n = cfg.n_latent
    jw = int(gen.integers(2, n + 1))
    target_clip_idx = w + _keyframe_offsets(cfg)[jw - 1]
    di = int(gen.integers(-di_max, di_max + 1))
    src = int(np.clip(target_clip_idx + di, 0, len(clip.frames) - 1))
    from .curation import sample_offset

    off = sample_offset(gen, offsets)
    sample = make_revisit_sample(clip, src, off, target_clip_idx - src)
    depth = DepthMap(
        np.where(np.isfinite(sample.zbuffer), sample.zbuffer, 0.0),
        np.isfinite(sample.zbuffer),
    )
    warp = compute_warp_maps(depth, sample.render_pose, pooled[jw - 1], clip.intrinsics)
    tokens = encode_frame(sample.image, cfg.codec(), proj)
    return tokens, warp, sample.mask, jw


def assemble_train_batch(
    scenes,
    cfg: ModelConfig,
    gen: np.random.Generator,
    batch_size: int,
    n_memories: int,
    window_cache: dict,
    offsets: OffsetDistribution,
    cfg_drop: float,
    proj: np.ndarray,
    dtype=np.float32,
) -> TrainBatch:
    pe_cfg = cfg.pe()
    xts, vs, ts, cls, csets = [], [], [], [], []
    for _ in range(batch_size):
        si = int(gen.integers(len(scenes)))
        scene = scenes[si]
        ci = int(gen.integers(len(scene.clips)))
        clip = scene.clips[ci]
        w = int(gen.integers(0, len(clip.frames) - cfg.clip_len + 1))
        key = (si, ci, w)
        if key not in window_cache:
            window_cache[key] = _prepare_window(clip, w, cfg, proj)
        win = window_cache[key]

        mem_tokens, mem_warps, mem_masks, assigns = [], [], [], []
        for _ in range(n_memories):
            tok, warp, mask, jw = _draw_memory(clip, w, cfg, win.pooled, gen, offsets, proj)
            mem_tokens.append(tok)
            mem_warps.append(warp)
            mem_masks.append(mask)
            assigns.append(jw)
        cset = assemble_condition_set(
            win.ref_tokens, win.ref_warps, mem_tokens, mem_warps, assigns,
            memory_masks=mem_masks or None, patch=cfg.patch, cfg=pe_cfg,
        )

        t_b = float(gen.uniform())
        x1 = win.x1
        x0 = gen.standard_normal(x1.shape)
        xts.append(forward_process(x0, x1, t_b))
        vs.append(velocity_target(x0, x1))
        ts.append(t_b)
        dropped = gen.random() < cfg_drop
        cls.append(cfg.null_class if dropped else win.scene_class)
        csets.append(cset)

    return TrainBatch(
        xt=np.stack(xts).astype(dtype),
        v_target=np.stack(vs).astype(dtype),
        t=np.asarray(ts),
        class_ids=np.asarray(cls, dtype=np.int64),
        cond=build_condition_tensors(csets, cfg, dtype),
    )


def train(
    dataset,
    cfg: ModelConfig,
    out_dir=None,
    *,
    steps: int = 2000,
    batch_size: int = 3,
    lr: float = 1e-3,
    seed: int = 0,
    warmup: int = 100,
    weight_decay: float = 1e-4,
    m_probs=(0.25, 0.4, 0.35),
    cfg_drop: float = 0.1,
    offsets: OffsetDistribution = None,
    ckpt_every: int = 0,
    log_cb=None,
    dtype=np.float32,
):
    """Rectified-flow training. Deterministic in seed: every stochastic draw
    comes from a per-step substream, so loss curves replay bitwise.

    The per-step memory count is drawn from m_probs over {0, 1, ...} and
    shared across the batch, keeping the conditioning sets stackable.

    Returns (params, losses).
    """
    scenes = load_dataset(dataset) if isinstance(dataset, (str, Path)) else dataset
    if not scenes:
        raise ValueError("dataset is empty")
    keep_large_allocs_on_heap()
    offsets = offsets or OffsetDistribution()
    proj = codec_projection(cfg.codec())
    params = init_params(cfg, seed, dtype)
    opt = AdamW(params, lr=lr, warmup_steps=warmup, weight_decay=weight_decay)
    window_cache: dict = {}
    losses = []
    m_probs = np.asarray(m_probs, dtype=np.float64)
    m_probs = m_probs / m_probs.sum()

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    for step in range(steps):
        g = _rng.substream(seed, "train", step)
        n_mem = int(g.choice(len(m_probs), p=m_probs))
        batch = assemble_train_batch(
            scenes, cfg, g, batch_size, n_mem, window_cache, offsets,
            cfg_drop, proj, dtype,
        )
        loss, grads = flow_loss_and_grads(params, cfg, batch)
        if not np.isfinite(loss):
            gmax = max((float(np.abs(v).max()) for v in grads.values()), default=0.0)
            raise RuntimeError(
                f"non-finite loss {loss} at step {step} "
                f"(t={batch.t}, n_mem={n_mem}, max |grad|={gmax:.3e})"
            )
        opt.step(params, grads)
        losses.append(loss)
        if log_cb is not None:
            log_cb(step, loss)
        if out_dir is not None and ckpt_every and (step + 1) % ckpt_every == 0:
            save_checkpoint(out_dir / f"ckpt_{step + 1:06d}.uc", params, cfg)

    if out_dir is not None:
        save_checkpoint(out_dir / "model.uc", params, cfg)
        with open(out_dir / "loss.csv", "w") as f:
            f.write("step,loss\n")
            for i, l in enumerate(losses):
                f.write(f"{i},{l:.8e}\n")
    return params, losses


# ---------------------------------------------------------------------------
# sampling


def _clean_pass(params, cfg: ModelConfig, cond: ConditionTensors, cc, y):
    """Run the clean stream through all blocks once.

    The clean tokens never attend to noisy tokens and their conditioning
    (clean-time embedding, class embedding) is step-independent, so their
    keys/values per block are constants of the ODE integration. Returns one
    (rotated injection keys, values, cross-attention shift) triple per block.
    """
    dtype = params["in.w"].dtype
    b = cond.tokens.shape[0]
    tn = cfg.n_latent * cfg.tokens_per_frame
    xc_in = np.concatenate([cond.tokens, cond.mask], axis=-1)
    hc = linear_fwd(xc_in, params["in.w"], params["in.b"])
    hn = np.zeros((b, tn, cfg.dim), dtype=dtype)  # content never read back
    cached = []
    for i in range(cfg.depth):
        bp = _block_params(params, i)
        kv = linear_fwd(y, bp["cross.kv.w"], bp["cross.kv.b"])
        vy = np.split(kv, 2, axis=-1)[1]
        cross_add = linear_fwd(vy, bp["cross.out.w"], bp["cross.out.b"])
        hn, hc, bc = dit_block_forward(
            hn, hc, bp, cond.rope, cond.struct, cc, cc, y, cfg.n_heads,
            need_cache=True,
        )
        acache = bc["acache"]
        cached.append((acache[4], acache[6], cross_add))
    return cached


def _noisy_velocity(params, cfg: ModelConfig, xt_tokens, cond: ConditionTensors, clean_kv, cn):
    """One velocity evaluation reusing the cached clean stream."""
    dtype = params["in.w"].dtype
    b, tn, _ = xt_tokens.shape
    xn_in = np.concatenate([xt_tokens, np.ones((b, tn, 1), dtype=dtype)], axis=-1)
    hn = linear_fwd(xn_in, params["in.w"], params["in.b"])
    sn = silu_fwd(cn)
    for i, (kci, vc, cross_add) in enumerate(clean_kv):
        bp = _block_params(params, i)
        mn = np.split(linear_fwd(sn, bp["mod.w"], bp["mod.b"]), 6, axis=-1)
        xn, _ = layernorm_fwd(hn)
        an = modulate_fwd(xn, mn[0], mn[1])
        qkv = linear_fwd(an, bp["attn.qkv.w"], bp["attn.qkv.b"])
        qn, kn, vn = (_split_heads(s, cfg.n_heads) for s in np.split(qkv, 3, axis=-1))
        qn = _rot(qn, cond.rope.tab("n"))
        kn = _rot(kn, cond.rope.tab("n"))
        out_n = noisy_stream_attention(qn, kn, vn, kci, vc, cond.struct)
        pn = linear_fwd(_merge_heads(out_n), bp["attn.out.w"], bp["attn.out.b"])
        hn = hn + mn[2][:, None, :] * pn
        hn = hn + cross_add[:, None, :]
        xn3, _ = layernorm_fwd(hn)
        fn = modulate_fwd(xn3, mn[3], mn[4])
        gn = gelu_fwd(linear_fwd(fn, bp["ffn.w1"], bp["ffn.b1"]))
        hn = hn + mn[5][:, None, :] * linear_fwd(gn, bp["ffn.w2"], bp["ffn.b2"])

    xhat, _ = layernorm_fwd(hn)
    sfin = silu_fwd(cn)
    mvec = linear_fwd(sfin, params["final.mod.w"], params["final.mod.b"])
    shift, scale = np.split(mvec, 2, axis=-1)
    out = linear_fwd(
        modulate_fwd(xhat, shift, scale), params["final.head.w"], params["final.head.b"]
    )
    gsk = linear_fwd(sfin, params["final.skip.w"], params["final.skip.b"])
    out += gsk[:, None, :] * xt_tokens
    return out


def build_sampling_condition(
    cfg: ModelConfig,
    ref_frame: np.ndarray,
    ref_depth: DepthMap,
    ref_pose: CameraPose,
    traj: Trajectory,
    bank: MemoryBank,
    k: Intrinsics,
    *,
    n_memories: int = 4,
    retrieval_seed: int = 0,
    iou_samples: int = 1000,
    proj=None,
    dtype=np.float32,
    n_branches: int = 1,
):
    """Assemble the conditioning set for one clip: reference replicas plus
    retrieved memories. Returns (ConditionTensors, pooled traj, retrieval)."""
    proj = codec_projection(cfg.codec()) if proj is None else proj
    if len(traj) != cfg.clip_len:
        raise ValueError(f"trajectory has {len(traj)} poses, expected {cfg.clip_len}")
    pooled = pool_trajectory(traj, cfg.stride_t)
    ref_tokens = encode_frame(np.asarray(ref_frame, dtype=np.float64), cfg.codec(), proj)
    ref_warps = [
        compute_warp_maps(ref_depth, ref_pose, pooled[i], k)
        for i in range(cfg.n_latent)
    ]
    mem_tokens, mem_warps, assigns = [], [], []
    retrieval = None
    if bank is not None and len(bank) > 0 and n_memories > 0:
        retrieval = retrieve_topM(
            bank, pooled, n_memories, k, samples=iou_samples, seed=retrieval_seed
        )
        for row, idx in enumerate(retrieval.indices):
            jw = int(retrieval.assignments[row])
            mem_tokens.append(encode_frame(bank.frames[idx], cfg.codec(), proj))
            mem_warps.append(
                compute_warp_maps(bank.depths[idx], bank.poses[idx], pooled[jw - 1], k)
            )
            assigns.append(jw)
    cset = assemble_condition_set(
        ref_tokens, ref_warps, mem_tokens, mem_warps, assigns,
        patch=cfg.patch, cfg=cfg.pe(),
    )
    cond = build_condition_tensors([cset] * n_branches, cfg, dtype)
    return cond, pooled, retrieval


def sample_clip(
    params: dict,
    cfg: ModelConfig,
    ref_frame: np.ndarray,
    ref_depth: DepthMap,
    ref_pose: CameraPose,
    traj: Trajectory,
    k: Intrinsics,
    *,
    bank: MemoryBank = None,
    depth_provider=None,
    class_id: int = 0,
    steps: int = 50,
    cfg_scale: float = 2.0,
    n_memories: int = 4,
    seed: int = 0,
    retrieval_seed: int = 0,
    iou_samples: int = 1000,
):
    """Generate one clip along traj, conditioned on the reference frame and
    any retrieved memories. Euler integration from Gaussian noise at t=0;
    classifier-free guidance mixes a null-class branch unless cfg_scale is 1.

    When a bank is given, the clip's latent keyframes (with depth from
    depth_provider) are appended to it afterward.

    Returns (frames (T, H, W, 3) float32 in [0, 1], info dict).
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if bank is not None and depth_provider is None:
        raise ValueError("a depth provider is required to append to the bank")
    dtype = params["in.w"].dtype
    proj = codec_projection(cfg.codec())
    guided = cfg_scale != 1.0
    b = 2 if guided else 1
    cond, pooled, retrieval = build_sampling_condition(
        cfg, ref_frame, ref_depth, ref_pose, traj, bank, k,
        n_memories=n_memories, retrieval_seed=retrieval_seed,
        iou_samples=iou_samples, proj=proj, dtype=dtype, n_branches=b,
    )
    class_ids = np.asarray([class_id, cfg.null_class][:b], dtype=np.int64)
    cc, _ = _emb_fwd(params, time_features(np.ones(b), cfg.time_feat).astype(dtype))
    y = params["class.table"][class_ids]
    clean_kv = _clean_pass(params, cfg, cond, cc, y)

    tn = cfg.n_latent * cfg.tokens_per_frame
    c = cfg.codec().channels
    g = _rng.stream(seed, "sample-noise")
    x = g.standard_normal((tn, c)).astype(dtype)
    dt = 1.0 / steps
    for s in range(steps):
        t_s = s / steps
        cn, _ = _emb_fwd(params, time_features(np.full(b, t_s), cfg.time_feat).astype(dtype))
        xt = np.broadcast_to(x, (b, tn, c))
        v = _noisy_velocity(params, cfg, np.ascontiguousarray(xt), cond, clean_kv, cn)
        if guided:
            vhat = v[1] + cfg_scale * (v[0] - v[1])
        else:
            vhat = v[0]
        x = x + dt * vhat

    lat = x.reshape(cfg.n_latent, cfg.latent_size, cfg.latent_size, c)
    frames = decode_latents(lat, cfg.clip_len, cfg.codec(), proj)
    frames = np.clip(frames, 0.0, 1.0).astype(np.float32)

    if bank is not None:
        next_time = bank.times[-1] + 1 if len(bank) else 0
        for i, off in enumerate(_keyframe_offsets(cfg)):
            bank.append(
                frames[off], depth_provider.depth(pooled[i]), pooled[i], next_time + i
            )
    info = {"retrieval": retrieval, "pooled": pooled}
    return frames, info


def rollout(
    params: dict,
    cfg: ModelConfig,
    ref_frame: np.ndarray,
    ref_depth: DepthMap,
    ref_pose: CameraPose,
    traj: Trajectory,
    k: Intrinsics,
    n_clips: int,
    *,
    bank: MemoryBank = None,
    depth_provider=None,
    class_id: int = 0,
    steps: int = 50,
    cfg_scale: float = 2.0,
    n_memories: int = 4,
    seed: int = 0,
):
    """Chained clip generation along a long trajectory.

    traj must hold n_clips*(T-1)+1 poses; consecutive clips share their
    boundary frame, and each clip's reference is the previous clip's last
    generated frame with depth from the provider.
    """
    t = cfg.clip_len
    want = n_clips * (t - 1) + 1
    if len(traj) != want:
        raise ValueError(
            f"trajectory has {len(traj)} poses; {n_clips} clips need {want}"
        )
    if depth_provider is None:
        raise ValueError("rollout requires a depth provider")
    frames_out = None
    cur_frame, cur_depth, cur_pose = ref_frame, ref_depth, ref_pose
    for ci in range(n_clips):
        lo = ci * (t - 1)
        clip_traj = Trajectory([traj[lo + i] for i in range(t)])
        try:
            frames, _ = sample_clip(
                params, cfg, cur_frame, cur_depth, cur_pose, clip_traj, k,
                bank=bank, depth_provider=depth_provider, class_id=class_id,
                steps=steps, cfg_scale=cfg_scale, n_memories=n_memories,
                seed=seed + ci,
            )
        except Exception as err:
            raise RuntimeError(f"rollout failed at clip {ci}: {err}") from err
        frames_out = frames if frames_out is None else np.concatenate(
            [frames_out, frames[1:]], axis=0
        )
        cur_pose = clip_traj[-1]
        cur_frame = frames[-1]
        cur_depth = depth_provider.depth(cur_pose)
    return frames_out


class OracleSceneDepth:
    """Depth provider that ray-casts the generating scene specification."""

    def __init__(self, spec, k: Intrinsics):
        self.spec = spec
        self.k = k

    def depth(self, pose: CameraPose) -> DepthMap:
        return render_scene_frame(self.spec, pose, self.k)[1]


# ---------------------------------------------------------------------------
# checkpoint format


def save_checkpoint(path, params: dict, cfg: ModelConfig) -> None:
    """Write magic, version, config blob, then named f32 sections."""
    blob = json.dumps(cfg.to_dict()).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_struct.pack("<4sII", CKPT_MAGIC, CKPT_VERSION, len(blob)))
        f.write(blob)
        for name in sorted(params):
            arr = np.asarray(params[name], dtype="<f4")
            nb = name.encode("utf-8")
            f.write(_struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(_struct.pack("<I", arr.ndim))
            f.write(_struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path):
    """Read a checkpoint. Returns (params float32, ModelConfig)."""
    with open(path, "rb") as f:
        head = f.read(12)
        if len(head) != 12:
            raise ValueError(f"{path}: truncated header")
        magic, version, blob_len = _struct.unpack("<4sII", head)
        if magic != CKPT_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        cfg = ModelConfig.from_dict(json.loads(f.read(blob_len).decode("utf-8")))
        params = {}
        while True:
            raw = f.read(4)
            if not raw:
                break
            (name_len,) = _struct.unpack("<I", raw)
            name = f.read(name_len).decode("utf-8")
            (rank,) = _struct.unpack("<I", f.read(4))
            shape = _struct.unpack(f"<{rank}I", f.read(4 * rank))
            count = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(f.read(4 * count), dtype="<f4")
            if data.size != count:
                raise ValueError(f"{path}: truncated section {name}")
            params[name] = data.reshape(shape).astype(np.float32)
    want = set(init_params(cfg, 0, np.float32))
    got = set(params)
    if want != got:
        missing = want - got
        extra = got - want
        raise ValueError(
            f"{path}: parameter sections do not match the config "
            f"(missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]})"
        )
    return params, cfg
