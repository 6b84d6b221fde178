"""Command-line orchestration: curate, train, generate, eval, inspect, bench.

Every command is reproducible from (config, seed): all randomness flows from
the root seed through named sub-streams, and outputs land under --out. Errors
exit nonzero with a one-line message on stderr naming the offending path or
key; unknown flags are argparse errors.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import rng as _rng
from .attention import (
    BlockMask,
    block_sparse_attention,
    dense_masked_attention,
    expected_true_blocks,
)
from .config import RunConfig, load_config, parse_override, save_config, set_key
from .curation import (
    generate_synthetic_dataset,
    load_clip,
    load_dataset,
    make_scene,
    palindrome_trajectory,
    render_scene_frame,
    save_png,
)
from .diffusion import (
    OracleSceneDepth,
    codec_projection,
    decode_latents,
    encode_clip,
    load_checkpoint,
    rollout,
    sample_clip,
    train,
)
from .evaluation import (
    cycle_protocol,
    memory_init_protocol,
    model_generator,
    scene_oracle_generator,
)
from .geometry import Trajectory, load_pose_file, save_pose_file
from .memory import MemoryBank, retrieve_topM


# ---------------------------------------------------------------------------
# dataset plumbing


def _dataset_root(cfg: RunConfig) -> Path:
    root = Path(cfg.dataset)
    if not root.is_dir():
        raise ValueError(f"dataset root not found: {root}")
    return root


def _scene_dir(cfg: RunConfig, scene: int) -> Path:
    d = _dataset_root(cfg) / f"scene{scene:03d}"
    if not d.is_dir():
        raise ValueError(f"scene directory not found: {d}")
    return d


def _scene_meta(scene_dir: Path) -> dict:
    meta_path = scene_dir / "scene.json"
    if not meta_path.is_file():
        raise ValueError(f"scene metadata not found: {meta_path}")
    with open(meta_path) as f:
        return json.load(f)


def _load_scene(cfg: RunConfig, scene: int, clip: int):
    """Returns (spec, meta, clip data) for one dataset clip."""
    scene_dir = _scene_dir(cfg, scene)
    meta = _scene_meta(scene_dir)
    clip_dir = scene_dir / f"clip{clip:03d}"
    if not clip_dir.is_dir():
        raise ValueError(f"clip directory not found: {clip_dir}")
    spec = make_scene(meta["seed"], n_clips=meta["n_clips"])
    data = load_clip(clip_dir, scene_class=meta.get("class_id", 0))
    return spec, meta, data


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _checkpoint(cfg: RunConfig, explicit):
    path = Path(explicit) if explicit else Path(cfg.out) / "model.uc"
    if not path.is_file():
        raise ValueError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


# ---------------------------------------------------------------------------
# commands


def cmd_curate(cfg: RunConfig, args) -> int:
    root = Path(cfg.dataset)
    if root.exists() and not root.is_dir():
        raise ValueError(f"dataset root is not a directory: {root}")
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ValueError(f"cannot create dataset root {root}: {e}") from e
    cu = cfg.curation
    t0 = time.time()
    counts = generate_synthetic_dataset(
        root, cfg.seed,
        n_scenes=cu.n_scenes, clips_per_scene=cu.clips_per_scene,
        frames_per_clip=cu.frames_per_clip, image_size=cu.image_size,
        curation_per_clip=cu.curation_per_clip,
    )
    save_config(cfg, root / "curate_config.json")
    for key in ("scenes", "clips", "frames", "curation_samples"):
        print(f"{key:>16}: {counts[key]}")
    print(f"{'wrote':>16}: {root}  ({time.time() - t0:.1f}s)")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    scenes = load_dataset(_dataset_root(cfg))
    mcfg = cfg.to_model_config()
    k0 = scenes[0].clips[0].intrinsics
    if (k0.width, k0.height) != (mcfg.image_size, mcfg.image_size):
        raise ValueError(
            f"dataset images are {k0.width}x{k0.height} but the model expects "
            f"{mcfg.image_size}x{mcfg.image_size}"
        )
    out = _out_dir(cfg)
    save_config(cfg, out / "train_config.json")
    tr = cfg.train
    t0 = time.time()

    def log(step, loss):
        if tr.log_every and (step % tr.log_every == 0 or step == tr.steps - 1):
            print(f"step {step:>6}  loss {loss:.4f}  ({time.time() - t0:.0f}s)",
                  flush=True)

    _, losses = train(
        scenes, mcfg, out_dir=out,
        steps=tr.steps, batch_size=tr.batch_size, lr=tr.lr, seed=cfg.seed,
        warmup=tr.warmup, weight_decay=tr.weight_decay, m_probs=tr.m_probs,
        cfg_drop=tr.cfg_drop, ckpt_every=tr.ckpt_every, log_cb=log,
    )
    w = min(100, max(1, len(losses) // 10))
    first, last = float(np.mean(losses[:w])), float(np.mean(losses[-w:]))
    print(f"done: {len(losses)} steps in {time.time() - t0:.0f}s")
    print(f"loss mean over first/last {w}: {first:.4f} / {last:.4f} "
          f"(ratio {last / first:.3f})")
    print(f"checkpoint: {out / 'model.uc'}")
    return 0


def _oracle_velocity_generate(cfg, spec, data, traj, out: Path) -> int:
    """Debug path: one Euler step with the true velocity x1 - x0.

    The velocity field of the straight-line flow is constant along each
    path, so a single step from the sampling noise must land exactly on the
    clean latents; any growth in the reported error means the integrator or
    codec is broken.
    """
    mcfg = cfg.to_model_config()
    if len(traj) != mcfg.clip_len:
        raise ValueError(
            f"oracle-velocity debug generates a single clip: trajectory has "
            f"{len(traj)} poses, expected {mcfg.clip_len}"
        )
    gt = np.stack([render_scene_frame(spec, p, data.intrinsics)[0] for p in traj])
    gt = gt.astype(np.float32)
    proj = codec_projection(mcfg.codec())
    lat = encode_clip(gt, mcfg.codec(), proj)
    x1 = lat.reshape(-1, lat.shape[-1]).astype(np.float32)
    g = _rng.stream(cfg.seed, "sample-noise")
    x0 = g.standard_normal(x1.shape).astype(np.float32)
    x = x0 + 1.0 * (x1 - x0)  # one Euler step, dt = 1
    frames = decode_latents(
        x.reshape(lat.shape), mcfg.clip_len, mcfg.codec(), proj
    )
    frames = np.clip(frames, 0.0, 1.0).astype(np.float32)
    err = float(np.abs(frames - gt).max())
    _write_clip(out, frames, data.intrinsics, traj)
    with open(out / "info.json", "w") as f:
        json.dump({"mode": "oracle-velocity", "steps": 1,
                   "max_abs_error": err, "n_frames": len(frames)}, f, indent=1)
    print(f"oracle-velocity one-step reconstruction: max abs error {err:.3e}")
    print(f"wrote {len(frames)} frames to {out}")
    return 0


def _write_clip(out: Path, frames, k, traj) -> None:
    fdir = out / "frames"
    fdir.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        save_png(fdir / f"{i:05d}.png", frame)
    save_pose_file(out / "poses.json", k, traj)


def cmd_generate(cfg: RunConfig, args) -> int:
    spec, meta, data = _load_scene(cfg, args.scene, args.clip)
    if args.oracle_velocity:
        params, mcfg = None, cfg.to_model_config()
    else:
        params, mcfg = _checkpoint(cfg, args.ckpt)
    t = mcfg.clip_len

    if args.traj:
        k_t, traj = load_pose_file(args.traj)
        if (k_t.width, k_t.height) != (data.intrinsics.width, data.intrinsics.height):
            raise ValueError(
                f"trajectory intrinsics {k_t.width}x{k_t.height} disagree "
                f"with dataset {data.intrinsics.width}x{data.intrinsics.height}"
            )
    else:
        if args.frame + t > len(data.poses):
            raise ValueError(
                f"clip has {len(data.poses)} poses; cannot take {t} from "
                f"frame {args.frame}"
            )
        traj = Trajectory([data.poses[args.frame + i] for i in range(t)])

    out = _out_dir(cfg)
    if args.oracle_velocity:
        return _oracle_velocity_generate(cfg, spec, data, traj, out)

    span = len(traj) - 1
    if span < 1 or span % (t - 1):
        raise ValueError(
            f"trajectory has {len(traj)} poses; need n*(clip_len-1)+1 "
            f"with clip_len {t}"
        )
    n_clips = span // (t - 1)
    ref_frame = data.frames[args.frame]
    ref_depth = data.depths[args.frame]
    ref_pose = data.poses[args.frame]
    provider = OracleSceneDepth(spec, data.intrinsics)
    bank = None
    if args.use_history:
        if args.frame < 1:
            raise ValueError("--use-history needs a reference frame index >= 1")
        bank = MemoryBank()
        for i in range(args.frame):
            bank.append(data.frames[i], data.depths[i], data.poses[i], i)
    sp = cfg.sampler
    class_id = meta.get("class_id", 0)
    t0 = time.time()
    if n_clips == 1:
        frames, info = sample_clip(
            params, mcfg, ref_frame, ref_depth, ref_pose, traj, data.intrinsics,
            bank=bank, depth_provider=provider, class_id=class_id,
            steps=sp.steps, cfg_scale=sp.cfg_scale,
            n_memories=sp.n_memories, seed=cfg.seed,
            iou_samples=sp.iou_samples,
        )
        retrieved = info["retrieval"]
    else:
        frames = rollout(
            params, mcfg, ref_frame, ref_depth, ref_pose, traj, data.intrinsics,
            n_clips, bank=bank, depth_provider=provider, class_id=class_id,
            steps=sp.steps, cfg_scale=sp.cfg_scale, n_memories=sp.n_memories,
            seed=cfg.seed,
        )
        retrieved = None
    _write_clip(out, frames, data.intrinsics, traj)
    doc = {
        "mode": "model", "scene": args.scene, "clip": args.clip,
        "frame": args.frame, "n_frames": int(len(frames)),
        "n_clips": n_clips, "steps": sp.steps, "cfg_scale": sp.cfg_scale,
        "n_memories": sp.n_memories, "class_id": class_id, "seed": cfg.seed,
        "wall_s": round(time.time() - t0, 2),
    }
    if retrieved is not None:
        doc["retrieved_times"] = [int(x) for x in retrieved.times]
    with open(out / "info.json", "w") as f:
        json.dump(doc, f, indent=1)
    print(f"wrote {len(frames)} frames to {out}  ({doc['wall_s']}s)")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    ev = cfg.eval
    spec, meta, data = _load_scene(cfg, ev.scene, ev.clip)
    if ev.generator == "oracle":
        generate = scene_oracle_generator(spec)
    else:
        params, mcfg = _checkpoint(cfg, args.ckpt)
        sp = cfg.sampler
        generate = model_generator(
            params, mcfg, OracleSceneDepth(spec, data.intrinsics),
            n_memories=sp.n_memories, steps=sp.steps, cfg_scale=sp.cfg_scale,
            class_id=meta.get("class_id", 0), seed=cfg.seed,
        )
    if ev.protocol == "cycle":
        traj = palindrome_trajectory(spec, ev.clip, ev.cycle_length)
        ref_frame, ref_depth = render_scene_frame(spec, traj[0], data.intrinsics)
        report = cycle_protocol(
            generate, ref_frame.astype(np.float32), ref_depth, traj, data.intrinsics
        )
    else:
        report = memory_init_protocol(generate, data, history_frac=ev.history_frac)
    out = _out_dir(cfg)
    report.save(out / "report")
    print(report.text_table())
    print(f"wrote {out / 'report'}.{{json,txt,csv}}")
    return 0


def cmd_inspect_retrieval(cfg: RunConfig, args) -> int:
    spec, meta, data = _load_scene(cfg, args.scene, args.clip)
    bank = MemoryBank.from_clip(data)
    if args.traj:
        _, targets = load_pose_file(args.traj)
    else:
        target_clip = (args.clip + 1) % meta["n_clips"]
        _, _, tdata = _load_scene(cfg, args.scene, target_clip)
        t = cfg.to_model_config().clip_len
        targets = Trajectory(list(tdata.poses)[:t])
    rt = cfg.retrieval
    res = retrieve_topM(
        bank, targets, rt.top_m, data.intrinsics,
        near=rt.near, far=rt.far, samples=rt.samples, seed=cfg.seed,
    )
    print(f"bank: scene {args.scene} clip {args.clip}, {len(bank)} frames; "
          f"{len(targets)} target poses; top {rt.top_m} by frustum IoU")
    print(f"{'rank':>4} {'bank frame':>10} {'time':>6} {'best iou':>9} {'-> frame':>8}")
    best = res.iou.max(axis=1)
    for r in range(len(res.indices)):
        print(f"{r:>4} {res.indices[r]:>10} {res.times[r]:>6} "
              f"{best[r]:>9.4f} {res.assignments[r]:>8}")
    return 0


def cmd_bench_attention(cfg: RunConfig, args) -> int:
    n, m, grid = args.n_frames, args.n_memories, args.grid
    heads, hd = args.heads, args.head_dim
    p = grid * grid
    g = _rng.stream(cfg.seed, "bench-attention")
    assignments = list(range(1, n + 1)) + [
        int(x) for x in g.integers(2, n + 1, size=m)
    ]
    mask = BlockMask(n_frames=n, assignments=assignments, tokens_per_frame=p)
    t = mask.n_tokens
    q, k, v = (g.standard_normal((heads, t, hd)).astype(np.float32) for _ in range(3))
    token_mask = mask.to_token_mask()

    def best_of(fn, reps):
        fn()  # warm caches before timing
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        return min(times)

    dense_s = best_of(lambda: dense_masked_attention(q, k, v, token_mask), args.reps)
    sparse_s = best_of(lambda: block_sparse_attention(q, k, v, mask), args.reps)
    total_blocks = (n + mask.n_entries) ** 2
    print(f"config: N={n} frames, M={m} memories, {grid}x{grid} tokens/frame, "
          f"{heads} heads, head dim {hd} -> {t} tokens")
    print(f"true blocks: {mask.true_block_count()} of {total_blocks} "
          f"(closed form {expected_true_blocks(n, m)})")
    print(f"dense masked attention: {dense_s * 1e3:9.1f} ms")
    print(f"block-sparse attention: {sparse_s * 1e3:9.1f} ms")
    print(f"speedup: {dense_s / sparse_s:.2f}x")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run config")
    common.add_argument("--seed", type=int, metavar="U64",
                        help="root seed (overrides config)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (dotted path, repeatable)")
    common.add_argument("--out", metavar="DIR",
                        help="output directory (overrides config)")

    parser = argparse.ArgumentParser(
        prog="warpworld",
        description="Camera-controlled world model: data, training, "
                    "generation, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    pc = sub.add_parser("curate", parents=[common],
                        help="render the synthetic dataset to disk")
    pc.set_defaults(func=cmd_curate)

    pt = sub.add_parser("train", parents=[common],
                        help="train the velocity model on a curated dataset")
    pt.set_defaults(func=cmd_train)

    pg = sub.add_parser("generate", parents=[common],
                        help="sample a clip along a trajectory")
    pg.add_argument("--scene", type=int, default=0, help="dataset scene index")
    pg.add_argument("--clip", type=int, default=0, help="dataset clip index")
    pg.add_argument("--frame", type=int, default=0,
                    help="reference frame index within the clip")
    pg.add_argument("--traj", metavar="PATH",
                    help="pose file to follow (default: the clip's own poses)")
    pg.add_argument("--ckpt", metavar="PATH",
                    help="checkpoint (default: <out>/model.uc)")
    pg.add_argument("--use-history", action="store_true",
                    help="seed the memory bank with frames before --frame")
    pg.add_argument("--oracle-velocity", action="store_true",
                    help="debug: one Euler step with the true velocity, "
                         "no model involved")
    pg.set_defaults(func=cmd_generate)

    pe = sub.add_parser("eval", parents=[common],
                        help="run an evaluation protocol, write report files")
    pe.add_argument("--ckpt", metavar="PATH",
                    help="checkpoint for the model generator")
    pe.set_defaults(func=cmd_eval)

    pi = sub.add_parser("inspect-retrieval", parents=[common],
                        help="print the frustum-IoU retrieval table for a clip")
    pi.add_argument("--scene", type=int, default=0, help="bank scene index")
    pi.add_argument("--clip", type=int, default=0, help="bank clip index")
    pi.add_argument("--traj", metavar="PATH",
                    help="target pose file (default: the scene's next clip)")
    pi.set_defaults(func=cmd_inspect_retrieval)

    pb = sub.add_parser("bench-attention", parents=[common],
                        help="time dense vs block-sparse attention")
    pb.add_argument("--n-frames", type=int, default=4)
    pb.add_argument("--n-memories", type=int, default=20)
    pb.add_argument("--grid", type=int, default=8,
                    help="token grid side per frame")
    pb.add_argument("--heads", type=int, default=8)
    pb.add_argument("--head-dim", type=int, default=64)
    pb.add_argument("--reps", type=int, default=3)
    pb.set_defaults(func=cmd_bench_attention)

    return parser


def _build_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    for item in args.set or []:
        key, value = parse_override(item)
        set_key(cfg, key, value)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 2
    try:
        cfg = _build_config(args)
        return args.func(cfg, args)
    except (ValueError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
