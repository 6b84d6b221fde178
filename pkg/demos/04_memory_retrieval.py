"""Which stored frames does a new trajectory pull out of the bank?

Retrieval scores each banked frame by its best view-frustum IoU against the
target views, keeps the top M, and routes each kept memory to the target
frame it overlaps most. Ties on score break toward the newer memory, so a
re-observation supersedes a stale one.
"""

import numpy as np

from warpworld import (
    ClipData,
    MemoryBank,
    Trajectory,
    default_intrinsics,
    frustum_iou,
    loop_trajectory,
    make_scene,
    render_scene_frame,
    retrieve_topM,
)


def main():
    spec = make_scene(seed=21)
    k = default_intrinsics(32)
    bank_traj = loop_trajectory(spec, 0, 8)
    rendered = [render_scene_frame(spec, p, k) for p in bank_traj]
    clip = ClipData(
        frames=np.stack([f for f, _ in rendered]),
        depths=[d for _, d in rendered],
        poses=bank_traj,
        intrinsics=k,
    )
    bank = MemoryBank.from_clip(clip)
    print(f"bank: {len(bank)} frames walked around loop 0 of scene seed 21")

    # target: the first few views of the scene's second loop
    targets = Trajectory(list(loop_trajectory(spec, 1, 3)))
    sel = retrieve_topM(bank, targets, m=4, k=k, samples=4096, seed=0)
    print(f"targets: 3 views on loop 1; asking for top 4 by frustum overlap\n")

    iou = np.array([
        [frustum_iou(bank.poses[b], t, k, samples=4096, seed=0)
         for t in targets]
        for b in range(len(bank))
    ])
    print("full IoU table (rows = bank frames, cols = target frames):")
    for b in range(len(bank)):
        row = "  ".join(f"{iou[b, t]:5.3f}" for t in range(3))
        mark = " <- kept" if b in sel.indices.tolist() else ""
        print(f"  bank {b} (time {bank.times[b]:.0f}): {row}{mark}")

    print("\nselected, best first:")
    for r, (b, a) in enumerate(zip(sel.indices, sel.assignments)):
        print(f"  rank {r}: bank frame {b} -> routed to target frame {a - 1} "
              f"(score {sel.iou[r].max():.3f})")

    # identical poses score identically; the later capture must win
    top = int(sel.indices[0])
    dup = MemoryBank.from_clip(clip)
    dup.append(clip.frames[top], clip.depths[top], clip.poses[top], time=99)
    sel2 = retrieve_topM(dup, targets, m=1, k=k, samples=4096, seed=0)
    got = int(sel2.indices[0])
    print(f"\nbank frame {top} re-observed at time 99 (same pose, same score): "
          f"retrieval picks index {got} (time {dup.times[got]}), the fresher copy")


if __name__ == "__main__":
    main()
