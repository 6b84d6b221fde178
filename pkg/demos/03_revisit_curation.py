"""Building a revisit training pair out of a plain fly-through clip.

Takes frame j of a rendered clip, perturbs its camera, and re-renders the
clip's geometry by splatting frame j's lifted points into the new view. The
splat image plus its coverage mask is the "memory" side of a training pair:
the model sees what an old observation can still explain and must fill the
rest. With a zero perturbation, splatting is exact, which pins down the
whole lift/project/z-buffer chain.
"""

import os
import tempfile

import numpy as np

from warpworld import (
    CameraPose,
    ClipData,
    default_intrinsics,
    loop_trajectory,
    make_revisit_sample,
    make_scene,
    render_scene_frame,
)
from warpworld.curation import save_png


def main():
    spec = make_scene(seed=3)
    k = default_intrinsics(64)
    traj = loop_trajectory(spec, 0, 9)
    rendered = [render_scene_frame(spec, p, k) for p in traj]
    clip = ClipData(
        frames=np.stack([f for f, _ in rendered]),
        depths=[d for _, d in rendered],
        poses=traj,
        intrinsics=k,
    )
    j = 2

    ident = make_revisit_sample(clip, j, CameraPose.identity(), 0)
    exact = np.array_equal(ident.image, clip.frames[j]) and ident.mask.all()
    print(f"zero-offset revisit of frame {j}: exact={exact} "
          f"(splat must reproduce the source frame pixel for pixel)")

    rng = np.random.default_rng(7)
    print("\ncoverage vs camera shake (same source frame):")
    print("   |shift|   coverage")
    for scale in (0.0, 0.05, 0.15, 0.4, 1.0):
        t = rng.standard_normal(3) * scale
        s = make_revisit_sample(clip, j, CameraPose(np.eye(3), t), 0)
        print(f"    {np.linalg.norm(t):6.3f}    {s.mask.mean():6.1%}")

    out = tempfile.mkdtemp(prefix="revisit_")
    shifted = make_revisit_sample(
        clip, j, CameraPose(np.eye(3), np.array([0.3, 0.0, 0.0])), 0
    )
    save_png(os.path.join(out, "source.png"), clip.frames[j])
    save_png(os.path.join(out, "revisit.png"), shifted.image)
    save_png(
        os.path.join(out, "mask.png"),
        np.repeat(shifted.mask[:, :, None].astype(np.float32), 3, axis=2),
    )
    print(f"\nwrote source/revisit/mask PNGs to {out}")
    print(f"0.3 lateral shift keeps {shifted.mask.mean():.1%} of pixels; the "
          "hole is the geometry the old view never saw")


if __name__ == "__main__":
    main()
