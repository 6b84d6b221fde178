"""Camera-controllable video world model on procedural desk-scale scenes.

The pieces, bottom up: pinhole geometry and pose math; time-aware warping of
rotary positional encodings so conditioning tokens address the location they
project to in each target frame; a dual-stream transformer whose clean/noisy
cross attention is block-sparse; frustum-IoU memory retrieval; point-splat
revisit curation for training data; rectified-flow training and sampling; and
cycle / memory-init evaluation protocols.
"""

from .attention import (
    BlockMask,
    RopeTables,
    block_sparse_attention,
    dense_masked_attention,
    expected_true_blocks,
)
from .config import RunConfig, load_config, save_config
from .curation import (
    ClipData,
    SceneSpec,
    default_intrinsics,
    generate_synthetic_dataset,
    load_clip,
    load_dataset,
    loop_trajectory,
    make_revisit_sample,
    make_scene,
    palindrome_trajectory,
    render_scene_frame,
    splat_render,
)
from .diffusion import (
    CodecConfig,
    ModelConfig,
    OracleSceneDepth,
    decode_latents,
    encode_clip,
    flow_loss_and_grads,
    forward_process,
    init_params,
    load_checkpoint,
    model_forward,
    rollout,
    sample_clip,
    save_checkpoint,
    train,
    velocity_target,
)
from .evaluation import (
    MetricReport,
    cycle_protocol,
    memory_init_protocol,
    model_generator,
    psnr,
    rot_err,
    scene_oracle_generator,
    ssim,
    trans_err,
)
from .geometry import (
    CameraPose,
    DepthMap,
    Intrinsics,
    PointCloud,
    Trajectory,
    compose,
    invert_pose,
    lift_depth,
    load_pose_file,
    normalize_relative,
    project_points,
    save_pose_file,
)
from .memory import (
    MemoryBank,
    RetrievalResult,
    frustum_iou,
    load_bank,
    retrieve_topM,
    save_bank,
)
from .pe_warp import (
    MultiLevelPEConfig,
    TimeAwarePE,
    WarpMaps,
    assemble_condition_set,
    compute_warp_maps,
    native_pe,
    warped_pe,
)

__version__ = "0.1.0"

__all__ = [
    "BlockMask", "RopeTables", "block_sparse_attention",
    "dense_masked_attention", "expected_true_blocks",
    "RunConfig", "load_config", "save_config",
    "ClipData", "SceneSpec", "default_intrinsics",
    "generate_synthetic_dataset", "load_clip", "load_dataset",
    "loop_trajectory", "make_revisit_sample", "make_scene",
    "palindrome_trajectory", "render_scene_frame", "splat_render",
    "CodecConfig", "ModelConfig", "OracleSceneDepth", "decode_latents",
    "encode_clip", "flow_loss_and_grads", "forward_process", "init_params",
    "load_checkpoint", "model_forward", "rollout", "sample_clip",
    "save_checkpoint", "train", "velocity_target",
    "MetricReport", "cycle_protocol", "memory_init_protocol",
    "model_generator", "psnr", "rot_err", "scene_oracle_generator", "ssim",
    "trans_err",
    "CameraPose", "DepthMap", "Intrinsics", "PointCloud", "Trajectory",
    "compose", "invert_pose", "lift_depth", "load_pose_file",
    "normalize_relative", "project_points", "save_pose_file",
    "MemoryBank", "RetrievalResult", "frustum_iou", "load_bank",
    "retrieve_topM", "save_bank",
    "MultiLevelPEConfig", "TimeAwarePE", "WarpMaps",
    "assemble_condition_set", "compute_warp_maps", "native_pe", "warped_pe",
]
