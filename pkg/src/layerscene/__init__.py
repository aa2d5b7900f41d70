"""Layered scene diffusion: spatially disentangled scenes optimized by
jointly denoising multiple randomly laid-out renderings per step."""

from ._kernels import BACKEND as KERNEL_BACKEND
from .denoiser import (
    NULL_TOKEN,
    ConditionToken,
    GaussianDenoiser,
    PointMassDenoiser,
    cfg,
    lcd_compose,
    predict_noise,
)
from .metrics import MetricsReport, consistency, mask_iou, ssim, visual_consistency
from .sampler import (
    AnchorTrajectory,
    SceneCheckpoint,
    build_anchor,
    optimize_scene,
    render_final,
    restyle_layer,
    run_pipeline,
    scene_diffusion_step,
    solve_feature_update,
)
from .scene import (
    Layer,
    LayerSpec,
    Layout,
    Mask,
    Scene,
    View,
    apply_edit,
    blob_mask,
    box_mask,
    compute_alpha,
    full_mask,
    init_scene,
    move,
    render,
    sample_layouts,
)
from .schedule import (
    NoiseSchedule,
    build_schedule,
    ddim_step,
    ddpm_step,
    forward_noise,
)

__version__ = "0.1.0"
