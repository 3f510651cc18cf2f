"""Differentiable compositing of transformed bitmap primitives on CPU.

A scene of a few hundred rotated, scaled, semi-transparent bitmap
stamps is rendered with Porter-Duff over compositing, compared against
a target image, and improved by analytic gradients through the whole
pipeline. Rendering and backward run tile-parallel through compiled
kernels; a naive sequential renderer ships alongside as the reference
oracle.
"""

from numba import get_num_threads, set_num_threads

from .config import FitConfig, load_config, parse_config
from .errors import (
    BadChannelRange,
    BadTemplateRef,
    CorruptScene,
    DecodeError,
    DegenerateBBox,
    InfeasibleDensity,
    InvalidScale,
    LayoutMismatch,
    LengthMismatch,
    MissingAlphaTarget,
    NonPermutationZ,
    PrimfitError,
    ShapeMismatch,
    StaleSavedState,
    UnsupportedFormat,
    VersionMismatch,
)
from .dyn import (
    DiffMask,
    StuckPolicy,
    diff_mask,
    freeze_flags,
    optimize_video,
    remove_stuck,
)
from .estimator import (
    PrimitiveFitter,
    VideoPrimitiveFitter,
    check_frames,
    check_image,
)
from .exportio import (
    LayerManifest,
    LayerRecord,
    compose_layers,
    export_layers,
    load_image,
    load_scene,
    read_manifest,
    render_layer,
    save_image,
    save_scene,
    scale_scene,
)
from .fit import (
    HistoryEntry,
    LossSpec,
    OptimState,
    adam_step,
    loss_grayscale_l1,
    loss_mse,
    loss_spatial,
    lr_schedule,
    optimize,
    psnr,
    reinit_low_opacity,
    run_loop,
)
from .grad import (
    GradcheckReport,
    Gradients,
    backward,
    backward_reference,
    bilinear_grad,
    finite_diff_grad,
    reduce_partials,
    run_gradcheck,
)
from .prep import (
    default_templates,
    gaussian_blur_template,
    local_variance_map,
    prepare_templates,
    radial_falloff,
    random_init,
    structure_aware_init,
)
from .raster import (
    RenderOutput,
    SavedForward,
    TileBins,
    bbox_half_side,
    bin_tiles,
    blend_color,
    canvas_to_prim,
    noisy_background,
    prim_to_texel,
    primitive_alpha,
    render_forward,
    render_naive,
    sample_bilinear,
    warmup_kernels,
)
from .scene import (
    ParamLayout,
    PrimitiveParams,
    PrimitiveTemplate,
    Scene,
    pack_params,
    scene_fingerprint,
    unpack_params,
    validate_scene,
)

__version__ = "0.1.0"
