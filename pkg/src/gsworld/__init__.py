"""gsworld: a desk-scale toolkit for language-embedded Gaussian-splat scenes.

Capabilities: tile-based rasterization of color/language/depth channels,
gradient-based language-field fitting, a scene-wise feature autoencoder,
Gaussian-to-token projection with softmax fusion, task-aware token sampling,
sparse point-cloud condition maps, v-prediction diffusion math with a toy
denoiser, and bit-exact QA/trajectory dataset tooling.
"""

from .autoencoder import (
    AutoencoderModel,
    decode,
    encode,
    gradient_check,
    make_autoencoder,
    train_autoencoder,
)
from .conditions import (
    ColoredPointCloud,
    SparseConditionMap,
    build_spatial_condition,
    build_temporal_condition,
    project_points_zbuffer,
    transform_points,
    unproject_depth,
)
from .dataset import (
    PrefixSample,
    QaRecord,
    TrajectoryClip,
    build_trajectory_qa,
    emit_qa_record,
    filter_scenes_by_psnr,
    format_pose_text,
    normalize_clip_to_frame,
    parse_pose_text,
    parse_qa_record,
    prefix_lm_loss,
)
from .diffusion import (
    DualCondition,
    NoiseSchedule,
    ToyDenoiser,
    add_noise,
    assemble_condition_sequence,
    denoise,
    depth_to_pseudo_rgb,
    make_schedule,
    make_toy_denoiser,
    pseudo_rgb_to_depth,
    recover_clean,
    recover_noise,
    train_toy_denoiser,
    v_loss,
    v_target,
)
from .errors import (
    BadMagicError,
    FormatError,
    GsworldError,
    NumericError,
    TruncatedFileError,
    UnsupportedVersionError,
    ValidationError,
)
from .formats import (
    load_autoencoder,
    load_point_cloud,
    load_projector,
    load_scene,
    load_tokens,
    save_autoencoder,
    save_point_cloud,
    save_projector,
    save_scene,
    save_tokens,
)
from .geometry import Pose
from .render import (
    RenderOutput,
    Splat2D,
    fit_language_field,
    project_gaussian,
    psnr,
    render,
    render_weights,
)
from .sampling import (
    SampleResult,
    SamplingConfig,
    TextQueryEmbedding,
    cross_attention_scores,
    hybrid_sample,
    language_guided_sample,
    topk_sample,
    uniform_sample,
)
from .scene import (
    Aabb,
    CameraModel,
    GaussianPrimitive,
    GaussianScene,
    covariance_from_scale_rotation,
)
from .tokenizer import (
    FourierConfig,
    GaussianToken,
    ProjectorParams,
    fourier_embed,
    make_projector,
    projector_gradient_check,
    tokenize_gaussian,
    tokenize_scene,
    train_projector,
)

__version__ = "0.1.0"
