"""boxfield: differentiable volume rendering and optimization for
bounding-box-constrained object generation on voxel radiance fields."""

from .field import (
    AdamState,
    DensityBiasConfig,
    FieldGradient,
    VoxelField,
    apply_update,
    blend_object_bias,
    init_object_centric_bias,
    init_uni_sphere_bias,
    load_field,
    save_field,
)
from .geometry import (
    Aabb,
    CameraPose,
    CameraSamplerConfig,
    Ray,
    RayBatch,
    Vec3,
    aabb_from_layout,
    generate_camera_rays,
    layout_from_aabb,
    ray_box_intersect,
    sample_base_pose,
    sample_object_centric_pose,
    turntable_poses,
)
from .layout import (
    LayoutError,
    LlmConfig,
    LlmError,
    SceneLayout,
    SceneObject,
    parse_layout,
    request_layout,
    serialize_layout,
    validate_layout,
)
from .occupancy import OccupancyConfig, OccupancyGrid, gated_query, update_occupancy
from .optimize import (
    GuidanceError,
    LossReport,
    OptimizerConfig,
    SceneState,
    SyntheticDenoiserOracle,
    freeze_scene,
    load_scene_checkpoint,
    make_scene_state,
    outside_box_opacity,
    reconstruction_loss,
    run_generation,
    save_scene_checkpoint,
    training_step,
)
from .render import (
    RenderConfig,
    RenderedImage,
    SampleSet,
    composite,
    render_clipped,
    render_clipped_backward,
    render_full,
    render_inverse_clipped,
    sample_depths,
)

__version__ = "0.1.0"
