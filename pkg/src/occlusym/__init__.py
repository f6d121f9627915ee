"""occlusym: occlusion-aware 3D reconstruction at desk scale.

Occlusion simulators (random 2D masks and 3D-consistent mesh masks),
visibility-weighted attention, a rectified-flow denoiser over sparse voxel
latents, and point-cloud geometry metrics.
"""

from .attention import (
    AttentionParams,
    BlockParams,
    DegenerateConditioningError,
    block_forward,
    mask_weighted_cross_attention,
    occlusion_aware_attention,
)
from .flow import (
    FlowModel,
    FlowModelConfig,
    SampleConfig,
    TrainConfig,
    ViewCondition,
    add_noise,
    flow_loss,
    reconstruct,
    sample,
    sort_views_by_visibility,
    train,
)
from .masks2d import (
    OcclusionParams,
    composite_levels,
    gen_random_occlusion,
    mask_ratio,
    visible_mask,
)
from .mesh_occlusion import (
    Camera,
    TriangleSelection,
    TriMesh,
    build_adjacency,
    load_obj,
    make_cube,
    make_icosphere,
    normalize_unit_cube,
    orbit_cameras,
    random_walk_select,
    render_masks,
)
from .metrics import (
    chamfer,
    coverage,
    farthest_point_sampling,
    mmd,
    voxels_to_points,
)
from .patch_tokens import (
    TokenGridSpec,
    embed_patches,
    patch_fraction,
    stack_occlusion_tokens,
    token_count,
)
from .slat import (
    active_voxels,
    decode_stage1,
    encode_stage1,
    gen_toy_shape,
    voxel_iou,
)

__version__ = "0.1.0"
