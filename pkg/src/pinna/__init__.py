"""Ear reconstruction, scan-to-mesh evaluation, stitching, and HRTF simulation."""

__version__ = "0.1.0"

from .meshes import (  # noqa: F401
    MeshError,
    MeshQualityReport,
    PointCloud,
    TriMesh,
    chamfer_distance,
    downsample_random,
    knn,
    laplacian_smooth,
    point_to_mesh_distance,
    reflect_sagittal,
    scan_to_mesh,
    smooth_loss,
    uniform_laplacian,
)
from .meshio import load_mesh, load_pointcloud, save_mesh, save_pointcloud  # noqa: F401
from .morphable import (  # noqa: F401
    EarShapeModel,
    LatentCode,
    TextureModel,
    decode_shape,
    decode_texture,
    load_shape_model,
    load_texture_model,
    sample_latents,
    save_shape_model,
    save_texture_model,
    transfer_uv,
)
from .render import CameraParams, RenderOutput, landmark_mask, project_orthographic, rasterize  # noqa: F401
from .losses import (  # noqa: F401
    LandmarkSet2D,
    LossComponents,
    LossWeights,
    camera_loss,
    contour_loss,
    landmark_loss,
    load_landmarks,
    photometric_loss,
    range_loss,
    reg_loss,
    save_landmarks,
    similarity_loss,
    total_loss,
)
from .optim import AdamState, adam_init, adam_step  # noqa: F401
from .fitting import FitConfig, FitResult, fit_batch, fit_image  # noqa: F401
from .registration import (  # noqa: F401
    RegistrationConfig,
    RegistrationResult,
    evaluate_dataset,
    register,
)
from .stitching import (  # noqa: F401
    BoundaryLoop,
    StitchConfig,
    extract_boundary_loops,
    fit_projection_plane,
    stitch,
    triangulate_annulus,
)
from .acoustics import (  # noqa: F401
    BemProblem,
    HrtfResult,
    Monopole,
    assemble_bem,
    export_polar,
    rigid_sphere_reference,
    simulate_hrtf,
    solve_exterior,
    spl_error,
)
from .transforms import SimilarityTransform  # noqa: F401
