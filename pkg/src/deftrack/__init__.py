"""Non-rigid surfel tracking with embedded-deformation graphs, plus a PBD
simulator that synthesizes deformed point-cloud pairs with ground-truth
correspondences."""

__version__ = "0.1.0"

from .association import (
    CorrespondenceSet,
    SparseMatchSet,
    bilinear_sample,
    densify_matches,
    load_matches,
    project,
    project_points,
    projective_associate,
)
from .costs import (
    CostWeights,
    WarpModel,
    arap_cost,
    corr_cost,
    icp_cost,
    quat_norm_cost,
    total_cost,
)
from .errors import (
    ConfigurationError,
    DeftrackError,
    DegenerateGeometryError,
    InvalidParameterError,
    MatchFileError,
    NumericsError,
    SimulationError,
    SolverError,
)
from .geometry import (
    CameraIntrinsics,
    DepthFrame,
    EDGraph,
    EDNode,
    Surfel,
    SurfelCloud,
    WarpParams,
    build_ed_graph,
    knn_weights,
    knn_weights_batch,
    normals_from_depth,
    quat_transform,
    skin_normal,
    skin_point,
    surfels_from_depth,
)
from .pairs import (
    DeformationMap,
    PairedIndexSet,
    SurfacePoint,
    export_pairs,
    project_to_mesh,
    synthesize_pairs,
    transport,
)
from .pbd import (
    Handle,
    PBDState,
    TriMesh,
    apply_handle,
    export_mesh,
    project_distance,
    project_shape_matching,
    project_volume,
    step,
)
from .solver import (
    OptimizationReport,
    SolverConfig,
    finite_diff_gradient,
    gradient,
    optimize,
)
