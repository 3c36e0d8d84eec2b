"""Complete-to-partial registration toolkit for middle-ear point clouds.

Pipeline: synthetic data generation, coarse rigid alignment, hierarchical
nonrigid refinement, classical baselines, and benchmark evaluation.
"""

from .baselines import cpd_nonrigid, icp, nicp
from .coarse import CoarseConfig, coarse_register, ransac_rigid
from .evaluation import (
    RunReport,
    interpolate_field,
    landmark_error,
    mde,
    run_benchmark,
    scatter_svg,
    trend_analysis,
)
from .geom import (
    CorrespondenceSet,
    DisplacementField,
    LabeledCloud,
    RigidTransform,
    apply_rigid,
    chamfer_distance,
    compose,
    estimate_rigid_from_correspondences,
    nearest_neighbor,
)
from .ndp import (
    C2PResult,
    DeformationPyramid,
    PyramidConfig,
    c2p_register,
    fit_pyramid,
    ndp_register,
)
from .synthgen import (
    GeneratorParams,
    NonRigidParams,
    RigidParams,
    SamplingParams,
    SyntheticSample,
    TemplateConfig,
    build_template,
    generate_dataset,
    load_manifest,
    load_sample,
    make_sample,
)

__version__ = "0.1.0"

__all__ = [
    "C2PResult",
    "CoarseConfig",
    "CorrespondenceSet",
    "DeformationPyramid",
    "DisplacementField",
    "GeneratorParams",
    "LabeledCloud",
    "NonRigidParams",
    "PyramidConfig",
    "RigidParams",
    "RigidTransform",
    "RunReport",
    "SamplingParams",
    "SyntheticSample",
    "TemplateConfig",
    "apply_rigid",
    "build_template",
    "c2p_register",
    "chamfer_distance",
    "coarse_register",
    "compose",
    "cpd_nonrigid",
    "estimate_rigid_from_correspondences",
    "fit_pyramid",
    "generate_dataset",
    "icp",
    "interpolate_field",
    "landmark_error",
    "load_manifest",
    "load_sample",
    "make_sample",
    "mde",
    "ndp_register",
    "nearest_neighbor",
    "nicp",
    "ransac_rigid",
    "run_benchmark",
    "scatter_svg",
    "trend_analysis",
    "__version__",
]
