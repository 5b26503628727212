"""Correspondence-based 6DoF pose estimation of novel objects.

Templates are rendered from a CAD mesh, matched to a query view through
patch-class plus offset correspondences, solved with RANSAC-EPnP and refined
by dense render-and-compare flow. Learned predictors are replaced by oracle
mocks so the full pipeline runs, and can be verified, on synthetic scenes.
"""

from .correspondence import (
    MatchSet, decode_matches, gt_class_and_offset, gt_correspondences, matches_to_2d3d,
    select_template, similarity_score, top_templates,
)
from .estimator import CorrespondencePoseEstimator
from .exceptions import (
    CorrPoseError, DegenerateConfigurationError, EmptyVisibilityError, InsufficientSupportError,
    NoConsensusError, NonFiniteResidualError, OutOfViewError, PointBehindCameraError,
    SingularSystemError, ZeroDepthError,
)
from .flow import FlowField, flow_probability, fuse_confidence, rgbd_pose
from .geometry import Intrinsics, Pose, backproject, kabsch, pose_error, project
from .losses import (
    LossBreakdown, certainty_bce, coarse_loss, flow_nll, pose_loss, refiner_loss, selection_label,
)
from .meshes import Mesh, load_mesh, make_cube, make_icosphere, make_l_bracket
from .metrics import PoseError, average_recall, mspd, mssd, vsd
from .mocks import NoiseModel, Scene, make_scene, mock_coarse, mock_refiner, mock_selector
from .pnp import RefineProblem, epnp, ransac_pnp, refine_pose, refine_pose_grad
from .robust import RansacConfig, ransac
from .templates import Template, TemplateSet, build_templates, icosphere_viewpoints, rasterize

__version__ = "0.1.0"
