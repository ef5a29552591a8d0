"""Marker-free extrinsic and temporal calibration of camera rigs from 3D
human pose tracks."""
from .config import PipelineConfig, load_config, save_config
from .estimators import MultiCameraCalibrator, PairwiseRegistration
from .exceptions import CalibrationError
from .geometry import CameraIntrinsics, CameraPose
from .multiview import CameraGraph, GlobalAssociation, merge_associations, pose_graph_optimize
from .pairwise import PairwiseEdge, register_pair
from .pipeline import PipelineResult, run_pipeline
from .pose_encoding import H36M_17, CameraView, PersonTrack, Skeleton
from .registration import RegistrationOptions, em_register, offset_search, ransac_register
from .synth import SceneSpec, generate

__version__ = "0.1.0"

__all__ = [
    "CalibrationError", "CameraGraph", "CameraIntrinsics", "CameraPose", "CameraView",
    "GlobalAssociation", "H36M_17", "MultiCameraCalibrator", "PairwiseEdge",
    "PairwiseRegistration", "PersonTrack", "PipelineConfig", "PipelineResult",
    "RegistrationOptions", "SceneSpec", "Skeleton", "em_register", "generate",
    "load_config", "merge_associations", "offset_search", "pose_graph_optimize",
    "ransac_register", "register_pair", "run_pipeline", "save_config",
]
