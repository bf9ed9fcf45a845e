"""vitfusion: hierarchical transformer lidar-camera fusion for 3D detection.

A numpy library with explicit forward/backward passes: oriented-box
geometry, a shared pre-LN transformer encoder, camera patch and lidar voxel
branches, token fusion, set-prediction heads with focal / Laplace-KL /
corner losses, synthetic paired scenes, KITTI-format IO, AP/APH metrics and
a small training harness.
"""

from .ablation import AblationReport, run_ablation
from .camera import ImageBranch, patchify, unpatchify
from .config import RunConfig
from .data import (
    AugmentConfig,
    SceneSample,
    SynthConfig,
    augment_scene,
    generate_scene,
    gt_boxes_2d,
    load_dataset,
    load_kitti,
    load_scene,
    make_dataset,
    points_in_box,
    save_scene,
)
from .detection import (
    DetectionHead,
    DetectionSet,
    GroundTruth,
    LossBreakdown,
    LossWeights,
    corner_loss,
    focal_loss,
    laplace_kl,
    match,
    total_loss,
)
from .encoder import ClassReadout, EncoderConfig, TokenEmbedder, TokenSequence, TransformerEncoder
from .evaluation import EvalReport, evaluate_model, predict_with_nms
from .fusion import FusionStage
from .geometry import (
    Box2D,
    Box3D,
    InvalidBoxError,
    box_from_corners,
    corners_of,
    iou_2d,
    iou_3d,
    iou_bev,
    nms,
    nms_indices,
    wrap_angle,
)
from .lidar import EmptySceneError, VoxelBranch, VoxelGrid, augment, sample_points, voxelize
from .model import CameraDetector, FusionDetector, LidarDetector, ModelOps, build_model
from .nn import Adam, Mode, Module, Param
from .render import render_scene
from .training import (
    TrainingDivergedError,
    TrainResult,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"
