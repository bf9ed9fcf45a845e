"""Run configuration: one serializable record that pins every knob.

Reported hyperparameters (learning rate 1e-4, dropout 0.3, patch size 32,
branch widths 768 / fused width 1024, K=6 feature-encoding layers, token
caps of 1024, NMS threshold 0.3 with at most 256 proposals, the KITTI point
range and 0.16 m voxels, and the published MLP width ladders) are the
defaults; everything is overridable and round-trips through JSON with value
equality.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .encoder import EncoderConfig
from .nn import ConfigError


@dataclass
class RunConfig:
    # data / scene geometry
    classes: list = field(default_factory=lambda: ["Car", "Pedestrian"])
    point_range: list = field(default_factory=lambda: [[2.0, 46.8], [-30.08, 30.08], [-3.0, 1.0]])
    voxel_size: list = field(default_factory=lambda: [0.16, 0.16, 0.16])
    samples_per_voxel: int = 64            # T; cells above this are subsampled
    max_voxel_tokens: int = 1024
    image_hw: list = field(default_factory=lambda: [224, 224])
    patch_size: int = 32

    # encoder dims
    d_camera: int = 768
    d_lidar: int = 768
    d_fusion: int = 1024
    depth_camera: int = 4
    depth_lidar: int = 4
    depth_fusion: int = 4
    heads: int = 8
    mlp_hidden_camera: int = 1536
    mlp_hidden_lidar: int = 1536
    mlp_hidden_fusion: int = 2048

    # branch feature MLPs
    camera_mlp_widths: list = field(default_factory=lambda: [256, 256, 512])
    lidar_point_mlp_widths: list = field(default_factory=lambda: [256, 512, 512])
    vfe_width: int = 128
    vfe_layers: int = 6
    fusion_mlp_widths: list = field(default_factory=lambda: [256, 256, 512, 512, 1024])

    # fusion
    fusion_strategy: str = "concat"
    max_fused_tokens: int = 1024

    # ablation stage selection ("vit" or "linear")
    camera_stage: str = "vit"
    lidar_stage: str = "vit"
    fusion_stage: str = "vit"

    # detection heads
    n_proposals: int = 256
    head_hidden: list = field(default_factory=lambda: [256, 256])
    size_scale: float = 1.0
    size_scale_2d: float = 32.0

    # loss
    lambda_cls: float = 1.0
    lambda_reg: float = 1.0
    lambda_corner: float = 0.1
    focal_gamma: float = 2.0
    laplace_b: float = 1.0
    laplace_b_2d: float = 16.0
    no_object_weight: float = 0.1
    match_class_weight: float = 1.0
    match_box_weight: float = 1.0

    # optimization
    lr: float = 1e-4
    dropout: float = 0.3
    batch_size: int = 4
    steps: int = 1000
    seed: int = 0

    # evaluation
    nms_iou_threshold: float = 0.3
    nms_max_out: int = 256
    eval_iou_thresholds: dict = field(default_factory=lambda: {"Car": 0.7, "Pedestrian": 0.5})
    difficulty_min_points: dict = field(default_factory=lambda: {"easy": 100, "moderate": 30, "hard": 10})

    # optional dataset pointer for the CLI
    dataset_dir: str | None = None

    def __post_init__(self):
        if self.d_camera != self.d_lidar:
            raise ConfigError("fusion assumes equal camera/lidar token widths")
        for d, name in ((self.d_camera, "d_camera"), (self.d_fusion, "d_fusion")):
            if d % self.heads != 0:
                raise ConfigError(f"{name}={d} not divisible by heads={self.heads}")
        if self.vfe_width % 2 != 0:
            raise ConfigError("vfe_width must be even")
        H, W = self.image_hw
        if H % self.patch_size or W % self.patch_size:
            raise ConfigError("image_hw must be a multiple of patch_size")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0,1)")
        for name in self.classes:
            if name not in self.eval_iou_thresholds:
                self.eval_iou_thresholds[name] = 0.5

    # encoder sub-configs -------------------------------------------------
    def camera_encoder(self) -> EncoderConfig:
        return EncoderConfig(self.depth_camera, self.d_camera, self.heads,
                             self.mlp_hidden_camera, self.dropout)

    def lidar_encoder(self) -> EncoderConfig:
        return EncoderConfig(self.depth_lidar, self.d_lidar, self.heads,
                             self.mlp_hidden_lidar, self.dropout)

    def fusion_encoder(self) -> EncoderConfig:
        return EncoderConfig(self.depth_fusion, self.d_fusion, self.heads,
                             self.mlp_hidden_fusion, self.dropout)

    @property
    def n_camera_tokens(self) -> int:
        H, W = self.image_hw
        return (H // self.patch_size) * (W // self.patch_size)

    def loss_weights(self, box_dim: int = 7):
        from .detection import LossWeights

        return LossWeights(cls=self.lambda_cls, reg=self.lambda_reg,
                           corner=self.lambda_corner, gamma=self.focal_gamma,
                           laplace_b=self.laplace_b if box_dim == 7 else self.laplace_b_2d,
                           no_object_weight=self.no_object_weight)

    # serialization --------------------------------------------------------
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @staticmethod
    def from_dict(data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(RunConfig)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return RunConfig(**data)

    @staticmethod
    def from_json(text: str) -> "RunConfig":
        return RunConfig.from_dict(json.loads(text))

    @staticmethod
    def load(path) -> "RunConfig":
        with open(path) as fh:
            return RunConfig.from_dict(json.load(fh))
