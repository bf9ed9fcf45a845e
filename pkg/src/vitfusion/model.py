"""Composite detectors: camera-only (2D), lidar-only (3D) and the fused 3D
model, each pairing an encoder stack with set-prediction heads.

Every model exposes the same surface:

* ``forward(scene, mode, sample_seed)`` -> (box_params, probs)
* ``loss(scene, gt, mode, ...)``        -> LossBreakdown (backprops into
  parameter gradients unless told not to)
* ``predict(scene)``                    -> DetectionSet (eval mode)

Scenes are ``data.SceneSample`` records; gradient flow never crosses into
the scene data itself.
"""

from __future__ import annotations

import numpy as np

from .camera import ImageBranch, LinearImageBranch
from .config import RunConfig
from .detection import (DetectionHead, DetectionSet, LossBreakdown,
                        match_cost_matrix, solve_assignment, total_loss)
from .fusion import FusionStage, LinearFusionStage
from .lidar import LinearVoxelBranch, VoxelBranch
from .nn import EVAL, ConfigError, Mode, Module


def _make_camera_stage(rng, cfg: RunConfig):
    if cfg.camera_stage == "vit":
        return ImageBranch(rng, image_hw=tuple(cfg.image_hw), patch=cfg.patch_size,
                           mlp_widths=cfg.camera_mlp_widths,
                           encoder_cfg=cfg.camera_encoder())
    if cfg.camera_stage == "linear":
        return LinearImageBranch(rng, image_hw=tuple(cfg.image_hw),
                                 patch=cfg.patch_size, dim=cfg.d_camera)
    raise ConfigError(f"unknown camera stage {cfg.camera_stage!r}")


def _make_lidar_stage(rng, cfg: RunConfig):
    common = dict(bounds=cfg.point_range, cell_sizes=cfg.voxel_size,
                  T=cfg.samples_per_voxel, max_tokens=cfg.max_voxel_tokens)
    if cfg.lidar_stage == "vit":
        return VoxelBranch(rng, point_mlp_widths=cfg.lidar_point_mlp_widths,
                           vfe_width=cfg.vfe_width, vfe_layers=cfg.vfe_layers,
                           encoder_cfg=cfg.lidar_encoder(), **common)
    if cfg.lidar_stage == "linear":
        return LinearVoxelBranch(rng, dim=cfg.d_lidar, **common)
    raise ConfigError(f"unknown lidar stage {cfg.lidar_stage!r}")


def _make_fusion_stage(rng, cfg: RunConfig):
    common = dict(token_width=cfg.d_camera, n_camera_tokens=cfg.n_camera_tokens,
                  n_lidar_max=cfg.max_voxel_tokens, max_tokens=cfg.max_fused_tokens,
                  mlp_widths=cfg.fusion_mlp_widths)
    if cfg.fusion_stage == "vit":
        return FusionStage(rng, strategy=cfg.fusion_strategy,
                           encoder_cfg=cfg.fusion_encoder(), **common)
    if cfg.fusion_stage == "linear":
        return LinearFusionStage(rng, dim=cfg.d_fusion, **common)
    raise ConfigError(f"unknown fusion stage {cfg.fusion_stage!r}")


def _head_bounds_3d(cfg: RunConfig):
    rng3 = np.asarray(cfg.point_range, dtype=np.float64)
    return rng3[:, 0], rng3[:, 1]


class FusionDetector(Module):
    """Camera branch + lidar branch + fusion stage + 3D heads."""

    def __init__(self, cfg: RunConfig, rng=None):
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.camera = _make_camera_stage(rng, cfg)
        self.lidar = _make_lidar_stage(rng, cfg)
        self.fusion = _make_fusion_stage(rng, cfg)
        low, high = _head_bounds_3d(cfg)
        self.head = DetectionHead(rng, d_in=self.fusion.dim, hidden=cfg.head_hidden,
                                  n_boxes=cfg.n_proposals, n_classes=len(cfg.classes),
                                  center_low=low, center_high=high,
                                  size_scale=cfg.size_scale, box_dim=7)

    @property
    def box_dim(self) -> int:
        return 7

    def forward(self, scene, mode: Mode = EVAL, sample_seed: int = 0):
        cam_seq, _ = self.camera.forward(scene.image, mode)
        lid_seq, _ = self.lidar.forward(scene.cloud, mode, sample_seed)
        readout = self.fusion.forward(cam_seq, lid_seq, mode)
        self._shapes = (cam_seq.shape, lid_seq.shape)
        return self.head.forward(readout, mode)

    def backward(self, d_params, d_probs):
        d_read = self.head.backward(d_params, d_probs)
        d_cam, d_lid = self.fusion.backward(d_read)
        cam_shape, lid_shape = self._shapes
        self.camera.backward(d_cam, np.zeros(cam_shape[1]))
        self.lidar.backward(d_lid, np.zeros(lid_shape[1]))


class CameraDetector(Module):
    """Camera branch + 2D heads (pre-training model)."""

    def __init__(self, cfg: RunConfig, rng=None):
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.camera = _make_camera_stage(rng, cfg)
        H, W = cfg.image_hw
        self.head = DetectionHead(rng, d_in=self.camera.dim, hidden=cfg.head_hidden,
                                  n_boxes=cfg.n_proposals, n_classes=len(cfg.classes),
                                  center_low=(0.0, 0.0), center_high=(float(W), float(H)),
                                  size_scale=cfg.size_scale_2d, box_dim=4)

    @property
    def box_dim(self) -> int:
        return 4

    def forward(self, scene, mode: Mode = EVAL, sample_seed: int = 0):
        _, readout = self.camera.forward(scene.image, mode)
        self._n_seq = self.camera.n_patches
        return self.head.forward(readout, mode)

    def backward(self, d_params, d_probs):
        d_read = self.head.backward(d_params, d_probs)
        d_seq = np.zeros((self._n_seq, self.camera.dim))
        self.camera.backward(d_seq, d_read)


class LidarDetector(Module):
    """Lidar branch + 3D heads (pre-training model)."""

    def __init__(self, cfg: RunConfig, rng=None):
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.lidar = _make_lidar_stage(rng, cfg)
        low, high = _head_bounds_3d(cfg)
        self.head = DetectionHead(rng, d_in=self.lidar.dim, hidden=cfg.head_hidden,
                                  n_boxes=cfg.n_proposals, n_classes=len(cfg.classes),
                                  center_low=low, center_high=high,
                                  size_scale=cfg.size_scale, box_dim=7)

    @property
    def box_dim(self) -> int:
        return 7

    def forward(self, scene, mode: Mode = EVAL, sample_seed: int = 0):
        seq, readout = self.lidar.forward(scene.cloud, mode, sample_seed)
        self._seq_shape = seq.shape
        return self.head.forward(readout, mode)

    def backward(self, d_params, d_probs):
        d_read = self.head.backward(d_params, d_probs)
        self.lidar.backward(np.zeros(self._seq_shape), d_read)


def _gt_arrays(gt, box_dim: int):
    params = gt.box_params()
    if len(gt) and box_dim == 4 and params.shape[1] != 4:
        raise ConfigError("2D model requires 2D ground truth")
    return params, gt.labels


class ModelOps:
    """Shared loss/predict plumbing over any of the three detectors."""

    @staticmethod
    def loss(model, scene, gt, mode: Mode = EVAL, sample_seed: int = 0,
             do_backward: bool = True):
        cfg = model.cfg
        box_params, probs = model.forward(scene, mode, sample_seed)
        if not (np.all(np.isfinite(box_params)) and np.all(np.isfinite(probs))):
            # diverged forward: report a non-finite loss so the training
            # loop can abort with its batch diagnostic
            nan = float("nan")
            return LossBreakdown(nan, nan, nan, nan, nan, nan,
                                 cfg.loss_weights(model.box_dim))
        gt_params, labels = _gt_arrays(gt, model.box_dim)
        heading_col = 6 if model.box_dim == 7 else None
        if len(labels):
            cost = match_cost_matrix(box_params, probs, gt_params, labels,
                                     cfg.match_class_weight, cfg.match_box_weight,
                                     heading_col)
            assignment = solve_assignment(cost)
        else:
            assignment = np.zeros(0, dtype=np.intp)
        weights = cfg.loss_weights(model.box_dim)
        breakdown, d_box, d_probs = total_loss(box_params, probs, gt_params, labels,
                                               assignment, weights, model.box_dim)
        if do_backward:
            model.backward(d_box, d_probs)
        return breakdown

    @staticmethod
    def predict(model, scene, sample_seed: int = 0) -> DetectionSet:
        box_params, probs = model.forward(scene, EVAL, sample_seed)
        return model.head.predictions(box_params, probs)


MODEL_BUILDERS = {
    "camera2d": CameraDetector,
    "lidar3d": LidarDetector,
    "fusion": FusionDetector,
    "fusion_pretrained": FusionDetector,
}


def build_model(cfg: RunConfig, mode_name: str):
    try:
        builder = MODEL_BUILDERS[mode_name]
    except KeyError:
        raise ConfigError(f"unknown training mode {mode_name!r}") from None
    return builder(cfg)
