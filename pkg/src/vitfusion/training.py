"""Training loop, checkpointing, and the pretrain/fine-tune protocol.

Modes:

* ``camera2d``          -- camera branch + 2D heads on projected boxes
* ``lidar3d``           -- lidar branch + 3D heads
* ``fusion``            -- full fused model from scratch
* ``fusion_pretrained`` -- full model with camera/lidar branches initialized
                           bit-exactly from their pretraining checkpoints

Batches are seed-shuffled epochs over the scene list; each scene's dropout
and voxel sampling draws derive deterministically from (seed, step, scene),
so a rerun with the same RunConfig reproduces the loss curve exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .data import gt_boxes_2d
from .model import ModelOps, build_model
from .nn import Adam, Mode

CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Loss went non-finite; carries a diagnostic dump of the batch."""

    def __init__(self, message: str, diagnostic: dict):
        super().__init__(message + "\n" + json.dumps(diagnostic, indent=2, default=str))
        self.diagnostic = diagnostic


@dataclass
class TrainResult:
    model: object
    cfg: RunConfig
    mode: str
    loss_history: list = field(default_factory=list)
    eval_trace: list = field(default_factory=list)      # (step, value)
    steps_to_target: int | None = None


def _scene_seed(seed: int, step: int, idx: int) -> int:
    return (seed * 1_000_003 + step * 8191 + idx * 131 + 7) % (2 ** 31)


def _epoch_batches(n_scenes: int, batch_size: int, steps: int, rng):
    """Yield ``steps`` batches of scene indices, reshuffling each epoch."""
    order = []
    produced = 0
    while produced < steps:
        if len(order) < batch_size:
            order.extend(rng.permutation(n_scenes).tolist())
        yield [order.pop(0) for _ in range(min(batch_size, n_scenes))]
        produced += 1


def ground_truths_for(scenes, mode_name: str):
    if mode_name == "camera2d":
        return [gt_boxes_2d(s) for s in scenes]
    return [s.gt for s in scenes]


def train(cfg: RunConfig, mode_name: str, scenes, *,
          pretrained_camera=None, pretrained_lidar=None,
          eval_every: int | None = None, eval_fn=None, target: float | None = None,
          stop_at_target: bool = False, log_fn=None) -> TrainResult:
    """Train a model; returns the model plus loss/eval traces.

    ``eval_fn(model) -> float`` runs every ``eval_every`` steps; when
    ``target`` is given, ``steps_to_target`` records the first step whose
    evaluation reaches it (and training may stop there).
    """
    if not scenes:
        raise ValueError("training dataset is empty")
    model = build_model(cfg, mode_name)
    if mode_name == "fusion_pretrained":
        if pretrained_camera is None or pretrained_lidar is None:
            raise ValueError("fusion_pretrained requires camera and lidar checkpoints")
        _, cam_state = load_checkpoint(pretrained_camera)
        _, lid_state = load_checkpoint(pretrained_lidar)
        model.camera.load_state_dict(cam_state, prefix="camera.")
        model.lidar.load_state_dict(lid_state, prefix="lidar.")

    gts = ground_truths_for(scenes, mode_name)
    opt = Adam(model.named_params(), cfg.lr)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xBA7C4)))
    result = TrainResult(model=model, cfg=cfg, mode=mode_name)

    for step, batch in enumerate(_epoch_batches(len(scenes), cfg.batch_size,
                                                cfg.steps, shuffle_rng), start=1):
        opt.zero_grad()
        breakdowns = []
        for idx in batch:
            sseed = _scene_seed(cfg.seed, step, idx)
            mode = Mode(train=True, rng=np.random.default_rng(
                np.random.SeedSequence((cfg.seed, step, idx))))
            breakdowns.append(ModelOps.loss(model, scenes[idx], gts[idx],
                                            mode=mode, sample_seed=sseed))
        mean_total = float(np.mean([b.total for b in breakdowns]))
        if not np.isfinite(mean_total):
            diagnostic = {
                "step": step,
                "scene_ids": [scenes[i].scene_id for i in batch],
                "losses": [vars(b) | {"weights": vars(b.weights)} for b in breakdowns],
            }
            raise TrainingDivergedError(f"non-finite loss at step {step}", diagnostic)
        opt.step(grad_scale=1.0 / len(batch))
        record = {
            "step": step,
            "total": mean_total,
            "cls": float(np.mean([b.cls for b in breakdowns])),
            "center": float(np.mean([b.center for b in breakdowns])),
            "size": float(np.mean([b.size for b in breakdowns])),
            "heading": float(np.mean([b.heading for b in breakdowns])),
            "corner": float(np.mean([b.corner for b in breakdowns])),
        }
        result.loss_history.append(record)
        if log_fn is not None:
            log_fn(record)
        if eval_fn is not None and eval_every and (step % eval_every == 0
                                                   or step == cfg.steps):
            value = float(eval_fn(model))
            result.eval_trace.append((step, value))
            if target is not None and result.steps_to_target is None and value >= target:
                result.steps_to_target = step
                if stop_at_target:
                    break
    return result


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model, mode_name: str, extra: dict | None = None):
    """Versioned npz with every parameter/buffer and the config embedded."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "mode": mode_name,
        "config": model.cfg.to_dict(),
        "extra": extra or {},
    }
    state = model.state_dict()
    np.savez(path, __meta__=np.array(json.dumps(meta)), **state)


def load_checkpoint(path):
    """Returns (meta dict, state dict of arrays)."""
    with np.load(path, allow_pickle=False) as f:
        meta = json.loads(str(f["__meta__"].item() if f["__meta__"].shape == ()
                              else f["__meta__"]))
        state = {k: f[k].copy() for k in f.files if k != "__meta__"}
    return meta, state


def model_from_checkpoint(path):
    """Rebuild the model a checkpoint was saved from. Returns (model, meta)."""
    meta, state = load_checkpoint(path)
    if meta["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta['version']}")
    cfg = RunConfig.from_dict(meta["config"])
    model = build_model(cfg, meta["mode"])
    model.load_state_dict(state)
    return model, meta
