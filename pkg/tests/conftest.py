import numpy as np
import pytest

from vitfusion import RunConfig, SynthConfig, generate_scene

# relative error with a floor: near-zero gradients are held to an absolute
# tolerance of floor * rel instead of blowing up the ratio
FD_STEP = 1e-5
FD_FLOOR = 1e-5


def fd_gradcheck(params, loss_fn, n_per_tensor=3, seed=42, step=FD_STEP,
                 floor=FD_FLOOR):
    """Compare accumulated analytic grads against central finite differences
    at randomly sampled coordinates of every parameter tensor.

    ``params`` is a name -> Param dict whose .grad fields already hold the
    analytic gradient of loss_fn(); loss_fn() re-evaluates the scalar loss
    from current parameter values. Returns the worst floored relative error.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        for _ in range(min(n_per_tensor, flat.size)):
            i = int(rng.integers(flat.size))
            old = flat[i]
            flat[i] = old + step
            f1 = loss_fn()
            flat[i] = old - step
            f2 = loss_fn()
            flat[i] = old
            numeric = (f1 - f2) / (2.0 * step)
            analytic = gflat[i]
            rel = abs(numeric - analytic) / max(abs(numeric), abs(analytic), floor)
            worst = max(worst, rel)
    return worst


def toy_run_config(**overrides) -> RunConfig:
    base = dict(
        image_hw=[64, 64], patch_size=32,
        d_camera=16, d_lidar=16, d_fusion=16,
        depth_camera=2, depth_lidar=1, depth_fusion=2, heads=2,
        mlp_hidden_camera=24, mlp_hidden_lidar=24, mlp_hidden_fusion=24,
        camera_mlp_widths=[16], lidar_point_mlp_widths=[12],
        vfe_width=12, vfe_layers=2, fusion_mlp_widths=[24],
        point_range=[[0.0, 16.0], [-8.0, 8.0], [-2.0, 2.0]],
        voxel_size=[2.0, 2.0, 2.0], samples_per_voxel=8,
        max_voxel_tokens=64, max_fused_tokens=96,
        n_proposals=6, head_hidden=[24],
        dropout=0.0, steps=3, batch_size=2, seed=0,
    )
    base.update(overrides)
    return RunConfig(**base)


def toy_synth_config(**overrides) -> SynthConfig:
    base = dict(
        image_hw=[64, 64], patch_multiple=32, focal=40.0,
        point_range=[[0.0, 16.0], [-8.0, 8.0], [-2.0, 2.0]],
        clutter_points=50, boxes_per_scene=[1, 2],
        size_means={"Car": [3.0, 1.6, 1.5], "Pedestrian": [0.8, 0.8, 1.7]},
        size_jitter={"Car": [0.2, 0.1, 0.08], "Pedestrian": [0.06, 0.06, 0.1]},
        points_per_m2=4.0, min_points_per_box=40,
    )
    base.update(overrides)
    return SynthConfig(**base)


@pytest.fixture
def toy_scene():
    return generate_scene(toy_synth_config(), seed=3)


@pytest.fixture
def toy_cfg():
    return toy_run_config()
