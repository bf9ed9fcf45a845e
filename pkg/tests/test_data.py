import numpy as np
import pytest

from conftest import toy_synth_config
from vitfusion.data import (
    AugmentConfig,
    augment_scene,
    generate_scene,
    gt_boxes_2d,
    points_in_box,
    sample_box_surface,
)
from vitfusion.geometry import Box3D, iou_bev
from vitfusion.nn import ConfigError


class TestGenerateScene:
    def test_deterministic_per_seed(self):
        cfg = toy_synth_config()
        a = generate_scene(cfg, 11)
        b = generate_scene(cfg, 11)
        np.testing.assert_array_equal(a.cloud, b.cloud)
        np.testing.assert_array_equal(a.image, b.image)
        assert len(a.gt) == len(b.gt)
        for ba, bb in zip(a.gt.boxes, b.gt.boxes):
            np.testing.assert_array_equal(ba.params, bb.params)

    def test_distinct_seeds_differ(self):
        cfg = toy_synth_config()
        a = generate_scene(cfg, 1)
        b = generate_scene(cfg, 2)
        assert a.cloud.shape != b.cloud.shape or not np.array_equal(a.cloud, b.cloud)

    def test_zero_boxes_pure_clutter(self):
        cfg = toy_synth_config(boxes_per_scene=[0, 0])
        s = generate_scene(cfg, 5)
        assert len(s.gt) == 0
        assert s.cloud.shape[0] > 0

    def test_boxes_contain_their_surface_points(self):
        cfg = toy_synth_config(clutter_points=0)
        s = generate_scene(cfg, 7)
        assert len(s.gt) >= 1
        covered = np.zeros(len(s.cloud), dtype=bool)
        for box in s.gt.boxes:
            inside = points_in_box(s.cloud, box, inflate=0.01)
            covered |= inside
            assert inside.sum() >= cfg.min_points_per_box
        assert covered.all()

    def test_boxes_do_not_overlap_in_bev(self):
        cfg = toy_synth_config(boxes_per_scene=[3, 3])
        s = generate_scene(cfg, 9)
        for i, a in enumerate(s.gt.boxes):
            for b in s.gt.boxes[i + 1:]:
                assert iou_bev(a, b) < 0.05

    def test_every_box_paints_class_colored_pixels(self):
        cfg = toy_synth_config(boxes_per_scene=[1, 1], clutter_points=0)
        s = generate_scene(cfg, 3)
        # flat-shaded quads: some pixels must differ from the blocky texture
        bg = generate_scene(toy_synth_config(boxes_per_scene=[0, 0],
                                             clutter_points=0), 3)
        assert (s.image != bg.image).any()

    def test_boxes_within_range(self):
        cfg = toy_synth_config(boxes_per_scene=[2, 2])
        lo = np.array([r[0] for r in cfg.point_range])
        hi = np.array([r[1] for r in cfg.point_range])
        for seed in range(5):
            s = generate_scene(cfg, seed)
            for box in s.gt.boxes:
                c = np.array([box.cx, box.cy, box.cz])
                assert np.all(c >= lo) and np.all(c <= hi)

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            toy_synth_config(points_per_m2=0.0)
        with pytest.raises(ConfigError):
            toy_synth_config(image_hw=[60, 64])


def test_surface_sampler_stays_on_surface():
    rng = np.random.default_rng(0)
    box = Box3D(2, -1, 0.5, 3, 1.4, 1.1, 0.8)
    pts = sample_box_surface(rng, box, 500)
    inside_tight = points_in_box(pts, box, inflate=1e-9)
    inside_shrunk = points_in_box(pts, Box3D(box.cx, box.cy, box.cz,
                                             box.l * 0.98, box.w * 0.98,
                                             box.h * 0.98, box.theta), inflate=0)
    assert inside_tight.all()
    assert inside_shrunk.mean() < 0.5   # points sit on the shell, not the core


class TestAugment:
    def test_noop_config_preserves_geometry(self):
        cfg = AugmentConfig(flip_prob=0.0, rotation_range=0.0,
                            scale_range=[1.0, 1.0], translation_std=0.0,
                            shuffle_points=True)
        s = generate_scene(toy_synth_config(), 13)
        out = augment_scene(s, seed=5, cfg=cfg)
        # gt unchanged, point multiset unchanged (order may differ)
        for ba, bb in zip(s.gt.boxes, out.gt.boxes):
            np.testing.assert_allclose(ba.params, bb.params)
        a = np.array(sorted(map(tuple, s.cloud)))
        b = np.array(sorted(map(tuple, out.cloud)))
        np.testing.assert_allclose(a, b)

    def test_flip_is_involution(self):
        cfg = AugmentConfig(flip_prob=1.0, rotation_range=0.0,
                            scale_range=[1.0, 1.0], translation_std=0.0,
                            shuffle_points=False)
        s = generate_scene(toy_synth_config(), 17)
        twice = augment_scene(augment_scene(s, 0, cfg), 1, cfg)
        np.testing.assert_allclose(twice.cloud, s.cloud, atol=1e-12)
        for ba, bb in zip(s.gt.boxes, twice.gt.boxes):
            np.testing.assert_allclose(ba.params, bb.params, atol=1e-12)
        np.testing.assert_array_equal(twice.image, s.image)

    def test_containment_preserved(self):
        s = generate_scene(toy_synth_config(clutter_points=0), 19)
        for seed in range(5):
            out = augment_scene(s, seed)
            for box_old, box_new in zip(s.gt.boxes, out.gt.boxes):
                n_old = points_in_box(s.cloud, box_old).sum()
                n_new = points_in_box(out.cloud, box_new).sum()
                assert n_new >= n_old * 0.98   # boundary jitter tolerance

    def test_labels_preserved(self):
        s = generate_scene(toy_synth_config(), 23)
        out = augment_scene(s, 3)
        np.testing.assert_array_equal(out.gt.labels, s.gt.labels)
        assert out.class_names == s.class_names


def test_gt_boxes_2d_projects_visible_boxes():
    s = generate_scene(toy_synth_config(), 29)
    gt2d = gt_boxes_2d(s)
    assert len(gt2d) <= len(s.gt)
    H, W = s.image.shape[:2]
    for box in gt2d.boxes:
        assert 0 <= box.cx <= W and 0 <= box.cy <= H
        assert box.w > 0 and box.h > 0
