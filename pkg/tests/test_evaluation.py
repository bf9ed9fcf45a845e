import numpy as np
import pytest

from conftest import toy_run_config, toy_synth_config
from vitfusion.data import generate_scene
from vitfusion.detection import DetectionSet, GroundTruth
from vitfusion.evaluation import (
    EvalReport,
    evaluate_detections,
    evaluate_model,
    heading_accuracy,
    interpolated_ap,
    mark_detections,
    pr_curves,
    predict_with_nms,
)
from vitfusion.geometry import Box3D, iou_3d
from vitfusion.model import FusionDetector


def far_box(i):
    return Box3D(1000.0 + 10 * i, 0, 0, 1, 1, 1, 0)


def det_set(boxes, confidences, cls_idx=0, n_classes=2):
    probs = np.zeros((len(boxes), n_classes + 1))
    conf = np.asarray(confidences, dtype=float)
    probs[:, cls_idx] = conf
    probs[:, -1] = 1.0 - conf
    return DetectionSet(list(boxes), probs)


def make_scene_like(boxes, labels, cloud=None, n_classes=2):
    class SceneStub:
        pass

    s = SceneStub()
    s.gt = GroundTruth(list(boxes), np.asarray(labels, dtype=np.intp), n_classes)
    s.cloud = cloud if cloud is not None else np.zeros((0, 3))
    s.scene_id = "stub"
    return s


def dense_cloud_for(boxes, n=200):
    rng = np.random.default_rng(0)
    from vitfusion.data import sample_box_surface

    return np.concatenate([sample_box_surface(rng, b, n) for b in boxes])


class TestInterpolatedAP:
    def test_perfect_curve(self):
        recall = np.array([0.5, 1.0])
        precision = np.array([1.0, 1.0])
        assert interpolated_ap(recall, precision) == pytest.approx(1.0)

    def test_known_small_case(self):
        # one TP then one FP over a single GT: recall hits 1 at precision 1
        recall = np.array([1.0, 1.0])
        precision = np.array([1.0, 0.5])
        assert interpolated_ap(recall, precision) == pytest.approx(1.0)

    def test_zero_for_no_recall(self):
        assert interpolated_ap(np.zeros(3), np.ones(3)) == 0.0


class TestHeadingAccuracy:
    def test_exact_heading(self):
        assert heading_accuracy(0.3, 0.3) == pytest.approx(1.0)

    def test_pi_flip_is_zero(self):
        assert heading_accuracy(np.pi, 0.0) == pytest.approx(0.0, abs=1e-12)

    def test_wraps(self):
        assert heading_accuracy(2 * np.pi + 0.1, 0.1) == pytest.approx(1.0)


class TestMarking:
    def test_each_gt_matched_once(self):
        gt = [Box3D(0, 0, 0, 2, 2, 2, 0)]
        dets = [Box3D(0, 0, 0, 2, 2, 2, 0), Box3D(0.05, 0, 0, 2, 2, 2, 0)]
        conf, tp, ign, hw, n_gt = mark_detections(
            [(dets, [0.9, 0.8])], [gt], [[True]], iou_3d, 0.5)
        assert n_gt == 1
        np.testing.assert_array_equal(tp, [True, False])

    def test_ignored_gt_absorbs_detection(self):
        gt = [Box3D(0, 0, 0, 2, 2, 2, 0)]
        dets = [Box3D(0, 0, 0, 2, 2, 2, 0)]
        conf, tp, ign, hw, n_gt = mark_detections(
            [(dets, [0.9])], [gt], [[False]], iou_3d, 0.5)
        assert n_gt == 0
        np.testing.assert_array_equal(tp, [False])
        np.testing.assert_array_equal(ign, [True])

    def test_valid_gt_preferred_over_ignored(self):
        gt = [Box3D(0, 0, 0, 2, 2, 2, 0), Box3D(0.1, 0, 0, 2, 2, 2, 0)]
        dets = [Box3D(0.05, 0, 0, 2, 2, 2, 0)]
        conf, tp, ign, hw, n_gt = mark_detections(
            [(dets, [0.9])], [gt], [[False, True]], iou_3d, 0.5)
        np.testing.assert_array_equal(tp, [True])


class TestEvaluateDetections:
    def _eval(self, det_sets, scenes, thresholds=None):
        return evaluate_detections(
            det_sets, scenes, ["Car", "Pedestrian"],
            thresholds or {"Car": 0.5, "Pedestrian": 0.5},
            {"3d": iou_3d}, {"all": 0})

    def test_perfect_predictions_ap_one(self):
        rng = np.random.default_rng(1)
        scenes, det_sets = [], []
        for i in range(5):
            boxes = [Box3D(5 + 4 * j + i, 2 * j - 2, 0, 2, 1.5, 1.5, 0.3 * j)
                     for j in range(3)]
            labels = [j % 2 for j in range(3)]
            scenes.append(make_scene_like(boxes, labels))
            probs = np.zeros((3, 3))
            probs[np.arange(3), labels] = 1.0
            det_sets.append(DetectionSet(list(boxes), probs))
        report = self._eval(det_sets, scenes)
        for cls in ("Car", "Pedestrian"):
            assert report.ap("3d", cls, "all") == pytest.approx(1.0)
            assert report.aph("3d", cls, "all") == pytest.approx(1.0)
        assert report.verify()

    def test_pi_flipped_headings_kill_aph_not_ap(self):
        scenes, det_sets = [], []
        for i in range(4):
            boxes = [Box3D(6 + 3 * j + i, 0, 0, 2, 1.5, 1.5, 0.4) for j in range(2)]
            scenes.append(make_scene_like(boxes, [0, 0]))
            flipped = [Box3D(b.cx, b.cy, b.cz, b.l, b.w, b.h, b.theta + np.pi)
                       for b in boxes]
            det_sets.append(det_set(flipped, [0.95, 0.9]))
        report = self._eval(det_sets, scenes)
        assert report.ap("3d", "Car", "all") == pytest.approx(1.0)
        assert report.aph("3d", "Car", "all") == pytest.approx(0.0, abs=1e-2)
        assert report.verify()

    def test_scripted_detector_matches_hand_pr(self):
        # deterministic TP/FP script: per scene, one exact match (TP) and one
        # far-away box (FP), with globally descending confidences
        scenes, det_sets = [], []
        tp_script, confs = [], []
        conf = 1.0
        rng = np.random.default_rng(2)
        for i in range(10):
            gt_box = Box3D(10 + i, 0, 0, 2.0, 1.5, 1.4, 0.2)
            scenes.append(make_scene_like([gt_box], [0]))
            boxes, scene_conf = [], []
            for is_tp in (True, False):
                conf -= 0.01
                boxes.append(gt_box if is_tp else far_box(i))
                scene_conf.append(conf)
                tp_script.append(is_tp)
                confs.append(conf)
            det_sets.append(det_set(boxes, scene_conf))
        report = self._eval(det_sets, scenes)

        # independent PR computation from the known script
        order = np.argsort(-np.asarray(confs), kind="stable")
        flags = np.asarray(tp_script)[order]
        tp_cum = np.cumsum(flags)
        prec = tp_cum / np.arange(1, len(flags) + 1)
        rec = tp_cum / 10.0
        expected = np.mean([prec[rec >= (k + 1) / 40].max()
                            if (rec >= (k + 1) / 40).any() else 0.0
                            for k in range(40)])
        assert report.ap("3d", "Car", "all") == pytest.approx(expected, abs=1e-9)

    def test_difficulty_binning_by_point_count(self):
        # two GT boxes: one densely observed, one nearly empty
        dense = Box3D(8, 0, 0, 2, 2, 1.5, 0.0)
        sparse = Box3D(20, 4, 0, 2, 2, 1.5, 0.0)
        cloud = dense_cloud_for([dense], n=150)
        scene = make_scene_like([dense, sparse], [0, 0], cloud=cloud)
        dets = det_set([dense, sparse], [0.9, 0.85])
        report = evaluate_detections(
            [dets], [scene], ["Car", "Pedestrian"], {"Car": 0.5, "Pedestrian": 0.5},
            {"3d": iou_3d}, {"easy": 100, "hard": 1})
        # easy: sparse gt ignored -> its detection neither TP nor FP -> AP 1
        assert report.ap("3d", "Car", "easy") == pytest.approx(1.0)
        assert report.ap("3d", "Car", "hard") == pytest.approx(1.0)
        # no Pedestrian gt at all -> undefined cells
        assert report.ap("3d", "Pedestrian", "easy") is None
        assert report.mean_ap("3d", "easy") == pytest.approx(1.0)

    def test_false_positives_lower_ap(self):
        gt_box = Box3D(10, 0, 0, 2, 1.5, 1.4, 0.0)
        scene = make_scene_like([gt_box], [0])
        dets = det_set([far_box(0), gt_box], [0.9, 0.8])   # FP outranks TP
        report = self._eval([dets], [scene])
        ap = report.ap("3d", "Car", "all")
        assert 0.0 < ap < 1.0
        assert ap == pytest.approx(0.5)


class TestEvalReport:
    def test_text_and_json(self):
        report = EvalReport(
            classes=["Car"],
            metrics={"3d": {"Car": {"hard": {"ap": 0.5, "aph": 0.4}}}})
        text = report.to_text()
        assert "Car" in text and "50.0" in text and "40.0" in text
        blob = report.to_json()
        assert '"ap": 0.5' in blob

    def test_verify_rejects_aph_above_ap(self):
        report = EvalReport(
            classes=["Car"],
            metrics={"3d": {"Car": {"hard": {"ap": 0.4, "aph": 0.6}}}})
        assert not report.verify()


class TestPredictWithNms:
    def test_shapes_and_threshold(self, toy_cfg):
        model = FusionDetector(toy_cfg)
        scene = generate_scene(toy_synth_config(), 3)
        dets = predict_with_nms(model, scene)
        assert len(dets) <= toy_cfg.nms_max_out
        assert dets.class_probs.shape[1] == 3

    def test_empty_scene_gives_empty_set(self, toy_cfg):
        model = FusionDetector(toy_cfg)
        scene = generate_scene(toy_synth_config(boxes_per_scene=[0, 0],
                                                clutter_points=1), 3)
        scene.cloud = np.array([[500.0, 500.0, 500.0]])
        dets = predict_with_nms(model, scene)
        assert len(dets) == 0

    def test_evaluate_model_runs(self, toy_cfg):
        model = FusionDetector(toy_cfg)
        scenes = [generate_scene(toy_synth_config(), s) for s in (0, 1)]
        report = evaluate_model(model, scenes)
        assert report.verify()
        assert report.runtime["scenes"] == 2
        with pytest.raises(ValueError):
            evaluate_model(model, [])
