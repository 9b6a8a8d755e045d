import numpy as np
import pytest

import oracles
import scenes
from fcoskit.geometry import Box, pairwise_iou
from fcoskit.ingestion import Annotation, AnnotationFormatError, Dataset, Detection, ImageRecord
from fcoskit.metrics import (
    best_jaccard_index,
    coco_eval,
    evaluate,
    jaccard_index,
    max_matching,
    miss_rate_curve,
    mr2,
    pr_curve_rows,
)
from fcoskit.synth import gt_as_detections, synth_dataset, synth_detections


def dataset_of(*images, classes=(1,)):
    recs = []
    for i, boxes in enumerate(images, start=1):
        anns = tuple(
            Annotation(Box(*b[:4], class_id=b[4] if len(b) > 4 else 1), 1, bool(b[5]) if len(b) > 5 else False)
            for b in boxes
        )
        recs.append(ImageRecord(i, 200, 200, anns))
    return Dataset(tuple(recs), classes)


def d(box, score, cls=1):
    return Detection(Box(*box, class_id=cls), score)


def three_box_scene():
    ds = dataset_of([(0, 0, 10, 10), (20, 20, 30, 30), (40, 40, 50, 50)])
    dets = {1: [d((20, 20, 30, 30), 0.9), d((40, 40, 50, 50), 0.8), d((0, 0, 10, 6), 0.7)]}
    return ds, dets


def test_three_box_scene_frozen_values():
    ds, dets = three_box_scene()
    rep = coco_eval(dets, ds).report
    assert rep.AP50 == 1.0
    assert rep.AP75 == pytest.approx(67 / 101, abs=1e-12)
    assert rep.AP == pytest.approx(772 / 1010, abs=1e-12)
    assert rep.AR100 == pytest.approx((3 + 7 * 2 / 3) / 10, abs=1e-12)
    assert rep.AP50 > rep.AP75
    assert rep.AP_M == -1.0 and rep.AP_L == -1.0  # no medium/large boxes


def test_three_box_scene_matches_oracle():
    ds, dets = three_box_scene()
    got = coco_eval(dets, ds).report.as_dict()
    ref = scenes.naive_coco(ds, dets)
    for k, v in ref.items():
        assert got[k] == v, k


def test_gt_as_detections_is_perfect():
    ds = synth_dataset(20, seed=1)
    dets = gt_as_detections(ds)
    rep = coco_eval(dets, ds).report
    assert rep.AP == rep.AP50 == rep.AP75 == 1.0
    assert rep.AR100 == 1.0


def test_empty_detections_are_zero():
    ds = synth_dataset(5, seed=2)
    rep = coco_eval({}, ds).report
    assert rep.AP == 0.0 and rep.AR100 == 0.0


def test_unknown_category_rejected():
    ds = dataset_of([(0, 0, 10, 10)])
    with pytest.raises(AnnotationFormatError):
        coco_eval({1: [d((0, 0, 10, 10), 0.9, cls=4)]}, ds)


def test_crowd_region_absorbs_detections():
    ds = dataset_of([(0, 0, 10, 10), (50, 50, 150, 150, 1, 1)])
    dets = {1: [d((0, 0, 10, 10), 0.5), d((60, 60, 80, 80), 0.9), d((90, 90, 110, 110), 0.8)]}
    assert coco_eval(dets, ds).report.AP == 1.0


def test_invariants_on_synthetic_run():
    ds = synth_dataset(40, seed=3)
    dets = synth_detections(ds, seed=4)
    rep = coco_eval(dets, ds).report
    assert rep.AP <= rep.AP50
    assert rep.AR1 <= rep.AR10 <= rep.AR100


@pytest.mark.parametrize("transform", [np.sqrt, lambda s: s**3, lambda s: 0.5 * s + 0.1, np.log1p])
def test_ap_invariant_under_monotone_scores(transform):
    ds = synth_dataset(30, seed=5)
    dets = synth_detections(ds, seed=6)
    moved = {k: [Detection(x.box, float(transform(x.score))) for x in v] for k, v in dets.items()}
    a = coco_eval(dets, ds).report
    b = coco_eval(moved, ds).report
    assert abs(a.AP - b.AP) <= 1e-12 and abs(a.AR100 - b.AR100) <= 1e-12


def test_coco_eval_matches_naive_on_random_scenes():
    rng = np.random.default_rng(17)
    for _ in range(40):
        assert scenes.check_coco(rng) == []


def test_pr_curve_rows():
    ds, dets = three_box_scene()
    rows = pr_curve_rows(coco_eval(dets, ds), ds)
    assert len(rows) == 10 * 101
    assert rows[0] == {"iou_threshold": 0.5, "category_id": 1, "recall": 0.0, "precision": 1.0}


# ---------------------------------------------------------------------------
# Miss rate
# ---------------------------------------------------------------------------


def person_scene(rng, n_images=10, fp_rate=2.0):
    ds = synth_dataset(n_images, seed=int(rng.integers(1 << 30)), max_boxes=5, crowd_fraction=0.1)
    dets = synth_detections(ds, seed=int(rng.integers(1 << 30)), false_positives=fp_rate, recall=0.8)
    return ds, dets


def to_oracle(ds, dets):
    return [
        (
            [(a.box.as_tuple(), a.iscrowd) for a in im.boxes],
            [(x.box.as_tuple(), x.score) for x in dets.get(im.image_id, [])],
        )
        for im in ds.images
    ]


def test_mr2_examples():
    ds = synth_dataset(10, seed=9)
    assert mr2(gt_as_detections(ds), ds) == pytest.approx(0.0, abs=1e-9)
    assert mr2({}, ds) == 1.0
    with pytest.raises(ValueError):
        mr2({}, Dataset((ImageRecord(1, 10, 10, ()),), (1,)))


def test_mr2_matches_threshold_sweep_oracle():
    rng = np.random.default_rng(23)
    for _ in range(25):
        ds, dets = person_scene(rng)
        assert mr2(dets, ds) == pytest.approx(oracles.mr2_sweep(to_oracle(ds, dets)), abs=1e-12)


def test_mr2_fppi_range_is_configurable():
    rng = np.random.default_rng(1)
    ds, dets = person_scene(rng)
    caltech = mr2(dets, ds, fppi_range=(1e-2, 1.0))
    assert caltech == pytest.approx(oracles.mr2_sweep(to_oracle(ds, dets), (1e-2, 1.0)), abs=1e-12)


def test_miss_rate_curve_starts_at_empty_set():
    ds = dataset_of([(0, 0, 10, 10)])
    fppi, miss = miss_rate_curve({1: [d((0, 0, 10, 10), 0.5)]}, ds)
    assert list(fppi) == [0.0, 0.0] and list(miss) == [1.0, 0.0]


def test_mr2_monotone_in_tp_and_fp():
    rng = np.random.default_rng(31)
    for _ in range(15):
        ds, dets = person_scene(rng)
        base = mr2(dets, ds)
        im = ds.images[0]
        fp = Detection(Box(0, 0, 1, 1, class_id=1), 0.99)
        with_fp = {**dets, im.image_id: list(dets.get(im.image_id, [])) + [fp]}
        assert mr2(with_fp, ds) >= base
        # add a perfect detection for an object nobody matched yet
        for im in ds.images:
            for a in im.boxes:
                if a.iscrowd:
                    continue
                got = dets.get(im.image_id, [])
                if all(oracles.iou(x.box.as_tuple(), a.box.as_tuple()) < 0.5 for x in got):
                    with_tp = {**dets, im.image_id: list(got) + [Detection(a.box, 0.5)]}
                    assert mr2(with_tp, ds) <= base
                    break


# ---------------------------------------------------------------------------
# Jaccard index
# ---------------------------------------------------------------------------


def test_ji_examples():
    ds = synth_dataset(10, seed=12)
    assert jaccard_index(gt_as_detections(ds), ds) == 1.0
    assert jaccard_index({}, ds) == 0.0
    three = dataset_of([(0, 0, 10, 10), (20, 0, 30, 10), (40, 0, 50, 10)])
    two = {1: [d((0, 0, 10, 10), 0.9), d((20, 0, 30, 10), 0.8)]}
    assert jaccard_index(two, three) == pytest.approx(2 / 3)


def test_max_matching_equals_exhaustive_and_beats_greedy():
    rng = np.random.default_rng(41)
    for _ in range(150):
        n, m = int(rng.integers(0, 6)), int(rng.integers(0, 6))
        gts = [scenes.random_box(rng, 60, 60, min_size=8) for _ in range(m)]
        dts = [scenes.random_box(rng, 60, 60, min_size=8) for _ in range(n)]
        ious = pairwise_iou(np.array(dts).reshape(-1, 4), np.array(gts).reshape(-1, 4))
        thr = float(rng.choice([0.1, 0.3, 0.5]))
        k = max_matching(ious, thr)
        assert k == oracles.max_matching_exhaustive(dts, gts, thr)
        assert oracles.greedy_matching(dts, gts, thr) <= k


def test_greedy_can_be_suboptimal():
    # greedy gives det 0 its best gt, the only one det 1 could use
    gts = [(0, 0, 10, 10), (4, 0, 14, 10)]
    dts = [(1, 0, 11, 10), (0, 0, 6, 10)]
    ious = pairwise_iou(np.array(dts, float), np.array(gts, float))
    assert oracles.greedy_matching(dts, gts, 0.4) == 1
    assert max_matching(ious, 0.4) == 2


def test_best_ji_reports_threshold():
    ds = dataset_of([(0, 0, 10, 10)])
    dets = {1: [d((0, 0, 10, 10), 0.9), d((50, 50, 60, 60), 0.15)]}
    ji, thr = best_jaccard_index(dets, ds)
    assert ji == 1.0 and thr == 0.2


def test_evaluate_with_crowd_metrics():
    ds = synth_dataset(10, seed=7, crowd=True)
    rep = evaluate(gt_as_detections(ds), ds, crowd_metrics=True)
    assert rep.AP == 1.0 and rep.JI == 1.0
    assert rep.MR2 == pytest.approx(0.0, abs=1e-9)
    assert rep.ji_score_threshold == 0.0
