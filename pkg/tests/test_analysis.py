import json
import math

import pytest

from fcoskit.analysis import (
    AmbiguityReport,
    BPRReport,
    LevelsConfig,
    ambiguity,
    ambiguity_sweep,
    bpr_anchor,
    bpr_fcos,
    crowdhuman_ambiguity,
    format_ambiguity_table,
    format_bpr_table,
)
from fcoskit.anchors import AnchorConfig
from fcoskit.assignment import AssignConfig
from fcoskit.geometry import Box
from fcoskit.ingestion import Annotation, Dataset, ImageRecord, write_report
from fcoskit.synth import synth_dataset


def dataset_of(*images, size=(400, 400)):
    recs = []
    for i, boxes in enumerate(images, start=1):
        anns = tuple(Annotation(Box(*b, class_id=1), 1) for b in boxes)
        recs.append(ImageRecord(i, size[0], size[1], anns))
    return Dataset(tuple(recs), (1,))


NATIVE = LevelsConfig(resize=None)


def test_one_large_box_is_always_recalled():
    ds = dataset_of([(50, 50, 350, 350)])
    assert bpr_fcos(ds, NATIVE).bpr_percent == 100.0
    for policy in ("none", "threshold", "all"):
        assert bpr_anchor(ds, NATIVE, AnchorConfig(low_quality_policy=policy)).bpr_percent == 100.0


def test_disjoint_boxes_are_unambiguous():
    ds = dataset_of([(10, 10, 60, 60), (200, 200, 300, 300), (100, 300, 160, 390)])
    rep = ambiguity(ds, NATIVE)
    assert rep.total > 0
    assert rep.percentages == (100.0, 0.0, 0.0)


def test_nested_boxes_without_sampling_are_ambiguous():
    ds = dataset_of([(0, 0, 200, 200), (60, 60, 140, 140)])
    lv = LevelsConfig((8,), None, None)
    rep = ambiguity(ds, lv, AssignConfig(center_sampling=False))
    assert rep.counts[1] > 0


def test_sweep_order_and_sampling_never_adds_ambiguity():
    ds = synth_dataset(15, seed=4)
    reps = ambiguity_sweep(ds, resize=None)
    assert [(r.center_sampling, r.fpn) for r in reps] == [(False, False), (False, True), (True, False), (True, True)]
    for off, on in ((reps[0], reps[2]), (reps[1], reps[3])):
        assert sum(on.counts[1:]) <= sum(off.counts[1:])


def test_fpn_reduces_ambiguity_on_synthetic_scenes():
    ds = synth_dataset(30, seed=6)
    reps = ambiguity_sweep(ds, resize=None)
    assert reps[1].percentages[0] >= reps[0].percentages[0]


def test_workers_do_not_change_results():
    ds = synth_dataset(12, seed=8)
    assert bpr_fcos(ds, workers=2) == bpr_fcos(ds, workers=1)
    assert bpr_anchor(ds, workers=2) == bpr_anchor(ds, workers=1)
    assert ambiguity(ds, workers=2) == ambiguity(ds, workers=1)


def test_anchor_policies_are_ordered():
    ds = synth_dataset(20, seed=9)
    vals = [bpr_anchor(ds, NATIVE, AnchorConfig(low_quality_policy=p)).bpr_percent for p in ("none", "threshold", "all")]
    assert vals[0] <= vals[1] <= vals[2]


def test_crowdhuman_preset_has_four_buckets():
    ds = synth_dataset(10, seed=2, crowd=True)
    rep = crowdhuman_ambiguity(ds, resize=None)
    assert len(rep.counts) == 4 and rep.labels == ("1", "2", "3", ">=4")
    assert rep.policy == "min_distance" and rep.center_sampling and rep.fpn
    assert math.isclose(sum(rep.percentages), 100.0)


def test_empty_inputs_raise():
    with pytest.raises(ValueError):
        bpr_fcos(Dataset((), (1,)))
    with pytest.raises(ValueError):
        bpr_fcos(dataset_of([]))
    with pytest.raises(ValueError):
        ambiguity(dataset_of([]), buckets=1)


def test_levels_from_names():
    assert LevelsConfig.from_names("fpn").is_fpn
    p4 = LevelsConfig.from_names("P4")
    assert p4.strides == (16,) and not p4.is_fpn and p4.descriptor == "P4"
    sub = LevelsConfig.from_names("P3,P4")
    assert sub.ranges == ((0.0, 64.0), (64.0, math.inf))
    with pytest.raises(ValueError):
        LevelsConfig.from_names("P9")


def test_report_schemas(tmp_path):
    bpr = BPRReport("rule", 3, 4)
    assert bpr.as_dict() == {"matching_rule": "rule", "bpr_percent": 75.0, "recalled": 3, "total": 4}
    with pytest.raises(ValueError):
        BPRReport("rule", 5, 4)
    amb = AmbiguityReport(True, False, (6, 3, 1))
    d = amb.as_dict()
    assert d["buckets"] == {"1": 60.0, "2": 30.0, ">=3": 10.0}
    assert [r["bucket"] for r in amb.rows()] == ["1", "2", ">=3"]
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    write_report(amb, a)
    write_report(amb, b)
    assert a.read_bytes() == b.read_bytes()
    assert json.loads(a.read_text())["counts"] == {"1": 6, "2": 3, ">=3": 1}
    c = tmp_path / "c.csv"
    write_report([bpr], c)
    assert c.read_text().splitlines()[0] == "matching_rule,bpr_percent,recalled,total"


def test_tables_format():
    assert "75.00" in format_bpr_table([BPRReport("rule", 3, 4)])
    text = format_ambiguity_table([AmbiguityReport(False, True, (1, 1, 0))])
    assert ">=3" in text and "50.00" in text
