import logging

import numpy as np
import pandas as pd
import pytest
from openpyxl import load_workbook

from gags.config import QueryConfig
from gags.errors import ConfigError, DataError, MissingGroundTruthError
from gags.query import (
    EvalRecord,
    QueryResult,
    RelevancyMap,
    box_hit,
    eval_metrics,
    export_summary,
    iou,
    localize,
    normalize_map,
    query_view,
    relevancy,
    relevancy_map,
    save_heatmap,
    save_mask,
    segment,
    smooth,
    summary_table,
)
from gags.tensorio import read_pgm

E = np.eye(4)


def test_query_equal_to_a_canonical_phrase_caps_relevancy():
    f = np.array([0.6, 0.8, 0.0, 0.0])
    assert relevancy(f, E[1], np.stack([E[1], E[2]])) <= 0.5 + 1e-12
    assert relevancy(f, E[1], E[1]) == pytest.approx(0.5)


def test_relevancy_direct_evaluation():
    value = relevancy(E[0], E[0], np.tile(-E[0], (4, 1)))
    assert value == pytest.approx(np.e / (np.e + np.exp(-1)), abs=1e-6)
    assert value == pytest.approx(0.8808, abs=1e-4)


def test_relevancy_is_monotone_in_text_similarity():
    canon = np.stack([E[2], E[3]])
    angles = np.linspace(0.0, np.pi, 9)
    f = np.stack([np.cos(angles), np.sin(angles), np.zeros(9), np.zeros(9)], axis=1)
    scores = relevancy(f, E[0], canon)
    assert np.all(np.diff(scores) < 0)


def test_relevancy_needs_canonical_phrases():
    with pytest.raises(DataError):
        relevancy(E[0], E[0], np.zeros((0, 4)))


def test_smooth_constant_and_spike():
    np.testing.assert_allclose(smooth(np.full((6, 6), 0.3), 3), 0.3)
    spike = np.zeros((5, 5))
    spike[2, 2] = 9.0
    assert smooth(spike, 3)[2, 2] == pytest.approx(1.0)


def test_smooth_ignores_invalid_pixels():
    values = np.full((3, 3), 1.0)
    values[1, 1] = 100.0
    valid = np.ones((3, 3), dtype=bool)
    valid[1, 1] = False
    out = smooth(values, 3, valid)
    assert out[1, 1] == 0.0
    np.testing.assert_allclose(out[valid], 1.0)


def test_smooth_rejects_even_kernels():
    with pytest.raises(ConfigError):
        smooth(np.zeros((3, 3)), 4)


def test_localize_single_max_and_ties():
    values = np.zeros((4, 5))
    values[2, 3] = 1.0
    assert localize(values) == (3, 2)
    values[1, 4] = 1.0
    assert localize(values) == (4, 1)
    valid = np.ones((4, 5), dtype=bool)
    valid[1, 4] = False
    assert localize(values, valid) == (3, 2)
    with pytest.raises(DataError):
        localize(values, np.zeros((4, 5), dtype=bool))


def _rmap(values, valid=None):
    valid = np.ones(values.shape, dtype=bool) if valid is None else valid
    normalized, degenerate = normalize_map(values, valid)
    return RelevancyMap(raw=values, smoothed=values, normalized=normalized, valid=valid, degenerate=degenerate)


def test_segment_binary_map():
    values = np.array([[0.0, 1.0], [1.0, 0.0]])
    np.testing.assert_array_equal(segment(_rmap(values)), values.astype(bool))


def test_constant_map_is_degenerate(caplog):
    with caplog.at_level(logging.WARNING, logger="gags.query"):
        rmap = _rmap(np.full((3, 3), 0.7))
    assert rmap.degenerate
    assert not segment(rmap).any()
    assert "constant" in caplog.text


def test_zero_threshold_takes_every_valid_pixel():
    values = np.arange(9, dtype=float).reshape(3, 3)
    valid = np.ones((3, 3), dtype=bool)
    valid[0, 0] = False
    np.testing.assert_array_equal(segment(_rmap(values, valid), threshold=0.0), valid)


def test_relevancy_map_points_at_the_object():
    f_clip = np.tile(E[1], (8, 8, 1))
    f_clip[2:5, 3:6] = E[0]
    valid = np.ones((8, 8), dtype=bool)
    canon = np.stack([E[2], E[3]])
    rmap, result = query_view("cup", 0, f_clip, valid, E[0], canon, QueryConfig(kernel=3))
    assert box_hit(result.localization, (3, 2, 5, 4))
    assert result.mask[3, 4]
    assert not result.mask[7, 0]
    assert 0.0 <= rmap.normalized.min() and rmap.normalized.max() == pytest.approx(1.0)
    features = relevancy_map(f_clip, valid, E[0], canon, kernel=3, smooth_features=True)
    assert localize(features.smoothed) == localize(rmap.smoothed)


def test_iou_examples():
    gt = np.zeros((6, 6), dtype=bool)
    gt[1:5, 1:5] = True
    assert iou(gt, gt) == (1.0, False)
    other = np.zeros((6, 6), dtype=bool)
    other[5, 5] = True
    assert iou(other, gt)[0] == 0.0
    inner = np.zeros((6, 6), dtype=bool)
    inner[2:4, 2:4] = True
    assert iou(inner, gt)[0] == pytest.approx(0.25)
    assert iou(np.zeros((2, 2), bool), np.zeros((2, 2), bool)) == (1.0, True)


def test_box_bounds_are_inclusive():
    assert box_hit((3, 2), (3, 2, 5, 4))
    assert box_hit((5, 4), (3, 2, 5, 4))
    assert not box_hit((6, 4), (3, 2, 5, 4))


def _result(label, view, point, mask):
    return QueryResult(label=label, view=view, localization=point, mask=mask, peak=1.0)


def test_eval_metrics():
    gt_mask = np.zeros((4, 4), dtype=bool)
    gt_mask[:2, :2] = True
    truth = {("cup", 0): {"box": (0, 0, 1, 1), "mask": gt_mask}, ("cup", 1): {"box": (0, 0, 1, 1), "mask": gt_mask}}
    results = [_result("cup", 0, (1, 1), gt_mask), _result("cup", 1, (3, 3), np.zeros((4, 4), bool))]
    record = eval_metrics(results, truth)
    assert record.mAcc == pytest.approx(0.5)
    assert record.mIoU == pytest.approx(0.5)
    assert record.to_json()["queries"] == 2
    with pytest.raises(MissingGroundTruthError):
        eval_metrics([_result("lamp", 0, (0, 0), gt_mask)], truth)


def test_summary_table_and_workbook(tmp_path):
    record = EvalRecord(
        entries=[
            {"query": "mug", "view": 0, "hit": True, "iou": 0.8},
            {"query": "mug", "view": 1, "hit": False, "iou": 0.4},
            {"query": "lamp", "view": 0, "hit": True, "iou": 1.0},
        ],
        mAcc=2 / 3,
        mIoU=2.2 / 3,
    )
    df = summary_table(record)
    assert list(df.columns) == ["query", "views", "accuracy", "mean_iou"]
    assert list(df["query"]) == ["lamp", "mug", "overall"]
    mug = df[df["query"] == "mug"].iloc[0]
    assert mug["views"] == 2
    assert mug["accuracy"] == pytest.approx(0.5)
    assert mug["mean_iou"] == pytest.approx(0.6)

    path = export_summary(df, tmp_path / "summary.xlsx")
    sheet = load_workbook(path)["Summary"]
    assert sheet["A1"].value == "query"
    assert sheet["A4"].value == "overall"
    back = pd.read_excel(path, sheet_name="Summary")
    assert len(back) == 3


def test_empty_summary_table():
    assert summary_table(EvalRecord(entries=[], mAcc=0.0, mIoU=0.0)).empty


def test_heatmap_and_mask_files(tmp_path):
    rmap = _rmap(np.linspace(0.0, 1.0, 16).reshape(4, 4))
    save_heatmap(rmap, tmp_path / "heat.png")
    mask = segment(rmap)
    save_mask(mask, tmp_path / "mask.pgm")
    assert (tmp_path / "heat.png").exists()
    np.testing.assert_array_equal(read_pgm(tmp_path / "mask.pgm"), mask.astype(np.uint32))


def test_higher_thresholds_give_nested_masks():
    rng = np.random.default_rng(17)
    valid = rng.uniform(size=(12, 12)) > 0.1
    rmap = _rmap(rng.uniform(size=(12, 12)), valid)
    masks = [segment(rmap, threshold=t) for t in np.linspace(0.0, 1.0, 11)]
    for looser, tighter in zip(masks, masks[1:]):
        assert not np.any(tighter & ~looser)
    np.testing.assert_array_equal(masks[0], valid)


def _unit(a):
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


def test_relevancy_does_not_depend_on_canonical_order():
    rng = np.random.default_rng(18)
    f_clip, f_text, canon = _unit(rng.normal(size=(6, 7, 5))), _unit(rng.normal(size=5)), _unit(rng.normal(size=(4, 5)))
    expected = relevancy(f_clip, f_text, canon)
    for _ in range(5):
        np.testing.assert_allclose(relevancy(f_clip, f_text, canon[rng.permutation(4)]), expected, atol=1e-15)


def test_localization_survives_increasing_transforms():
    rng = np.random.default_rng(19)
    values = rng.uniform(size=(9, 11))
    valid = rng.uniform(size=(9, 11)) > 0.2
    for transform in (np.exp, lambda v: v ** 3 + 2.0, lambda v: 5.0 * v - 1.0, lambda v: 1.0 / (1.0 + np.exp(-4 * v))):
        assert localize(transform(values)) == localize(values)
        assert localize(transform(values), valid) == localize(values, valid)
