import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dbtkit.dataset import Box2D, Prediction, VolumeKey
from dbtkit.gridcodec import GridSpec, decode_grid
from dbtkit.postprocess import (
    MergeRule,
    combine_volume_predictions,
    filter_by_breast_mask,
    half_ranges,
    iou,
    mask_coverage,
    postprocess_volume,
    ratio_nms,
)
from factories import random_predictions
from oracles import iou_pixels

KEY = VolumeKey("P", "S", "L", "CC")


def pred(x, y, w, h, score, z=0, key=KEY):
    return Prediction(key, Box2D(x, y, w, h), z, score)


def test_iou_examples():
    a = Box2D(0, 0, 10, 10)
    assert iou(a, a) == 1.0
    assert iou(a, Box2D(20, 20, 5, 5)) == 0.0
    assert iou(a, Box2D(10, 0, 5, 5)) == 0.0
    assert iou(a, Box2D(5, 0, 10, 10)) == pytest.approx(1 / 3)
    assert iou_pixels((0, 0, 10, 10), (5, 0, 10, 10)) == pytest.approx(1 / 3)


def test_iou_matches_pixel_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(300):
        a = tuple(int(v) for v in rng.integers(0, 30, 2)) + tuple(int(v) for v in rng.integers(1, 20, 2))
        b = tuple(int(v) for v in rng.integers(0, 30, 2)) + tuple(int(v) for v in rng.integers(1, 20, 2))
        assert iou(Box2D(*a), Box2D(*b)) == pytest.approx(iou_pixels(a, b), abs=1e-12)


box_st = st.builds(Box2D, st.floats(-100, 100), st.floats(-100, 100),
                   st.floats(0.1, 100), st.floats(0.1, 100))


@given(box_st, box_st)
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert v == pytest.approx(iou(b, a), abs=1e-12)
    assert 0 <= v <= 1 + 1e-12
    assert iou(a, a) == pytest.approx(1.0)


def test_half_ranges():
    assert half_ranges(1) == [range(0, 1)]
    assert half_ranges(5) == [range(0, 3), range(3, 5)]
    assert half_ranges(4) == [range(0, 2), range(2, 4)]


def grid_with(spec, cells):
    out = np.zeros((5,) + spec.shape)
    for (r, c), obj in cells.items():
        out[0, r, c] = obj
    return out


def test_combine_identical_slices():
    spec = GridSpec(2, 2)
    g = grid_with(spec, {(0, 1): 0.8})
    g[1, 0, 1] = 0.2
    preds = combine_volume_predictions(np.stack([g] * 6), spec, 0.5, KEY)
    single = decode_grid(g, spec, 0.5)
    assert len(preds) == 2
    assert [p.box for p in preds] == [single[0].box] * 2
    assert [p.center_slice for p in preds] == [1, 4]


def test_combine_averages_objectness():
    spec = GridSpec(1, 1)
    grids = np.stack([grid_with(spec, {(0, 0): 0.2}), grid_with(spec, {(0, 0): 0.8}),
                      grid_with(spec, {(0, 0): 0.0}), grid_with(spec, {(0, 0): 0.0})])
    preds = combine_volume_predictions(grids, spec, 0.1)
    assert len(preds) == 1
    assert preds[0].score == pytest.approx(0.5)
    assert preds[0].center_slice == 0


def test_combine_mean_matches_bruteforce():
    rng = np.random.default_rng(4)
    spec = GridSpec(3, 4)
    for z in (1, 2, 5, 8):
        grids = rng.random((z, 5, 3, 4))
        preds = combine_volume_predictions(grids, spec, 0.0)
        expected = []
        for half in half_ranges(z):
            for r in range(3):
                for c in range(4):
                    total = 0.0
                    for s in half:
                        total += grids[s, 0, r, c]
                    expected.append(total / len(half))
        assert len(preds) == len(expected)
        np.testing.assert_allclose([p.score for p in preds], expected, atol=1e-9)


def test_filter_mask_cases():
    mask = np.zeros((1, 20, 20), bool)
    mask[0, :, :10] = True
    inside = pred(1, 1, 5, 5, 0.5)
    outside = pred(12, 1, 5, 5, 0.5)
    half = pred(5, 0, 10, 10, 0.5)   # columns 5..14, 5 of 10 in mask
    just_under = pred(6, 0, 10, 10, 0.5)
    assert mask_coverage(half.box, mask[0]) == 0.5
    assert filter_by_breast_mask([inside, outside, half, just_under], mask) == [inside, half]


def test_filter_coverage_pixel_count_oracle():
    rng = np.random.default_rng(5)
    for _ in range(200):
        m = rng.random((15, 15)) < 0.5
        x, y = rng.uniform(-3, 12, 2)
        w, h = rng.uniform(0.8, 10, 2)
        box = Box2D(x, y, w, h)
        inside = total = 0
        for r in range(-10, 30):
            for c in range(-10, 30):
                if x <= c + 0.5 < x + w and y <= r + 0.5 < y + h:
                    total += 1
                    inside += bool(0 <= r < 15 and 0 <= c < 15 and m[r, c])
        if total:
            assert mask_coverage(box, m) == pytest.approx(inside / total)


def test_filter_uses_nearest_slice_and_is_identity_on_full_mask():
    mask = np.zeros((3, 10, 10), bool)
    mask[2] = True
    p = pred(1, 1, 4, 4, 0.5, z=7)
    assert filter_by_breast_mask([p], mask) == [p]
    assert filter_by_breast_mask([pred(1, 1, 4, 4, 0.5, z=0)], mask) == []
    preds = random_predictions(np.random.default_rng(0), 30, extent=5)
    assert filter_by_breast_mask(preds, np.ones((1, 300, 300), bool)) == preds


def test_nms_merges_comparable_scores():
    a = pred(0, 0, 10, 10, 0.9)
    b = pred(0, 0, 10, 8, 0.5)  # IoU 0.8
    assert ratio_nms([b, a]) == [a]


def test_nms_keeps_ratio_above_limit():
    a = pred(0, 0, 10, 10, 0.9)
    b = pred(0, 0, 10, 8, 0.045)  # ratio 20
    assert ratio_nms([a, b]) == [a, b]
    # ratio exactly 10 is not "smaller than 10"
    c = pred(0, 0, 10, 8, 0.0625)
    d = pred(0, 0, 10, 10, 0.625)
    assert len(ratio_nms([c, d])) == 2


def test_nms_iou_gate():
    a = pred(0, 0, 10, 10, 0.9)
    b = pred(7, 0, 10, 10, 0.8)  # IoU 3/17
    assert ratio_nms([a, b]) == [a, b]
    # IoU exactly 0.5 does not merge
    c = pred(0, 0, 10, 10, 0.9)
    d = pred(0, 0, 10, 5, 0.8)
    assert len(ratio_nms([c, d])) == 2


def test_nms_suppressed_box_does_not_suppress():
    a = pred(0, 0, 10, 10, 0.9)
    b = pred(3, 0, 10, 10, 0.8)   # IoU(a,b) = 70/130 > 0.5
    c = pred(6, 0, 10, 10, 0.7)   # IoU(a,c) = 40/160, IoU(b,c) > 0.5
    assert ratio_nms([c, b, a]) == [a, c]


def test_nms_ignores_other_volumes():
    other = VolumeKey("P", "S", "R", "CC")
    a = pred(0, 0, 10, 10, 0.9)
    b = pred(0, 0, 10, 10, 0.8, key=other)
    assert ratio_nms([a, b]) == [a, b]


def nms_postcondition_holds(out, rule):
    for i in range(len(out)):
        for j in range(i + 1, len(out)):
            a, b = out[i], out[j]
            if a.volume_key != b.volume_key:
                continue
            ratio = max(a.score, b.score) / min(a.score, b.score)
            if ratio < rule.max_score_ratio and iou(a.box, b.box) > rule.min_iou:
                return False
    return True


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 25))
def test_nms_properties(seed, n):
    rng = np.random.default_rng(seed)
    preds = random_predictions(rng, n, extent=60)
    rule = MergeRule()
    out = ratio_nms(preds, rule)
    assert nms_postcondition_holds(out, rule)
    assert ratio_nms(out, rule) == out
    assert len(out) <= len(preds)
    assert all(p in preds for p in out)
    assert [p.score for p in out] == sorted((p.score for p in out), reverse=True)


def test_merge_rule_validation():
    with pytest.raises(ValueError):
        MergeRule(0.5, 0.5)
    with pytest.raises(ValueError):
        MergeRule(10, 0)


def test_postprocess_volume_end_to_end():
    spec = GridSpec(2, 2)
    grids = np.zeros((4, 5, 2, 2))
    grids[:, 0, 0, 0] = 0.9
    grids[:, 3:, 0, 0] = np.log(40 / 256)
    grids[:, 0, 1, 1] = 0.6   # outside the mask below
    grids[:, 3:, 1, 1] = np.log(40 / 256)
    mask = np.zeros((4, 192, 192), bool)
    mask[:, :96, :96] = True
    out = postprocess_volume(grids, mask, spec, KEY, scale_factor=2)
    # the two halves give identical boxes with equal scores; NMS merges them
    assert len(out) == 1
    (p,) = out
    assert p.scale_factor == 1
    assert p.box == Box2D(2 * (48 - 20), 2 * (48 - 20), 80, 80)
    assert p.score == pytest.approx(0.9)
    assert p.center_slice == 0
