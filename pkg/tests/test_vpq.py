import numpy as np
import pytest

from oracles import oracle_vpq, oracle_vpq_stats
from vipseval.core import VideoPanopticSequence
from vipseval.overlap import EvaluationError
from vipseval.synth import generate, random_scenario
from vipseval.vpq import SegmentTube, aggregate_vpq, tube_iou, vpq, vpq_window


def _block_pair(cats, frames=1):
    """gt thing 7 is a 2x4 block (8 px); pred covers 6 of them plus 2 extra."""
    g = np.zeros((frames, 4, 6), dtype=np.uint32)
    p = np.zeros((frames, 4, 6), dtype=np.uint32)
    g[:, 1:3, 0:4] = 7
    p[:, 1:3, 1:4] = 7  # 6 px inside gt
    p[:, 1:3, 4] = 7  # 2 px outside
    g[g == 0] = 11
    p[p == 0] = 11
    segs = {7: 3, 11: 1}
    return (VideoPanopticSequence("v", g, segs, cats), VideoPanopticSequence("v", p, segs, cats))


def test_tube_iou_examples(cats):
    gt, pred = _block_pair(cats, frames=2)
    g = SegmentTube.from_sequence(gt, 7, 0, 2)
    p = SegmentTube.from_sequence(pred, 7, 0, 2)
    assert tube_iou(g, g) == 1.0
    assert tube_iou(p, g) == pytest.approx((6 + 6) / (10 + 10), abs=0)
    # set-arithmetic oracle
    gs = set(map(tuple, np.argwhere(gt.frames == 7)))
    ps = set(map(tuple, np.argwhere(pred.frames == 7)))
    assert tube_iou(p, g) == len(gs & ps) / len(gs | ps)
    other = SegmentTube(9, 3, 0, np.roll(g.masks, 3, axis=1) & ~g.masks)
    assert tube_iou(other, g) == 0.0


def test_tube_iou_ignores_gt_void():
    g = SegmentTube(1, 3, 0, np.array([[[1, 1, 0, 0]]], dtype=bool))
    p = SegmentTube(2, 3, 0, np.array([[[1, 1, 1, 1]]], dtype=bool))
    void = np.array([[[0, 0, 1, 1]]], dtype=bool)
    assert tube_iou(p, g) == 0.5
    assert tube_iou(p, g, gt_void=void) == 1.0


def test_single_tube_window_stats(cats):
    gt, pred = _block_pair(cats)
    stats = vpq_window(gt, pred, 1)
    s = stats[3]
    assert (s.tp, s.fp, s.fn) == (1, 0, 0)
    assert s.iou_sum == pytest.approx(0.6, abs=1e-15)
    assert s.vpq == pytest.approx(0.6, abs=1e-15)
    oracle = oracle_vpq_stats(gt, pred, 1)
    assert float(oracle[3]["iou_sum"]) == s.iou_sum


def test_missed_instance_is_fn(cats):
    gt, _ = _block_pair(cats)
    pred = VideoPanopticSequence("v", np.where(gt.frames == 7, 0, gt.frames), {11: 1}, cats)
    s = vpq_window(gt, pred, 1)[3]
    assert (s.tp, s.fp, s.fn, s.iou_sum) == (0, 0, 1, 0.0)
    assert s.vpq == 0.0  # iou_sum / (tp + 0.5)


def test_perfect_prediction(scene):
    for k in (1, 2, 3, 6):
        for c, s in vpq_window(scene, scene, k).items():
            assert s.iou_sum == s.tp and s.fp == s.fn == 0
    rep = vpq([scene], [scene])
    assert rep.overall_vpq == 1.0 and all(v == 1.0 for v in rep.vpq_k.values())


def test_pred_on_void_rule(cats):
    g = np.zeros((1, 2, 4), dtype=np.uint32)
    g[0, :, :2] = 11
    p = g.copy()
    p[0, :, 2:] = 7  # pred thing entirely on gt void
    gt = VideoPanopticSequence("v", g, {11: 1}, cats)
    pred = VideoPanopticSequence("v", p, {11: 1, 7: 3}, cats)
    assert 3 not in vpq_window(gt, pred, 1)
    assert vpq_window(gt, pred, 1, ignore_void_preds=False)[3].fp == 1


def test_short_video_uses_whole_clip(scene):
    a = vpq_window(scene, scene, 6)
    b = vpq_window(scene, scene, 2)
    assert a == b  # T = 2: both are the single whole-video clip


def test_id_switch_hurts_long_windows(cats):
    T = 6
    g = np.full((T, 4, 4), 11, dtype=np.uint32)
    g[:, 1:3, 1:3] = 7
    p = g.copy()
    p[3:][p[3:] == 7] = 9
    gt = VideoPanopticSequence("v", g, {11: 1, 7: 3}, cats)
    pred = VideoPanopticSequence("v", p, {11: 1, 7: 3, 9: 3}, cats)
    rep, base = vpq([gt], [pred], [1, 6]), vpq([gt], [gt], [1, 6])
    assert rep.vpq_k[1] == base.vpq_k[1]
    assert rep.vpq_k[6] < base.vpq_k[6]
    o = oracle_vpq([(gt, pred)], [1, 6])
    assert rep.vpq_k[6] == pytest.approx(float(o[6][0]), abs=1e-12)


@pytest.mark.parametrize("seed", range(60))
def test_matches_brute_force_oracle(seed):
    pair = generate(random_scenario(seed, 6, 6, 5))
    rep = vpq([pair.gt], [pair.pred], [1, 2, 4, 6], pair.categories)
    o = oracle_vpq([(pair.gt, pair.pred)], [1, 2, 4, 6])
    for k in (1, 2, 4, 6):
        assert abs(rep.vpq_k[k] - float(o[k][0])) <= 1e-9
        classes = rep.per_window[k].classes
        assert set(classes) == {c for c, s in o[k][1].items() if s["tp"] + s["fp"] + s["fn"]}
        for c, s in classes.items():
            os_ = o[k][1][c]
            assert (s.tp, s.fp, s.fn) == (os_["tp"], os_["fp"], os_["fn"])
            assert abs(s.iou_sum - float(os_["iou_sum"])) <= 1e-12


def test_multi_video_pooling_matches_oracle():
    pairs = [generate(random_scenario(s, 5, 5, 4, video_id=f"v{s}")) for s in range(8)]
    cats = None
    rep = vpq([p.gt for p in pairs], [p.pred for p in pairs], [1, 2])
    o = oracle_vpq([(p.gt, p.pred) for p in pairs], [1, 2])
    for k in (1, 2):
        assert abs(rep.vpq_k[k] - float(o[k][0])) <= 1e-9


def test_aggregate_vpq():
    assert f"{aggregate_vpq([51.6104, 50.5923, 49.4210, 48.5340]):.4f}" == "50.0394"
    # the mean is 53.73795; the published 53.7380 sits on the rounding boundary
    assert abs(aggregate_vpq([54.7484, 54.0604, 53.2963, 52.8467]) - 53.7380) <= 0.00005 + 1e-9
    assert aggregate_vpq([0.3] * 4) == pytest.approx(0.3, abs=1e-16)
    with pytest.raises(ValueError):
        aggregate_vpq([])


def test_video_id_errors(scene):
    other = VideoPanopticSequence("v1", scene.frames, scene.segments, scene.categories)
    with pytest.raises(EvaluationError, match="share no video ids"):
        vpq([scene], [other])
    with pytest.raises(EvaluationError, match="'v1' is missing from the predictions"):
        vpq([scene, other], [scene])


def test_dimension_mismatch(scene, cats):
    small = VideoPanopticSequence("v0", scene.frames[:, :3], scene.segments, cats)
    with pytest.raises(EvaluationError, match="gt is"):
        vpq([scene], [small])


def test_unknown_pred_category(scene, cats):
    from vipseval.core import CategoryTable

    wider = CategoryTable(list(cats) + [{"category_id": 9, "name": "x", "is_thing": True}])
    pred = VideoPanopticSequence("v0", np.where(scene.frames == 7, 5, scene.frames),
                                 {**scene.segments, 5: 9}, wider)
    with pytest.raises(EvaluationError, match="unknown category 9"):
        vpq([scene], [pred], cats=cats)


def test_report_json_carries_percentages(scene):
    js = vpq([scene], [scene]).to_json()
    assert js["overall_vpq_percent"] == 100.0
    assert js["per_window"]["1"]["classes"]["3"]["tp"] == 2
