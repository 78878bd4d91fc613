"""Segmentation and Tracking Quality, STQ = sqrt(AQ * SQ).

SQ is the class mean IoU of the semantic collapse of both sides. AQ scores
whole-video thing tracks class-agnostically: for a gt track g,

    AQ(g) = 1/|g| * sum_p |p & g| * IoU(p, g)

over every pred thing track p that touches g. Pixels that are void in the gt
never count towards a pred track.
"""

from __future__ import annotations

import math
from typing import Dict, List, Optional

import numpy as np

from vipseval.core import CategoryTable, StqReport
from vipseval.overlap import EvaluationError, map_videos, overlap_tables, pair_videos


def _video_components(tab, cats: CategoryTable):
    total = tab.counts.sum(axis=0)
    cat_ids = cats.ids
    pos = {c: i + 1 for i, c in enumerate(cat_ids)}
    gidx = np.array([0] + [pos[int(c)] for c in tab.gt_cat[1:]], dtype=np.int64)
    pidx = np.array([0] + [pos[int(c)] for c in tab.pred_cat[1:]], dtype=np.int64)
    n = len(cat_ids) + 1
    conf = np.zeros((n, n), dtype=np.int64)
    np.add.at(conf, (gidx[:, None], pidx[None, :]), total)

    is_thing = {c: cats.is_thing(c) for c in cat_ids}
    g_thing = [i for i in range(1, len(tab.gt_ids)) if is_thing[int(tab.gt_cat[i])]]
    p_thing = [j for j in range(1, len(tab.pred_ids)) if is_thing[int(tab.pred_cat[j])]]
    tracks = []
    pred_area = total[1:, :].sum(axis=0)
    for i in g_thing:
        g_area = int(total[i].sum())
        if g_area == 0:
            continue
        terms = []
        for j in p_thing:
            inter = int(total[i, j])
            if inter:
                union = g_area + int(pred_area[j]) - inter
                terms.append(inter * (inter / union))
        tracks.append({
            "video_id": tab.video_id,
            "track_id": int(tab.gt_ids[i]),
            "category_id": int(tab.gt_cat[i]),
            "aq": math.fsum(terms) / g_area,
        })
    return conf, tracks


def _class_iou(conf: np.ndarray, cat_ids) -> Dict[int, float]:
    body = conf[1:, :]  # gt-void row dropped
    out = {}
    for i, c in enumerate(cat_ids, start=1):
        tp = int(body[i - 1, i])
        fn = int(body[i - 1].sum()) - tp
        fp = int(body[:, i].sum()) - tp
        if tp + fp + fn > 0:
            out[c] = tp / (tp + fp + fn)
    return out


def _evaluate(gt_set, pred_set, cats, threads):
    pairs = pair_videos(gt_set, pred_set)

    def per_video(vid, g, p):
        c = cats or g.categories
        conf, tracks = _video_components(overlap_tables(g, p, c), c)
        return conf, tracks, c

    results = map_videos(per_video, pairs, threads)
    used = results[0][2]
    if any(r[2] != used for r in results):
        raise EvaluationError("videos disagree on the category table; pass one explicitly")
    conf = sum(r[0] for r in results)
    tracks = [t for r in results for t in r[1]]
    return conf, tracks, used, len(pairs)


def _sq_value(class_iou: Dict[int, float]) -> float:
    return math.fsum(class_iou.values()) / len(class_iou) if class_iou else 0.0


def _aq_value(tracks: List[dict]) -> Optional[float]:
    if not tracks:
        return None
    return math.fsum(t["aq"] for t in tracks) / len(tracks)


def sq(gt_set, pred_set, cats: Optional[CategoryTable] = None, threads: int = 1):
    """Returns ``(sq, per-class IoU)``."""
    conf, _, cats, _ = _evaluate(gt_set, pred_set, cats, threads)
    ious = _class_iou(conf, cats.ids)
    return _sq_value(ious), ious


def aq(gt_set, pred_set, cats: Optional[CategoryTable] = None, threads: int = 1):
    """Returns ``(aq, per-track AQ records)``; ``aq`` is None without gt thing tracks."""
    _, tracks, _, _ = _evaluate(gt_set, pred_set, cats, threads)
    return _aq_value(tracks), tracks


def stq(gt_set, pred_set, cats: Optional[CategoryTable] = None, threads: int = 1) -> StqReport:
    conf, tracks, cats, nvid = _evaluate(gt_set, pred_set, cats, threads)
    ious = _class_iou(conf, cats.ids)
    config = {
        "aq_scope": "thing tracks, class-agnostic association over whole videos",
        "sq_scope": "all classes after semantic collapse, gt-void pixels excluded",
        "num_videos": nvid,
    }
    return StqReport(_aq_value(tracks), _sq_value(ious), ious, tracks, config)
