"""Video Panoptic Quality over sliding clip windows.

For each window size k every stride-1 clip of k frames is scored: segments
become tubes, a gt/pred tube pair of the same category with IoU > 0.5 is a
true positive, the rest are misses (FN) and false alarms (FP). Counts and IoU
sums are pooled per class over all clips and videos before dividing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from vipseval.core import (
    CategoryTable,
    ClassStats,
    VideoPanopticSequence,
    VpqReport,
    WindowResult,
)
from vipseval.overlap import (
    EvaluationError,
    OverlapTables,
    map_videos,
    overlap_tables,
    pair_videos,
)

DEFAULT_WINDOWS = (1, 2, 4, 6)


@dataclass
class SegmentTube:
    """One segment's per-frame masks over a clip ``[t0, t0 + k - 1]``."""

    segment_id: int
    category_id: int
    t0: int
    masks: np.ndarray

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=bool)
        if self.masks.ndim != 3:
            raise ValueError("tube masks must be k x H x W")
        if not self.masks.any():
            raise ValueError(f"tube of segment {self.segment_id} has no pixels")

    @property
    def span(self) -> tuple:
        return self.t0, self.t0 + self.masks.shape[0] - 1

    @property
    def area(self) -> int:
        return int(self.masks.sum())

    @classmethod
    def from_sequence(cls, seq: VideoPanopticSequence, segment_id: int, t0: int, k: int):
        return cls(segment_id, seq.segments[segment_id], t0, seq.frames[t0:t0 + k] == segment_id)


def tube_iou(p: SegmentTube, g: SegmentTube, gt_void: Optional[np.ndarray] = None) -> float:
    """Pixel IoU of two tubes over the same span.

    ``gt_void`` is a k x H x W mask of gt-void pixels; those pixels are removed
    from both the intersection and the union.
    """
    if p.span != g.span or p.masks.shape != g.masks.shape:
        raise ValueError(f"tubes cover different spans: {p.span} vs {g.span}")
    pm, gm = p.masks, g.masks
    if gt_void is not None:
        keep = ~np.asarray(gt_void, dtype=bool)
        pm, gm = pm & keep, gm & keep
    union = int((pm | gm).sum())
    if union == 0:
        return 0.0
    return int((pm & gm).sum()) / union


@dataclass
class _ClassAcc:
    ious: List[float] = field(default_factory=list)
    tp: int = 0
    fp: int = 0
    fn: int = 0


def _clip_sums(counts: np.ndarray, k: int) -> np.ndarray:
    t = counts.shape[0]
    csum = np.zeros((t + 1,) + counts.shape[1:], dtype=np.int64)
    np.cumsum(counts, axis=0, out=csum[1:])
    if k >= t:
        return csum[t:t + 1] - csum[0:1]
    return csum[k:] - csum[:-k]


def _window_accumulate(tab: OverlapTables, k: int, ignore_void_preds: bool) -> Dict[int, _ClassAcc]:
    s = _clip_sums(tab.counts, k)
    gt_area = s[:, 1:, :].sum(axis=2)
    pred_area = s[:, :, 1:].sum(axis=1)
    pred_void = s[:, 0, 1:]
    inter = s[:, 1:, 1:]
    union = gt_area[:, :, None] + (pred_area - pred_void)[:, None, :] - inter
    gcat, pcat = tab.gt_cat[1:], tab.pred_cat[1:]
    same = gcat[:, None] == pcat[None, :]
    # IoU > 1/2 compared in integers
    match = same[None] & (inter > 0) & (2 * inter > union)
    g_hits = match.sum(axis=2)
    p_hits = match.sum(axis=1)
    assert g_hits.max(initial=0) <= 1 and p_hits.max(initial=0) <= 1, "non-unique tube match"

    acc: Dict[int, _ClassAcc] = {}

    def get(c):
        c = int(c)
        if c not in acc:
            acc[c] = _ClassAcc()
        return acc[c]

    for n, gi, pj in zip(*np.nonzero(match)):
        a = get(gcat[gi])
        a.tp += 1
        a.ious.append(int(inter[n, gi, pj]) / int(union[n, gi, pj]))
    fn_mask = (gt_area > 0) & (g_hits == 0)
    for c in gcat[np.nonzero(fn_mask)[1]]:
        get(c).fn += 1
    fp_mask = (pred_area > 0) & (p_hits == 0)
    if ignore_void_preds:
        fp_mask &= ~(2 * pred_void > pred_area)
    for c in pcat[np.nonzero(fp_mask)[1]]:
        get(c).fp += 1
    return acc


def _finalize(accs: Sequence[Dict[int, _ClassAcc]]) -> Dict[int, ClassStats]:
    pooled: Dict[int, _ClassAcc] = {}
    for acc in accs:
        for c, a in acc.items():
            p = pooled.setdefault(c, _ClassAcc())
            p.ious.extend(a.ious)
            p.tp += a.tp
            p.fp += a.fp
            p.fn += a.fn
    return {
        c: ClassStats(math.fsum(a.ious), a.tp, a.fp, a.fn)
        for c, a in sorted(pooled.items())
        if a.tp + a.fp + a.fn > 0
    }


def vpq_window(gt: VideoPanopticSequence, pred: VideoPanopticSequence, k: int,
               cats: Optional[CategoryTable] = None,
               ignore_void_preds: bool = True) -> Dict[int, ClassStats]:
    """Per-class tube statistics of one video pair for window size ``k``."""
    if k < 1:
        raise ValueError("window size must be >= 1")
    tab = overlap_tables(gt, pred, cats or gt.categories)
    return _finalize([_window_accumulate(tab, k, ignore_void_preds)])


def aggregate_vpq(window_scores: Sequence[float]) -> float:
    """Overall VPQ: the arithmetic mean of the per-window scores."""
    scores = list(window_scores)
    if not scores:
        raise ValueError("no window scores to aggregate")
    return math.fsum(scores) / len(scores)


def vpq(gt_set, pred_set, windows: Sequence[int] = DEFAULT_WINDOWS,
        cats: Optional[CategoryTable] = None, threads: int = 1,
        ignore_void_preds: bool = True) -> VpqReport:
    """Evaluate a set of videos; see :func:`vipseval.overlap.pair_videos` for inputs."""
    windows = [int(k) for k in windows]
    if not windows:
        raise ValueError("windows must be nonempty")
    if min(windows) < 1:
        raise ValueError("window sizes must be >= 1")
    pairs = pair_videos(gt_set, pred_set)

    def per_video(vid, g, p):
        tab = overlap_tables(g, p, cats or g.categories)
        return {k: _window_accumulate(tab, k, ignore_void_preds) for k in windows}

    results = map_videos(per_video, pairs, threads)
    per_window = {
        k: WindowResult(k, _finalize([r[k] for r in results])) for k in windows
    }
    config = {
        "windows": windows,
        "match_rule": "same category and tube IoU > 0.5",
        "clip_stride": 1,
        "short_video_rule": "videos shorter than k contribute one whole-video clip",
        "ignore_void_preds": ignore_void_preds,
        "class_mean": "unweighted over classes with tp + fp + fn > 0",
        "num_videos": len(pairs),
    }
    return VpqReport(windows, per_window, config)
