"""Per-frame gt x pred overlap tables shared by the VPQ and STQ engines.

For a video pair, ``counts[t, i, j]`` is the number of pixels of frame ``t``
whose gt segment is ``gt_ids[i]`` and pred segment is ``pred_ids[j]``. Index 0
on either axis is void. Every tube and track statistic the metrics need is a
sum of these tables over some frame range.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Mapping, Sequence, Tuple, Union

import numpy as np

from vipseval.core import CategoryTable, VideoPanopticSequence, VipsEvalError, VOID

# Ids below this bound are decoded with a dense lookup table.
_LUT_LIMIT = 1 << 22

THREADS_ENV = "VIPSEVAL_THREADS"


class EvaluationError(VipsEvalError):
    """Raised when gt and pred cannot be compared."""


@dataclass
class OverlapTables:
    video_id: str
    gt_ids: np.ndarray
    pred_ids: np.ndarray
    gt_cat: np.ndarray
    pred_cat: np.ndarray
    counts: np.ndarray

    @property
    def num_frames(self) -> int:
        return self.counts.shape[0]


def _indexer(ids: np.ndarray):
    if ids[-1] < _LUT_LIMIT:
        lut = np.zeros(int(ids[-1]) + 1, dtype=np.int32)
        lut[ids] = np.arange(len(ids), dtype=np.int32)
        return lambda frame: np.take(lut, frame)
    return lambda frame: np.searchsorted(ids, frame).astype(np.int32)


def _check_categories(seq: VideoPanopticSequence, cats: CategoryTable, role: str) -> None:
    for sid, cid in seq.segments.items():
        if cid not in cats:
            raise EvaluationError(
                f"{role} video {seq.video_id!r}: segment {sid} has unknown category {cid}")


def overlap_tables(gt: VideoPanopticSequence, pred: VideoPanopticSequence,
                   cats: CategoryTable) -> OverlapTables:
    if gt.frames.shape != pred.frames.shape:
        raise EvaluationError(
            f"video {gt.video_id!r}: gt is {gt.frames.shape} (T, H, W) but pred is {pred.frames.shape}")
    _check_categories(gt, cats, "gt")
    _check_categories(pred, cats, "pred")
    gt_ids = np.array([VOID] + [s for s in gt.segments], dtype=np.uint32)
    pred_ids = np.array([VOID] + [s for s in pred.segments], dtype=np.uint32)
    gt_cat = np.array([VOID] + [gt.segments[s] for s in gt.segments], dtype=np.int64)
    pred_cat = np.array([VOID] + [pred.segments[s] for s in pred.segments], dtype=np.int64)
    ng, npred = len(gt_ids), len(pred_ids)
    gi, pi = _indexer(gt_ids), _indexer(pred_ids)
    counts = np.empty((gt.num_frames, ng, npred), dtype=np.int64)
    for t in range(gt.num_frames):
        key = gi(gt.frames[t])
        key *= npred
        key += pi(pred.frames[t])
        counts[t] = np.bincount(key.ravel(), minlength=ng * npred).reshape(ng, npred)
    return OverlapTables(gt.video_id, gt_ids, pred_ids, gt_cat, pred_cat, counts)


SequenceSource = Union[VideoPanopticSequence, Callable[[], VideoPanopticSequence]]


def _resolve(src: SequenceSource) -> VideoPanopticSequence:
    return src() if callable(src) else src


def _by_id(items) -> Dict[str, SequenceSource]:
    if isinstance(items, Mapping):
        return dict(items)
    out = {}
    for s in items:
        if s.video_id in out:
            raise EvaluationError(f"duplicate video id {s.video_id!r}")
        out[s.video_id] = s
    return out


def pair_videos(gt_set, pred_set) -> List[Tuple[str, SequenceSource, SequenceSource]]:
    """Match gt and pred videos by id, sorted by id.

    Either side may be a list of sequences or a mapping ``video_id -> sequence``
    (or zero-argument loader). Any id present on one side only is an error.
    """
    gt, pred = _by_id(gt_set), _by_id(pred_set)
    common = sorted(set(gt) & set(pred))
    if not common:
        raise EvaluationError("gt and pred share no video ids")
    missing_pred = sorted(set(gt) - set(pred))
    if missing_pred:
        raise EvaluationError(f"video {missing_pred[0]!r} is missing from the predictions")
    missing_gt = sorted(set(pred) - set(gt))
    if missing_gt:
        raise EvaluationError(f"video {missing_gt[0]!r} is missing from the ground truth")
    return [(v, gt[v], pred[v]) for v in common]


def default_threads() -> int:
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError:
            raise EvaluationError(f"{THREADS_ENV} must be a positive integer, got {env!r}") from None
        if n < 1:
            raise EvaluationError(f"{THREADS_ENV} must be a positive integer, got {env!r}")
        return n
    return os.cpu_count() or 1


def map_videos(fn, pairs, threads: int = 1) -> list:
    """Apply ``fn(video_id, gt, pred)`` per pair; results come back in input order."""

    def run(item):
        vid, g, p = item
        return fn(vid, _resolve(g), _resolve(p))

    if threads <= 1 or len(pairs) <= 1:
        return [run(item) for item in pairs]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(run, pairs))
