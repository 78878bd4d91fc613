"""Stuff-logit ensembling and panoptic merging.

Logits from several sources are averaged per pixel and turned into class
probabilities with a softmax. Thing instances are then pasted in descending
confidence order and the remaining pixels take the most probable stuff class.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from vipseval.core import CategoryTable, VideoPanopticSequence, ValidationError, VOID
from vipseval.dataset_io import LogitVolume


@dataclass
class ProbabilityVolume:
    values: np.ndarray  # T x H x W x C, float64
    class_index: List[int]

    def argmax_category(self) -> np.ndarray:
        idx = np.argmax(self.values, axis=-1)
        return np.asarray(self.class_index, dtype=np.uint32)[idx]


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def average_softmax(sources: Sequence[LogitVolume],
                    weights: Optional[Sequence[float]] = None) -> ProbabilityVolume:
    """Softmax of the (weighted) mean of the source logits."""
    sources = list(sources)
    if not sources:
        raise ValueError("no logit sources to fuse")
    first = sources[0]
    for i, s in enumerate(sources[1:], start=1):
        if s.dims != first.dims:
            raise ValueError(f"source {i} has dims {s.dims}, expected {first.dims}")
        if s.class_index != first.class_index:
            raise ValueError(f"source {i} has class_index {s.class_index}, expected {first.class_index}")
    w = np.ones(len(sources)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (len(sources),):
        raise ValueError(f"expected {len(sources)} weights, got {w.shape[0] if w.ndim else 1}")
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be nonnegative with a positive sum")
    terms = np.stack([w[i] * s.values.astype(np.float64) for i, s in enumerate(sources)])
    # Per-element sorted summation keeps the result independent of source order.
    terms.sort(axis=0)
    mean = terms.sum(axis=0)
    mean /= w.sum()
    return ProbabilityVolume(softmax(mean), list(first.class_index))


@dataclass
class InstanceTrack:
    """One predicted thing track with per-frame masks (T x H x W)."""

    track_id: int
    category_id: int
    confidence: float
    masks: np.ndarray

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=bool)
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"track {self.track_id}: confidence {self.confidence} outside [0, 1]")
        if self.track_id == VOID:
            raise ValueError("track id 0 is reserved for void")


def instances_from_sequence(seq: VideoPanopticSequence,
                            confidences: Optional[Dict[int, float]] = None) -> List[InstanceTrack]:
    confidences = confidences or {}
    out = []
    for sid, cid in seq.thing_segments().items():
        conf = confidences.get(sid)
        out.append(InstanceTrack(sid, cid, 1.0 if conf is None else float(conf), seq.frames == sid))
    return out


def merge_panoptic(stuff_probs: ProbabilityVolume, instances: Sequence[InstanceTrack],
                   cats: CategoryTable, min_area: int = 0, overlap_keep: float = 0.5,
                   video_id: str = "fused", stuff_id_base: Optional[int] = None) -> VideoPanopticSequence:
    """Confidence-ordered hard assignment of instances over a stuff argmax.

    Frames are processed independently. In each frame an instance keeps only
    the pixels not yet taken and survives if the kept fraction of its mask is
    at least ``overlap_keep`` and the kept area at least ``min_area``. Stuff
    regions smaller than ``min_area`` in a frame are left void.

    Stuff segments get ids ``stuff_id_base + position in class_index``; the
    base defaults to one past the largest track id.
    """
    t, h, w, _ = stuff_probs.values.shape
    for c in stuff_probs.class_index:
        if c not in cats or cats.is_thing(c):
            raise ValidationError(f"stuff probability channel has non-stuff category {c}")
    for inst in instances:
        if inst.masks.shape != (t, h, w):
            raise ValidationError(
                f"instance {inst.track_id} masks are {inst.masks.shape}, expected {(t, h, w)}")
        if inst.category_id not in cats or not cats.is_thing(inst.category_id):
            raise ValidationError(
                f"instance {inst.track_id} has non-thing category {inst.category_id}")
    track_ids = [i.track_id for i in instances]
    if len(set(track_ids)) != len(track_ids):
        raise ValidationError("duplicate instance track ids")
    if stuff_id_base is None:
        stuff_id_base = max(track_ids, default=0) + 1
    stuff_ids = {c: stuff_id_base + i for i, c in enumerate(stuff_probs.class_index)}
    if set(stuff_ids.values()) & set(track_ids):
        raise ValidationError("stuff segment ids collide with instance track ids")

    order = sorted(instances, key=lambda i: (-i.confidence, i.track_id))
    stuff_cat = stuff_probs.argmax_category()
    out = np.zeros((t, h, w), dtype=np.uint32)
    for f in range(t):
        taken = np.zeros((h, w), dtype=bool)
        for inst in order:
            mask = inst.masks[f]
            area = int(mask.sum())
            if area == 0:
                continue
            kept = mask & ~taken
            kept_area = int(kept.sum())
            if kept_area == 0 or kept_area < overlap_keep * area or kept_area < min_area:
                continue
            out[f][kept] = inst.track_id
            taken |= kept
        for c, sid in stuff_ids.items():
            region = (stuff_cat[f] == c) & ~taken
            if int(region.sum()) >= max(min_area, 1):
                out[f][region] = sid

    present = set(np.unique(out).tolist())
    segments = {i.track_id: i.category_id for i in instances if i.track_id in present}
    segments.update({sid: c for c, sid in stuff_ids.items() if sid in present})
    return VideoPanopticSequence(video_id, out, segments, cats)
