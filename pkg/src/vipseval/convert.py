"""Panoptic -> semantic and panoptic -> instance annotation conversion."""

from __future__ import annotations

import numpy as np

from vipseval.core import (
    CategoryTable,
    InstanceSequence,
    SemanticSequence,
    VideoPanopticSequence,
    VOID,
)


def segment_lookup(segments, values, fill=VOID):
    """Return ``(sorted ids, lut)`` such that ``lut[np.searchsorted(ids, x)]`` maps ids to values."""
    ids = np.array([VOID] + sorted(s for s in segments if s != VOID), dtype=np.uint32)
    lut = np.array([fill] + [values[int(s)] for s in ids[1:]], dtype=np.uint32)
    return ids, lut


def _map_frames(frames: np.ndarray, mapping: dict) -> np.ndarray:
    ids, lut = segment_lookup(mapping, mapping)
    return lut[np.searchsorted(ids, frames)]


def to_semantic(seq: VideoPanopticSequence, cats: CategoryTable = None) -> SemanticSequence:
    """Collapse every segment to its category id; void stays void."""
    cats = cats or seq.categories
    frames = _map_frames(seq.frames, seq.segments)
    return SemanticSequence(seq.video_id, frames, cats)


def to_instance(seq: VideoPanopticSequence, cats: CategoryTable = None) -> InstanceSequence:
    """Keep thing segments with their ids; stuff pixels become void."""
    cats = cats or seq.categories
    things = {s: c for s, c in seq.segments.items() if cats.is_thing(c)}
    keep = {s: (s if s in things else VOID) for s in seq.segments}
    frames = _map_frames(seq.frames, keep)
    return InstanceSequence(seq.video_id, frames, things, cats)


def instance_to_panoptic(inst: InstanceSequence) -> VideoPanopticSequence:
    return VideoPanopticSequence(inst.video_id, inst.frames, inst.instances, inst.categories)


def semantic_to_panoptic(sem: SemanticSequence) -> VideoPanopticSequence:
    """Wrap a semantic sequence as panoptic with segment id = category id.

    Each category becomes one segment for the whole video, so thing classes
    lose instance identity.
    """
    present = sorted(set(np.unique(sem.frames).tolist()) - {VOID})
    return VideoPanopticSequence(sem.video_id, sem.frames, {c: c for c in present}, sem.categories)
