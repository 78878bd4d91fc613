"""Domain types shared across the package.

Every type validates on construction and exposes read-only arrays, so a value
that exists is a valid value. Segment id 0 and category id 0 mean void.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np

VOID = 0


class VipsEvalError(Exception):
    """Base class for data errors raised by this package."""


class ValidationError(VipsEvalError):
    """Raised when a value violates a type invariant."""

    def __init__(self, message: str, violations: Optional[List["Violation"]] = None):
        super().__init__(message)
        self.violations = violations or []


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Category:
    category_id: int
    name: str
    is_thing: bool


class CategoryTable:
    """Ordered collection of categories with thing/stuff flags."""

    def __init__(self, entries: Iterable[Union[Category, Mapping]]):
        cats: List[Category] = []
        for e in entries:
            if not isinstance(e, Category):
                e = Category(int(e["category_id"]), str(e["name"]), bool(e["is_thing"]))
            cats.append(e)
        if not cats:
            raise ValidationError("category table is empty")
        seen = set()
        for c in cats:
            if c.category_id < 1:
                raise ValidationError(f"category id {c.category_id} must be >= 1")
            if c.category_id in seen:
                raise ValidationError(f"duplicate category id {c.category_id}")
            if not c.name:
                raise ValidationError(f"category {c.category_id} has an empty name")
            seen.add(c.category_id)
        self._entries = tuple(cats)
        self._by_id = {c.category_id: c for c in cats}

    @property
    def entries(self) -> tuple:
        return self._entries

    @property
    def ids(self) -> List[int]:
        return [c.category_id for c in self._entries]

    @property
    def thing_ids(self) -> List[int]:
        return [c.category_id for c in self._entries if c.is_thing]

    @property
    def stuff_ids(self) -> List[int]:
        return [c.category_id for c in self._entries if not c.is_thing]

    def __contains__(self, category_id) -> bool:
        return int(category_id) in self._by_id

    def __getitem__(self, category_id: int) -> Category:
        return self._by_id[int(category_id)]

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def __eq__(self, other) -> bool:
        return isinstance(other, CategoryTable) and self._entries == other._entries

    def is_thing(self, category_id: int) -> bool:
        return self._by_id[int(category_id)].is_thing

    def to_json(self) -> dict:
        return {
            "categories": [
                {"category_id": c.category_id, "name": c.name, "is_thing": c.is_thing}
                for c in self._entries
            ]
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "CategoryTable":
        # COCO-panoptic style keys ("id", "isthing") are accepted as well.
        entries = []
        for e in obj["categories"]:
            cid = e["category_id"] if "category_id" in e else e["id"]
            thing = e["is_thing"] if "is_thing" in e else e["isthing"]
            entries.append(Category(int(cid), str(e["name"]), bool(thing)))
        return cls(entries)

    def __repr__(self) -> str:
        return f"CategoryTable({len(self)} categories, {len(self.thing_ids)} things)"


def _as_id_array(ids) -> np.ndarray:
    arr = np.asarray(ids)
    if arr.dtype.kind not in "iu":
        raise ValidationError(f"segment ids must be integers, got dtype {arr.dtype}")
    if arr.size and (arr.min() < 0 or arr.max() > np.iinfo(np.uint32).max):
        raise ValidationError("segment ids must fit in 32-bit unsigned integers")
    return arr.astype(np.uint32, copy=False)


@dataclass(frozen=True, eq=False)
class IdRaster:
    """A single H x W frame of segment (or category) ids."""

    ids: np.ndarray

    def __post_init__(self):
        arr = _as_id_array(self.ids)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValidationError(f"raster must be 2-D and non-empty, got shape {arr.shape}")
        object.__setattr__(self, "ids", _frozen(arr))

    @property
    def height(self) -> int:
        return self.ids.shape[0]

    @property
    def width(self) -> int:
        return self.ids.shape[1]

    def __eq__(self, other) -> bool:
        return isinstance(other, IdRaster) and np.array_equal(self.ids, other.ids)


def _stack_frames(frames) -> np.ndarray:
    if isinstance(frames, np.ndarray):
        arr = frames
    else:
        frames = list(frames)
        if not frames:
            raise ValidationError("sequence has no frames")
        shapes = {(f.ids if isinstance(f, IdRaster) else np.asarray(f)).shape for f in frames}
        if len(shapes) != 1:
            raise ValidationError(f"frames have inconsistent dimensions: {sorted(shapes)}")
        arr = np.stack([f.ids if isinstance(f, IdRaster) else np.asarray(f) for f in frames])
    arr = _as_id_array(arr)
    if arr.ndim != 3:
        raise ValidationError(f"frames must form a T x H x W volume, got shape {arr.shape}")
    if arr.shape[0] < 1:
        raise ValidationError("sequence has no frames")
    if arr.shape[1] < 1 or arr.shape[2] < 1:
        raise ValidationError(f"frames must be non-empty, got shape {arr.shape[1:]}")
    return arr


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str
    frame: Optional[int] = None
    pixel: Optional[tuple] = None

    def __str__(self) -> str:
        return self.message


@dataclass(frozen=True)
class ValidationResult:
    violations: tuple = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def _first_pixel(frames: np.ndarray, value: int):
    t, r, c = np.argwhere(frames == value)[0]
    return int(t), (int(r), int(c))


def _find_violations(frames, segments: Mapping[int, int], cats: CategoryTable) -> List[Violation]:
    out: List[Violation] = []
    try:
        arr = _stack_frames(frames)
    except ValidationError as exc:
        return [Violation("shape", str(exc))]

    for sid, cid in sorted(segments.items()):
        if sid == VOID:
            out.append(Violation("void_segment", "segment id 0 is reserved for void"))
        elif cid not in cats:
            out.append(Violation("unknown_category", f"segment {sid} has unknown category {cid}"))

    present = np.unique(arr)
    for sid in present[present != VOID]:
        if int(sid) not in segments:
            t, px = _first_pixel(arr, sid)
            out.append(Violation(
                "unmapped_id", f"unmapped id {int(sid)} at frame {t} pixel {px}", t, px))

    stuff_tracks: Dict[int, List[int]] = {}
    for sid, cid in sorted(segments.items()):
        if cid in cats and not cats.is_thing(cid):
            stuff_tracks.setdefault(cid, []).append(sid)
    for cid, sids in sorted(stuff_tracks.items()):
        if len(sids) > 1:
            out.append(Violation(
                "duplicate_stuff",
                f"duplicate stuff track: category {cid} has segments {sids}"))
    return out


class VideoPanopticSequence:
    """Per-frame segment id rasters plus the segment -> category map of one video.

    ``frames`` is stored as a read-only ``(T, H, W)`` uint32 array. Thing
    segment ids are track ids and keep their identity across frames.
    """

    def __init__(self, video_id: str, frames, segments: Mapping[int, int], categories: CategoryTable):
        segs = {int(k): int(v) for k, v in segments.items()}
        violations = _find_violations(frames, segs, categories)
        if violations:
            raise ValidationError(
                f"invalid sequence {video_id!r}: " + "; ".join(v.message for v in violations),
                violations)
        self.video_id = str(video_id)
        self.frames = _frozen(_stack_frames(frames))
        self.segments = dict(sorted(segs.items()))
        self.categories = categories

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple:
        return self.frames.shape[1:]

    def raster(self, t: int) -> IdRaster:
        return IdRaster(self.frames[t])

    def rasters(self) -> List[IdRaster]:
        return [IdRaster(f) for f in self.frames]

    def thing_segments(self) -> Dict[int, int]:
        return {s: c for s, c in self.segments.items() if self.categories.is_thing(c)}

    def __eq__(self, other) -> bool:
        return (isinstance(other, VideoPanopticSequence)
                and self.video_id == other.video_id
                and self.segments == other.segments
                and np.array_equal(self.frames, other.frames))

    def __repr__(self) -> str:
        t, h, w = self.frames.shape
        return f"VideoPanopticSequence({self.video_id!r}, {t}x{h}x{w}, {len(self.segments)} segments)"


def validate_sequence(seq, cats: CategoryTable, segments: Optional[Mapping[int, int]] = None) -> ValidationResult:
    """Collect every invariant violation of a panoptic sequence.

    ``seq`` may be a built sequence (re-checked against ``cats``) or raw frames,
    in which case ``segments`` must be given. Never raises for bad data.
    """
    if isinstance(seq, VideoPanopticSequence):
        frames, segs = seq.frames, seq.segments
    else:
        frames, segs = seq, segments or {}
    segs = {int(k): int(v) for k, v in segs.items()}
    return ValidationResult(tuple(_find_violations(frames, segs, cats)))


class SemanticSequence:
    """Per-frame category id rasters (0 = void)."""

    def __init__(self, video_id: str, frames, categories: CategoryTable):
        arr = _stack_frames(frames)
        present = np.unique(arr)
        bad = [int(v) for v in present if v != VOID and int(v) not in categories]
        if bad:
            raise ValidationError(f"semantic sequence {video_id!r} has unknown categories {bad}")
        self.video_id = str(video_id)
        self.frames = _frozen(arr)
        self.categories = categories

    def __eq__(self, other) -> bool:
        return (isinstance(other, SemanticSequence) and self.video_id == other.video_id
                and np.array_equal(self.frames, other.frames))


class InstanceSequence:
    """Per-frame instance track rasters restricted to thing categories."""

    def __init__(self, video_id: str, frames, instances: Mapping[int, int], categories: CategoryTable):
        arr = _stack_frames(frames)
        inst = {int(k): int(v) for k, v in instances.items()}
        for iid, cid in inst.items():
            if iid == VOID:
                raise ValidationError("instance id 0 is reserved for void")
            if cid not in categories or not categories.is_thing(cid):
                raise ValidationError(f"instance {iid} maps to non-thing category {cid}")
        present = np.unique(arr)
        unmapped = [int(v) for v in present if v != VOID and int(v) not in inst]
        if unmapped:
            raise ValidationError(f"instance sequence {video_id!r} has unmapped ids {unmapped}")
        self.video_id = str(video_id)
        self.frames = _frozen(arr)
        self.instances = dict(sorted(inst.items()))
        self.categories = categories

    def __eq__(self, other) -> bool:
        return (isinstance(other, InstanceSequence) and self.video_id == other.video_id
                and self.instances == other.instances
                and np.array_equal(self.frames, other.frames))


@dataclass
class ClassStats:
    """Per-class VPQ accumulator for one window size."""

    iou_sum: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def denominator(self) -> float:
        return self.tp + 0.5 * self.fp + 0.5 * self.fn

    @property
    def vpq(self) -> Optional[float]:
        d = self.denominator
        return self.iou_sum / d if d > 0 else None


@dataclass
class WindowResult:
    k: int
    classes: Dict[int, ClassStats]

    @property
    def vpq(self) -> float:
        scores = [s.vpq for s in self.classes.values() if s.vpq is not None]
        return math.fsum(scores) / len(scores) if scores else 0.0


@dataclass
class VpqReport:
    windows: List[int]
    per_window: Dict[int, WindowResult]
    config: dict = field(default_factory=dict)

    @property
    def vpq_k(self) -> Dict[int, float]:
        return {k: self.per_window[k].vpq for k in self.windows}

    @property
    def overall_vpq(self) -> float:
        from vipseval.vpq import aggregate_vpq

        return aggregate_vpq([self.per_window[k].vpq for k in self.windows])

    def to_json(self) -> dict:
        out = {
            "kind": "vpq",
            "windows": list(self.windows),
            "overall_vpq": self.overall_vpq,
            "overall_vpq_percent": 100.0 * self.overall_vpq,
            "per_window": {},
            "config": self.config,
        }
        for k in self.windows:
            w = self.per_window[k]
            out["per_window"][str(k)] = {
                "vpq": w.vpq,
                "vpq_percent": 100.0 * w.vpq,
                "classes": {
                    str(c): {"iou_sum": s.iou_sum, "tp": s.tp, "fp": s.fp, "fn": s.fn, "vpq": s.vpq}
                    for c, s in sorted(w.classes.items())
                },
            }
        return out


@dataclass
class StqReport:
    aq: Optional[float]
    sq: float
    class_iou: Dict[int, float]
    track_aq: List[dict]
    config: dict = field(default_factory=dict)

    @property
    def stq(self) -> Optional[float]:
        if self.aq is None:
            return None
        return math.sqrt(self.aq * self.sq)

    def to_json(self) -> dict:
        return {
            "kind": "stq",
            "aq": self.aq,
            "sq": self.sq,
            "stq": self.stq,
            "class_iou": {str(c): v for c, v in sorted(self.class_iou.items())},
            "track_aq": self.track_aq,
            "config": self.config,
        }
