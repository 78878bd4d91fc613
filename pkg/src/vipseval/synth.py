"""Deterministic synthetic video panoptic scenes with controlled prediction errors.

A scenario is horizontal stuff bands plus moving thing rectangles. The ground
truth renders the scenario as-is; the prediction renders it and then applies
the perturbations in order. Stuff segment ids are ``STUFF_ID_BASE +
category_id`` so they never collide with thing track ids.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from vipseval.core import CategoryTable, VideoPanopticSequence, ValidationError, VOID

STUFF_ID_BASE = 1 << 20
_MASK64 = (1 << 64) - 1


class SplitMix64:
    """SplitMix64 generator; streams are reproducible in any language."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        """Uniform integer in ``[0, n)`` by multiply-high."""
        if n < 1:
            raise ValueError("n must be >= 1")
        return (self.next_u64() * n) >> 64

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in ``[lo, hi]``."""
        return lo + self.below(hi - lo + 1)

    def random(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))


@dataclass
class StuffBand:
    category_id: int  # 0 leaves the band void
    rows: int


@dataclass
class Thing:
    track_id: int
    category_id: int
    size: tuple  # (height, width)
    positions: List[Optional[tuple]]  # per frame (top, left) or None when absent


@dataclass
class ScenarioSpec:
    height: int
    width: int
    frames: int
    categories: CategoryTable
    stuff: List[StuffBand] = field(default_factory=list)
    things: List[Thing] = field(default_factory=list)
    perturbations: List[dict] = field(default_factory=list)
    seed: int = 0
    video_id: str = "synthetic"

    def validate(self) -> None:
        if min(self.height, self.width, self.frames) < 1:
            raise ValidationError("canvas and frame count must be >= 1")
        if sum(b.rows for b in self.stuff) > self.height:
            raise ValidationError("stuff bands are taller than the canvas")
        for b in self.stuff:
            if b.rows < 0:
                raise ValidationError("stuff band rows must be >= 0")
            if b.category_id != VOID and (b.category_id not in self.categories
                                          or self.categories.is_thing(b.category_id)):
                raise ValidationError(f"stuff band has non-stuff category {b.category_id}")
        ids = [t.track_id for t in self.things]
        if len(set(ids)) != len(ids):
            raise ValidationError("thing track ids must be unique")
        for t in self.things:
            if not 1 <= t.track_id < STUFF_ID_BASE:
                raise ValidationError(f"track id {t.track_id} outside [1, {STUFF_ID_BASE})")
            if t.category_id not in self.categories or not self.categories.is_thing(t.category_id):
                raise ValidationError(f"track {t.track_id} has non-thing category {t.category_id}")
            h, w = t.size
            if h < 1 or w < 1:
                raise ValidationError(f"track {t.track_id} has empty size {t.size}")
            if len(t.positions) != self.frames:
                raise ValidationError(f"track {t.track_id} needs {self.frames} positions")
            for f, pos in enumerate(t.positions):
                if pos is None:
                    continue
                top, left = pos
                if top < 0 or left < 0 or top + h > self.height or left + w > self.width:
                    raise ValidationError(f"track {t.track_id} leaves the canvas at frame {f}")
        for p in self.perturbations:
            _check_perturbation(p, self)

    def to_json(self) -> dict:
        return {
            "video_id": self.video_id,
            "height": self.height,
            "width": self.width,
            "frames": self.frames,
            "seed": self.seed,
            "categories": self.categories.to_json()["categories"],
            "stuff": [{"category_id": b.category_id, "rows": b.rows} for b in self.stuff],
            "things": [
                {"track_id": t.track_id, "category_id": t.category_id, "size": list(t.size),
                 "positions": [None if p is None else list(p) for p in t.positions]}
                for t in self.things
            ],
            "perturbations": [dict(p) for p in self.perturbations],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ScenarioSpec":
        try:
            spec = cls(
                height=int(obj["height"]),
                width=int(obj["width"]),
                frames=int(obj["frames"]),
                categories=CategoryTable.from_json({"categories": obj["categories"]}),
                stuff=[StuffBand(int(b["category_id"]), int(b["rows"])) for b in obj.get("stuff", [])],
                things=[
                    Thing(int(t["track_id"]), int(t["category_id"]), tuple(int(v) for v in t["size"]),
                          [None if p is None else (int(p[0]), int(p[1])) for p in t["positions"]])
                    for t in obj.get("things", [])
                ],
                perturbations=[dict(p) for p in obj.get("perturbations", [])],
                seed=int(obj.get("seed", 0)),
                video_id=str(obj.get("video_id", "synthetic")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed scenario: {exc}") from None
        return spec


_PERTURBATIONS = {"id_switch", "erode", "class_flip", "drop", "spurious"}


def _check_perturbation(p: dict, spec: ScenarioSpec) -> None:
    kind = p.get("type")
    if kind not in _PERTURBATIONS:
        raise ValidationError(f"unknown perturbation {kind!r}")
    tracks = {t.track_id for t in spec.things}
    target = p.get("track")
    if kind == "erode":
        if int(p.get("radius", -1)) < 0:
            raise ValidationError("erode needs radius >= 0")
        if target != "all" and target not in tracks:
            raise ValidationError(f"erode target {target!r} does not exist")
    elif kind == "spurious":
        top, left, h, w = p["rect"]
        if h < 1 or w < 1 or top < 0 or left < 0 or top + h > spec.height or left + w > spec.width:
            raise ValidationError(f"spurious rect {p['rect']} leaves the canvas")
        cid = p["category_id"]
        if cid not in spec.categories or not spec.categories.is_thing(cid):
            raise ValidationError(f"spurious track has non-thing category {cid}")
        if any(not 0 <= f < spec.frames for f in p["frames"]):
            raise ValidationError("spurious frames outside the video")
    else:
        if target not in tracks:
            raise ValidationError(f"{kind} target {target!r} does not exist")
        if kind == "id_switch" and not 0 <= int(p["frame"]) < spec.frames:
            raise ValidationError(f"id_switch frame {p['frame']} outside the video")
        if kind == "class_flip":
            cid = p["category_id"]
            if cid not in spec.categories or not spec.categories.is_thing(cid):
                raise ValidationError(f"class_flip to non-thing category {cid}")


def _render(spec: ScenarioSpec):
    frames = np.zeros((spec.frames, spec.height, spec.width), dtype=np.uint32)
    segments: Dict[int, int] = {}
    row = 0
    for band in spec.stuff:
        if band.category_id != VOID and band.rows > 0:
            sid = STUFF_ID_BASE + band.category_id
            frames[:, row:row + band.rows, :] = sid
            segments[sid] = band.category_id
        row += band.rows
    for t in spec.things:
        h, w = t.size
        for f, pos in enumerate(t.positions):
            if pos is not None:
                top, left = pos
                frames[f, top:top + h, left:left + w] = t.track_id
                segments[t.track_id] = t.category_id
    return frames, segments


def _erode(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius == 0:
        return mask
    st = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    return ndimage.binary_erosion(mask, structure=st, border_value=0)


def _apply(frames: np.ndarray, segments: Dict[int, int], spec: ScenarioSpec):
    lineage = {t.track_id: [t.track_id] for t in spec.things}
    next_id = max([t.track_id for t in spec.things], default=0) + 1
    for p in spec.perturbations:
        kind = p["type"]
        if kind == "id_switch":
            new_id = next_id
            next_id += 1
            start = int(p["frame"])
            for sid in lineage[p["track"]]:
                sel = frames[start:] == sid
                frames[start:][sel] = new_id
            segments[new_id] = segments.get(p["track"], spec_category(spec, p["track"]))
            lineage[p["track"]].append(new_id)
        elif kind == "erode":
            radius = int(p["radius"])
            targets = (sorted(set(np.unique(frames).tolist()) - {VOID}) if p["track"] == "all"
                       else lineage[p["track"]])
            for f in range(frames.shape[0]):
                frame = frames[f]
                for sid in targets:
                    mask = frame == sid
                    if mask.any():
                        frame[mask & ~_erode(mask, radius)] = VOID
        elif kind == "class_flip":
            for sid in lineage[p["track"]]:
                segments[sid] = int(p["category_id"])
        elif kind == "drop":
            for sid in lineage[p["track"]]:
                frames[frames == sid] = VOID
        elif kind == "spurious":
            new_id = next_id
            next_id += 1
            top, left, h, w = (int(v) for v in p["rect"])
            for f in p["frames"]:
                frames[int(f), top:top + h, left:left + w] = new_id
            segments[new_id] = int(p["category_id"])
    return frames, segments


def spec_category(spec: ScenarioSpec, track_id: int) -> int:
    return next(t.category_id for t in spec.things if t.track_id == track_id)


def _sequence(spec, frames, segments) -> VideoPanopticSequence:
    present = set(np.unique(frames).tolist())
    segs = {s: c for s, c in segments.items() if s in present}
    return VideoPanopticSequence(spec.video_id, frames, segs, spec.categories)


@dataclass
class SyntheticPair:
    gt: VideoPanopticSequence
    pred: VideoPanopticSequence
    categories: CategoryTable


def generate(spec: ScenarioSpec) -> SyntheticPair:
    spec.validate()
    gt_frames, gt_segments = _render(spec)
    pred_frames, pred_segments = _apply(gt_frames.copy(), dict(gt_segments), spec)
    return SyntheticPair(
        _sequence(spec, gt_frames, gt_segments),
        _sequence(spec, pred_frames, pred_segments),
        spec.categories,
    )


def load_scenario(path) -> ScenarioSpec:
    with open(path, "r", encoding="utf-8") as f:
        return ScenarioSpec.from_json(json.load(f))


def _random_walk(rng: SplitMix64, frames: int, h: int, w: int, height: int, width: int,
                 absent_prob: float):
    top = rng.randint(0, height - h)
    left = rng.randint(0, width - w)
    out = []
    for _ in range(frames):
        top = min(max(top + rng.randint(-1, 1), 0), height - h)
        left = min(max(left + rng.randint(-1, 1), 0), width - w)
        out.append(None if rng.random() < absent_prob else (top, left))
    return out


def random_scenario(seed: int, height: int = 8, width: int = 8, frames: int = 6,
                    max_classes: int = 3, max_things: int = 4, max_perturbations: int = 3,
                    perturbation_types: Sequence[str] = tuple(sorted(_PERTURBATIONS)),
                    absent_prob: float = 0.15, min_things: int = 0,
                    video_id: Optional[str] = None,
                    categories: Optional[CategoryTable] = None) -> ScenarioSpec:
    """Draw a random scenario from a SplitMix64 stream seeded with ``seed``.

    With ``min_things > 0`` category 1 is forced to be a thing class and the
    first ``min_things`` tracks are visible in frame 0. A fixed ``categories``
    table replaces the random draw of classes.
    """
    rng = SplitMix64(seed)
    if categories is None:
        n_classes = rng.randint(1, max_classes)
        cats = []
        for c in range(1, n_classes + 1):
            thing = rng.random() < 0.5 or (c == 1 and min_things > 0)
            cats.append({"category_id": c, "name": f"{'thing' if thing else 'stuff'}{c}",
                         "is_thing": thing})
        table = CategoryTable(cats)
    else:
        table = categories
    stuff_ids, thing_ids = table.stuff_ids, table.thing_ids

    bands = []
    remaining = height
    while remaining > 0:
        rows = rng.randint(1, remaining)
        if stuff_ids and rng.random() < 0.85:
            cid = stuff_ids[rng.below(len(stuff_ids))]
        else:
            cid = VOID
        bands.append(StuffBand(cid, rows))
        remaining -= rows

    things = []
    if thing_ids:
        for i in range(rng.randint(min(min_things, max_things), max_things)):
            h = rng.randint(1, height)
            w = rng.randint(1, width)
            cid = thing_ids[rng.below(len(thing_ids))]
            walk = _random_walk(rng, frames, h, w, height, width, absent_prob)
            if i < min_things and walk[0] is None:
                walk[0] = next((p for p in walk if p is not None), (0, 0))
            things.append(Thing(i + 1, cid, (h, w), walk))

    perturbations = []
    kinds = [k for k in perturbation_types if k in _PERTURBATIONS]
    for _ in range(rng.randint(0, max_perturbations) if kinds else 0):
        kind = kinds[rng.below(len(kinds))]
        if kind in ("id_switch", "class_flip", "drop") and not things:
            continue
        if kind in ("class_flip", "spurious") and not thing_ids:
            continue
        if kind == "id_switch":
            p = {"type": kind, "track": things[rng.below(len(things))].track_id,
                 "frame": rng.randint(0, frames - 1)}
        elif kind == "erode":
            target = ("all" if not things or rng.random() < 0.5
                      else things[rng.below(len(things))].track_id)
            p = {"type": kind, "radius": rng.randint(1, 2), "track": target}
        elif kind == "class_flip":
            p = {"type": kind, "track": things[rng.below(len(things))].track_id,
                 "category_id": thing_ids[rng.below(len(thing_ids))]}
        elif kind == "drop":
            p = {"type": kind, "track": things[rng.below(len(things))].track_id}
        else:
            h = rng.randint(1, height)
            w = rng.randint(1, width)
            fr = sorted({rng.randint(0, frames - 1) for _ in range(rng.randint(1, frames))})
            p = {"type": kind, "rect": [rng.randint(0, height - h), rng.randint(0, width - w), h, w],
                 "category_id": thing_ids[rng.below(len(thing_ids))], "frames": fr}
        perturbations.append(p)

    spec = ScenarioSpec(height, width, frames, table, bands, things, perturbations, seed,
                        video_id or f"scene{seed:06d}")
    spec.validate()
    return spec
