"""Masks from inner products between target queries and per-pixel features."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from vipseval.core import CategoryTable, VideoPanopticSequence, ValidationError, VOID

SEMANTIC = "semantic"
INSTANCE = "instance"
UNASSIGNED = -1


@dataclass
class QueryMatrix:
    vectors: np.ndarray  # N x D
    kinds: List[str]
    category_ids: List[int]

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValidationError(f"queries must be N x D with N, D >= 1, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("non-finite query value")
        if len(self.kinds) != v.shape[0] or len(self.category_ids) != v.shape[0]:
            raise ValidationError("query metadata length does not match the number of queries")
        bad = [k for k in self.kinds if k not in (SEMANTIC, INSTANCE)]
        if bad:
            raise ValidationError(f"unknown query kind {bad[0]!r}")
        self.vectors = v
        self.kinds = list(self.kinds)
        self.category_ids = [int(c) for c in self.category_ids]

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def _normalize(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


def decode_masks(q: QueryMatrix, features: np.ndarray, tau: float = 0.0,
                 normalize: bool = False) -> np.ndarray:
    """Per-pixel query assignment (T x H x W, ``-1`` where no score reaches ``tau``).

    Ties go to the lowest query index.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 4:
        raise ValidationError(f"features must be T x H x W x D, got shape {f.shape}")
    if f.shape[-1] != q.dim:
        raise ValidationError(f"feature dim {f.shape[-1]} does not match query dim {q.dim}")
    if not np.all(np.isfinite(f)):
        raise ValidationError("non-finite feature value")
    qv = q.vectors
    if normalize:
        qv, f = _normalize(qv), _normalize(f)
    scores = np.tensordot(f, qv, axes=([3], [1]))  # T x H x W x N
    best = np.argmax(scores, axis=-1)  # first maximum on ties
    top = np.take_along_axis(scores, best[..., None], axis=-1)[..., 0]
    return np.where(top >= tau, best, UNASSIGNED).astype(np.int64)


def assignment_to_panoptic(assignment: np.ndarray, q: QueryMatrix, cats: CategoryTable,
                           video_id: str = "decoded") -> VideoPanopticSequence:
    """Instance query n becomes thing track ``n + 1``; semantic queries of one
    category collapse into a single stuff segment whose id is ``n + 1`` for the
    lowest such query index n.
    """
    for n, (kind, cid) in enumerate(zip(q.kinds, q.category_ids)):
        if cid not in cats:
            raise ValidationError(f"query {n} references unknown category {cid}")
        if kind == INSTANCE and not cats.is_thing(cid):
            raise ValidationError(f"instance query {n} has stuff category {cid}")
    a = np.asarray(assignment)
    seg_of_query = np.zeros(len(q) + 1, dtype=np.uint32)  # slot 0 is UNASSIGNED
    segments = {}
    stuff_seg = {}
    for n, (kind, cid) in enumerate(zip(q.kinds, q.category_ids)):
        if kind == INSTANCE:
            sid = n + 1
        else:
            sid = stuff_seg.setdefault(cid, n + 1)
        seg_of_query[n + 1] = sid
        segments[sid] = cid
    frames = seg_of_query[a + 1]
    present = set(np.unique(frames).tolist()) - {VOID}
    segments = {s: c for s, c in segments.items() if s in present}
    return VideoPanopticSequence(video_id, frames, segments, cats)
