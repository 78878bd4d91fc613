"""Exponential moving average over an ordered stream of weight snapshots."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from vipseval.dataset_io import WeightMap

DEFAULT_DECAY = 0.999


def ema(snapshots: Sequence[Mapping[str, np.ndarray]], decay: float = DEFAULT_DECAY) -> WeightMap:
    """``w = s0``, then ``w = decay * w + (1 - decay) * s_i`` for each later snapshot.

    Accumulates in float64 and returns float32 tensors.
    """
    snapshots = list(snapshots)
    if not snapshots:
        raise ValueError("no snapshots to average")
    if not 0.0 <= decay <= 1.0:
        raise ValueError(f"decay must lie in [0, 1], got {decay}")
    first = snapshots[0]
    names = sorted(first)
    acc = {n: np.array(first[n], dtype=np.float64) for n in names}
    for i, snap in enumerate(snapshots[1:], start=1):
        if sorted(snap) != names:
            extra = sorted(set(snap) ^ set(names))
            raise ValueError(f"snapshot {i}: tensor name mismatch at {extra[0]!r}")
        for n in names:
            s = np.asarray(snap[n], dtype=np.float64)
            if s.shape != acc[n].shape:
                raise ValueError(
                    f"snapshot {i}: tensor {n!r} has shape {s.shape}, expected {acc[n].shape}")
            acc[n] = decay * acc[n] + (1.0 - decay) * s
    return WeightMap({n: acc[n].astype(np.float32) for n in names})
