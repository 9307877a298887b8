"""Fixed-duration segmentation of feature matrices and decision aggregation.

Variable-length utterances are split into segments of a common duration
(the first quartile of the training-set durations), the final segment is
zero padded, and an utterance-level decision is taken by averaging the
per-segment softmax activations and picking the larger column.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import DIALECTS
from .features import FeatureMatrix

__all__ = ["Segment", "first_quartile", "segment_frames", "split", "aggregate"]


@dataclass(frozen=True)
class Segment:
    """One fixed-length slice of an utterance's feature matrix."""

    matrix: np.ndarray  # (channels, segment_frames), pad region exactly zero
    pad_frames: int
    parent_id: str
    label: str | None = None  # training only


def first_quartile(durations: Sequence[float]) -> float:
    """The ((n+1)/4)-th term of the ascending durations, 1-based.

    A fractional index interpolates linearly between the neighbouring
    terms and is clamped at the ends.
    """
    vals = sorted(float(d) for d in durations)
    n = len(vals)
    if n == 0:
        raise ValueError("empty duration list")
    q = (n + 1) / 4.0
    if q <= 1.0:
        return vals[0]
    if q >= n:
        return vals[-1]
    lo = int(np.floor(q))
    frac = q - lo
    return vals[lo - 1] + frac * (vals[lo] - vals[lo - 1])


def segment_frames(segment_duration_s: float, hop_ms: float = 10.0) -> int:
    """Frames per segment for a given segment duration."""
    if segment_duration_s <= 0.0:
        raise ValueError("segment duration must be positive")
    return int(round(segment_duration_s / (hop_ms / 1000.0)))


def split(matrix: FeatureMatrix, segment_duration_s: float,
          label: str | None = None) -> list[Segment]:
    """Split into ceil(d_u/d_s) segments; only the last is zero padded.

    Concatenating the segments and dropping the padding reproduces the
    source matrix exactly.
    """
    if matrix.num_frames == 0:
        raise ValueError("empty feature matrix")
    seg_len = segment_frames(segment_duration_s, matrix.hop_ms)
    total = matrix.num_frames
    n_segments = -(-total // seg_len)  # ceil
    segments = []
    for i in range(n_segments):
        chunk = matrix.values[:, i * seg_len:(i + 1) * seg_len]
        pad = seg_len - chunk.shape[1]
        if pad:
            chunk = np.concatenate(
                [chunk, np.zeros((chunk.shape[0], pad))], axis=1)
        segments.append(Segment(matrix=chunk, pad_frames=pad,
                                parent_id=matrix.source_id, label=label))
    return segments


def aggregate(activations: np.ndarray) -> str:
    """Average per-class softmax activations across segments; argmax wins.

    Column 0 is LT, column 1 is CT; an exact tie resolves to LT.
    """
    acts = np.atleast_2d(np.asarray(activations, dtype=np.float64))
    if acts.size == 0:
        raise ValueError("no activations to aggregate")
    if acts.shape[1] != 2:
        raise ValueError(f"expected 2 activation columns, got {acts.shape[1]}")
    sums = acts.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        raise ValueError("activation rows must each sum to 1")
    means = acts.mean(axis=0)
    return DIALECTS[int(np.argmax(means))]
