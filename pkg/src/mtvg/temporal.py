"""Temporal geometry: intervals, IoU, clip grids and the 2D candidate set."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np


@dataclass(frozen=True)
class Interval:
    start_s: float
    end_s: float

    def __post_init__(self) -> None:
        s, e = float(self.start_s), float(self.end_s)
        if not (math.isfinite(s) and math.isfinite(e)):
            raise ValueError(f"non-finite interval [{s}, {e}]")
        if s < 0.0:
            raise ValueError(f"interval starts before 0: {s}")
        if not e > s:
            raise ValueError(f"empty interval: end_s({e}) <= start_s({s})")

    @property
    def length(self) -> float:
        return float(self.end_s) - float(self.start_s)

    def contains(self, other: Interval) -> bool:
        return self.start_s <= other.start_s and other.end_s <= self.end_s


def temporal_iou(a: Interval, b: Interval) -> float:
    inter = min(a.end_s, b.end_s) - max(a.start_s, b.start_s)
    if inter <= 0.0:
        return 0.0
    union = max(a.end_s, b.end_s) - min(a.start_s, b.start_s)
    return inter / union


def iou_many(starts: np.ndarray, ends: np.ndarray, gt: Interval) -> np.ndarray:
    """Vectorised IoU of many intervals against one."""
    inter = np.minimum(ends, gt.end_s) - np.maximum(starts, gt.start_s)
    inter = np.maximum(inter, 0.0)
    union = np.maximum(ends, gt.end_s) - np.minimum(starts, gt.start_s)
    return inter / union


@dataclass(frozen=True)
class ClipGrid:
    duration_s: float
    n_clips: int = 128

    def __post_init__(self) -> None:
        if not (math.isfinite(self.duration_s) and self.duration_s > 0):
            raise ValueError(f"duration must be positive, got {self.duration_s}")
        if int(self.n_clips) != self.n_clips or self.n_clips < 1:
            raise ValueError(f"n_clips must be a positive integer, got {self.n_clips}")

    @property
    def clip_len(self) -> float:
        return self.duration_s / self.n_clips

    def boundary(self, p: int) -> float:
        # p * duration / n is exact at both ends, unlike p * clip_len
        if p == self.n_clips:
            return float(self.duration_s)
        return p * self.duration_s / self.n_clips


def clip_interval(grid: ClipGrid, p: int) -> Interval:
    if not 0 <= p < grid.n_clips:
        raise IndexError(f"clip index {p} outside [0, {grid.n_clips})")
    return Interval(grid.boundary(p), grid.boundary(p + 1))


def candidate_interval(grid: ClipGrid, i: int, j: int) -> Interval:
    if not 0 <= i <= j < grid.n_clips:
        raise IndexError(f"invalid candidate ({i}, {j}) for {grid.n_clips} clips")
    return Interval(grid.boundary(i), grid.boundary(j + 1))


@dataclass(frozen=True, eq=False)
class CandidateMask:
    n_clips: int
    valid: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.valid, dtype=bool)
        if v.shape != (self.n_clips, self.n_clips):
            raise ValueError(f"mask shape {v.shape} does not match n_clips={self.n_clips}")
        if np.any(np.tril(v, -1)):
            raise ValueError("mask marks cells with start > end as valid")
        if not v.any():
            raise ValueError("mask has no valid candidates")
        v.setflags(write=False)
        object.__setattr__(self, "valid", v)

    @property
    def count(self) -> int:
        return int(self.valid.sum())

    def indices(self) -> tuple[np.ndarray, np.ndarray]:
        """(i, j) index arrays of valid cells in row-major order."""
        return np.nonzero(self.valid)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CandidateMask):
            return NotImplemented
        return self.n_clips == other.n_clips and np.array_equal(self.valid, other.valid)

    __hash__ = None  # type: ignore[assignment]


def dense_candidates(n_clips: int, stride: int = 1) -> CandidateMask:
    """Upper-triangle candidate set. ``stride > 1`` keeps spans whose length is a multiple of it."""
    if n_clips < 1:
        raise ValueError("n_clips must be >= 1")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return _dense_mask(int(n_clips), int(stride))


@lru_cache(maxsize=32)
def _dense_mask(n: int, stride: int) -> CandidateMask:
    i, j = np.indices((n, n))
    valid = j >= i
    if stride > 1:
        valid &= ((j - i + 1) % stride == 0) | (j == i)
    return CandidateMask(n, valid)


def candidate_bounds(grid: ClipGrid, mask: CandidateMask) -> tuple[np.ndarray, np.ndarray]:
    """Start and end seconds of every valid cell, in ``mask.indices()`` order."""
    ii, jj = mask.indices()
    edges = np.arange(grid.n_clips + 1) * grid.duration_s / grid.n_clips
    edges[-1] = grid.duration_s
    return edges[ii], edges[jj + 1]


def best_candidate(score_map) -> tuple[int, int]:
    """Argmax over valid cells, ties to the smaller start then smaller end.

    Accepts a ``ScoreMap2D`` or any object with ``values`` and ``mask``.
    """
    valid = score_map.mask.valid
    if not valid.any():
        raise ValueError("score map has no valid cells")
    ii, jj = np.nonzero(valid)
    # np.nonzero is row-major, so argmax's first-hit rule is the (i, j) tie-break
    k = int(np.argmax(score_map.values[ii, jj]))
    return int(ii[k]), int(jj[k])
