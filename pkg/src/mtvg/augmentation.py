"""Multi-scale temporal sensing: random sub-video cuts that keep moments whole.

A cut retains a contiguous run of moments (in start order). Both cut points lie
outside the interior of every annotated moment, retained or not, so nothing is
bisected. Cutting a 3000 s video to 300 s shrinks the clip length on a 128-cell
grid from 23.4375 s to 2.34375 s.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .features import AnnotationSet, FeatureBundle, FeatureTrack, QueryAnnotation
from .temporal import Interval

Segments = list[tuple[float, float]]  # closed [lo, hi], lo <= hi


class NoFeasibleCut(ValueError):
    """No run of moments admits cut points outside all moment interiors."""

    def __init__(self, video_id: str, reason: str):
        super().__init__(f"{video_id}: no feasible cut ({reason})")
        self.video_id = video_id
        self.reason = reason


@dataclass(frozen=True)
class CutSpec:
    cut: Interval
    retained_query_ids: tuple[str, ...]


def _sorted_queries(ann: AnnotationSet) -> list[QueryAnnotation]:
    return sorted(ann.queries, key=lambda q: (q.gt.start_s, q.gt.end_s))


def _subtract_interiors(lo: float, hi: float, moments: list[Interval]) -> Segments:
    """[lo, hi] minus the open interiors of ``moments``."""
    if lo > hi:
        return []
    segs = [(lo, hi)]
    for m in moments:
        nxt = []
        for a, b in segs:
            if m.end_s <= a or m.start_s >= b:
                nxt.append((a, b))
                continue
            if a <= m.start_s:
                nxt.append((a, m.start_s))
            if m.end_s <= b:
                nxt.append((m.end_s, b))
        segs = nxt
    return segs


def _clip_segments(segs: Segments, lo: float = -math.inf, hi: float = math.inf) -> Segments:
    out = []
    for a, b in segs:
        a2, b2 = max(a, lo), min(b, hi)
        if a2 <= b2:
            out.append((a2, b2))
    return out


def _sample_point(segs: Segments, rng: np.random.Generator) -> float:
    total = sum(b - a for a, b in segs)
    if total <= 0:
        a, _ = segs[int(rng.integers(len(segs)))]
        return a
    u = rng.random() * total
    for a, b in segs:
        width = b - a
        if u < width or (a, b) == segs[-1]:
            return min(max(a + u, a), b)
        u -= width
    raise AssertionError("unreachable")


def _is_exterior(p: float, moments: list[Interval]) -> bool:
    return all(p <= m.start_s or p >= m.end_s for m in moments)


def feasible_runs(ann: AnnotationSet, min_queries: int = 1, min_len_s: float = 0.0
                  ) -> list[tuple[int, int, Segments, Segments]]:
    """All runs [a..b] (start-order indices) with their start/end cut regions."""
    qs = _sorted_queries(ann)
    moments = [q.gt for q in qs]
    runs = []
    for a in range(len(qs)):
        left = max((m.end_s for m in moments[:a]), default=0.0)
        starts = _subtract_interiors(left, moments[a].start_s, moments)
        if not starts:
            continue
        for b in range(a + min_queries - 1, len(qs)):
            inner_end = max(m.end_s for m in moments[a:b + 1])
            right = min((m.start_s for m in moments[b + 1:]), default=ann.duration_s)
            ends = _subtract_interiors(inner_end, right, moments)
            if not ends:
                continue
            # the earliest start must leave room for the minimum length
            latest_end = max(hi for _, hi in ends)
            usable = _clip_segments(starts, hi=latest_end - min_len_s)
            if usable:
                runs.append((a, b, usable, ends))
    return runs


def sample_cut(ann: AnnotationSet, rng: np.random.Generator, min_queries: int = 1,
               min_len_s: float = 0.0) -> CutSpec:
    """Draw a run of moments uniformly, then each cut point uniformly in its gap.

    Raises ``NoFeasibleCut`` when no run satisfies the constraints; callers
    fall back to the full video.
    """
    if min_queries < 1:
        raise ValueError("min_queries must be >= 1")
    runs = feasible_runs(ann, min_queries, min_len_s)
    if not runs:
        raise NoFeasibleCut(ann.video_id, f"min_queries={min_queries}, min_len_s={min_len_s:g}")
    a, b, starts, ends = runs[int(rng.integers(len(runs)))]
    start = _sample_point(starts, rng)
    end_segs = _clip_segments(ends, lo=start + min_len_s)
    if not end_segs:  # start sits on the rounding edge of the length bound
        latest = max(hi for _, hi in ends)
        end_segs = [(latest, latest)]
    end = _sample_point(end_segs, rng)
    qs = _sorted_queries(ann)
    return CutSpec(Interval(start, end), tuple(q.query_id for q in qs[a:b + 1]))


def check_cut(ann: AnnotationSet, spec: CutSpec) -> None:
    """Raise ValueError unless ``spec`` satisfies every cut invariant for ``ann``."""
    cut = spec.cut
    if cut.end_s > ann.duration_s:
        raise ValueError(f"cut [{cut.start_s}, {cut.end_s}] exceeds duration {ann.duration_s}")
    if not spec.retained_query_ids:
        raise ValueError("cut retains no queries")
    by_id = {q.query_id: q for q in ann.queries}
    moments = [q.gt for q in ann.queries]
    for qid in spec.retained_query_ids:
        if qid not in by_id:
            raise ValueError(f"cut retains unknown query {qid!r}")
        if not cut.contains(by_id[qid].gt):
            raise ValueError(f"query {qid!r} is not inside the cut")
    dropped = [q.query_id for q in ann.queries
               if q.query_id not in spec.retained_query_ids and cut.contains(q.gt)]
    if dropped:
        raise ValueError(f"queries {dropped} lie inside the cut but are not retained")
    for p in (cut.start_s, cut.end_s):
        if not _is_exterior(p, moments):
            raise ValueError(f"cut point {p} falls inside a moment")
    order = [q.query_id for q in _sorted_queries(ann)]
    pos = [order.index(qid) for qid in spec.retained_query_ids]
    if pos != list(range(pos[0], pos[0] + len(pos))):
        raise ValueError("retained queries are not a contiguous run in start order")


def remap(ann: AnnotationSet, spec: CutSpec) -> AnnotationSet:
    """Annotations of the cut clip, in clip-local seconds."""
    check_cut(ann, spec)
    keep = set(spec.retained_query_ids)
    c0 = spec.cut.start_s
    length = spec.cut.end_s - c0
    queries = tuple(
        QueryAnnotation(q.query_id, q.embedding, Interval(q.gt.start_s - c0, q.gt.end_s - c0), q.text)
        for q in ann.queries if q.query_id in keep)
    return AnnotationSet(ann.video_id, length, queries)


def slice_bundle(bundle: FeatureBundle, spec: CutSpec) -> FeatureBundle:
    """Keep feature rows t with floor(cut start) <= t < ceil(cut end)."""
    cut = spec.cut
    if cut.end_s > bundle.duration_s:
        raise ValueError(f"cut ends at {cut.end_s}, past duration {bundle.duration_s}")
    lo = int(math.floor(cut.start_s))
    hi = min(int(math.ceil(cut.end_s)), bundle.n_rows)
    if hi <= lo:
        raise ValueError(f"cut [{cut.start_s}, {cut.end_s}] selects no feature rows")
    tracks = tuple(FeatureTrack(t.extractor_id, t.data[lo:hi]) for t in bundle.tracks)
    return FeatureBundle(bundle.video_id, cut.end_s - cut.start_s, tracks)
