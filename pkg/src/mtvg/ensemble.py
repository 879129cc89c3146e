"""Model ensembling: 2D score-map summation and candidate-level NMS fusion."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .container import atomic_write
from .matching import ScoreMap2D
from .temporal import ClipGrid, Interval, candidate_bounds

NORMALIZATIONS = ("minmax", "zscore", "none")


@dataclass(frozen=True)
class ScoredCandidate:
    interval: Interval
    score: float
    model_id: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "score", float(self.score))
        if not math.isfinite(self.score):
            raise ValueError(f"non-finite candidate score {self.score}")

    def with_score(self, score: float) -> ScoredCandidate:
        return ScoredCandidate(self.interval, float(score), self.model_id)


@dataclass(frozen=True)
class NormalizationSpec:
    method: str = "minmax"

    def __post_init__(self) -> None:
        if self.method not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}, got {self.method!r}")


def intra_fuse(maps: Sequence[ScoreMap2D]) -> ScoreMap2D:
    """Cellwise sum of combined score maps that share one candidate mask."""
    if not maps:
        raise ValueError("nothing to fuse")
    first = maps[0]
    for k, m in enumerate(maps):
        if m.kind != "combined":
            raise ValueError(f"map {k} has kind {m.kind!r}, expected 'combined'")
        if m.mask != first.mask:
            raise ValueError(f"map {k} has a different candidate mask")
    valid = first.mask.valid
    total = np.zeros(int(valid.sum()))
    for m in maps:
        total = total + m.values[valid]
    return ScoreMap2D.from_cells(first.mask, total, "combined")


def _nms_key(c: ScoredCandidate):
    return (-c.score, c.interval.start_s, c.interval.length, c.model_id)


def extract_candidates(score_map: ScoreMap2D, grid: ClipGrid, top_k: int,
                       model_id: str = "") -> list[ScoredCandidate]:
    """The ``top_k`` best valid cells as intervals, best first (ties: smaller i, then j)."""
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    if grid.n_clips != score_map.n_clips:
        raise ValueError(f"grid has {grid.n_clips} clips, map has {score_map.n_clips}")
    ii, jj = score_map.mask.indices()
    if ii.size == 0:
        raise ValueError("score map has no valid cells")
    scores = score_map.values[ii, jj]
    order = np.lexsort((jj, ii, -scores))[:top_k]
    starts, ends = candidate_bounds(grid, score_map.mask)
    return [ScoredCandidate(Interval(float(starts[k]), float(ends[k])), float(scores[k]), model_id)
            for k in order]


def normalize_scores(cands: Mapping[str, Sequence[ScoredCandidate]], spec: NormalizationSpec
                     ) -> dict[str, list[ScoredCandidate]]:
    """Bring each model's scores to a common scale.

    minmax maps onto [0, 1] (a constant list becomes all 0.5); zscore
    standardises (zero spread becomes all 0); none is the identity.
    """
    out = {}
    for model_id, lst in cands.items():
        lst = list(lst)
        if spec.method == "none":
            out[model_id] = lst
            continue
        if not lst:
            raise ValueError(f"model {model_id!r} has no candidates to normalise")
        s = np.array([c.score for c in lst], dtype=np.float64)
        if spec.method == "minmax":
            lo, hi = s.min(), s.max()
            new = np.full_like(s, 0.5) if hi == lo else (s - lo) / (hi - lo)
        else:
            mu, sigma = s.mean(), s.std()
            new = np.zeros_like(s) if sigma == 0 else (s - mu) / sigma
        out[model_id] = [c.with_score(v) for c, v in zip(lst, new)]
    return out


def temporal_nms(cands: Iterable[ScoredCandidate], iou_threshold: float = 0.5) -> list[ScoredCandidate]:
    """Greedy NMS: keep the best remaining, drop everything overlapping it above the threshold.

    Ties on score go to the earlier start, then the shorter interval, then
    the lexicographically smaller model id.
    """
    if not 0 < iou_threshold <= 1:
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    ordered = sorted(cands, key=_nms_key)
    if not ordered:
        return []
    starts = np.array([c.interval.start_s for c in ordered])
    ends = np.array([c.interval.end_s for c in ordered])
    alive = np.ones(len(ordered), dtype=bool)
    kept = []
    for k, c in enumerate(ordered):
        if not alive[k]:
            continue
        kept.append(c)
        rest = slice(k + 1, None)
        inter = np.maximum(0.0, np.minimum(ends[rest], ends[k]) - np.maximum(starts[rest], starts[k]))
        union = np.maximum(ends[rest], ends[k]) - np.minimum(starts[rest], starts[k])
        alive[rest] &= ~(inter / union > iou_threshold)
    return kept


def inter_fuse(model_outputs: Mapping[str, Sequence[ScoredCandidate]], spec: NormalizationSpec,
               top_k_per_model: int = 10, iou_threshold: float = 0.5) -> list[ScoredCandidate]:
    """Normalise per model, keep each model's top_k, pool, then NMS."""
    if not model_outputs:
        raise ValueError("no model outputs to fuse")
    if top_k_per_model < 1:
        raise ValueError("top_k_per_model must be >= 1")
    pooled = []
    for lst in normalize_scores(model_outputs, spec).values():
        pooled.extend(sorted(lst, key=_nms_key)[:top_k_per_model])
    return temporal_nms(pooled, iou_threshold)


# -- candidate exchange file ---------------------------------------------------

def write_candidates(path, records: Iterable[tuple[str, str, ScoredCandidate]]) -> None:
    """JSON lines: {video_id, query_id, model_id, start_s, end_s, score}."""
    lines = []
    for video_id, query_id, c in records:
        lines.append(json.dumps({
            "video_id": video_id, "query_id": query_id, "model_id": c.model_id,
            "start_s": c.interval.start_s, "end_s": c.interval.end_s, "score": c.score,
        }))
    atomic_write(path, ("\n".join(lines) + "\n" if lines else "").encode("utf-8"))


def read_candidates(path) -> dict[tuple[str, str], dict[str, list[ScoredCandidate]]]:
    """Candidates grouped by (video_id, query_id), then model_id, in file order."""
    out: dict[tuple[str, str], dict[str, list[ScoredCandidate]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                key = (str(rec["video_id"]), str(rec["query_id"]))
                c = ScoredCandidate(Interval(float(rec["start_s"]), float(rec["end_s"])),
                                    float(rec["score"]), str(rec["model_id"]))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}: record {lineno}: {exc}") from None
            out.setdefault(key, {}).setdefault(c.model_id, []).append(c)
    return out


def best_interval(cands: Sequence[ScoredCandidate]) -> ScoredCandidate:
    return min(cands, key=_nms_key)


def fuse_maps_to_candidates(maps: Sequence[ScoreMap2D], grid: ClipGrid, top_k: int,
                            model_id: str = "intra") -> list[ScoredCandidate]:
    return extract_candidates(intra_fuse(maps), grid, top_k, model_id)
