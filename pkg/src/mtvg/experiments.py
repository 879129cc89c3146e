"""Dataset-level helpers: predict, evaluate and ensemble trained models."""

from __future__ import annotations

from typing import Sequence

from .ensemble import intra_fuse
from .evaluation import EvalReport, Prediction, evaluate
from .fusion import FusionParams
from .matching import Dataset, MatchModelParams, ScoreMap2D, predict
from .temporal import ClipGrid, best_candidate, candidate_interval

Model = tuple[FusionParams, MatchModelParams]


def ground_truth(dataset: Dataset) -> dict[tuple[str, str], object]:
    return {(ann.video_id, q.query_id): q.gt for _, ann in dataset for q in ann.queries}


def predict_maps(dataset: Dataset, model: Model, n_clips: int) -> dict[tuple[str, str], ScoreMap2D]:
    fusion, scorer = model
    out = {}
    for bundle, ann in dataset:
        grid = ClipGrid(ann.duration_s, n_clips)
        for qid, m in predict(bundle, ann, fusion, scorer, grid).items():
            out[(ann.video_id, qid)] = m
    return out


def maps_to_predictions(maps: dict[tuple[str, str], ScoreMap2D], durations: dict[str, float]
                        ) -> list[Prediction]:
    preds = []
    for (vid, qid), m in maps.items():
        i, j = best_candidate(m)
        grid = ClipGrid(durations[vid], m.n_clips)
        preds.append(Prediction(vid, qid, candidate_interval(grid, i, j), float(m.values[i, j])))
    return preds


def _durations(dataset: Dataset) -> dict[str, float]:
    return {ann.video_id: ann.duration_s for _, ann in dataset}


def evaluate_predictions(dataset: Dataset, preds: Sequence[Prediction]) -> EvalReport:
    return evaluate({(p.video_id, p.query_id): p.interval for p in preds}, ground_truth(dataset))


def evaluate_model(dataset: Dataset, model: Model, n_clips: int) -> EvalReport:
    maps = predict_maps(dataset, model, n_clips)
    return evaluate_predictions(dataset, maps_to_predictions(maps, _durations(dataset)))


def evaluate_ensemble(dataset: Dataset, models: Sequence[Model], n_clips: int) -> EvalReport:
    """Intra-framework fusion: sum each query's combined maps over models."""
    per_model = [predict_maps(dataset, m, n_clips) for m in models]
    fused = {key: intra_fuse([maps[key] for maps in per_model]) for key in per_model[0]}
    return evaluate_predictions(dataset, maps_to_predictions(fused, _durations(dataset)))
