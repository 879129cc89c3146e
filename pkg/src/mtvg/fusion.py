"""Multi-extractor feature fusion onto the clip grid.

Two schemes:

* concat: concatenate the K rows of each second, L2-normalise the joined row,
  segment-average onto the grid and apply one linear projection.
* weighted: per track, L2-normalise rows, segment-average, project to a common
  width, then take ``gamma * sum_k softmax(w)_k * v_k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence, Union

import numpy as np

from .features import FeatureBundle, l2_normalize_rows, pool_rows
from .temporal import ClipGrid

Layout = Sequence[tuple[str, int]]  # (extractor_id, feature dim) per track, in fusion order


@dataclass(frozen=True, eq=False)
class ConcatFusionParams:
    projection: np.ndarray  # d_out x sum(D_k)
    extractor_ids: tuple[str, ...]
    track_dims: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "extractor_ids", tuple(self.extractor_ids))
        object.__setattr__(self, "track_dims", tuple(int(d) for d in self.track_dims))
        w = np.asarray(self.projection, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] < 1:
            raise ValueError(f"projection must be d_out x d_in, got {w.shape}")
        if w.shape[1] != sum(self.track_dims):
            raise ValueError(f"projection takes {w.shape[1]} inputs, layout has {sum(self.track_dims)}")
        if len(self.extractor_ids) != len(self.track_dims):
            raise ValueError("extractor_ids and track_dims differ in length")
        if not np.all(np.isfinite(w)):
            raise ValueError("non-finite projection")
        object.__setattr__(self, "projection", w)

    @property
    def out_dim(self) -> int:
        return self.projection.shape[0]

    @property
    def layout(self) -> list[tuple[str, int]]:
        return list(zip(self.extractor_ids, self.track_dims))


@dataclass(frozen=True, eq=False)
class WeightedFusionParams:
    per_track_projection: tuple[np.ndarray, ...]  # K matrices, d_c x D_k
    weight_logits: np.ndarray  # K
    gamma: float
    extractor_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        projs = tuple(np.asarray(p, dtype=np.float64) for p in self.per_track_projection)
        logits = np.asarray(self.weight_logits, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "per_track_projection", projs)
        object.__setattr__(self, "weight_logits", logits)
        object.__setattr__(self, "extractor_ids", tuple(self.extractor_ids))
        object.__setattr__(self, "gamma", float(self.gamma))
        k = len(projs)
        if k < 1:
            raise ValueError("need at least one track")
        if logits.shape != (k,) or len(self.extractor_ids) != k:
            raise ValueError(f"{k} projections but {logits.size} logits, {len(self.extractor_ids)} ids")
        if len({p.shape[0] for p in projs}) != 1 or any(p.ndim != 2 for p in projs):
            raise ValueError("per-track projections must share the output width")
        if not (all(np.all(np.isfinite(p)) for p in projs) and np.all(np.isfinite(logits))
                and math.isfinite(self.gamma)):
            raise ValueError("non-finite fusion parameters")

    @property
    def out_dim(self) -> int:
        return self.per_track_projection[0].shape[0]

    @property
    def track_dims(self) -> tuple[int, ...]:
        return tuple(p.shape[1] for p in self.per_track_projection)

    @property
    def layout(self) -> list[tuple[str, int]]:
        return list(zip(self.extractor_ids, self.track_dims))


FusionParams = Union[ConcatFusionParams, WeightedFusionParams]


@dataclass(frozen=True)
class WeightedFusionGrads:
    per_track_projection: tuple[np.ndarray, ...]
    weight_logits: np.ndarray
    gamma: float


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


# -- grid inputs (parameter free) ----------------------------------------------

def _check_layout(bundle: FeatureBundle, layout: Layout) -> None:
    got = [(t.extractor_id, t.dim) for t in bundle.tracks]
    if got != list(layout):
        raise ValueError(f"bundle {bundle.video_id!r} tracks {got} do not match fusion layout {list(layout)}")


def concat_inputs(bundle: FeatureBundle, n_clips: int) -> np.ndarray:
    """Concat, then row L2-norm, then segment-average: n_clips x sum(D_k)."""
    joined = np.concatenate([t.data.astype(np.float64) for t in bundle.tracks], axis=1)
    return pool_rows(l2_normalize_rows(joined), n_clips)


def weighted_inputs(bundle: FeatureBundle, n_clips: int) -> list[np.ndarray]:
    """Per track: row L2-norm, then segment-average. K matrices n_clips x D_k."""
    return [pool_rows(l2_normalize_rows(t.data), n_clips) for t in bundle.tracks]


def fusion_inputs(bundle: FeatureBundle, n_clips: int, params: FusionParams):
    _check_layout(bundle, params.layout)
    if isinstance(params, ConcatFusionParams):
        return concat_inputs(bundle, n_clips)
    return weighted_inputs(bundle, n_clips)


# -- forward / backward -------------------------------------------------------

def concat_fuse(bundle: FeatureBundle, grid: ClipGrid, params: ConcatFusionParams) -> np.ndarray:
    _check_layout(bundle, params.layout)
    return concat_inputs(bundle, grid.n_clips) @ params.projection.T


def weighted_fuse_inputs(inputs: Sequence[np.ndarray], params: WeightedFusionParams) -> np.ndarray:
    if len(inputs) != len(params.per_track_projection):
        raise ValueError(f"{len(inputs)} inputs for {len(params.per_track_projection)} tracks")
    w_hat = softmax(params.weight_logits)
    out = np.zeros((inputs[0].shape[0], params.out_dim))
    for wk, g, p in zip(w_hat, inputs, params.per_track_projection):
        if g.shape[1] != p.shape[1]:
            raise ValueError(f"input width {g.shape[1]} != projection width {p.shape[1]}")
        out += wk * (g @ p.T)
    return params.gamma * out


def weighted_fuse(bundle: FeatureBundle, grid: ClipGrid, params: WeightedFusionParams) -> np.ndarray:
    _check_layout(bundle, params.layout)
    return weighted_fuse_inputs(weighted_inputs(bundle, grid.n_clips), params)


def fuse(bundle: FeatureBundle, grid: ClipGrid, params: FusionParams) -> np.ndarray:
    if isinstance(params, ConcatFusionParams):
        return concat_fuse(bundle, grid, params)
    return weighted_fuse(bundle, grid, params)


def fuse_inputs(inputs, params: FusionParams) -> np.ndarray:
    if isinstance(params, ConcatFusionParams):
        return inputs @ params.projection.T
    return weighted_fuse_inputs(inputs, params)


def concat_fuse_grad(inputs: np.ndarray, params: ConcatFusionParams, upstream: np.ndarray) -> np.ndarray:
    """Gradient of <upstream, inputs @ W.T> with respect to W."""
    if upstream.shape != (inputs.shape[0], params.out_dim):
        raise ValueError(f"upstream shape {upstream.shape} != output shape {(inputs.shape[0], params.out_dim)}")
    return upstream.T @ inputs


def weighted_fuse_grad(inputs: Sequence[np.ndarray], params: WeightedFusionParams,
                       upstream: np.ndarray) -> WeightedFusionGrads:
    """Gradients of <upstream, weighted_fuse_inputs(inputs, params)>."""
    n = inputs[0].shape[0]
    if upstream.shape != (n, params.out_dim):
        raise ValueError(f"upstream shape {upstream.shape} != output shape {(n, params.out_dim)}")
    w_hat = softmax(params.weight_logits)
    projected = [g @ p.T for g, p in zip(inputs, params.per_track_projection)]
    mixed = sum(wk * v for wk, v in zip(w_hat, projected))
    d_gamma = float(np.sum(upstream * mixed))
    d_mixed = params.gamma * upstream
    d_w_hat = np.array([np.sum(d_mixed * v) for v in projected])
    # softmax Jacobian: diag(w) - w w^T
    d_logits = w_hat * (d_w_hat - np.dot(w_hat, d_w_hat))
    d_proj = tuple(wk * d_mixed.T @ g for wk, g in zip(w_hat, inputs))
    return WeightedFusionGrads(d_proj, d_logits, d_gamma)


# -- initialisation -----------------------------------------------------------

def _uniform(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    bound = 1.0 / math.sqrt(shape[1])
    return rng.uniform(-bound, bound, size=shape)


def init_concat_params(layout: Layout, d_out: int = 1024, seed: int = 0) -> ConcatFusionParams:
    ids, dims = zip(*layout)
    rng = np.random.default_rng([seed, 11])
    return ConcatFusionParams(_uniform(rng, (d_out, sum(dims))), ids, dims)


def init_weighted_params(layout: Layout, d_c: int = 512, seed: int = 0) -> WeightedFusionParams:
    ids, dims = zip(*layout)
    rng = np.random.default_rng([seed, 12])
    projs = tuple(_uniform(rng, (d_c, d)) for d in dims)
    return WeightedFusionParams(projs, np.zeros(len(dims)), 1.0, ids)


def warm_start_params(old: FusionParams, new_layout: Layout, seed: int = 0) -> FusionParams:
    """Extend trained fusion parameters to a superset of tracks.

    Shared tracks keep their parameters; new tracks get fresh uniform
    projections and, for the weighted scheme, the mean of the old logits.
    """
    new_layout = [(str(e), int(d)) for e, d in new_layout]
    old_layout = dict(old.layout)
    new_ids = [e for e, _ in new_layout]
    if len(set(new_ids)) != len(new_ids):
        raise ValueError(f"duplicate extractor ids in {new_ids}")
    missing = [e for e in old_layout if e not in new_ids]
    if missing:
        raise ValueError(f"old tracks {missing} are not in the new layout")
    for e, d in new_layout:
        if e in old_layout and old_layout[e] != d:
            raise ValueError(f"track {e!r} changed width {old_layout[e]} -> {d}")
    rng = np.random.default_rng([seed, 13])

    if isinstance(old, ConcatFusionParams):
        offsets = np.cumsum((0,) + old.track_dims)
        old_cols = {e: old.projection[:, offsets[k]:offsets[k + 1]]
                    for k, e in enumerate(old.extractor_ids)}
        d_in = sum(d for _, d in new_layout)
        bound = 1.0 / math.sqrt(d_in)
        blocks = [old_cols[e] if e in old_cols else rng.uniform(-bound, bound, (old.out_dim, d))
                  for e, d in new_layout]
        return ConcatFusionParams(np.concatenate(blocks, axis=1), new_ids, [d for _, d in new_layout])

    old_proj = dict(zip(old.extractor_ids, old.per_track_projection))
    old_logit = dict(zip(old.extractor_ids, old.weight_logits))
    fresh_logit = float(np.mean(old.weight_logits))
    projs, logits = [], []
    for e, d in new_layout:
        if e in old_proj:
            projs.append(old_proj[e].copy())
            logits.append(old_logit[e])
        else:
            projs.append(_uniform(rng, (old.out_dim, d)))
            logits.append(fresh_logit)
    return replace(old, per_track_projection=tuple(projs), weight_logits=np.array(logits),
                   extractor_ids=tuple(new_ids))


# -- checkpoint tensors -------------------------------------------------------

def fusion_to_tensors(params: FusionParams) -> tuple[dict[str, np.ndarray], dict]:
    if isinstance(params, ConcatFusionParams):
        tensors = {"fusion.projection": params.projection}
        meta = {"fusion_mode": "concat"}
    else:
        tensors = {f"fusion.projection.{e}": p
                   for e, p in zip(params.extractor_ids, params.per_track_projection)}
        tensors["fusion.weight_logits"] = params.weight_logits
        tensors["fusion.gamma"] = np.array(params.gamma)
        meta = {"fusion_mode": "weighted"}
    meta["layout"] = [[e, d] for e, d in params.layout]
    return tensors, meta


def fusion_from_tensors(tensors: dict[str, np.ndarray], meta: dict) -> FusionParams:
    layout = [(str(e), int(d)) for e, d in meta["layout"]]
    ids = [e for e, _ in layout]
    mode = meta.get("fusion_mode")
    if mode == "concat":
        return ConcatFusionParams(tensors["fusion.projection"], ids, [d for _, d in layout])
    if mode == "weighted":
        return WeightedFusionParams(
            tuple(tensors[f"fusion.projection.{e}"] for e in ids),
            tensors["fusion.weight_logits"], float(tensors["fusion.gamma"]), ids)
    raise ValueError(f"unknown fusion mode {mode!r} in checkpoint")
