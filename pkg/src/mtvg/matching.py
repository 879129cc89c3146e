"""Lightweight moment/query scorer producing contrastive and IoU 2D maps.

A candidate (i, j) is embedded as the L2-normalised projection of the mean
fused row over clips i..j. The contrastive map is its cosine with the
normalised projected query. The IoU map is a sigmoid of a linear head over
two query-modulated features concatenated: the unnormalised projected span
mean times the query embedding, and the same for the span's context (the
``L`` clips on either side of an ``L``-clip span). A linear head over plain
[moment; query] would score every query of a video identically up to a
shift, and normalised means cannot see a span diluted by background, hence
this form. Training minimises BCE on
scaled-IoU targets plus a symmetric InfoNCE over the ground-truth-best
candidates of one video's queries, using hand-derived gradients and plain
gradient descent.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, fields
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import augmentation
from .features import AnnotationSet, FeatureBundle, QueryAnnotation
from .fusion import (
    ConcatFusionParams,
    FusionParams,
    concat_fuse_grad,
    fuse_inputs,
    fusion_from_tensors,
    fusion_inputs,
    fusion_to_tensors,
    init_concat_params,
    init_weighted_params,
    weighted_fuse_grad,
)
from .temporal import CandidateMask, ClipGrid, candidate_bounds, dense_candidates, iou_many

logger = logging.getLogger(__name__)

KINDS = ("cons", "iou", "combined")
_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class ScoreMap2D:
    n_clips: int
    mask: CandidateMask
    values: np.ndarray  # n x n; invalid cells hold NaN
    kind: str

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown score map kind {self.kind!r}")
        if self.mask.n_clips != self.n_clips:
            raise ValueError("mask size does not match n_clips")
        v = np.array(self.values, dtype=np.float64)
        if v.shape != (self.n_clips, self.n_clips):
            raise ValueError(f"values shape {v.shape} != ({self.n_clips}, {self.n_clips})")
        v[~self.mask.valid] = np.nan
        cells = v[self.mask.valid]
        if not np.all(np.isfinite(cells)):
            raise ValueError("non-finite score on a valid cell")
        lo = -1.0 if self.kind == "cons" else 0.0
        if self.kind != "combined" and (cells.min() < lo or cells.max() > 1.0):
            raise ValueError(f"{self.kind} scores outside [{lo}, 1]")
        if self.kind == "combined" and cells.min() < 0.0:
            raise ValueError("combined scores must be non-negative")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def cells(self) -> np.ndarray:
        """Valid-cell scores in row-major order."""
        return self.values[self.mask.valid]

    @classmethod
    def from_cells(cls, mask: CandidateMask, cells: np.ndarray, kind: str) -> ScoreMap2D:
        values = np.full((mask.n_clips, mask.n_clips), np.nan)
        values[mask.valid] = cells
        return cls(mask.n_clips, mask, values, kind)


@dataclass(frozen=True, eq=False)
class MatchModelParams:
    moment_projection: np.ndarray  # d_e x d_f
    query_projection: np.ndarray  # d_e x Dq
    iou_head: np.ndarray  # 2 * d_e: [moment part; context part]
    iou_bias: float = 0.0

    def __post_init__(self) -> None:
        m = np.asarray(self.moment_projection, dtype=np.float64)
        q = np.asarray(self.query_projection, dtype=np.float64)
        h = np.asarray(self.iou_head, dtype=np.float64).reshape(-1)
        if m.ndim != 2 or q.ndim != 2 or m.shape[0] != q.shape[0]:
            raise ValueError(f"projection shapes {m.shape} and {q.shape} disagree on d_e")
        if h.shape != (2 * m.shape[0],):
            raise ValueError(f"iou_head must have {2 * m.shape[0]} entries, got {h.size}")
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(q)) and np.all(np.isfinite(h))
                and math.isfinite(self.iou_bias)):
            raise ValueError("non-finite model parameters")
        object.__setattr__(self, "moment_projection", m)
        object.__setattr__(self, "query_projection", q)
        object.__setattr__(self, "iou_head", h)
        object.__setattr__(self, "iou_bias", float(self.iou_bias))

    @property
    def embed_dim(self) -> int:
        return self.moment_projection.shape[0]


def init_model_params(fused_dim: int, query_dim: int, embed_dim: int = 256, seed: int = 0) -> MatchModelParams:
    rng = np.random.default_rng([seed, 21])
    bm, bq = 1.0 / math.sqrt(fused_dim), 1.0 / math.sqrt(query_dim)
    return MatchModelParams(
        rng.uniform(-bm, bm, (embed_dim, fused_dim)),
        rng.uniform(-bq, bq, (embed_dim, query_dim)),
        np.zeros(2 * embed_dim),
        0.0,
    )


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 0.5
    seed: int = 0
    iou_scale_min: float = 0.3
    iou_scale_max: float = 0.7
    contrastive_temperature: float = 0.1
    augmentation: bool = False
    min_cut_fraction: float | None = None  # None: 8 full-video clips
    cuts_per_video: int = 1
    fused_dim: int = 1024  # concat projection width
    weighted_dim: int = 512  # per-track width of the weighted scheme
    embed_dim: int = 256
    bce_weight: float = 1.0
    nce_weight: float = 1.0
    max_grad_norm: float | None = 5.0  # clip the global gradient norm per step

    def __post_init__(self) -> None:
        if not 0 <= self.iou_scale_min < self.iou_scale_max <= 1:
            raise ValueError("need 0 <= iou_scale_min < iou_scale_max <= 1")
        if not self.contrastive_temperature > 0:
            raise ValueError("contrastive_temperature must be > 0")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 0 or self.cuts_per_video < 0:
            raise ValueError("epochs and cuts_per_video must be >= 0")
        if self.min_cut_fraction is not None and not 0 <= self.min_cut_fraction <= 1:
            raise ValueError("min_cut_fraction must be in [0, 1]")
        if min(self.fused_dim, self.weighted_dim, self.embed_dim) < 1:
            raise ValueError("model widths must be positive")
        if self.max_grad_norm is not None and not self.max_grad_norm > 0:
            raise ValueError("max_grad_norm must be > 0")

    @classmethod
    def from_dict(cls, doc: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**doc)


class TrainingDiverged(RuntimeError):
    pass


# -- candidate geometry --------------------------------------------------------

@lru_cache(maxsize=16)
def _span_matrix(n: int) -> np.ndarray:
    """C x n matrix whose row c averages clips i..j of dense candidate c."""
    ii, jj = dense_candidates(n).indices()
    a = np.zeros((ii.size, n))
    for c, (i, j) in enumerate(zip(ii, jj)):
        a[c, i:j + 1] = 1.0 / (j - i + 1)
    a.setflags(write=False)
    return a


@lru_cache(maxsize=16)
def _context_matrix(n: int) -> np.ndarray:
    """C x n matrix averaging the L clips before and L clips after each span of length L."""
    ii, jj = dense_candidates(n).indices()
    a = np.zeros((ii.size, n))
    for c, (i, j) in enumerate(zip(ii, jj)):
        width = j - i + 1
        a[c, max(0, i - width):i] = 1.0
        a[c, j + 1:min(n, j + 1 + width)] = 1.0
        total = a[c].sum()
        if total:
            a[c] /= total
    a.setflags(write=False)
    return a


def _normalize(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), _EPS)
    return x / norms, norms


def _normalize_backward(y: np.ndarray, norms: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return (dy - y * np.sum(y * dy, axis=-1, keepdims=True)) / norms


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# -- forward ops ---------------------------------------------------------------

def moment_embedding(fused_grid: np.ndarray, i: int, j: int, params: MatchModelParams) -> np.ndarray:
    n = fused_grid.shape[0]
    if not 0 <= i <= j < n:
        raise IndexError(f"invalid candidate ({i}, {j}) for {n} clips")
    m = params.moment_projection @ fused_grid[i:j + 1].mean(axis=0)
    norm = np.linalg.norm(m)
    return m / norm if norm > 0 else m


def span_features(fused_grid: np.ndarray, i: int, j: int, params: MatchModelParams
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Unnormalised projected means of span (i, j) and of its flanking context.

    The context is the L clips before and the L clips after an L-clip span,
    clipped to the grid; it is the zero vector when both sides are empty.
    """
    n = fused_grid.shape[0]
    if not 0 <= i <= j < n:
        raise IndexError(f"invalid candidate ({i}, {j}) for {n} clips")
    width = j - i + 1
    inner = params.moment_projection @ fused_grid[i:j + 1].mean(axis=0)
    rows = list(range(max(0, i - width), i)) + list(range(j + 1, min(n, j + 1 + width)))
    if not rows:
        return inner, np.zeros(params.embed_dim)
    return inner, params.moment_projection @ fused_grid[rows].mean(axis=0)


def _moment_embeddings(fused_grid: np.ndarray, params: MatchModelParams):
    n = fused_grid.shape[0]
    h = fused_grid @ params.moment_projection.T
    m = _span_matrix(n) @ h
    e, e_norms = _normalize(m)
    o = _context_matrix(n) @ h
    return h, m, (e, e_norms), o


def _iou_logits(m, o, u_hat, params: MatchModelParams) -> np.ndarray:
    d = params.embed_dim
    return ((u_hat * params.iou_head[:d]) @ m.T + (u_hat * params.iou_head[d:]) @ o.T
            + params.iou_bias)


def _query_embeddings(q: np.ndarray, params: MatchModelParams):
    u = q @ params.query_projection.T
    u_hat, norms = _normalize(u)
    return u_hat, norms


def _check_dims(fused_grid: np.ndarray, query_dim: int, params: MatchModelParams) -> None:
    if fused_grid.ndim != 2 or fused_grid.shape[1] != params.moment_projection.shape[1]:
        raise ValueError(f"fused grid {fused_grid.shape} does not fit moment projection "
                         f"{params.moment_projection.shape}")
    if query_dim != params.query_projection.shape[1]:
        raise ValueError(f"query dim {query_dim} != {params.query_projection.shape[1]}")


def score_maps(fused_grid: np.ndarray, query: QueryAnnotation, params: MatchModelParams
               ) -> tuple[ScoreMap2D, ScoreMap2D]:
    _check_dims(fused_grid, query.embedding.size, params)
    mask = dense_candidates(fused_grid.shape[0])
    _, m, (e, _), o = _moment_embeddings(fused_grid, params)
    u_hat, _ = _query_embeddings(query.embedding[None, :], params)
    cons = np.clip(e @ u_hat[0], -1.0, 1.0)
    logits = _iou_logits(m, o, u_hat, params)[0]
    return (ScoreMap2D.from_cells(mask, cons, "cons"),
            ScoreMap2D.from_cells(mask, _sigmoid(logits), "iou"))


def combine_scores(s_cons: ScoreMap2D, s_iou: ScoreMap2D) -> ScoreMap2D:
    """S = (0.5 * S_cons + 0.5) ** 0.3 * S_iou on valid cells."""
    if s_cons.kind != "cons" or s_iou.kind != "iou":
        raise ValueError(f"expected (cons, iou) maps, got ({s_cons.kind}, {s_iou.kind})")
    if s_cons.mask != s_iou.mask:
        raise ValueError("score maps have different candidate masks")
    valid = s_cons.mask.valid
    out = np.full(valid.shape, np.nan)
    base = np.maximum(s_cons.values[valid] * 0.5 + 0.5, 0.0)
    out[valid] = base ** 0.3 * s_iou.values[valid]
    return ScoreMap2D(s_cons.n_clips, s_cons.mask, out, "combined")


# -- training sample -----------------------------------------------------------

@dataclass
class Sample:
    video_id: str
    inputs: object  # fusion inputs: matrix (concat) or list of matrices (weighted)
    queries: np.ndarray  # B x Dq
    targets: np.ndarray  # B x C scaled-IoU targets
    positives: np.ndarray  # B candidate indices with the highest IoU


def make_sample(bundle: FeatureBundle, ann: AnnotationSet, fusion: FusionParams,
                n_clips: int, cfg: TrainConfig) -> Sample:
    if bundle.video_id != ann.video_id:
        raise ValueError(f"bundle {bundle.video_id!r} paired with annotations {ann.video_id!r}")
    grid = ClipGrid(ann.duration_s, n_clips)
    starts, ends = candidate_bounds(grid, dense_candidates(n_clips))
    ious = np.stack([iou_many(starts, ends, q.gt) for q in ann.queries])
    span = cfg.iou_scale_max - cfg.iou_scale_min
    targets = np.clip((ious - cfg.iou_scale_min) / span, 0.0, 1.0)
    return Sample(
        video_id=bundle.video_id,
        inputs=fusion_inputs(bundle, n_clips, fusion),
        queries=np.stack([q.embedding for q in ann.queries]),
        targets=targets,
        positives=np.argmax(ious, axis=1),
    )


# -- loss and gradients --------------------------------------------------------

@dataclass
class LossTerms:
    total: float
    bce: float
    nce: float


def _log_softmax(z: np.ndarray, axis: int) -> np.ndarray:
    zmax = z.max(axis=axis, keepdims=True)
    return z - zmax - np.log(np.exp(z - zmax).sum(axis=axis, keepdims=True))


def loss_and_grads(sample: Sample, fusion: FusionParams, model: MatchModelParams,
                   cfg: TrainConfig, need_grads: bool = True):
    """Loss terms for one video and, optionally, gradients keyed like the checkpoint tensors."""
    f = fuse_inputs(sample.inputs, fusion)
    n = f.shape[0]
    h, m, (e, e_norms), o = _moment_embeddings(f, model)
    u_hat, u_norms = _query_embeddings(sample.queries, model)
    d = model.embed_dim
    a_m, a_o = model.iou_head[:d], model.iou_head[d:]
    b, c = sample.targets.shape
    tau = cfg.contrastive_temperature

    z = _iou_logits(m, o, u_hat, model)
    y = sample.targets
    # softplus(z) - y z, written to stay finite for large |z|
    bce = float(np.mean(np.logaddexp(0.0, z) - y * z))

    pos = e[sample.positives]
    logits = u_hat @ pos.T / tau
    lsm_rows = _log_softmax(logits, axis=1)
    lsm_cols = _log_softmax(logits, axis=0)
    diag = np.arange(b)
    nce = float(-0.5 * (lsm_rows[diag, diag].mean() + lsm_cols[diag, diag].mean()))

    terms = LossTerms(cfg.bce_weight * bce + cfg.nce_weight * nce, bce, nce)
    if not need_grads:
        return terms, None

    dz = cfg.bce_weight * (_sigmoid(z) - y) / (b * c)
    eye = np.eye(b)
    d_logits = cfg.nce_weight * 0.5 / b * ((np.exp(lsm_rows) - eye) + (np.exp(lsm_cols) - eye))

    dz_m, dz_o = dz @ m, dz @ o  # B x d_e
    d_m = dz.T @ (u_hat * a_m)
    d_o = dz.T @ (u_hat * a_o)
    d_uhat = dz_m * a_m + dz_o * a_o + d_logits @ pos / tau
    d_e = np.zeros_like(e)
    np.add.at(d_e, sample.positives, d_logits.T @ u_hat / tau)

    d_head = np.concatenate([(dz_m * u_hat).sum(axis=0), (dz_o * u_hat).sum(axis=0)])
    d_bias = float(dz.sum())

    d_m = d_m + _normalize_backward(e, e_norms, d_e)
    d_h = _span_matrix(n).T @ d_m + _context_matrix(n).T @ d_o
    d_moment_proj = d_h.T @ f
    d_f = d_h @ model.moment_projection
    d_u = _normalize_backward(u_hat, u_norms, d_uhat)
    d_query_proj = d_u.T @ sample.queries

    grads = {
        "model.moment_projection": d_moment_proj,
        "model.query_projection": d_query_proj,
        "model.iou_head": d_head,
        "model.iou_bias": np.array(d_bias),
    }
    if isinstance(fusion, ConcatFusionParams):
        grads["fusion.projection"] = concat_fuse_grad(sample.inputs, fusion, d_f)
    else:
        g = weighted_fuse_grad(sample.inputs, fusion, d_f)
        for eid, gp in zip(fusion.extractor_ids, g.per_track_projection):
            grads[f"fusion.projection.{eid}"] = gp
        grads["fusion.weight_logits"] = g.weight_logits
        grads["fusion.gamma"] = np.array(g.gamma)
    return terms, grads


# -- parameter <-> tensor dict -------------------------------------------------

def model_to_tensors(model: MatchModelParams) -> dict[str, np.ndarray]:
    return {
        "model.moment_projection": model.moment_projection,
        "model.query_projection": model.query_projection,
        "model.iou_head": model.iou_head,
        "model.iou_bias": np.array(model.iou_bias),
    }


def model_from_tensors(tensors: dict[str, np.ndarray]) -> MatchModelParams:
    return MatchModelParams(tensors["model.moment_projection"], tensors["model.query_projection"],
                            tensors["model.iou_head"], float(tensors["model.iou_bias"]))


def params_to_tensors(fusion: FusionParams, model: MatchModelParams) -> tuple[dict[str, np.ndarray], dict]:
    tensors, meta = fusion_to_tensors(fusion)
    tensors.update(model_to_tensors(model))
    return tensors, meta


def params_from_tensors(tensors: dict[str, np.ndarray], meta: dict) -> tuple[FusionParams, MatchModelParams]:
    return fusion_from_tensors(tensors, meta), model_from_tensors(tensors)


# -- training ------------------------------------------------------------------

Dataset = Sequence[tuple[FeatureBundle, AnnotationSet]]


@dataclass
class TrainResult:
    fusion: FusionParams
    model: MatchModelParams
    log: list[dict] = field(default_factory=list)


def train(dataset: Dataset, fusion_mode: str, config: TrainConfig, n_clips: int = 128,
          init: tuple[FusionParams, MatchModelParams] | None = None) -> TrainResult:
    """Fit fusion and scorer parameters by per-video gradient descent.

    ``init`` warm-starts from existing parameters (see ``fusion.warm_start_params``).
    The result is a pure function of the dataset, config and ``n_clips``.
    """
    if not dataset:
        raise ValueError("empty training set")
    layout = [(t.extractor_id, t.dim) for t in dataset[0][0].tracks]
    query_dim = dataset[0][1].queries[0].embedding.size
    if init is not None:
        fusion, model = init
        if [tuple(x) for x in fusion.layout] != layout:
            raise ValueError(f"initial fusion layout {fusion.layout} != data layout {layout}")
    elif fusion_mode == "concat":
        fusion = init_concat_params(layout, config.fused_dim, config.seed)
    elif fusion_mode == "weighted":
        fusion = init_weighted_params(layout, config.weighted_dim, config.seed)
    else:
        raise ValueError(f"unknown fusion mode {fusion_mode!r}")
    if init is None:
        model = init_model_params(fusion.out_dim, query_dim, config.embed_dim, config.seed)

    tensors, meta = params_to_tensors(fusion, model)
    full = [make_sample(b, a, fusion, n_clips, config) for b, a in dataset]
    rng = np.random.default_rng([config.seed, 31])
    log: list[dict] = []
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        totals = np.zeros(3)
        steps = n_cuts = n_fallbacks = 0
        for v in rng.permutation(len(dataset)):
            samples = [full[v]]
            if config.augmentation:
                for _ in range(config.cuts_per_video):
                    cut = _draw_cut(dataset[v], fusion, n_clips, config, rng)
                    n_cuts += 1
                    if cut is None:
                        n_fallbacks += 1
                    else:
                        samples.append(cut)
            for sample in samples:
                terms, grads = loss_and_grads(sample, fusion, model, config)
                if not all(math.isfinite(x) for x in (terms.total, terms.bce, terms.nce)):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}, video {sample.video_id!r}: "
                        f"bce={terms.bce}, nce={terms.nce}; try a smaller learning_rate")
                totals += (terms.total, terms.bce, terms.nce)
                steps += 1
                if config.learning_rate > 0:
                    step = config.learning_rate
                    if config.max_grad_norm is not None:
                        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
                        if norm > config.max_grad_norm:
                            step *= config.max_grad_norm / norm
                    for name, g in grads.items():
                        tensors[name] = tensors[name] - step * g
                    fusion, model = params_from_tensors(tensors, meta)
        mean = totals / max(steps, 1)
        record = {"epoch": epoch, "loss": mean[0], "bce": mean[1], "nce": mean[2],
                  "steps": steps, "cuts": n_cuts, "cut_fallbacks": n_fallbacks,
                  "wall_time_s": time.perf_counter() - t0}
        logger.info("epoch %d loss %.5f (bce %.5f, nce %.5f)", epoch, *mean)
        log.append(record)
    return TrainResult(fusion, model, log)


def _draw_cut(pair, fusion: FusionParams, n_clips: int, cfg: TrainConfig,
              rng: np.random.Generator) -> Sample | None:
    bundle, ann = pair
    if cfg.min_cut_fraction is None:
        min_len = 8 * ann.duration_s / n_clips
    else:
        min_len = cfg.min_cut_fraction * ann.duration_s
    try:
        spec = augmentation.sample_cut(ann, rng, min_queries=1, min_len_s=min_len)
    except augmentation.NoFeasibleCut:
        return None
    return make_sample(augmentation.slice_bundle(bundle, spec), augmentation.remap(ann, spec),
                       fusion, n_clips, cfg)


# -- prediction ----------------------------------------------------------------

def predict(bundle: FeatureBundle, annotations: AnnotationSet, fusion: FusionParams,
            model: MatchModelParams, grid: ClipGrid) -> dict[str, ScoreMap2D]:
    """Combined score map per query, in annotation order."""
    if bundle.video_id != annotations.video_id:
        raise ValueError(f"bundle {bundle.video_id!r} paired with annotations {annotations.video_id!r}")
    fused = fuse_inputs(fusion_inputs(bundle, grid.n_clips, fusion), fusion)
    out = {}
    for q in annotations.queries:
        s_cons, s_iou = score_maps(fused, q, model)
        out[q.query_id] = combine_scores(s_cons, s_iou)
    return out
