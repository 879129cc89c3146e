"""Feature tracks, annotations, grid pooling and synthetic fixtures."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .container import ContainerError, atomic_write, decode_features, encode_features
from .temporal import ClipGrid, Interval

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class FeatureTrack:
    extractor_id: str
    data: np.ndarray  # T x D, one row per second

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"track {self.extractor_id!r}: need a non-empty T x D matrix, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"track {self.extractor_id!r} contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def n_rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True, eq=False)
class FeatureBundle:
    video_id: str
    duration_s: float
    tracks: tuple[FeatureTrack, ...]
    warnings: tuple[str, ...] = field(default=())

    def __post_init__(self) -> None:
        object.__setattr__(self, "tracks", tuple(self.tracks))
        if not self.tracks:
            raise ValueError(f"bundle {self.video_id!r} has no tracks")
        if not (math.isfinite(self.duration_s) and self.duration_s > 0):
            raise ValueError(f"bundle {self.video_id!r}: bad duration {self.duration_s}")
        lengths = {t.n_rows for t in self.tracks}
        if len(lengths) != 1:
            raise ValueError(f"bundle {self.video_id!r}: tracks disagree on T {sorted(lengths)}")
        ids = [t.extractor_id for t in self.tracks]
        if len(set(ids)) != len(ids):
            raise ValueError(f"bundle {self.video_id!r}: duplicate extractor ids {ids}")

    @property
    def n_rows(self) -> int:
        return self.tracks[0].n_rows

    @property
    def extractor_ids(self) -> tuple[str, ...]:
        return tuple(t.extractor_id for t in self.tracks)

    def select(self, extractor_ids: Sequence[str]) -> FeatureBundle:
        """Sub-bundle with tracks in the given order."""
        by_id = {t.extractor_id: t for t in self.tracks}
        missing = [e for e in extractor_ids if e not in by_id]
        if missing:
            raise KeyError(f"bundle {self.video_id!r} lacks tracks {missing}")
        return FeatureBundle(self.video_id, self.duration_s,
                             tuple(by_id[e] for e in extractor_ids), self.warnings)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureBundle):
            return NotImplemented
        return (self.video_id == other.video_id and self.duration_s == other.duration_s
                and self.extractor_ids == other.extractor_ids
                and all(np.array_equal(a.data, b.data) for a, b in zip(self.tracks, other.tracks)))

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class QueryAnnotation:
    query_id: str
    embedding: np.ndarray
    gt: Interval
    text: str | None = None

    def __post_init__(self) -> None:
        emb = np.asarray(self.embedding, dtype=np.float64)
        if emb.ndim != 1 or emb.size == 0:
            raise ValueError(f"query {self.query_id!r}: embedding must be a non-empty vector")
        if not np.all(np.isfinite(emb)):
            raise ValueError(f"query {self.query_id!r}: non-finite embedding")
        if not np.any(emb):
            raise ValueError(f"query {self.query_id!r}: zero embedding")
        emb.setflags(write=False)
        object.__setattr__(self, "embedding", emb)


@dataclass(frozen=True)
class AnnotationSet:
    video_id: str
    duration_s: float
    queries: tuple[QueryAnnotation, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "queries", tuple(self.queries))
        if not self.queries:
            raise ValueError(f"annotations for {self.video_id!r} have no queries")
        for q in self.queries:
            if q.gt.end_s > self.duration_s:
                raise ValueError(f"query {q.query_id!r}: moment [{q.gt.start_s}, {q.gt.end_s}] "
                                 f"exceeds duration {self.duration_s}")
        ids = [q.query_id for q in self.queries]
        if len(set(ids)) != len(ids):
            raise ValueError(f"annotations for {self.video_id!r}: duplicate query ids")


# -- bundle I/O ---------------------------------------------------------------

def align_tracks(video_id: str, duration_s: float,
                 tracks: Sequence[FeatureTrack]) -> FeatureBundle:
    """Truncate tracks to the shortest T, recording one warning per truncated track."""
    t_min = min(t.n_rows for t in tracks)
    warnings = []
    aligned = []
    for t in tracks:
        if t.n_rows != t_min:
            msg = f"{video_id}: track {t.extractor_id!r} truncated from {t.n_rows} to {t_min} rows"
            logger.warning(msg)
            warnings.append(msg)
            t = FeatureTrack(t.extractor_id, t.data[:t_min])
        aligned.append(t)
    return FeatureBundle(video_id, duration_s, tuple(aligned), tuple(warnings))


def save_bundle(path, bundle: FeatureBundle) -> None:
    atomic_write(path, encode_features(
        bundle.video_id, bundle.duration_s,
        [(t.extractor_id, t.data) for t in bundle.tracks]))


def load_bundle(path) -> FeatureBundle:
    data = Path(path).read_bytes()
    video_id, duration_s, raw = decode_features(data, path)
    if not raw:
        raise ContainerError("bundle has no tracks", len(data), path)
    if not (math.isfinite(duration_s) and duration_s > 0):
        raise ContainerError(f"bad duration {duration_s}", 8 + 4 + len(video_id.encode()), path)
    return align_tracks(video_id, duration_s, [FeatureTrack(e, d) for e, d in raw])


# -- annotation I/O -----------------------------------------------------------

def annotations_to_json(ann: AnnotationSet) -> dict:
    queries = []
    for q in ann.queries:
        rec = {"query_id": q.query_id}
        if q.text is not None:
            rec["text"] = q.text
        rec["embedding"] = [float(x) for x in q.embedding]
        rec["start_s"] = float(q.gt.start_s)
        rec["end_s"] = float(q.gt.end_s)
        queries.append(rec)
    return {"video_id": ann.video_id, "duration_s": float(ann.duration_s), "queries": queries}


def annotations_from_json(doc: dict, source: str = "<annotations>") -> AnnotationSet:
    try:
        video_id = str(doc["video_id"])
        duration_s = float(doc["duration_s"])
        records = doc["queries"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"{source}: missing or bad top-level field: {exc}") from None
    queries = []
    for n, rec in enumerate(records):
        try:
            queries.append(QueryAnnotation(
                query_id=str(rec["query_id"]),
                embedding=np.asarray(rec["embedding"], dtype=np.float64),
                gt=Interval(float(rec["start_s"]), float(rec["end_s"])),
                text=rec.get("text"),
            ))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"{source}: query record {n}: {exc}") from None
    try:
        return AnnotationSet(video_id, duration_s, tuple(queries))
    except ValueError as exc:
        raise ValueError(f"{source}: {exc}") from None


def save_annotations(path, ann: AnnotationSet) -> None:
    text = json.dumps(annotations_to_json(ann), indent=1) + "\n"
    atomic_write(path, text.encode("utf-8"))


def load_annotations(path) -> AnnotationSet:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return annotations_from_json(doc, str(path))


# -- pooling ------------------------------------------------------------------

def segment_bounds(n_rows: int, n_clips: int) -> tuple[np.ndarray, np.ndarray]:
    """Half-open source-row range [lo, hi) of every grid cell."""
    p = np.arange(n_clips + 1, dtype=np.int64)
    edges = (p * n_rows) // n_clips
    return edges[:-1], edges[1:]


def pool_rows(rows: np.ndarray, n_clips: int) -> np.ndarray:
    """Segment-mean a T x D matrix down to n_clips rows.

    Empty segments (T < n_clips) copy the source row under the segment centre.
    """
    rows = np.asarray(rows, dtype=np.float64)
    t = rows.shape[0]
    lo, hi = segment_bounds(t, n_clips)
    counts = hi - lo
    out = np.empty((n_clips, rows.shape[1]))
    full = counts > 0
    # non-empty segments tile [0, T), so reduceat sums each one directly
    out[full] = np.add.reduceat(rows, lo[full], axis=0) / counts[full, None]
    if not full.all():
        empty = np.nonzero(~full)[0]
        centre = np.minimum(((2 * empty + 1) * t) // (2 * n_clips), t - 1)
        out[empty] = rows[centre]
    return out


def pool_to_grid(track: FeatureTrack, grid: ClipGrid) -> np.ndarray:
    return pool_rows(track.data, grid.n_clips)


def l2_normalize_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise L2 normalisation; zero rows pass through unchanged."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norms, out=x.copy(), where=norms > 0)


# -- text embedder ------------------------------------------------------------

_TOKEN = re.compile(r"[a-z0-9]+")


def embed_text(text: str, dim: int = 64) -> np.ndarray:
    """Deterministic bag-of-hashed-tokens embedding, L2-normalised."""
    vec = np.zeros(dim)
    for token in _TOKEN.findall(text.lower()):
        h = int.from_bytes(hashlib.blake2b(token.encode(), digest_size=8).digest(), "little")
        vec[h % dim] += 1.0 if (h >> 63) & 1 else -1.0
    norm = np.linalg.norm(vec)
    if norm == 0:
        raise ValueError(f"text {text!r} has no tokens to embed")
    return vec / norm


# -- synthetic fixtures -------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    n_videos: int = 20
    n_tracks: int = 3
    dims: int | tuple[int, ...] = 32
    queries_per_video: int = 3
    signal_strength: float | tuple[float, ...] = 4.0
    embed_dim: int = 16
    noise_sigma: float = 1.0
    min_duration_s: int = 96
    max_duration_s: int = 192
    min_query_frac: float = 0.12
    max_query_frac: float = 0.25
    # "full": every track sees the whole query embedding; "split": track k only
    # sees a disjoint slice of it, so each track carries part of the signal
    signal_mode: str = "full"

    def __post_init__(self) -> None:
        if self.n_videos < 1 or self.n_tracks < 1 or self.queries_per_video < 1:
            raise ValueError("n_videos, n_tracks and queries_per_video must be positive")
        if min(self.track_dims) < 1 or self.embed_dim < 1:
            raise ValueError("dimensions must be positive")
        if min(self.track_strengths) < 0:
            raise ValueError("signal_strength must be >= 0")
        if not 0 < self.min_query_frac <= self.max_query_frac:
            raise ValueError("need 0 < min_query_frac <= max_query_frac")
        if self.queries_per_video * self.max_query_frac > 1:
            raise ValueError("queries cannot fit without overlap")
        if not 1 <= self.min_duration_s <= self.max_duration_s:
            raise ValueError("bad duration range")
        if self.signal_mode not in ("full", "split"):
            raise ValueError(f"unknown signal_mode {self.signal_mode!r}")
        if self.signal_mode == "split" and self.embed_dim < self.n_tracks:
            raise ValueError("split signal needs embed_dim >= n_tracks")

    @property
    def track_dims(self) -> tuple[int, ...]:
        return _per_track(self.dims, self.n_tracks, "dims")

    @property
    def track_strengths(self) -> tuple[float, ...]:
        return _per_track(self.signal_strength, self.n_tracks, "signal_strength")

    @property
    def extractor_ids(self) -> tuple[str, ...]:
        return tuple(_track_name(k) for k in range(self.n_tracks))


def _per_track(value, k: int, name: str) -> tuple:
    if isinstance(value, (int, float)):
        return (value,) * k
    value = tuple(value)
    if len(value) != k:
        raise ValueError(f"{name} has {len(value)} entries for {k} tracks")
    return value


def _track_name(k: int) -> str:
    name = ""
    k += 1
    while k:
        k, r = divmod(k - 1, 26)
        name = chr(ord("A") + r) + name
    return name


def signal_maps(spec: SyntheticSpec, seed: int) -> list[np.ndarray]:
    """The fixed per-track linear maps from query embedding to planted pattern."""
    rng = np.random.default_rng([seed, 0])
    maps = []
    slices = np.array_split(np.arange(spec.embed_dim), spec.n_tracks)
    for k, d in enumerate(spec.track_dims):
        a = rng.standard_normal((d, spec.embed_dim)) / math.sqrt(spec.embed_dim)
        if spec.signal_mode == "split":
            keep = np.zeros(spec.embed_dim, dtype=bool)
            keep[slices[k]] = True
            a[:, ~keep] = 0.0
        maps.append(a)
    return maps


def planted_pattern(a: np.ndarray, q: np.ndarray) -> np.ndarray:
    p = a @ q
    norm = np.linalg.norm(p)
    return p / norm if norm > 0 else p


def _layout(rng: np.random.Generator, duration: int, spec: SyntheticSpec) -> list[tuple[int, int]]:
    nq = spec.queries_per_video
    lo = max(1, math.ceil(spec.min_query_frac * duration))
    hi = max(lo, math.floor(spec.max_query_frac * duration))
    lengths = rng.integers(lo, hi + 1, size=nq)
    slack = duration - int(lengths.sum())
    gaps = rng.multinomial(slack, np.full(nq + 1, 1.0 / (nq + 1)))
    spans = []
    t = 0
    for k in range(nq):
        t += int(gaps[k])
        spans.append((t, t + int(lengths[k])))
        t += int(lengths[k])
    return spans


def generate_synthetic_dataset(seed: int, spec: SyntheticSpec
                               ) -> tuple[list[FeatureBundle], list[AnnotationSet]]:
    """Noise tracks with a query-correlated pattern planted inside each moment.

    Row t of a track covers second [t, t+1). Moments have integer-second
    boundaries and never overlap. Outputs are a pure function of (seed, spec).
    """
    maps = signal_maps(spec, seed)
    strengths = spec.track_strengths
    bundles, annotations = [], []
    for v in range(spec.n_videos):
        rng = np.random.default_rng([seed, 1, v])
        video_id = f"vid{v:04d}"
        duration = int(rng.integers(spec.min_duration_s, spec.max_duration_s + 1))
        spans = _layout(rng, duration, spec)
        queries = []
        embeds = []
        for k, (s, e) in enumerate(spans):
            q = rng.standard_normal(spec.embed_dim)
            q /= np.linalg.norm(q)
            embeds.append(q)
            queries.append(QueryAnnotation(f"{video_id}_q{k}", q, Interval(float(s), float(e))))
        tracks = []
        for k, (a, d) in enumerate(zip(maps, spec.track_dims)):
            x = spec.noise_sigma * rng.standard_normal((duration, d))
            for (s, e), q in zip(spans, embeds):
                x[s:e] += strengths[k] * spec.noise_sigma * planted_pattern(a, q)
            tracks.append(FeatureTrack(_track_name(k), x.astype(np.float32)))
        bundles.append(FeatureBundle(video_id, float(duration), tuple(tracks)))
        annotations.append(AnnotationSet(video_id, float(duration), tuple(queries)))
    return bundles, annotations


def matched_filter_localize(bundle: FeatureBundle, templates: Sequence[np.ndarray]) -> Interval:
    """Localise one planted pattern by correlating rows with its known per-track templates.

    Row responses are summed over tracks, offset by half the in-moment
    response, and the maximum-sum run of rows is returned (Kadane).
    """
    resp = np.zeros(bundle.n_rows)
    expected = 0.0
    for track, tpl in zip(bundle.tracks, templates):
        tpl = np.asarray(tpl, dtype=np.float64)
        norm = np.linalg.norm(tpl)
        if norm == 0:
            continue
        resp += track.data.astype(np.float64) @ (tpl / norm)
        expected += norm
    resp -= expected / 2.0
    best, best_lo, best_hi = -np.inf, 0, 1
    run, run_lo = 0.0, 0
    for t, r in enumerate(resp):
        if run <= 0:
            run, run_lo = r, t
        else:
            run += r
        if run > best:
            best, best_lo, best_hi = run, run_lo, t + 1
    return Interval(float(best_lo), float(min(best_hi, bundle.duration_s)))
