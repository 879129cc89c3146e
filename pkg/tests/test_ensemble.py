from __future__ import annotations

import numpy as np
import pytest

from mtvg.ensemble import (
    NormalizationSpec, ScoredCandidate, best_interval, extract_candidates, inter_fuse, intra_fuse,
    normalize_scores, read_candidates, temporal_nms, write_candidates,
)
from mtvg.matching import ScoreMap2D
from mtvg.temporal import ClipGrid, Interval, best_candidate, candidate_interval, dense_candidates


def _map(values, n):
    return ScoreMap2D.from_cells(dense_candidates(n), np.asarray(values, float), "combined")


def _cand(s, e, score, model=""):
    return ScoredCandidate(Interval(s, e), score, model)


def reference_nms(cands, thr):
    """Keep a candidate iff its IoU with every already-kept one is <= thr."""
    order = sorted(cands, key=lambda c: (-c.score, c.interval.start_s,
                                         c.interval.end_s - c.interval.start_s, c.model_id))
    kept = []
    for c in order:
        ok = True
        for k in kept:
            inter = max(0.0, min(c.interval.end_s, k.interval.end_s) - max(c.interval.start_s, k.interval.start_s))
            union = max(c.interval.end_s, k.interval.end_s) - min(c.interval.start_s, k.interval.start_s)
            if inter / union > thr:
                ok = False
                break
        if ok:
            kept.append(c)
    return kept


def random_candidates(rng, n, models=("m1", "m2", "m3")):
    out = []
    for _ in range(n):
        s = float(rng.integers(0, 40))
        out.append(_cand(s, s + float(rng.integers(1, 15)), float(rng.integers(0, 8)) / 7,
                         str(rng.choice(models))))
    return out


class TestIntraFuse:
    def test_single_map_identity(self, rng):
        m = _map(rng.random(10), 4)
        np.testing.assert_array_equal(intra_fuse([m]).values, m.values)

    def test_constant_sum(self):
        out = intra_fuse([_map(np.full(6, 0.25), 3), _map(np.full(6, 0.5), 3)])
        assert out.cells().tolist() == [0.75] * 6

    def test_argmax_matches_bruteforce(self, rng):
        for _ in range(30):
            n = int(rng.integers(1, 17))
            maps = [_map(rng.random(n * (n + 1) // 2), n) for _ in range(int(rng.integers(2, 6)))]
            best, arg = -1.0, None
            for i in range(n):
                for j in range(i, n):
                    v = sum(m.values[i, j] for m in maps)
                    if v > best:
                        best, arg = v, (i, j)
            assert best_candidate(intra_fuse(maps)) == arg

    def test_rejects_wrong_kind_and_mask(self):
        cons = ScoreMap2D.from_cells(dense_candidates(2), np.zeros(3), "cons")
        with pytest.raises(ValueError, match="kind"):
            intra_fuse([cons])
        with pytest.raises(ValueError, match="mask"):
            intra_fuse([_map(np.zeros(3), 2), _map(np.zeros(6), 3)])
        with pytest.raises(ValueError):
            intra_fuse([])


class TestExtract:
    def test_top1_is_best_candidate(self, rng):
        m = _map(rng.random(36), 8)
        grid = ClipGrid(80.0, 8)
        (top,) = extract_candidates(m, grid, 1)
        assert top.interval == candidate_interval(grid, *best_candidate(m))

    def test_saturation(self, rng):
        m = _map(rng.random(10), 4)
        assert len(extract_candidates(m, ClipGrid(4.0, 4), 99)) == 10

    def test_matches_full_sort(self, rng):
        m = _map(rng.integers(0, 4, 55) / 3, 10)
        grid = ClipGrid(10.0, 10)
        got = extract_candidates(m, grid, 7, "x")
        cells = sorted(((m.values[i, j], i, j) for i in range(10) for j in range(i, 10)),
                       key=lambda t: (-t[0], t[1], t[2]))[:7]
        assert [(c.interval.start_s, c.interval.end_s, c.score) for c in got] == \
            [(float(i), float(j + 1), v) for v, i, j in cells]
        assert {c.model_id for c in got} == {"x"}

    def test_grid_mismatch(self):
        with pytest.raises(ValueError):
            extract_candidates(_map(np.zeros(3), 2), ClipGrid(4.0, 4), 1)


class TestNormalize:
    def test_minmax(self):
        out = normalize_scores({"m": [_cand(0, 1, 1), _cand(1, 2, 2), _cand(2, 3, 3)]}, NormalizationSpec())
        assert [c.score for c in out["m"]] == [0.0, 0.5, 1.0]

    def test_constant_minmax(self):
        out = normalize_scores({"m": [_cand(0, 1, 7), _cand(1, 2, 7)]}, NormalizationSpec("minmax"))
        assert [c.score for c in out["m"]] == [0.5, 0.5]

    def test_zscore(self):
        out = normalize_scores({"m": [_cand(0, 1, 1), _cand(1, 2, 3)]}, NormalizationSpec("zscore"))
        assert [c.score for c in out["m"]] == [-1.0, 1.0]

    @pytest.mark.parametrize("method", ["minmax", "zscore", "none"])
    def test_order_preserved(self, rng, method):
        lst = [_cand(k, k + 1, float(v)) for k, v in enumerate(rng.permutation(20))]
        out = normalize_scores({"m": lst}, NormalizationSpec(method))["m"]
        assert np.array_equal(np.argsort([c.score for c in lst]), np.argsort([c.score for c in out]))

    def test_unknown_method(self):
        with pytest.raises(ValueError):
            NormalizationSpec("softmax")


class TestNMS:
    def test_disjoint_all_kept(self):
        cands = [_cand(0, 1, 0.2), _cand(2, 3, 0.9), _cand(4, 5, 0.5)]
        assert [c.score for c in temporal_nms(cands)] == [0.9, 0.5, 0.2]

    def test_duplicate_suppressed(self):
        assert temporal_nms([_cand(0, 10, 0.8), _cand(0, 10, 0.9)]) == [_cand(0, 10, 0.9)]

    def test_threshold_is_exclusive(self):
        # IoU exactly 0.5 survives
        kept = temporal_nms([_cand(0, 10, 0.9), _cand(0, 5, 0.8)], 0.5)
        assert len(kept) == 2

    def test_tie_rule(self):
        kept = temporal_nms([_cand(5, 9, 1.0, "b"), _cand(5, 8, 1.0, "b"), _cand(5, 8, 1.0, "a"),
                             _cand(1, 9, 1.0, "z")], 0.3)
        assert kept[0] == _cand(1, 9, 1.0, "z")
        kept = temporal_nms([_cand(5, 9, 1.0, "b"), _cand(5, 8, 1.0, "b"), _cand(5, 8, 1.0, "a")], 0.3)
        assert kept == [_cand(5, 8, 1.0, "a")]

    def test_matches_reference(self, rng):
        for _ in range(50):
            cands = random_candidates(rng, int(rng.integers(0, 120)))
            thr = float(rng.choice([0.1, 0.3, 0.5, 0.7, 1.0]))
            assert temporal_nms(cands, thr) == reference_nms(cands, thr)

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            temporal_nms([], 0.0)


class TestInterFuse:
    def test_single_model_no_normalisation(self, rng):
        cands = random_candidates(rng, 30, ("m",))
        assert inter_fuse({"m": cands}, NormalizationSpec("none"), top_k_per_model=100) == \
            temporal_nms(cands)

    def test_cross_model_duplicate(self):
        out = inter_fuse({"a": [_cand(3, 9, 1.0, "a")], "b": [_cand(3, 9, 0.9, "b")]}, NormalizationSpec("none"))
        assert [(c.interval, c.model_id) for c in out] == [(Interval(3, 9), "a")]

    def test_equals_manual_chain(self, rng):
        for _ in range(20):
            outputs = {m: random_candidates(rng, 25, (m,)) for m in ("a", "b", "c")}
            spec = NormalizationSpec(str(rng.choice(["minmax", "zscore", "none"])))
            pooled = []
            for lst in normalize_scores(outputs, spec).values():
                pooled += sorted(lst, key=lambda c: (-c.score, c.interval.start_s, c.interval.length,
                                                     c.model_id))[:5]
            assert inter_fuse(outputs, spec, 5, 0.4) == reference_nms(pooled, 0.4)

    def test_empty(self):
        with pytest.raises(ValueError):
            inter_fuse({}, NormalizationSpec())


class TestCandidateFile:
    def test_round_trip(self, tmp_path, rng):
        recs = [("v1", "q1", c) for c in random_candidates(rng, 5)]
        write_candidates(tmp_path / "c.jsonl", recs)
        back = read_candidates(tmp_path / "c.jsonl")
        flat = [c for per_model in back[("v1", "q1")].values() for c in per_model]
        assert sorted(flat, key=repr) == sorted([c for _, _, c in recs], key=repr)

    def test_bad_record_numbered(self, tmp_path):
        p = tmp_path / "c.jsonl"
        p.write_text('{"video_id":"v","query_id":"q","model_id":"m","start_s":0,"end_s":1,"score":1}\n'
                     '{"video_id":"v","query_id":"q","model_id":"m","start_s":3,"end_s":1,"score":1}\n')
        with pytest.raises(ValueError, match="record 2"):
            read_candidates(p)

    def test_best_interval(self):
        assert best_interval([_cand(4, 5, 0.5), _cand(1, 2, 0.5), _cand(0, 9, 0.2)]) == _cand(1, 2, 0.5)
