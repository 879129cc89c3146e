from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mtvg.container import ContainerError, encode_features
from mtvg.features import (
    AnnotationSet, FeatureBundle, FeatureTrack, QueryAnnotation, SyntheticSpec, annotations_from_json,
    embed_text, generate_synthetic_dataset, l2_normalize_rows, load_annotations, load_bundle,
    matched_filter_localize, planted_pattern, pool_rows, pool_to_grid, save_annotations,
    save_bundle, segment_bounds, signal_maps,
)
from mtvg.temporal import ClipGrid, Interval, temporal_iou


class TestTypes:
    def test_track_is_read_only(self):
        t = FeatureTrack("A", np.ones((2, 2)))
        with pytest.raises(ValueError):
            t.data[0, 0] = 5

    @pytest.mark.parametrize("data", [np.ones(3), np.ones((0, 2)), np.array([[np.inf]])])
    def test_bad_track(self, data):
        with pytest.raises(ValueError):
            FeatureTrack("A", data)

    def test_bundle_rejects_duplicate_ids(self):
        t = FeatureTrack("A", np.ones((2, 2)))
        with pytest.raises(ValueError, match="duplicate"):
            FeatureBundle("v", 2.0, (t, t))

    def test_select_reorders(self):
        b = FeatureBundle("v", 2.0, (FeatureTrack("A", np.ones((2, 1))), FeatureTrack("B", np.zeros((2, 3)))))
        assert b.select(["B", "A"]).extractor_ids == ("B", "A")
        with pytest.raises(KeyError):
            b.select(["Z"])

    def test_moment_must_fit_video(self):
        q = QueryAnnotation("q", np.ones(2), Interval(5, 12))
        with pytest.raises(ValueError, match="exceeds"):
            AnnotationSet("v", 10.0, (q,))


class TestBundleIO:
    def test_round_trip_bit_identical(self, tmp_path, rng):
        tracks = (FeatureTrack("A", rng.standard_normal((9, 4)).astype(np.float32)),
                  FeatureTrack("B", rng.standard_normal((9, 2)).astype(np.float32)))
        b = FeatureBundle("v7", 9.0, tracks)
        save_bundle(tmp_path / "v.mgfb", b)
        back = load_bundle(tmp_path / "v.mgfb")
        assert back == b
        for x, y in zip(back.tracks, b.tracks):
            assert x.data.tobytes() == y.data.tobytes()

    def test_length_mismatch_truncates_with_warning(self, tmp_path):
        blob = encode_features("v", 100.0, [("A", np.ones((100, 2), np.float32)),
                                            ("B", np.ones((99, 3), np.float32))])
        (tmp_path / "v.mgfb").write_bytes(blob)
        b = load_bundle(tmp_path / "v.mgfb")
        assert [t.n_rows for t in b.tracks] == [99, 99]
        assert len(b.warnings) == 1
        assert "'A'" in b.warnings[0]

    def test_truncated_file_names_offset(self, tmp_path):
        blob = encode_features("v", 3.0, [("A", np.ones((3, 2), np.float32))])
        (tmp_path / "v.mgfb").write_bytes(blob[:-5])
        with pytest.raises(ContainerError, match="offset"):
            load_bundle(tmp_path / "v.mgfb")


class TestAnnotationIO:
    def test_round_trip(self, tmp_path):
        ann = AnnotationSet("v", 30.0, (
            QueryAnnotation("q0", np.array([0.6, 0.8]), Interval(1.5, 7.0), text="apply lipstick"),
            QueryAnnotation("q1", np.array([1.0, 0.0]), Interval(10, 20)),
        ))
        save_annotations(tmp_path / "a.json", ann)
        back = load_annotations(tmp_path / "a.json")
        assert back.video_id == "v" and back.duration_s == 30.0
        assert [q.query_id for q in back.queries] == ["q0", "q1"]
        assert back.queries[0].text == "apply lipstick"
        np.testing.assert_array_equal(back.queries[0].embedding, [0.6, 0.8])
        assert back.queries[1].gt == Interval(10, 20)

    def test_bad_record_is_numbered(self):
        doc = {"video_id": "v", "duration_s": 10, "queries": [
            {"query_id": "a", "embedding": [1], "start_s": 0, "end_s": 1},
            {"query_id": "b", "embedding": [1], "start_s": 5, "end_s": 2},
        ]}
        with pytest.raises(ValueError, match="query record 1"):
            annotations_from_json(doc)

    def test_invalid_json(self, tmp_path):
        p = tmp_path / "a.json"
        p.write_text("{not json")
        with pytest.raises(ValueError, match="line 1"):
            load_annotations(p)


class TestPooling:
    def test_identity_when_t_equals_n(self, rng):
        x = rng.standard_normal((16, 3))
        np.testing.assert_array_equal(pool_rows(x, 16), x)

    def test_constant_track(self):
        t = FeatureTrack("A", np.full((37, 4), 2.5))
        np.testing.assert_allclose(pool_to_grid(t, ClipGrid(37.0, 8)), 2.5, rtol=1e-15)

    def test_pairs(self):
        r = np.array([[1.0], [3.0], [10.0], [20.0]])
        np.testing.assert_allclose(pool_rows(r, 2), [[2.0], [15.0]])

    def test_three_rows_two_clips(self):
        # cell 0 takes row 0, cell 1 takes rows 1..2
        assert segment_bounds(3, 2)[0].tolist() == [0, 1]
        np.testing.assert_allclose(pool_rows(np.array([[0.0], [2.0], [4.0]]), 2), [[0.0], [3.0]])

    def test_upsampling_copies_centre_row(self):
        x = np.arange(3.0)[:, None]
        np.testing.assert_array_equal(pool_rows(x, 6)[:, 0], [0, 0, 1, 1, 2, 2])

    @given(st.integers(1, 60), st.integers(1, 40))
    def test_partition_covers_rows(self, t, n):
        lo, hi = segment_bounds(t, n)
        assert lo[0] == 0 and hi[-1] == t
        np.testing.assert_array_equal(lo[1:], hi[:-1])

    @given(st.integers(1, 60), st.integers(1, 40))
    @settings(max_examples=50)
    def test_matches_loop_reference(self, t, n):
        x = np.random.default_rng(t * 100 + n).standard_normal((t, 2))
        ref = []
        for p in range(n):
            lo, hi = (p * t) // n, ((p + 1) * t) // n
            ref.append(x[lo:hi].mean(axis=0) if hi > lo else x[min(((2 * p + 1) * t) // (2 * n), t - 1)])
        np.testing.assert_allclose(pool_rows(x, n), ref, rtol=1e-12, atol=1e-12)

    def test_l2_normalize_keeps_zero_rows(self):
        y = l2_normalize_rows(np.array([[3.0, 4.0], [0.0, 0.0]]))
        np.testing.assert_allclose(y, [[0.6, 0.8], [0.0, 0.0]])


class TestEmbedText:
    def test_unit_norm_and_deterministic(self):
        a = embed_text("Apply the foundation evenly", 32)
        assert a.shape == (32,)
        assert np.linalg.norm(a) == pytest.approx(1.0)
        np.testing.assert_array_equal(a, embed_text("apply THE foundation, evenly", 32))

    def test_empty_text(self):
        with pytest.raises(ValueError):
            embed_text("  ...  ")


class TestSynthetic:
    SPEC = SyntheticSpec(n_videos=4, dims=(5, 6, 7), min_duration_s=50, max_duration_s=80)

    def test_deterministic(self):
        b1, a1 = generate_synthetic_dataset(3, self.SPEC)
        b2, a2 = generate_synthetic_dataset(3, self.SPEC)
        assert b1 == b2
        assert [json.dumps(x.duration_s) for x in a1] == [json.dumps(x.duration_s) for x in a2]
        b3, _ = generate_synthetic_dataset(4, self.SPEC)
        assert b1 != b3

    def test_layout(self):
        bundles, anns = generate_synthetic_dataset(0, self.SPEC)
        for b, a in zip(bundles, anns):
            assert b.extractor_ids == ("A", "B", "C")
            assert [t.dim for t in b.tracks] == [5, 6, 7]
            assert b.n_rows == int(a.duration_s)
            spans = sorted((q.gt.start_s, q.gt.end_s) for q in a.queries)
            assert all(e1 <= s2 for (_, e1), (s2, _) in zip(spans, spans[1:]))
            assert all(float(s).is_integer() and float(e).is_integer() for s, e in spans)

    def test_zero_strength_is_pure_noise(self):
        spec = SyntheticSpec(n_videos=30, signal_strength=0.0, dims=8)
        bundles, anns = generate_synthetic_dataset(1, spec)
        inside, outside = [], []
        for b, a in zip(bundles, anns):
            x = b.tracks[0].data
            m = np.zeros(b.n_rows, dtype=bool)
            for q in a.queries:
                m[int(q.gt.start_s):int(q.gt.end_s)] = True
            inside.append(x[m]), outside.append(x[~m])
        inside, outside = np.concatenate(inside), np.concatenate(outside)
        # two-sample z on mean and on second moment; 5 sigma leaves room for chance
        for f in (lambda v: v, lambda v: v ** 2):
            a, b = f(inside).ravel(), f(outside).ravel()
            z = (a.mean() - b.mean()) / np.sqrt(a.var() / a.size + b.var() / b.size)
            assert abs(z) < 5

    def test_matched_filter_finds_strong_signal(self):
        spec = SyntheticSpec(n_videos=20, signal_strength=5.0)
        bundles, anns = generate_synthetic_dataset(2, spec)
        maps = signal_maps(spec, 2)
        hits = total = 0
        for b, a in zip(bundles, anns):
            for q in a.queries:
                tpl = [s * planted_pattern(m, q.embedding) for m, s in zip(maps, spec.track_strengths)]
                hits += temporal_iou(matched_filter_localize(b, tpl), q.gt) >= 0.7
                total += 1
        assert hits / total >= 0.95

    def test_split_mode_zeroes_foreign_slices(self):
        spec = SyntheticSpec(n_tracks=3, embed_dim=9, signal_mode="split")
        maps = signal_maps(spec, 0)
        for k, a in enumerate(maps):
            live = np.nonzero(np.any(a != 0, axis=0))[0]
            assert live.tolist() == list(range(3 * k, 3 * k + 3))

    @pytest.mark.parametrize("kw", [
        {"n_videos": 0}, {"signal_strength": -1.0}, {"queries_per_video": 5, "max_query_frac": 0.25},
        {"signal_mode": "other"}, {"dims": (3, 4)},
    ])
    def test_bad_spec(self, kw):
        with pytest.raises(ValueError):
            SyntheticSpec(**kw)
