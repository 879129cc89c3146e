from __future__ import annotations

import math

import numpy as np
import pytest

from mtvg.features import FeatureBundle, FeatureTrack
from mtvg.fusion import (
    ConcatFusionParams, WeightedFusionParams, concat_fuse, concat_fuse_grad, fusion_from_tensors,
    fusion_to_tensors, init_concat_params, init_weighted_params, softmax, warm_start_params,
    weighted_fuse, weighted_fuse_grad, weighted_fuse_inputs, weighted_inputs,
)
from mtvg.temporal import ClipGrid


def _bundle(rng, t=8, dims=(3, 4), ids=("A", "B")):
    return FeatureBundle("v", float(t), tuple(
        FeatureTrack(e, rng.standard_normal((t, d))) for e, d in zip(ids, dims)))


def _rel_err(a, n):
    a, n = np.asarray(a, float), np.asarray(n, float)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6)))


class TestConcat:
    def test_identity_pipeline(self):
        u = np.array([0.6, 0.0, 0.8])
        b = FeatureBundle("v", 4.0, (FeatureTrack("A", np.tile(u, (4, 1))),))
        p = ConcatFusionParams(np.eye(3), ["A"], [3])
        np.testing.assert_allclose(concat_fuse(b, ClipGrid(4.0, 4), p), np.tile(u, (4, 1)), rtol=1e-15)

    def test_orthogonal_pair_normalises_jointly(self):
        c = 3.7
        u, v = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        b = FeatureBundle("v", 2.0, (FeatureTrack("A", np.tile(c * u, (2, 1))),
                                     FeatureTrack("B", np.tile(c * v, (2, 1)))))
        p = ConcatFusionParams(np.eye(4), ["A", "B"], [2, 2])
        row = np.concatenate([u, v]) / math.sqrt(2)
        np.testing.assert_allclose(concat_fuse(b, ClipGrid(2.0, 2), p), np.tile(row, (2, 1)), atol=1e-15)

    def test_matches_step_by_step_reference(self, rng):
        b = _bundle(rng, t=8)
        p = init_concat_params(b_layout := [("A", 3), ("B", 4)], 5, seed=2)
        rows = []
        for t in range(8):
            joined = np.concatenate([b.tracks[0].data[t], b.tracks[1].data[t]])
            rows.append(joined / np.linalg.norm(joined))
        rows = np.array(rows)
        pooled = np.array([rows[2 * c:2 * c + 2].mean(axis=0) for c in range(4)])
        np.testing.assert_allclose(concat_fuse(b, ClipGrid(8.0, 4), p), pooled @ p.projection.T,
                                   rtol=1e-12, atol=1e-14)
        assert p.layout == b_layout

    def test_layout_mismatch(self, rng):
        p = init_concat_params([("A", 3), ("C", 4)], 5)
        with pytest.raises(ValueError, match="layout"):
            concat_fuse(_bundle(rng), ClipGrid(8.0, 4), p)

    def test_grad_is_outer_product(self, rng):
        x = rng.standard_normal((4, 7))
        p = init_concat_params([("A", 3), ("B", 4)], 5)
        up = rng.standard_normal((4, 5))
        np.testing.assert_allclose(concat_fuse_grad(x, p, up), up.T @ x)


class TestWeighted:
    def test_softmax_values(self):
        np.testing.assert_allclose(softmax(np.zeros(4)), 0.25)
        np.testing.assert_allclose(softmax(np.array([0.0, math.log(3)])), [0.25, 0.75], rtol=1e-15)

    def test_gamma_zero_annihilates(self, rng):
        b = _bundle(rng)
        p = init_weighted_params(b_layout(b), 6)
        p = WeightedFusionParams(p.per_track_projection, p.weight_logits, 0.0, p.extractor_ids)
        assert not np.any(weighted_fuse(b, ClipGrid(8.0, 4), p))

    def test_equal_logits_average(self, rng):
        b = _bundle(rng)
        p = init_weighted_params(b_layout(b), 6)
        inputs = weighted_inputs(b, 4)
        expect = sum(g @ w.T for g, w in zip(inputs, p.per_track_projection)) / 2
        np.testing.assert_allclose(weighted_fuse(b, ClipGrid(8.0, 4), p), expect, rtol=1e-13)

    def test_gamma_gradient_closed_form(self, rng):
        p = _random_weighted(rng, 3)
        inputs = [rng.standard_normal((5, d)) for d in p.track_dims]
        up = rng.standard_normal((5, p.out_dim))
        g = weighted_fuse_grad(inputs, p, up)
        mixed = weighted_fuse_inputs(inputs, p) / p.gamma
        assert g.gamma == pytest.approx(float(np.sum(up * mixed)), rel=1e-12)

    def test_single_track_logit_gradient_is_zero(self, rng):
        p = _random_weighted(rng, 1)
        inputs = [rng.standard_normal((5, p.track_dims[0]))]
        g = weighted_fuse_grad(inputs, p, rng.standard_normal((5, p.out_dim)))
        assert g.weight_logits.tolist() == [0.0]

    @pytest.mark.parametrize("k", [1, 2, 4])
    def test_finite_differences(self, rng, k):
        p = _random_weighted(rng, k)
        inputs = [rng.standard_normal((6, d)) for d in p.track_dims]
        up = rng.standard_normal((6, p.out_dim))
        g = weighted_fuse_grad(inputs, p, up)
        tensors, meta = fusion_to_tensors(p)
        analytic = {f"fusion.projection.{e}": gp for e, gp in zip(p.extractor_ids, g.per_track_projection)}
        analytic["fusion.weight_logits"] = g.weight_logits
        analytic["fusion.gamma"] = np.array(g.gamma)
        h = 1e-5

        def f(ts):
            return float(np.sum(up * weighted_fuse_inputs(inputs, fusion_from_tensors(ts, meta))))

        for name, value in tensors.items():
            num = np.zeros(np.shape(value))
            for idx in np.ndindex(num.shape):
                plus, minus = np.array(value, float), np.array(value, float)
                plus[idx] += h
                minus[idx] -= h
                num[idx] = (f({**tensors, name: plus}) - f({**tensors, name: minus})) / (2 * h)
            assert _rel_err(analytic[name], num) <= 1e-4, name


def b_layout(b):
    return [(t.extractor_id, t.dim) for t in b.tracks]


def _random_weighted(rng, k):
    dims = rng.integers(2, 5, k)
    return WeightedFusionParams(tuple(rng.standard_normal((3, d)) for d in dims),
                                rng.standard_normal(k), float(rng.uniform(0.5, 2.0)),
                                [chr(65 + i) for i in range(k)])


class TestWarmStart:
    def test_identical_layout_copies(self, rng):
        p = _random_weighted(rng, 3)
        q = warm_start_params(p, p.layout)
        for a, b in zip(p.per_track_projection, q.per_track_projection):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(p.weight_logits, q.weight_logits)
        assert q.gamma == p.gamma

    def test_six_plus_one_weighted(self, rng):
        ids = list("BCDEFG")
        old = WeightedFusionParams(tuple(rng.standard_normal((4, 3)) for _ in ids),
                                   rng.standard_normal(6), 1.3, ids)
        new = warm_start_params(old, old.layout + [("H", 5)], seed=1)
        assert new.extractor_ids == tuple("BCDEFGH")
        for a, b in zip(old.per_track_projection, new.per_track_projection[:6]):
            np.testing.assert_array_equal(a, b)
        assert new.per_track_projection[6].shape == (4, 5)
        assert new.weight_logits[6] == pytest.approx(np.mean(old.weight_logits))

    def test_fresh_track_gets_average_weight(self):
        old = WeightedFusionParams(tuple(np.ones((2, 2)) for _ in range(6)), np.zeros(6), 1.0, list("BCDEFG"))
        new = warm_start_params(old, old.layout + [("H", 2)])
        np.testing.assert_allclose(softmax(new.weight_logits)[-1], 1 / 7, rtol=1e-12)

    def test_six_plus_one_concat(self):
        old = init_concat_params([(e, 3) for e in "BCDEFG"], 8, seed=4)
        new = warm_start_params(old, old.layout + [("H", 2)])
        np.testing.assert_array_equal(new.projection[:, :18], old.projection)
        assert new.projection.shape == (8, 20)

    def test_must_be_superset(self, rng):
        p = _random_weighted(rng, 2)
        with pytest.raises(ValueError, match="not in the new layout"):
            warm_start_params(p, [("A", p.track_dims[0])])
        with pytest.raises(ValueError, match="changed width"):
            warm_start_params(p, [("A", 99), ("B", p.track_dims[1])])


class TestTensors:
    @pytest.mark.parametrize("mode", ["concat", "weighted"])
    def test_round_trip(self, mode):
        layout = [("A", 3), ("B", 2)]
        p = init_concat_params(layout, 4, 1) if mode == "concat" else init_weighted_params(layout, 4, 1)
        q = fusion_from_tensors(*fusion_to_tensors(p))
        assert type(q) is type(p) and q.layout == p.layout
        for (k, a), b in zip(fusion_to_tensors(p)[0].items(), fusion_to_tensors(q)[0].values()):
            np.testing.assert_array_equal(a, b, err_msg=k)

    def test_unknown_mode(self):
        with pytest.raises(ValueError, match="fusion mode"):
            fusion_from_tensors({}, {"fusion_mode": "mean", "layout": []})
