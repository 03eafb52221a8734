"""Assignment solver, track decoder, point classifier, and the frozen-feature
contract."""

import itertools

import numpy as np
import pytest

import spacepointfm.tensor as T
from spacepointfm.adapters import (
    ClassifierConfig,
    FrozenFeatures,
    PointClassifier,
    TrackDecoder,
    TrackDecoderConfig,
    freeze_and_probe,
    random_frozen_backbone,
    truth_masks_for,
)
from spacepointfm.backbone import Backbone, ModelConfig
from spacepointfm.matching import MatchingError, hungarian
from spacepointfm.serializer import serialize

from conftest import gradcheck


class TestHungarian:
    def test_simple_diagonal(self):
        assignment, total = hungarian(np.array([[1.0, 2.0], [2.0, 1.0]]))
        assert assignment.tolist() == [0, 1]
        assert total == 2.0

    def test_all_ties_lexicographic(self):
        assignment, total = hungarian(np.ones((2, 2)))
        assert assignment.tolist() == [0, 1]
        assert total == 2.0

    def test_rectangular(self):
        cost = np.array([[5.0, 1.0, 3.0]])
        assignment, total = hungarian(cost)
        assert assignment.tolist() == [1]
        assert total == 1.0

    def test_more_rows_than_columns_errors(self):
        with pytest.raises(MatchingError):
            hungarian(np.ones((3, 2)))

    def test_nonfinite_errors(self):
        with pytest.raises(MatchingError):
            hungarian(np.array([[np.inf, 1.0]]))

    @pytest.mark.slow
    def test_brute_force_oracle_500(self):
        rng = np.random.default_rng(14)
        for trial in range(500):
            m = int(rng.integers(1, 8))
            n = int(rng.integers(m, 8))
            if trial % 2:
                cost = rng.normal(size=(m, n))
            else:
                cost = rng.integers(0, 4, size=(m, n)).astype(float)
            assignment, total = hungarian(cost)
            best_cost = None
            best_assign = None
            for perm in itertools.permutations(range(n), m):
                c = float(sum(cost[i, perm[i]] for i in range(m)))
                if best_cost is None or c < best_cost - 1e-12 or (
                        abs(c - best_cost) <= 1e-12
                        and list(perm) < list(best_assign)):
                    best_cost, best_assign = c, perm
            assert total == pytest.approx(best_cost, abs=1e-9)
            assert assignment.tolist() == list(best_assign)

    def test_row_constant_shift_invariance(self):
        rng = np.random.default_rng(15)
        cost = rng.normal(size=(5, 7))
        base, _ = hungarian(cost)
        shifted = cost.copy()
        shifted[3] += 11.5
        again, _ = hungarian(shifted)
        assert np.array_equal(base, again)

    def test_beats_random_assignments(self):
        rng = np.random.default_rng(16)
        for _ in range(20):
            m, n = 6, 9
            cost = rng.normal(size=(m, n))
            _, total = hungarian(cost)
            for _ in range(100):
                cols = rng.choice(n, size=m, replace=False)
                assert total <= cost[np.arange(m), cols].sum() + 1e-12


class TestTrackDecoder:
    def _decoder(self, n_queries=3, layers=1, d_embed=8, d_in=6, seed=5):
        cfg = TrackDecoderConfig(n_queries=n_queries, n_layers=layers,
                                 d_embed=d_embed, seed=seed)
        return TrackDecoder(d_in=d_in, config=cfg, dtype=np.float64)

    def test_single_query_assigns_everything(self):
        decoder = self._decoder(n_queries=1)
        rng = np.random.default_rng(0)
        pred = decoder.predict(rng.normal(size=(9, 6)))
        assert pred.assignment_probs.shape == (9, 1)
        assert np.all(pred.labels == 0)

    def test_uniform_high_probability_mask_is_no_suppression(self):
        cfg = TrackDecoderConfig(n_queries=2, n_layers=1, d_embed=8, seed=1)
        offsets = -np.log(np.full((4, 2), 1.0) + cfg.eps_mask)
        assert np.allclose(offsets, 0.0, atol=1e-7)

    def test_inference_rule_recomputable(self):
        decoder = self._decoder(n_queries=4)
        rng = np.random.default_rng(2)
        pred = decoder.predict(rng.normal(size=(11, 6)))
        recomputed = np.argmax(pred.assignment_probs * pred.objectness[None, :],
                               axis=1)
        assert np.array_equal(pred.labels, recomputed)

    def test_perfect_prediction_zero_dice_and_focal(self):
        decoder = self._decoder(n_queries=2)
        masks = np.zeros((2, 6))
        masks[0, :3] = 1
        masks[1, 3:] = 1
        p_hat = T.Tensor(masks.T.copy())
        objectness = T.Tensor(np.ones(2))
        with T.using(mode="train"):
            loss = decoder._layer_loss(masks, p_hat, objectness,
                                       np.array([0, 1]))
            cfg = decoder.config
            # remaining term is only the (clamped) objectness BCE at its floor
            bce_floor = -np.log(1.0 - T.CLAMP_EPS)
            assert loss.item() <= cfg.lambda_cls * bce_floor + 1e-9

    def test_dice_closed_form_half_coverage(self):
        # p = 0.5 everywhere, track covers half of 8 points -> dice = 4/9
        decoder = self._decoder(n_queries=1)
        masks = np.zeros((1, 8))
        masks[0, :4] = 1
        p_hat = T.Tensor(np.full((8, 1), 0.5))
        _, cost, _ = decoder._match(masks, p_hat, T.Tensor(np.ones(1)))
        lam = decoder.config.lambda_dice
        dice_part = cost[0, 0]
        # strip focal and cls contributions computed the same way
        p = np.full((8, 1), 0.5)
        focal = (-0.25 * 0.25 * np.log(0.5) * 4 - 0.75 * 0.25 * np.log(0.5) * 4) / 8
        expect = lam * (4.0 / 9.0) + decoder.config.lambda_focal * focal
        assert dice_part == pytest.approx(expect, rel=1e-9)

    def test_total_is_sum_of_layer_losses(self):
        decoder = self._decoder(n_queries=3, layers=2)
        rng = np.random.default_rng(3)
        feats = rng.normal(size=(10, 6))
        masks = np.zeros((2, 10))
        masks[0, :5] = 1
        masks[1, 5:] = 1
        total, per_layer, assignments = decoder.loss(feats, masks)
        assert len(per_layer) == 3  # initial queries + 2 decoder layers
        assert total.item() == pytest.approx(sum(l.item() for l in per_layer),
                                             rel=1e-12)
        assert all(len(a) == 2 for a in assignments)

    def test_gradient_through_decoder_loss(self):
        decoder = self._decoder(n_queries=3, layers=1, d_embed=8)
        rng = np.random.default_rng(4)
        feats = rng.normal(size=(12, 6))
        masks = np.zeros((2, 12))
        masks[0, :6] = 1
        masks[1, 6:] = 1
        params = list(decoder.weights.values())
        worst = gradcheck(lambda: decoder.loss(feats, masks)[0], params,
                          tol=1e-4, max_entries=4, rng=rng)
        assert worst < 1e-4


class TestClassifier:
    def test_uniform_at_zero_init(self):
        clf = PointClassifier(6, ClassifierConfig(n_classes=5, d_embed=8, seed=0),
                              dtype=np.float64)
        rng = np.random.default_rng(5)
        probs = clf.forward(rng.normal(size=(7, 6)))
        assert np.allclose(probs.data, 0.2, atol=1e-12)

    def test_single_point_event(self):
        clf = PointClassifier(6, ClassifierConfig(n_classes=2, d_embed=8, seed=0),
                              dtype=np.float64)
        probs = clf.forward(np.ones((1, 6)))
        assert probs.shape == (1, 2)
        assert probs.data.sum() == pytest.approx(1.0)

    def test_loss_gradient(self):
        clf = PointClassifier(5, ClassifierConfig(n_classes=3, d_embed=8, seed=2),
                              dtype=np.float64)
        rng = np.random.default_rng(6)
        feats = rng.normal(size=(9, 5))
        labels = rng.integers(0, 3, 9)
        params = list(clf.weights.values())
        gradcheck(lambda: clf.loss(feats, labels), params, tol=1e-4,
                  max_entries=4, rng=rng)

    def test_class_weights_reweight_loss(self):
        rng = np.random.default_rng(7)
        feats = rng.normal(size=(4, 5))
        labels = np.array([0, 0, 0, 1])
        plain = PointClassifier(5, ClassifierConfig(n_classes=2, d_embed=8, seed=2),
                                dtype=np.float64)
        weighted = PointClassifier(
            5, ClassifierConfig(n_classes=2, d_embed=8, seed=2,
                                class_weights=(1.0, 3.0)), dtype=np.float64)
        # break the uniform zero-init so per-point log-probs differ
        w2 = rng.normal(size=(8, 2))
        plain.weights["mlp.w2"].data[...] = w2
        weighted.weights["mlp.w2"].data[...] = w2
        assert plain.loss(feats, labels).item() != pytest.approx(
            weighted.loss(feats, labels).item())


class TestFrozenFeatures:
    def test_checksum_stable_and_features_deterministic(self, grid, small_events):
        backbone = Backbone.init(ModelConfig(d_model=16, n_layers=2, seed=9),
                                 dtype=np.float32)
        extractor = FrozenFeatures(backbone, grid)
        before = extractor.checksum
        f1, ser1 = extractor.features_for(small_events[0])
        extractor._cache.clear()  # force recompute
        f2, ser2 = extractor.features_for(small_events[0])
        assert np.array_equal(f1, f2)
        assert np.array_equal(ser1.order, ser2.order)
        extractor.verify_frozen()
        assert extractor.checksum == before

    def test_raw_mode_features(self, grid, small_events):
        extractor = freeze_and_probe("raw", grid=grid)
        feats, ser = extractor.features_for(small_events[0])
        assert extractor.d_out == 4
        expect = small_events[0].features()[ser.order].astype(np.float32)
        assert np.array_equal(feats, expect)

    def test_random_frozen_baseline_shape(self, grid):
        cfg = ModelConfig(d_model=32, n_layers=2, seed=1)
        backbone = random_frozen_backbone(cfg, seed=77)
        assert backbone.config.d_model == 32
        assert all(not w.requires_grad for w in backbone.weights.values())

    def test_truth_masks_cover_tracks(self, grid, small_events):
        event = small_events[1]
        ser = serialize(event, grid)
        masks = truth_masks_for(event, ser.order)
        assert masks.shape[0] == len(event.tracks)
        assert masks.sum() == sum(len(t) for t in event.tracks)
        #每 row marks exactly its track's points
        for j, track in enumerate(event.tracks):
            assert masks[j].sum() == len(track)
