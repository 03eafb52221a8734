"""Neighbor-target construction, the masked regression loss, and the
event-difficulty reweighting."""

import numpy as np
import pytest

import spacepointfm.tensor as T
from spacepointfm.eventgen import DetectorConfig, GenParams, generate_event
from spacepointfm.geometry import Event, SpacePoint
from spacepointfm.objective import (
    DifficultyBins,
    KnnTargets,
    batch_loss,
    build_targets,
    fit_difficulty_bins,
    knn_loss,
)

from conftest import gradcheck


def _point(r_hat, phi_hat, eta_hat, track_id=0):
    return SpacePoint(1.0, 0.0, 0.0, 0.0, 30.0 + 48.0 * r_hat,
                      -np.pi + 2 * np.pi * phi_hat, -2.0 + 4.0 * eta_hat,
                      r_hat, phi_hat, eta_hat, track_id=track_id)


def _small_corpus(n_events, seed=55):
    det = DetectorConfig()
    params = GenParams(seed=seed, multiplicity_mean=3.0,
                       multiplicity_range=(1, 8))
    return [generate_event(i, det, params) for i in range(n_events)]


def brute_force_targets(event: Event, k: int) -> KnnTargets:
    """O(n^2) per-point scan, independent of the production path."""
    coords = event.coords_normalized()
    n = len(coords)
    targets = np.zeros((n, k, 3))
    mask = np.zeros((n, k), dtype=bool)
    dists = []
    for i in range(n):
        candidates = []
        for j in range(n):
            if coords[j, 0] > coords[i, 0]:
                d2 = ((coords[i] - coords[j]) ** 2).sum()
                candidates.append((d2, j))
        candidates.sort()
        for slot, (d2, j) in enumerate(candidates[:k]):
            targets[i, slot] = coords[j]
            mask[i, slot] = True
            dists.append(np.sqrt(d2))
    mean_d = float(np.mean(dists)) if dists else 0.0
    return KnnTargets(k=k, target_coords=targets, valid_mask=mask,
                      mean_knn_distance=mean_d)


class TestBuildTargets:
    def test_collinear_ordering(self):
        points = [_point(0.1, 0.4, 0.4), _point(0.2, 0.4, 0.4),
                  _point(0.3, 0.4, 0.4)]
        event = Event(0, points, [[0, 1, 2]])
        kt = build_targets(event, k=2)
        assert kt.valid_mask[0].tolist() == [True, True]
        assert np.array_equal(kt.target_coords[0, 0], [0.2, 0.4, 0.4])
        assert np.array_equal(kt.target_coords[0, 1], [0.3, 0.4, 0.4])

    def test_outermost_point_fully_masked(self, small_events):
        for event in small_events[:10]:
            kt = build_targets(event, k=10)
            outer = int(np.argmax(event.coords_normalized()[:, 0]))
            assert not kt.valid_mask[outer].any()
            assert np.array_equal(kt.target_coords[outer], np.zeros((10, 3)))

    def test_forward_set_property(self, small_events):
        for event in small_events[:10]:
            coords = event.coords_normalized()
            kt = build_targets(event, k=10)
            for i in range(len(coords)):
                for s in range(10):
                    if kt.valid_mask[i, s]:
                        assert kt.target_coords[i, s, 0] > coords[i, 0]

    def test_permutation_invariance(self):
        event = _small_corpus(1)[0]
        rng = np.random.default_rng(0)
        perm = rng.permutation(len(event.points))
        inverse = np.empty(len(perm), dtype=np.int64)
        inverse[perm] = np.arange(len(perm))
        shuffled = Event(0, [event.points[i] for i in perm],
                         [[int(inverse[i]) for i in t] for t in event.tracks])
        a = build_targets(event, k=5)
        b = build_targets(shuffled, k=5)
        # per-point targets are a function of the point multiset
        assert np.array_equal(a.target_coords, b.target_coords[inverse])
        assert np.array_equal(a.valid_mask, b.valid_mask[inverse])
        assert a.mean_knn_distance == b.mean_knn_distance

    @pytest.mark.slow
    def test_matches_brute_force_on_200_events(self):
        events = _small_corpus(200)
        for event in events:
            assert len(event.points) <= 500
            fast = build_targets(event, k=10)
            slow = brute_force_targets(event, k=10)
            assert np.array_equal(fast.valid_mask, slow.valid_mask)
            assert np.array_equal(fast.target_coords, slow.target_coords)


class TestKnnLoss:
    def _targets(self, rng, n=7, k=3):
        mask = rng.random((n, k)) < 0.7
        mask[0] = False
        coords = rng.uniform(0, 1, (n, k, 3)) * mask[:, :, None]
        return KnnTargets(k=k, target_coords=coords, valid_mask=mask,
                          mean_knn_distance=0.1)

    def test_exact_prediction_is_zero(self):
        rng = np.random.default_rng(0)
        kt = self._targets(rng)
        pred = T.Tensor(kt.target_coords.reshape(7, 9))
        loss, skipped = knn_loss(pred, kt)
        assert not skipped
        assert loss.item() == 0.0

    def test_uniform_offset(self):
        rng = np.random.default_rng(1)
        kt = self._targets(rng)
        eps = 0.01
        shifted = kt.target_coords.copy()
        shifted[:, :, 0] += eps * kt.valid_mask
        loss, _ = knn_loss(T.Tensor(shifted.reshape(7, 9)), kt)
        assert loss.item() == pytest.approx(eps ** 2, rel=1e-12)

    def test_matches_double_loop_reference(self):
        rng = np.random.default_rng(2)
        kt = self._targets(rng)
        pred = rng.normal(size=(7, 9))
        loss, _ = knn_loss(T.Tensor(pred.copy()), kt)
        total = 0.0
        count = 0
        p3 = pred.reshape(7, 3, 3)
        for i in range(7):
            for s in range(3):
                if kt.valid_mask[i, s]:
                    total += ((p3[i, s] - kt.target_coords[i, s]) ** 2).sum()
                    count += 1
        assert loss.item() == pytest.approx(total / count, rel=1e-12)

    def test_all_masked_event_flags_skip(self):
        kt = KnnTargets(k=2, target_coords=np.zeros((1, 2, 3)),
                        valid_mask=np.zeros((1, 2), dtype=bool),
                        mean_knn_distance=0.0)
        loss, skipped = knn_loss(T.Tensor(np.ones((1, 6))), kt)
        assert skipped and loss.item() == 0.0

    def test_masked_slots_never_touch_value_or_gradient(self):
        rng = np.random.default_rng(3)
        kt = self._targets(rng)
        base = rng.normal(size=(7, 9))
        pred1 = T.Tensor(base.copy(), requires_grad=True)
        with T.Tape() as tape:
            loss1, _ = knn_loss(pred1, kt)
        tape.backward(loss1)
        # perturb only masked slots
        noise = rng.normal(size=(7, 3, 3)) * (~kt.valid_mask)[:, :, None]
        pred2 = T.Tensor(base + noise.reshape(7, 9), requires_grad=True)
        with T.Tape() as tape2:
            loss2, _ = knn_loss(pred2, kt)
        tape2.backward(loss2)
        assert loss1.item() == loss2.item()
        assert np.array_equal(pred1.grad, pred2.grad)

    def test_gradient(self):
        rng = np.random.default_rng(4)
        kt = self._targets(rng)
        pred = T.Tensor(rng.normal(size=(7, 9)), requires_grad=True)
        gradcheck(lambda: knn_loss(pred, kt)[0], [pred], tol=1e-6)


class TestDifficultyBins:
    def test_stated_formula_two_bins(self):
        # half the corpus at distance 1, half at distance 2 -> m = (1, 4)
        difficulties = [1.0] * 60 + [2.0] * 60
        bins = fit_difficulty_bins(difficulties, n_bins=2)
        assert bins.weights.tolist() == [2.5, 0.625]

    def test_degenerate_corpus_single_bin(self):
        bins = fit_difficulty_bins([0.3] * 150, n_bins=8)
        assert len(bins.weights) == 1
        assert bins.weights[0] == 1.0

    def test_weights_monotone_nonincreasing_in_difficulty(self):
        rng = np.random.default_rng(5)
        difficulties = rng.uniform(0.01, 0.5, 500)
        bins = fit_difficulty_bins(difficulties, n_bins=8)
        assert np.all(np.diff(bins.weights) <= 1e-12)
        assert np.all(bins.weights > 0)

    def test_requires_min_corpus(self):
        with pytest.raises(ValueError):
            fit_difficulty_bins([0.1] * 50)

    def test_json_round_trip(self):
        bins = fit_difficulty_bins(list(np.linspace(0.05, 0.4, 200)), n_bins=4)
        clone = DifficultyBins.from_json(bins.to_json())
        assert np.array_equal(clone.edges, bins.edges)
        assert np.array_equal(clone.weights, bins.weights)


class TestBatchLoss:
    def test_unit_weights_plain_mean(self):
        bins = DifficultyBins(edges=np.zeros(0), weights=np.ones(1))
        losses = [T.Tensor(2.0), T.Tensor(4.0)]
        assert batch_loss(losses, bins, [0.1, 0.2]).item() == pytest.approx(3.0)

    def test_weighted_mean(self):
        bins = DifficultyBins(edges=np.array([1.0]),
                              weights=np.array([0.5, 1.0]))
        losses = [T.Tensor(2.0), T.Tensor(4.0)]
        out = batch_loss(losses, bins, [0.5, 1.5])
        assert out.item() == pytest.approx((0.5 * 2 + 1.0 * 4) / 2)

    def test_empty_batch_errors(self):
        bins = DifficultyBins(edges=np.zeros(0), weights=np.ones(1))
        with pytest.raises(ValueError):
            batch_loss([], bins, [])

    def test_weighting_preserves_zero_argmin(self):
        rng = np.random.default_rng(6)
        kt = KnnTargets(k=2, target_coords=rng.uniform(0, 1, (4, 2, 3)),
                        valid_mask=np.ones((4, 2), dtype=bool),
                        mean_knn_distance=0.2)
        perfect = T.Tensor(kt.target_coords.reshape(4, 6))
        loss, _ = knn_loss(perfect, kt)
        bins = DifficultyBins(edges=np.zeros(0), weights=np.array([7.0]))
        assert batch_loss([loss], bins, [0.2]).item() == 0.0
