"""Hierarchical raster scan: partition fitting, ordering invariants, and the
locality comparison against a pure radial sort."""

import numpy as np
import pytest

from spacepointfm.eventgen import GenParams, generate_event
from spacepointfm.geometry import Event, SpacePoint
from spacepointfm.serializer import (
    N_ETA_BINS,
    N_PHI_BINS,
    PartitionGrid,
    fit_partition,
    locality_report,
    serialize,
    serialize_radial,
)


def _point(r_hat, phi_hat, eta_hat, track_id=0, index_hint=0):
    del index_hint
    return SpacePoint(1.0, 0.0, 0.0, 0.0, 30.0 + 48.0 * r_hat,
                      -np.pi + 2 * np.pi * phi_hat, -2.0 + 4.0 * eta_hat,
                      r_hat, phi_hat, eta_hat, track_id=track_id,
                      is_noise=track_id < 0)


def _uniform_grid():
    return PartitionGrid(
        r_edges=np.linspace(0, 1, 7),
        phi_edges=np.linspace(0, 1, 9),
        eta_edges=np.linspace(0, 1, 9))


class TestFitPartition:
    def test_requires_large_sample(self):
        tiny = Event(0, [_point(0.5, 0.5, 0.5)], [[0]])
        with pytest.raises(ValueError):
            fit_partition([tiny])

    def test_quantiles_of_uniform(self):
        rng = np.random.default_rng(0)
        points = [_point(*rng.uniform(0, 1, 3)) for _ in range(20_000)]
        event = Event(0, points, [list(range(len(points)))])
        grid = fit_partition([event])
        expected = np.linspace(0, 1, 9)
        assert np.allclose(grid.eta_edges, expected, atol=0.01)
        assert np.allclose(grid.phi_edges, expected, atol=0.01)

    def test_r_edges_are_fixed_constants(self, small_events):
        grid = fit_partition(small_events)
        cm = np.array([30.0, 38.0, 46.0, 54.0, 62.0, 70.0, 78.0])
        assert np.allclose(grid.r_edges, (cm - 30.0) / 48.0, atol=1e-12)

    def test_occupancy_balance(self, small_events, grid):
        pooled = np.concatenate([e.coords_normalized() for e in small_events])
        for edges, column in ((grid.phi_edges, 1), (grid.eta_edges, 2)):
            bins = np.clip(np.searchsorted(edges, pooled[:, column],
                                           side="right") - 1, 0, 7)
            frac = np.bincount(bins, minlength=8) / len(pooled)
            assert frac.min() >= 0.10
            assert frac.max() <= 0.15

    def test_grid_json_round_trip(self, grid):
        clone = PartitionGrid.from_json(grid.to_json())
        assert np.array_equal(clone.phi_edges, grid.phi_edges)
        assert np.array_equal(clone.eta_edges, grid.eta_edges)
        assert clone.sample_points == grid.sample_points


class TestSerializeOrdering:
    def test_intra_box_radial_rule(self):
        grid = _uniform_grid()
        # same box, r 40 cm vs 35 cm
        points = [_point(10.0 / 48, 0.05, 0.05), _point(5.0 / 48, 0.05, 0.05)]
        event = Event(0, points, [[1, 0]])
        ser = serialize(event, grid)
        assert list(ser.order) == [1, 0]

    def test_inter_box_rank_rule(self):
        grid = _uniform_grid()
        # rank = (r_bin * 8 + phi_bin) * 8 + eta_bin: rank 5 vs rank 2
        a = _point(0.01, 0.01, 5.5 / 8)
        b = _point(0.01, 0.01, 2.5 / 8)
        event = Event(0, [a, b], [[0, 1]])
        ser = serialize(event, grid)
        assert list(ser.order) == [1, 0]

    def test_permutation_invariance_exact(self, grid, small_events):
        rng = np.random.default_rng(1)
        for event in small_events[:25]:
            ser = serialize(event, grid)
            perm = rng.permutation(len(event.points))
            shuffled_points = [event.points[i] for i in perm]
            inverse = np.empty(len(perm), dtype=np.int64)
            inverse[perm] = np.arange(len(perm))
            shuffled = Event(event.event_id, shuffled_points,
                             [[int(inverse[i]) for i in t] for t in event.tracks])
            ser2 = serialize(shuffled, grid)
            original_seq = [event.points[i] for i in ser.order]
            shuffled_seq = [shuffled.points[i] for i in ser2.order]
            assert original_seq == shuffled_seq

    def test_segment_monotonicity_and_coverage(self, grid, small_events):
        for event in small_events:
            ser = serialize(event, grid)
            n = len(event.points)
            assert sorted(ser.order.tolist()) == list(range(n))
            boxes = ser.box_of_point[ser.order]
            assert np.all(np.diff(boxes) >= 0)
            radii = np.array([event.points[i].r for i in ser.order])
            for start, stop in zip(ser.box_boundaries,
                                   list(ser.box_boundaries[1:]) + [n]):
                seg = radii[start:stop]
                assert np.all(np.diff(seg) >= 0)
            seg_boxes = boxes[ser.box_boundaries]
            assert np.all(np.diff(seg_boxes) > 0)

    def test_empty_event(self, grid):
        ser = serialize(Event(0, [], []), grid)
        assert len(ser.order) == 0


class TestLocality:
    def test_single_track_full_adjacency(self, grid, detector):
        params = GenParams(seed=3, multiplicity_mean=1.0,
                           multiplicity_range=(1, 1), noise_fraction=0.0)
        event = generate_event(0, detector, params)
        report = locality_report(serialize(event, grid), event)
        assert report["same_track_adjacency"] == 1.0

    def test_one_point_event_defined(self, grid):
        event = Event(0, [_point(0.5, 0.5, 0.5)], [[0]])
        report = locality_report(serialize(event, grid), event)
        assert report == {"mean_adjacent_distance": 0.0,
                          "same_track_adjacency": 0.0,
                          "mean_track_position_spread": 0.0}

    @pytest.mark.slow
    def test_raster_beats_radial_sort(self, detector):
        """The hierarchical scan keeps tracks more contiguous than a pure
        radial sort on at least 95% of events."""
        params = GenParams(seed=77)
        fit_sample = [generate_event(i, detector, params) for i in range(30)]
        grid = fit_partition(fit_sample)
        wins = ties = 0
        n_events = 1000
        for eid in range(100, 100 + n_events):
            event = generate_event(eid, detector, params)
            raster = locality_report(serialize(event, grid), event)
            radial = locality_report(serialize_radial(event), event)
            if raster["same_track_adjacency"] > radial["same_track_adjacency"]:
                wins += 1
            elif raster["same_track_adjacency"] == radial["same_track_adjacency"]:
                ties += 1
        assert wins >= 0.95 * n_events, f"raster won only {wins}/{n_events}"
