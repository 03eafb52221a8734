"""Backbone: embedding, mixer semantics, causality, width-scaled init rules,
and the checkpoint container."""

import math

import numpy as np
import pytest

import spacepointfm.tensor as T
from spacepointfm import checkpoint as ckpt
from spacepointfm.backbone import Backbone, ModelConfig, mup_init
from spacepointfm.objective import build_targets, knn_loss

from conftest import gradcheck


def _features(rng, s):
    return np.column_stack([rng.uniform(0.5, 2.0, s), rng.uniform(0, 1, (s, 3))])


@pytest.fixture()
def tiny():
    cfg = ModelConfig(d_model=8, n_layers=2, state_dim=4, n_heads=2, k=3,
                      pe_levels=2, seed=11)
    return Backbone.init(cfg, dtype=np.float64)


class TestEmbed:
    def test_feature_pathway_alone(self, tiny):
        tiny.weights["embed.w_pos"].data[...] = 0.0
        rng = np.random.default_rng(0)
        feats = _features(rng, 5)
        out = tiny.embed(feats)
        expect = feats[:, :1] @ tiny.weights["embed.w_feat"].data
        assert np.allclose(out.data, expect, rtol=1e-12)

    def test_identical_points_identical_embeddings(self, tiny):
        feats = np.tile([[1.0, 0.3, 0.6, 0.2]], (2, 1))
        out = tiny.embed(feats)
        assert np.array_equal(out.data[0], out.data[1])

    @pytest.mark.parametrize("s", [1, 17, 301])
    def test_shape_contract(self, tiny, s):
        rng = np.random.default_rng(s)
        assert tiny.embed(_features(rng, s)).shape == (s, 8)


class TestMixerBlock:
    def test_zero_init_delta_closed_form(self, tiny):
        tiny.weights["block0.w_delta"].data[...] = 0.0
        tiny.weights["block0.b_delta"].data[...] = 0.0
        rng = np.random.default_rng(1)
        feats = _features(rng, 6)
        x = tiny.embed(feats)
        xn = T.rmsnorm(x, tiny.weights["block0.norm_gain"])
        u = T.matmul(xn, tiny.weights["block0.w_in"])
        delta = T.softplus(T.add(T.matmul(u, tiny.weights["block0.w_delta"]),
                                 tiny.weights["block0.b_delta"]))
        assert np.allclose(delta.data, math.log(2.0), rtol=1e-12)
        a_pos = np.exp(tiny.weights["block0.a_log"].data)
        abar = np.exp(-delta.data * a_pos)
        assert np.allclose(abar, abar[0], rtol=1e-12)  # uniform over t

    def test_infinite_decay_is_memoryless(self, tiny):
        for i in range(tiny.config.n_layers):
            tiny.weights[f"block{i}.a_log"].data[...] = 25.0  # exp(-delta*A) = 0
        rng = np.random.default_rng(2)
        feats = _features(rng, 10)
        base = tiny.forward(feats).data
        bumped = feats.copy()
        bumped[3, 0] += 1.0
        out = tiny.forward(bumped).data
        assert np.array_equal(out[:3], base[:3])
        assert np.array_equal(out[4:], base[4:])  # only position 3 changes
        assert not np.array_equal(out[3], base[3])

    def test_causality_probe(self, tiny):
        rng = np.random.default_rng(3)
        feats = _features(rng, 14)
        base = tiny.forward(feats).data
        for t in (0, 5, 13):
            bumped = feats.copy()
            bumped[t, 0] += 0.25
            out = tiny.forward(bumped).data
            assert np.array_equal(out[:t], base[:t])
            assert np.abs(out[t:] - base[t:]).max() > 0


class TestForward:
    def test_single_point(self, tiny):
        rng = np.random.default_rng(4)
        out = tiny.forward(_features(rng, 1))
        assert out.shape == (1, 9)

    def test_deterministic(self, tiny):
        rng = np.random.default_rng(5)
        feats = _features(rng, 20)
        assert np.array_equal(tiny.forward(feats).data, tiny.forward(feats).data)

    @pytest.mark.slow
    def test_full_loss_gradient(self, tiny, small_events, grid):
        from spacepointfm.serializer import serialize

        event = small_events[0]
        ser = serialize(event, grid)
        feats = event.features()[ser.order][:16]
        sub_event_targets = build_targets(event, k=3).reordered(ser.order)
        targets = type(sub_event_targets)(
            k=3, target_coords=sub_event_targets.target_coords[:16],
            valid_mask=sub_event_targets.valid_mask[:16],
            mean_knn_distance=sub_event_targets.mean_knn_distance)
        params = list(tiny.weights.values())

        def build():
            pred = tiny.forward(feats)
            loss, _ = knn_loss(pred, targets)
            return loss

        rng = np.random.default_rng(6)
        worst = gradcheck(build, params, tol=1e-4, max_entries=6, rng=rng)
        assert worst < 1e-4


class TestMupInit:
    def test_multipliers_anchor_at_base_width(self):
        cfg = ModelConfig(d_model=64, n_layers=2, seed=0)
        _, mults = mup_init(cfg)
        assert all(m == pytest.approx(1.0) for m in mults.values())

    def test_width_ratio_rules(self):
        base = ModelConfig(d_model=64, n_layers=1, seed=0)
        quad = ModelConfig(d_model=256, n_layers=1, n_heads=1, seed=0)
        wb, mb = mup_init(base)
        wq, mq = mup_init(quad)
        sigma_b_base = wb["block0.w_b"].data.std()
        sigma_b_quad = wq["block0.w_b"].data.std()
        # quadrupled input width: state-input init std halves
        assert sigma_b_quad == pytest.approx(sigma_b_base / 2, rel=0.05)
        # and the state-readout lr multiplier halves
        assert mq["block0.w_c"] == pytest.approx(mb["block0.w_c"] / 2, rel=1e-12)
        assert mq["block0.w_b"] == pytest.approx(mb["block0.w_b"] / 2, rel=1e-12)
        # hidden matrices scale as 1/width
        assert mq["block0.w_in"] == pytest.approx(mb["block0.w_in"] / 4, rel=1e-12)

    def test_parameter_count_strictly_increasing(self):
        counts = [Backbone.init(ModelConfig(d_model=w, n_layers=4,
                                            seed=0)).param_count()
                  for w in (16, 32, 64, 128)]
        assert counts == sorted(counts)
        assert len(set(counts)) == len(counts)

    def test_activation_scale_stable_across_widths(self):
        """Block-output RMS at init within a factor of 2 across widths."""
        rng = np.random.default_rng(7)
        feats = _features(rng, 64)
        rms = {}
        for width in (16, 64, 256):
            cfg = ModelConfig(d_model=width, n_layers=4, seed=123)
            model = Backbone.init(cfg, dtype=np.float64)
            collected = []
            model.forward(feats, collect_blocks=collected)
            rms[width] = [float(np.sqrt((b ** 2).mean())) for b in collected]
        for layer in range(4):
            values = [rms[w][layer] for w in (16, 64, 256)]
            assert max(values) / min(values) < 2.0, (layer, values)


class TestCheckpoint:
    def _roundtrip(self, tmp_path, model):
        path = str(tmp_path / "model.ckpt")
        ckpt.save_checkpoint(path,
                             {n: w.data for n, w in model.weights.items()},
                             {"config": model.config.to_dict(), "grid": None,
                              "bins": None, "train_state": {}, "seed": 0})
        return path

    def test_bit_exact_forward_after_roundtrip(self, tmp_path):
        cfg = ModelConfig(d_model=16, n_layers=2, seed=3)
        with T.using(dtype=np.float32, mode="train"):
            model = Backbone.init(cfg, dtype=np.float32)
            rng = np.random.default_rng(8)
            feats = _features(rng, 12)
            before = model.forward(feats).data.copy()
            path = self._roundtrip(tmp_path, model)
            tensors, metadata = ckpt.load_checkpoint(path)
            clone = Backbone(config=ModelConfig.from_dict(metadata["config"]),
                             weights={n: T.Tensor(a, dtype=np.float32, name=n)
                                      for n, a in tensors.items()})
            after = clone.forward(feats).data
        assert np.array_equal(before, after)

    def test_truncated_file_rejected(self, tmp_path):
        cfg = ModelConfig(d_model=16, n_layers=1, seed=3)
        model = Backbone.init(cfg, dtype=np.float32)
        path = self._roundtrip(tmp_path, model)
        raw = open(path, "rb").read()
        open(path, "wb").write(raw[:-9])
        with pytest.raises(ckpt.CheckpointError):
            ckpt.load_checkpoint(path)

    def test_corrupt_payload_rejected(self, tmp_path):
        cfg = ModelConfig(d_model=16, n_layers=1, seed=3)
        model = Backbone.init(cfg, dtype=np.float32)
        path = self._roundtrip(tmp_path, model)
        raw = bytearray(open(path, "rb").read())
        raw[40] ^= 0xFF
        open(path, "wb").write(raw)
        with pytest.raises(ckpt.CheckpointChecksumError):
            ckpt.load_checkpoint(path)

    def test_bad_magic_and_version(self, tmp_path):
        cfg = ModelConfig(d_model=16, n_layers=1, seed=3)
        model = Backbone.init(cfg, dtype=np.float32)
        path = self._roundtrip(tmp_path, model)
        raw = bytearray(open(path, "rb").read())
        bad = bytearray(raw)
        bad[:4] = b"XXXX"
        open(path, "wb").write(bad)
        with pytest.raises(ckpt.CheckpointFormatError):
            ckpt.load_checkpoint(path)
        bad = bytearray(raw)
        bad[4] = 99
        # recompute trailing checksum so only the version differs
        import struct
        import zlib
        payload = bytes(bad[:-4])
        open(path, "wb").write(payload + struct.pack(
            "<I", zlib.crc32(payload) & 0xFFFFFFFF))
        with pytest.raises(ckpt.CheckpointVersionError):
            ckpt.load_checkpoint(path)

    def test_width_mismatch_names_tensor(self, tmp_path):
        small = Backbone.init(ModelConfig(d_model=16, n_layers=1, seed=3),
                              dtype=np.float32)
        path = self._roundtrip(tmp_path, small)
        tensors, _ = ckpt.load_checkpoint(path)
        big = Backbone.init(ModelConfig(d_model=32, n_layers=1, seed=3),
                            dtype=np.float32)
        with pytest.raises(ckpt.CheckpointShapeError, match="embed.w_feat|w_"):
            ckpt.check_shapes(tensors,
                              {n: w.shape for n, w in big.weights.items()})

    def test_freeze_contract(self):
        model = Backbone.init(ModelConfig(d_model=16, n_layers=1, seed=4),
                              dtype=np.float32)
        model.freeze()
        before = model.checksum()
        with pytest.raises(ValueError):
            model.weights["head.w"].data[0, 0] = 1.0
        assert model.checksum() == before
