import numpy as np
import pytest
from dataclasses import replace

from ldrnet import model as M
from ldrnet.numerics import engine as E

SMALL = M.ModelConfig(alpha=0.25, n_points=12, input_hw=32, stage_channels=(16,) * 5,
                      fused_width=8, tail_channels=8, extra_blocks=(1, 0, 0, 0, 1))


@pytest.fixture(scope="module")
def desk():
    return M.build_model(M.ModelConfig(), 3)


def images(rng, b, s):
    return rng.random((b, s, s, 3)).astype(np.float32)


class TestConfig:
    @pytest.mark.parametrize("bad", [dict(n_points=30), dict(n_points=4), dict(alpha=0.0), dict(alpha=-1),
                                     dict(n_cls=1), dict(input_hw=48), dict(stage_channels=(8, 8))])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            M.ModelConfig(**bad)

    def test_channels_scale(self):
        assert M.ModelConfig(alpha=0.5).channels == (8, 16, 32, 48, 64)
        assert M.ModelConfig(alpha=0.1).channels == (8, 8, 8, 10, 13)

    def test_dict_round_trip(self):
        cfg = M.paper_config(fusion_enabled=False)
        assert M.ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestBuild:
    def test_full_scale_head_width(self):
        cfg = M.paper_config()
        assert cfg.head_out == 8 + 192 + 2 == 202
        assert M.parameter_shapes(cfg)["head.w"] == (256, 202)

    def test_deterministic(self):
        a, b = M.build_model(SMALL, 5), M.build_model(SMALL, 5)
        assert M.checkpoint_bytes(a) == M.checkpoint_bytes(b)
        assert M.checkpoint_bytes(a) != M.checkpoint_bytes(M.build_model(SMALL, 6))

    def test_count_monotone(self):
        counts = [M.parameter_count(replace(M.paper_config(), alpha=a)) for a in (0.1, 0.35, 0.75, 1.0, 1.4)]
        assert all(x < y for x, y in zip(counts, counts[1:]))
        base = M.ModelConfig()
        for field, bigger in (("n_points", 32), ("n_cls", 3), ("fused_width", 160)):
            assert M.parameter_count(replace(base, **{field: bigger})) > M.parameter_count(base)

    def test_count_matches_tensors(self, desk):
        assert desk.parameter_count() == M.parameter_count(desk.config)

    def test_xavier_head(self):
        ck = M.build_model(M.paper_config(), 0)
        w = ck.tensors["head.w"]
        limit = np.sqrt(6 / (256 + 202))
        assert np.abs(w).max() <= limit
        assert np.std(w) == pytest.approx(limit / np.sqrt(3), rel=0.02)
        assert not np.any(ck.tensors["head.b"])

    def test_float32(self, desk):
        assert all(t.dtype == np.float32 for t in desk.tensors.values())


class TestForward:
    def test_shapes(self, rng, desk):
        out = M.forward(desk, images(rng, 2, 64))
        assert out.corners.shape == (2, 8)
        assert out.borders.shape == (2, 48)
        assert out.logits.shape == (2, 2)

    @pytest.mark.parametrize("fusion", [True, False])
    def test_taps(self, rng, fusion):
        cfg = replace(SMALL, fusion_enabled=fusion)
        ck = M.build_model(cfg, 0)
        taps = M.backbone(cfg, {k: E.Tensor(v) for k, v in ck.tensors.items()}, E.Tensor(images(rng, 1, 32)))
        assert [t.shape[1] for t in taps] == [16, 8, 4, 2, 1]
        assert taps[-1].shape[-1] == cfg.tail_channels
        out = M.forward(ck, images(rng, 3, 32))
        assert out.borders.shape == (3, 16)

    def test_bias_only(self, rng):
        ck = M.build_model(SMALL, 0)
        for k in ck.tensors:
            ck.tensors[k] = np.zeros_like(ck.tensors[k])
        ck.tensors["head.b"] = np.linspace(-2, 2, SMALL.head_out).astype(np.float32)
        a = M.forward(ck, images(rng, 2, 32))
        b = M.forward(ck, np.zeros((2, 32, 32, 3)))
        sig = 1 / (1 + np.exp(-ck.tensors["head.b"].astype(np.float64)))
        np.testing.assert_allclose(a.corners[0], sig[:8], rtol=1e-6)
        np.testing.assert_array_equal(a.logits[1], ck.tensors["head.b"][-2:])
        np.testing.assert_array_equal(a.corners, b.corners)

    def test_bit_stable(self, rng, desk):
        x = images(rng, 4, 64)
        a, b = M.forward(desk, x), M.forward(desk, x.copy())
        assert a.corners.tobytes() == b.corners.tobytes()
        assert a.borders.tobytes() == b.borders.tobytes()

    def test_outputs_in_open_interval(self, rng, desk):
        out = M.forward(desk, images(rng, 4, 64))
        assert np.all((out.corners > 0) & (out.corners < 1))
        assert np.all(np.isfinite(out.logits))

    def test_wrong_size(self, rng, desk):
        with pytest.raises(E.ShapeError):
            M.forward(desk, images(rng, 1, 32))


class TestFusion:
    def taps(self, rng, zero=()):
        sizes = [(16, 4), (8, 4), (4, 4), (2, 4), (1, 8)]
        return [E.Tensor(np.zeros((2, s, s, c)) if i in zero else rng.normal(size=(2, s, s, c)))
                for i, (s, c) in enumerate(sizes)]

    def params(self, rng, zero_bias=True):
        p = {}
        for s, c in enumerate([4, 4, 4, 4, 8]):
            p[f"fuse{s}.w"] = E.Tensor(rng.normal(size=(1, 1, c, 6)))
            p[f"fuse{s}.b"] = E.Tensor(np.zeros(6) if zero_bias else rng.normal(size=6))
        return p

    def test_zero_taps(self, rng):
        out = M.fuse_features(self.taps(rng, zero=range(5)), self.params(rng))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_single_tap(self, rng):
        taps, p = self.taps(rng, zero=(0, 1, 3, 4)), self.params(rng)
        expect = taps[2].data.mean(axis=(1, 2)) @ p["fuse2.w"].data[0, 0]
        np.testing.assert_allclose(M.fuse_features(taps, p).data, expect, atol=1e-12)

    def test_order_invariant(self, rng):
        taps, p = self.taps(rng), self.params(rng, zero_bias=False)
        a = M.fuse_features(taps, p).data
        b = M.fuse_features(taps, p, order=[4, 2, 0, 3, 1]).data
        np.testing.assert_allclose(a, b, atol=1e-6)


class TestInference:
    def test_center_scaling(self):
        ck = M.build_model(M.paper_config(alpha=0.1, n_points=12, fused_width=8, tail_channels=8), 0)
        ck.tensors["head.w"][:] = 0
        ck.tensors["head.b"][:] = 0
        ck.tensors["head.b"][-2:] = [2.0, -1.0]
        quad, cls = M.predict_quad(ck, np.zeros((224, 224, 3)), 224, 224)
        np.testing.assert_allclose(quad, 112.0)
        assert cls == 0

    def test_composition(self, rng, desk):
        img = images(rng, 1, 64)[0]
        quad, cls = M.predict_quad(desk, img, 640, 480)
        out = M.forward(desk, img[None])
        manual = (out.corners[0].reshape(4, 2) * 1.4 - 0.2) * [640, 480]
        np.testing.assert_allclose(quad, manual, rtol=1e-6)
        assert cls == int(np.argmax(out.logits[0]))

    def test_coordinate_encoding(self, rng):
        xy = rng.uniform(-0.2, 1.2, (50, 2))
        np.testing.assert_allclose(M.decode_coords(M.encode_coords(xy)), xy, atol=1e-12)
        np.testing.assert_allclose(M.encode_coords(np.array([-5.0, 0.0, 1.0, 9.0])), [0, 1 / 7, 6 / 7, 1])


class TestPruning:
    def test_bitwise_equal(self, rng, desk):
        pruned = M.prune_for_inference(desk)
        x = images(rng, 100, 64)
        full, small = M.forward(desk, x), M.forward(pruned, x)
        assert full.corners.tobytes() == small.corners.tobytes()
        assert full.logits.tobytes() == small.logits.tobytes()
        assert small.borders.shape == (100, 0)

    def test_full_scale_count_drop(self):
        ck = M.build_model(M.paper_config(), 0)
        drop = ck.parameter_count() - M.prune_for_inference(ck).parameter_count()
        assert drop == 192 * 256 + 192

    def test_idempotent(self, desk):
        once = M.prune_for_inference(desk)
        assert M.checkpoint_bytes(M.prune_for_inference(once)) == M.checkpoint_bytes(once)
        assert once.config.pruned and not desk.config.pruned


class TestCheckpointFile:
    def test_round_trip_bytes(self, tmp_path, desk):
        path = tmp_path / "m.ckpt"
        M.save_checkpoint(desk, path)
        loaded = M.load_checkpoint(path)
        M.save_checkpoint(loaded, tmp_path / "again.ckpt")
        assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()
        for k, v in desk.tensors.items():
            assert loaded.tensors[k].tobytes() == v.tobytes()
        assert loaded.config == desk.config

    def test_layout(self, desk):
        blob = M.checkpoint_bytes(desk)
        assert blob[:8] == b"LDRCKPT1"
        hlen = int.from_bytes(blob[8:16], "little")
        import json
        header = json.loads(blob[16:16 + hlen])
        ent = header["tensors"]["head.b"]
        raw = blob[16 + hlen + ent["offset"]:16 + hlen + ent["offset"] + ent["length"]]
        assert np.frombuffer(raw, "<f4").tobytes() == desk.tensors["head.b"].tobytes()
        assert header["format_version"] == 1

    def test_bad_magic(self, desk):
        blob = bytearray(M.checkpoint_bytes(desk))
        blob[0:8] = b"NOTACKPT"
        with pytest.raises(M.CheckpointError):
            M.checkpoint_from_bytes(bytes(blob))

    def test_truncated(self, desk):
        blob = M.checkpoint_bytes(desk)
        with pytest.raises(M.CheckpointError):
            M.checkpoint_from_bytes(blob[:-10])

    def test_missing_tensor(self, desk):
        partial = M.Checkpoint(desk.config, {k: v for k, v in desk.tensors.items() if k != "tail.w"})
        with pytest.raises(M.CheckpointError, match="tail.w"):
            M.checkpoint_from_bytes(M.checkpoint_bytes(partial))
