import csv

import numpy as np
import pytest

from ldrnet import data as D
from ldrnet import model as M
from ldrnet import train as T

TINY = M.ModelConfig(alpha=0.25, n_points=12, input_hw=32, stage_channels=(16,) * 5,
                     fused_width=8, tail_channels=8, extra_blocks=(0, 0, 0, 0, 1))


@pytest.fixture(scope="module")
def tiny_data():
    return D.generate_dataset(D.SceneConfig(image_hw=32, seed=2), 12)


def tiny_cfg(**kw):
    base = dict(epochs=3, batch_size=4, milestones=((2, 1e-4),), model=TINY, eval_every=1)
    base.update(kw)
    return T.TrainConfig(**base)


class TestSchedule:
    def test_full_scale_profile(self):
        cfg = T.paper_profile()
        expect = {0: 1e-3, 249: 1e-3, 250: 1e-4, 699: 1e-4, 700: 5e-5, 849: 5e-5, 850: 1e-5, 999: 1e-5}
        for epoch, lr in expect.items():
            assert T.lr_schedule(cfg, epoch) == lr
        assert cfg.batch_size == 128 and cfg.epochs == 1000
        assert (cfg.rho, cfg.momentum, cfg.epsilon) == (0.9, 0.0, 1e-7)

    def test_no_milestones(self):
        assert T.lr_schedule(T.TrainConfig(milestones=()), 10_000) == 1e-3

    def test_milestones_must_increase(self):
        with pytest.raises(ValueError):
            T.TrainConfig(milestones=((10, 1e-4), (10, 1e-5)))
        with pytest.raises(ValueError):
            T.TrainConfig(milestones=((20, 1e-4), (10, 1e-5)))

    def test_config_round_trip(self):
        cfg = T.paper_profile(seed=4)
        assert T.TrainConfig.from_dict(cfg.to_dict()) == cfg


def oracle_rmsprop(theta, v, g, lr, rho, eps):
    v = rho * v + (1 - rho) * g * g
    return theta - lr * g / (v ** 0.5 + eps), v


class TestRMSprop:
    def test_scalar_case(self):
        p = {"t": np.array([0.0])}
        state = T.init_optimizer(p)
        T.rmsprop_step(p, {"t": np.array([1.0])}, state, 1e-3, 0.9, 1e-7)
        assert state["t"][0] == pytest.approx(0.1, abs=1e-15)
        assert p["t"][0] == pytest.approx(-3.1623e-3, abs=1e-7)
        assert p["t"][0] == pytest.approx(-1e-3 / (np.sqrt(0.1) + 1e-7), abs=1e-15)

    def test_zero_gradient(self, rng):
        p = {"a": rng.normal(size=(3, 2))}
        before = p["a"].copy()
        T.rmsprop_step(p, {"a": np.zeros((3, 2))}, T.init_optimizer(p), 1e-3)
        np.testing.assert_array_equal(p["a"], before)

    def test_random_steps_match_oracle(self, rng):
        p = {"a": rng.normal(size=5), "b": rng.normal(size=(2, 2))}
        ref = {k: (v.copy(), np.zeros_like(v)) for k, v in p.items()}
        state = T.init_optimizer(p)
        for _ in range(100):
            g = {k: rng.normal(size=v.shape) for k, v in p.items()}
            T.rmsprop_step(p, g, state, 1e-3, 0.9, 1e-7)
            ref = {k: oracle_rmsprop(*ref[k], g[k], 1e-3, 0.9, 1e-7) for k in ref}
        for k in p:
            np.testing.assert_allclose(p[k], ref[k][0], atol=1e-7, rtol=0)

    def test_elementwise_and_bounded(self, rng):
        g = rng.normal(size=50) * 10 ** rng.uniform(-6, 3, 50)
        p = {"a": np.zeros(50)}
        T.rmsprop_step(p, {"a": g}, T.init_optimizer(p), 1e-3)
        assert np.all(np.abs(p["a"]) < 1e-3 * (1 / np.sqrt(0.1) + 1e-6))
        perm = rng.permutation(50)
        q = {"a": np.zeros(50)}
        T.rmsprop_step(q, {"a": g[perm]}, T.init_optimizer(q), 1e-3)
        np.testing.assert_array_equal(q["a"], p["a"][perm])

    def test_shape_mismatch(self):
        p = {"a": np.zeros(3)}
        with pytest.raises(ValueError, match="'a'"):
            T.rmsprop_step(p, {"a": np.zeros(4)}, T.init_optimizer(p), 1e-3)

    def test_momentum_buffer(self):
        p = {"a": np.zeros(1)}
        state, buffers = T.init_optimizer(p), {}
        T.rmsprop_step(p, {"a": np.ones(1)}, state, 1e-3, momentum=0.5, buffers=buffers)
        T.rmsprop_step(p, {"a": np.ones(1)}, state, 1e-3, momentum=0.5, buffers=buffers)
        step1 = 1e-3 / (np.sqrt(0.1) + 1e-7)
        step2 = 1e-3 / (np.sqrt(0.19) + 1e-7)
        assert p["a"][0] == pytest.approx(-(step1 + 0.5 * step1 + step2), rel=1e-12)


class TestShuffle:
    def test_pure_function(self):
        a = T.epoch_permutation(3, 7, 100)
        assert np.array_equal(a, T.epoch_permutation(3, 7, 100))
        assert sorted(a) == list(range(100))
        assert not np.array_equal(a, T.epoch_permutation(3, 8, 100))
        assert not np.array_equal(a, T.epoch_permutation(4, 7, 100))


class TestTraining:
    def test_smoke(self, tiny_data):
        samples = D.generate_dataset(D.SceneConfig(image_hw=32, seed=3), 8)
        _, rows = T.train(tiny_cfg(epochs=1), samples)
        assert len(rows) == 1
        assert all(np.isfinite(rows[0][f"loss_{k}"]) for k in ("total", "reg", "cls", "sim", "dis"))

    def test_outputs_and_metrics(self, tmp_path, tiny_data):
        ck, rows = T.train(tiny_cfg(), tiny_data[:8], tiny_data[8:], out_dir=tmp_path)
        assert (tmp_path / "model.ckpt").exists() and (tmp_path / "state.ckpt").exists()
        assert (tmp_path / "model_epoch0002.ckpt").exists()
        with open(tmp_path / "metrics.csv") as fh:
            table = list(csv.DictReader(fh))
        assert list(table[0]) == list(T.METRIC_FIELDS)
        assert [int(r["epoch"]) for r in table] == [0, 1, 2]
        assert [float(r["lr"]) for r in table] == [1e-3, 1e-3, 1e-4]
        assert all(0 <= float(r["val_ji"]) <= 1 for r in table)
        loaded = M.load_checkpoint(tmp_path / "model.ckpt")
        assert M.checkpoint_bytes(loaded) == M.checkpoint_bytes(ck)

    def test_deterministic(self, tiny_data):
        a, _ = T.train(tiny_cfg(epochs=2), tiny_data)
        b, _ = T.train(tiny_cfg(epochs=2), tiny_data)
        assert M.checkpoint_bytes(a) == M.checkpoint_bytes(b)
        c, _ = T.train(tiny_cfg(epochs=2, seed=1), tiny_data)
        assert M.checkpoint_bytes(a) != M.checkpoint_bytes(c)

    def test_resume_bit_exact(self, tmp_path, tiny_data):
        full, _ = T.train(tiny_cfg(), tiny_data)
        T.train(tiny_cfg(), tiny_data, out_dir=tmp_path, stop_after_epochs=2)
        state, _, rows = T.load_state(tmp_path / "state.ckpt")
        assert state.epoch == 2 and len(rows) == 2
        resumed, rows = T.train(tiny_cfg(), tiny_data, resume=tmp_path / "state.ckpt")
        assert len(rows) == 3
        for k in full.tensors:
            assert full.tensors[k].tobytes() == resumed.tensors[k].tobytes(), k

    def test_state_needs_optimizer(self, tmp_path):
        M.save_checkpoint(M.build_model(TINY, 0), tmp_path / "plain.ckpt")
        with pytest.raises(M.CheckpointError):
            T.load_state(tmp_path / "plain.ckpt")

    def test_nan_aborts_with_location(self, tiny_data):
        # the first update turns every parameter into NaN, so the second batch diverges
        with pytest.raises(T.TrainingDivergedError) as info:
            T.train(tiny_cfg(lr=float("nan")), tiny_data)
        assert info.value.epoch == 0 and info.value.batch == 1

    def test_wrong_image_size(self, tiny_data):
        with pytest.raises(ValueError, match="expects"):
            T.train(tiny_cfg(model=M.ModelConfig()), tiny_data)

    def test_no_data(self):
        with pytest.raises(ValueError):
            T.train(tiny_cfg())

    def test_from_directory(self, tmp_path, tiny_data):
        D.write_dataset(tiny_data, tmp_path / "d")
        a, _ = T.train(tiny_cfg(epochs=1, data=str(tmp_path / "d")))
        b, _ = T.train(tiny_cfg(epochs=1), tiny_data)
        assert M.checkpoint_bytes(a) == M.checkpoint_bytes(b)


def test_with_epochs_scales_milestones():
    cfg = T.with_epochs(T.desk_profile(), 40)
    assert cfg.epochs == 40 and cfg.milestones == ((24, 1e-4), (34, 5e-5), (38, 1e-5))
    short = T.with_epochs(T.desk_profile(), 2)
    assert [e for e, _ in short.milestones] == [1, 2]


def test_desk_loss_falls_on_fixed_batch():
    # Not strictly monotone: the first RMSprop steps overshoot while the
    # squared-gradient average warms up from zero.
    from ldrnet.loss import LossWeights
    samples = D.generate_dataset(D.SceneConfig(seed=1), 32)
    imgs, rings, cls = D.training_arrays(samples, 28)
    curves = []
    for seed in range(3):
        ck = M.build_model(M.ModelConfig(), seed)
        params = M.trainable(ck)
        arrays = {k: p.data for k, p in params.items()}
        opt = T.init_optimizer(arrays)
        losses = []
        for _ in range(21):
            bd = T.loss_and_grads(ck.config, params, imgs, rings, cls, LossWeights())
            losses.append(bd.as_floats()["total"])
            T.rmsprop_step(arrays, {k: p.grad for k, p in params.items()}, opt, 1e-3)
        curves.append(losses)
    med = np.median(curves, axis=0)
    assert med[-1] < 0.4 * med[0]
    assert np.median(med[-5:]) < np.median(med[5:10]) < np.median(med[:5])
