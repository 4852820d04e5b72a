"""Model construction, masked forward, training, and checkpoint tests."""

import numpy as np
import pytest

import cts.tensor as T
from cts.data import make_blobs
from cts.models import (ARCHS, ModelError, ModelState, TrainConfig,
                        build_model, evaluate, forward, load_checkpoint,
                        save_checkpoint, train)


def small_data(image=False, dim=8, classes=2, n=400, seed=3):
    return make_blobs(classes=classes, dim=dim, n=n, seed=seed, image=image)


class TestBuild:
    def test_mlp_maskable_count(self):
        model = build_model("mlp-2x256", 0, (784,), 10)
        assert model.d == 784 * 256 + 256 * 256 + 256 * 10

    def test_biases_not_maskable(self):
        model = build_model("mlp-2x256", 0, (784,), 10)
        names = {n for n, _, _ in model.maskable_index}
        assert all(n.endswith(".w") for n in names)
        assert any(n.endswith(".b") for n in model.params)

    def test_init_deterministic(self):
        a = build_model("mlp-2x256", 5, (20,), 4)
        b = build_model("mlp-2x256", 5, (20,), 4)
        for k in a.params:
            np.testing.assert_array_equal(a.params[k], b.params[k])

    def test_init_seed_sensitive(self):
        a = build_model("mlp-2x256", 5, (20,), 4)
        b = build_model("mlp-2x256", 6, (20,), 4)
        assert any(not np.array_equal(a.params[k], b.params[k]) for k in a.params)

    def test_all_archs_forward(self):
        for arch, shape in [("mlp-2x256", (20,)), ("tiny-mlp", (4,)),
                            ("lenet-conv4", (1, 8, 8)), ("resnet-tiny", (1, 8, 8))]:
            model = build_model(arch, 0, shape, 3)
            x = np.random.default_rng(0).standard_normal((2,) + shape)
            trace = forward(model, x, np.array([0, 1]))
            assert trace.logits.shape == (2, 3)
            assert np.isfinite(trace.loss.item())

    def test_unknown_arch(self):
        with pytest.raises(ModelError):
            build_model("mlp-9000", 0, (4,), 2)

    def test_archs_tuple(self):
        assert set(ARCHS) >= {"mlp-2x256", "lenet-conv4", "resnet-tiny"}


class TestOverlay:
    def setup_method(self):
        self.model = build_model("tiny-mlp", 0, (4,), 2)
        rng = np.random.default_rng(1)
        self.x = rng.standard_normal((8, 4))
        self.y = rng.integers(0, 2, 8)

    def test_identity_overlay_is_noop(self):
        base = forward(self.model, self.x, self.y)
        ones = forward(self.model, self.x, self.y, overlay=np.ones(self.model.d))
        np.testing.assert_array_equal(base.logits.data, ones.logits.data)

    def test_zero_overlay_uniform_logits(self):
        trace = forward(self.model, self.x, self.y, overlay=np.zeros(self.model.d))
        # all weights zeroed: logits reduce to the (zero) output bias
        np.testing.assert_array_equal(trace.logits.data, np.zeros_like(trace.logits.data))

    def test_overlay_equals_premultiplied_weights(self):
        rng = np.random.default_rng(2)
        overlay = rng.random(self.model.d)
        via_overlay = forward(self.model, self.x, self.y, overlay=overlay)
        pre = self.model.copy()
        pre.set_maskable_vector(pre.maskable_vector() * overlay)
        direct = forward(pre, self.x, self.y)
        np.testing.assert_allclose(via_overlay.logits.data, direct.logits.data,
                                   rtol=1e-12, atol=1e-12)

    def test_overlay_length_checked(self):
        with pytest.raises(ModelError):
            forward(self.model, self.x, self.y, overlay=np.ones(self.model.d + 1))

    def test_soft_overlay_gradient_flows(self):
        leaf = T.Tensor(np.full(self.model.d, 0.7), requires_grad=True)
        trace = forward(self.model, self.x, self.y, overlay=leaf)
        (g,) = T.grad(trace.loss, [leaf])
        assert g.data.shape == (self.model.d,)
        assert np.any(g.data != 0)

    def test_features_captured_per_relu(self):
        trace = forward(self.model, self.x, self.y, capture_features=True)
        assert len(trace.features) == 1  # one hidden relu in tiny-mlp
        assert np.all(trace.features[0].data >= 0)


class TestTrain:
    def test_blob_mlp_reaches_high_accuracy(self):
        data = small_data()
        model = build_model("mlp-2x256", 0, data.input_shape, data.num_classes)
        cfg = TrainConfig(steps=200, batch_size=32, seed=0)
        final = train(model, data, cfg)
        acc, _ = evaluate(final, data.x_test, data.y_test)
        assert acc >= 0.95

    def test_training_deterministic(self):
        data = small_data()
        cfg = TrainConfig(steps=50, batch_size=32, seed=0)
        runs = []
        for _ in range(2):
            model = build_model("mlp-2x256", 0, data.input_shape, data.num_classes)
            runs.append(train(model, data, cfg).maskable_vector())
        np.testing.assert_array_equal(runs[0], runs[1])

    def test_masked_entries_stay_zero(self):
        data = small_data()
        model = build_model("tiny-mlp", 0, data.input_shape, data.num_classes)
        rng = np.random.default_rng(0)
        mask = (rng.random(model.d) < 0.5).astype(np.float64)
        start = model.copy()
        start.set_maskable_vector(start.maskable_vector() * mask)
        cfg = TrainConfig(steps=60, batch_size=32, seed=0)
        final = train(start, data, cfg, mask=mask)
        v = final.maskable_vector()
        np.testing.assert_array_equal(v[mask == 0], 0.0)
        assert np.any(v[mask == 1] != start.maskable_vector()[mask == 1])

    def test_lr_schedule(self):
        cfg = TrainConfig(steps=100, lr=0.1, lr_drops=((90, 0.1),), seed=0)
        assert cfg.lr_at(0) == pytest.approx(0.1)
        assert cfg.lr_at(89) == pytest.approx(0.1)
        assert cfg.lr_at(90) == pytest.approx(0.01)

    def test_stop_step_matches_prefix_of_full_run(self):
        data = small_data()
        cfg = TrainConfig(steps=40, batch_size=32, seed=0)
        model = build_model("tiny-mlp", 0, data.input_shape, data.num_classes)
        half = train(model, data, cfg, stop_step=20)
        resumed = train(half, data, cfg, start_step=20)
        full = train(model, data, cfg)
        # momentum resets at the resume point, so only the prefix is identical
        np.testing.assert_array_equal(half.maskable_vector(),
                                      train(model, data, cfg, stop_step=20).maskable_vector())
        assert resumed.maskable_vector().shape == full.maskable_vector().shape

    def test_rewind_step_bounds(self):
        with pytest.raises(ValueError):
            TrainConfig(steps=10, rewind_step=10)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        model = build_model("tiny-mlp", 3, (4,), 2)
        momentum = {k: np.random.default_rng(0).standard_normal(v.shape)
                    for k, v in model.params.items()}
        path = tmp_path / "ck.bin"
        save_checkpoint(path, model, step=17, momentum=momentum)
        loaded, step, mom = load_checkpoint(path)
        assert step == 17
        assert loaded.arch == model.arch
        for k in model.params:
            np.testing.assert_array_equal(loaded.params[k], model.params[k])
            np.testing.assert_array_equal(mom[k], momentum[k])

    def test_corrupt_magic_rejected(self, tmp_path):
        model = build_model("tiny-mlp", 3, (4,), 2)
        path = tmp_path / "ck.bin"
        save_checkpoint(path, model)
        raw = bytearray(path.read_bytes())
        raw[0] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(ModelError):
            load_checkpoint(path)
