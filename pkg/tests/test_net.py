"""Net engine: forward semantics, gradients, training, fine-tuning."""

import numpy as np
import pytest

from bwnet import data, net, pipeline
from bwnet.manifest import LayerSpec


def _conv(in_c, out_c, k, stride=1, pad=0, name="c"):
    spec = LayerSpec(kind="Conv", name=name, in_channels=in_c, out_channels=out_c,
                     kernel=(k, k), stride=stride, pad=pad, weight_ref=f"{name}.w.bwt")
    return net.ConvLayer(spec)


class TestIm2col:
    def test_hand_enumerated_3x3_input_2x2_kernel(self):
        x = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
        cols = net.im2col(x, 2, 2, stride=1, pad=0)
        assert cols.shape == (4, 4)
        expected = np.array([
            [1, 2, 4, 5],
            [2, 3, 5, 6],
            [4, 5, 7, 8],
            [5, 6, 8, 9],
        ], dtype=float).T
        np.testing.assert_array_equal(cols, expected)

    def test_col2im_is_adjoint(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 3, 6, 6))
        cols = net.im2col(x, 3, 3, stride=1, pad=1)
        u = rng.normal(size=cols.shape)
        v = rng.normal(size=x.shape)
        lhs = float((net.im2col(v, 3, 3, 1, 1) * u).sum())
        rhs = float((net.col2im(u, x.shape, 3, 3, 1, 1) * v).sum())
        assert lhs == pytest.approx(rhs, rel=1e-10)


class TestForward:
    def test_zero_input_through_conv_relu_is_zero(self):
        conv = _conv(1, 2, 3, pad=1)
        conv.weight = np.random.default_rng(0).normal(size=conv.weight.shape)
        relu = net.ReLULayer(LayerSpec(kind="ReLU"))
        out = relu.forward(conv.forward(np.zeros((2, 1, 5, 5)), binary=False))
        np.testing.assert_array_equal(out, 0.0)

    def test_one_by_one_conv_weight_2_input_3(self):
        conv = _conv(1, 1, 1)
        conv.weight[:] = 2.0
        out = conv.forward(np.full((1, 1, 1, 1), 3.0), binary=False)
        assert out.reshape(()) == pytest.approx(6.0)

    def test_binary_mode_on_unbinarized_layer_raises(self):
        network = net.Network.random_init("(1x4C3)-MP2-10FC-Softmax", (1, 8, 8), seed=0)
        x = np.zeros((1, 1, 8, 8))
        with pytest.raises(net.ModeError):
            network.forward(x, mode=net.BINARY)
        network.forward(x, mode=net.MIXED)  # dispatches float, fine

    def test_unknown_mode_rejected(self):
        network = net.Network.random_init("10FC-Softmax", (1, 4, 4), seed=0)
        with pytest.raises(ValueError):
            network.forward(np.zeros((1, 1, 4, 4)), mode="turbo")

    def test_dual_path_equivalence_random_mini_net(self, ds_held):
        network = net.Network.random_init("(1x4C3)-MP2-(1x8C3)-MP2-10FC-Softmax",
                                          (1, 16, 16), seed=5)
        run = pipeline.binarize_network(network, ds_held, pipeline.PipelineConfig(
            seed=0, batch_size=64))
        dense = net.dense_from_binary(run.target_net)
        x = ds_held.images[:32]
        _, binary_logits = run.target_net.forward(x, mode=net.BINARY)
        _, dense_logits = dense.forward(x, mode=net.FLOAT)
        assert np.abs(binary_logits - dense_logits).max() < 1e-5

    def test_im2col_consistency_with_layer_extraction(self, vgg_net, ds_held):
        batch = ds_held.images[:16]
        for idx, layer in vgg_net.weight_layers():
            x = pipeline._layer_input_matrix(vgg_net, batch, idx, mode=net.FLOAT)
            w = layer.weight.reshape(layer.weight.shape[0], -1).T
            pre = (x.T @ w).T  # (n_out, m)
            features, _ = vgg_net.forward(batch, mode=net.FLOAT, upto=idx + 1)
            got = features[-1]
            if got.ndim == 4:
                got = got.transpose(1, 0, 2, 3).reshape(got.shape[1], -1)
            else:
                got = got.T
            assert np.abs(pre - got).max() < 1e-5


class TestGradChecks:
    @pytest.mark.parametrize("kind", ["Conv", "FullyConnected", "BatchNorm",
                                      "ReLU", "MaxPool", "Softmax"])
    def test_all_layers_pass(self, kind):
        assert net.grad_check(kind, eps=1e-3, seed=3) < 1e-4

    def test_linear_layer_is_machine_precision(self):
        assert net.grad_check("FullyConnected", eps=1e-3, seed=1) < 1e-9

    def test_relu_away_from_kink_exact(self):
        assert net.grad_check("ReLU", eps=1e-3, seed=2) < 1e-10


class TestEvaluate:
    def test_uniform_logits_hit_chance_level(self):
        network = net.Network.random_init("10FC-Softmax", (1, 16, 16), seed=0)
        fc = network.layers[0]
        fc.weight[:] = 0.0
        ds = data.synthetic_digits(500, seed=1)
        top1 = net.evaluate(network, ds)["top1"]
        assert abs(top1 - 0.1) <= 0.05

    def test_single_sample_memorization(self):
        ds = data.synthetic_digits(1, seed=3)
        network = net.Network.random_init("(1x4C3)-MP2-10FC-Softmax", (1, 16, 16), seed=0)
        cfg = net.TrainConfig(lr=0.05, max_iters=500, batch_size=1, weight_decay=0.0,
                              lr_decay_steps=(), seed=0)
        history = net.train_baseline(network, ds, cfg)
        assert history[-1] < 0.01
        assert net.evaluate(network, ds)["top1"] == 1.0

    def test_empty_dataset_rejected(self):
        network = net.Network.random_init("10FC-Softmax", (1, 4, 4), seed=0)
        with pytest.raises(ValueError):
            net.evaluate(network, data.Dataset(np.zeros((0, 1, 4, 4)),
                                               np.zeros(0, dtype=np.int64)))


class TestTrainBaseline:
    def test_zero_lr_leaves_weights_unchanged(self, ds_held):
        network = net.Network.random_init("(1x4C3)-MP2-10FC-Softmax", (1, 16, 16), seed=0)
        before = [l.weight.copy() for _, l in network.weight_layers()]
        net.train_baseline(network, ds_held, net.TrainConfig(
            lr=0.0, max_iters=5, weight_decay=0.0, seed=0))
        for (_, layer), w in zip(network.weight_layers(), before):
            np.testing.assert_array_equal(layer.weight, w)

    def test_same_seed_identical_weights(self, ds_held):
        nets = []
        for _ in range(2):
            n = net.Network.random_init("(1x4C3)-MP2-10FC-Softmax", (1, 16, 16), seed=4)
            net.train_baseline(n, ds_held, net.TrainConfig(max_iters=40, seed=11))
            nets.append(n)
        for (_, a), (_, b) in zip(nets[0].weight_layers(), nets[1].weight_layers()):
            np.testing.assert_array_equal(a.weight, b.weight)

    def test_divergence_aborts(self, ds_held):
        network = net.Network.random_init("(1x4C3)-MP2-10FC-Softmax", (1, 16, 16), seed=0)
        with pytest.raises(net.DivergenceError):
            net.train_baseline(network, ds_held, net.TrainConfig(
                lr=1e9, max_iters=50, seed=0))

    def test_loss_decreases_on_training_set(self, vgg_net, ds_train):
        # the session fixture was trained with this config; check its endpoint
        metrics = net.evaluate(vgg_net, ds_train)
        assert metrics["loss"] < 0.1
        assert metrics["top1"] > 0.95


class TestFinetune:
    def test_requires_fully_binarized(self, vgg_net, ds_held):
        with pytest.raises(net.ModeError):
            net.finetune(vgg_net.clone(), ds_held, net.TrainConfig(max_iters=1))

    def test_zero_lr_changes_nothing(self, vgg_run, ds_held):
        model = vgg_run.target_net.clone()
        codes = [l.codes.copy() for _, l in model.weight_layers()]
        scales = [l.scales.copy() for _, l in model.weight_layers()]
        net.finetune(model, ds_held, net.TrainConfig(
            lr=0.0, max_iters=3, weight_decay=0.0, lr_decay_steps=(), seed=0))
        for (_, layer), c, a in zip(model.weight_layers(), codes, scales):
            np.testing.assert_array_equal(layer.codes, c)
            np.testing.assert_array_equal(layer.scales, a)

    def test_codes_stay_binary_after_steps(self, vgg_run, ds_held):
        model = vgg_run.target_net.clone()
        net.finetune(model, ds_held, net.TrainConfig(
            lr=0.01, max_iters=25, weight_decay=0.0, lr_decay_steps=(), seed=0))
        for _, layer in model.weight_layers():
            assert set(np.unique(layer.codes)) <= {-1, 1}

    def test_fixed_codes_trains_scales_only(self, vgg_run, ds_held):
        model = vgg_run.target_net.clone()
        codes = [l.codes.copy() for _, l in model.weight_layers()]
        scales = [l.scales.copy() for _, l in model.weight_layers()]
        net.finetune(model, ds_held, net.TrainConfig(
            lr=0.01, max_iters=10, weight_decay=0.0, lr_decay_steps=(), seed=0),
            fixed_codes=True)
        changed = False
        for (_, layer), c, a in zip(model.weight_layers(), codes, scales):
            np.testing.assert_array_equal(layer.codes, c)
            changed = changed or not np.array_equal(layer.scales, a)
        assert changed

    def test_improves_on_at_least_one_seed(self, vgg_run, ds_train):
        # measured at fixture creation: strict improvement on all three seeds
        before = net.evaluate(vgg_run.target_net, ds_train, mode=net.BINARY)["top1"]
        improved = 0
        for seed in (0, 1, 2):
            model = vgg_run.target_net.clone()
            net.finetune(model, ds_train, net.TrainConfig(
                lr=0.002, max_iters=200, batch_size=64, weight_decay=0.0,
                lr_decay_steps=(), seed=seed))
            after = net.evaluate(model, ds_train, mode=net.BINARY)["top1"]
            improved += after > before
        assert improved >= 1


class TestStructuralRewrites:
    def test_scale_merge_into_batchnorm(self, vgg_run, ds_held):
        merged = net.merge_scale_into_batchnorm(vgg_run.target_net)
        x = ds_held.images[:32]
        _, a = vgg_run.target_net.forward(x, mode=net.BINARY)
        _, b = merged.forward(x, mode=net.BINARY)
        assert np.abs(a - b).max() < 1e-5
        for i, layer in merged.weight_layers():
            if isinstance(merged.layers[i + 1] if i + 1 < len(merged.layers) else None,
                          net.BatchNormLayer):
                np.testing.assert_array_equal(layer.scales, np.ones_like(layer.scales))

    def test_manifest_roundtrip_preserves_binary_model(self, vgg_run, ds_held, tmp_path):
        manifest = vgg_run.target_net.to_manifest(tmp_path)
        from bwnet.manifest import read_manifest
        back = net.Network.from_manifest(read_manifest(tmp_path / "vgg_mini.manifest"))
        x = ds_held.images[:16]
        _, a = vgg_run.target_net.forward(x, mode=net.BINARY)
        _, b = back.forward(x, mode=net.BINARY)
        assert np.abs(a - b).max() < 1e-3  # float32 storage rounding
        for spec in manifest.layers:
            if spec.is_weight_layer:
                assert spec.binarized
