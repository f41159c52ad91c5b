"""Layer-wise conversion: batching, featuremap extraction, adaptation."""

import numpy as np
import pytest

from bwnet import data, net, pipeline
from bwnet.manifest import LayerSpec


class TestSampleBatch:
    def test_full_size_is_seeded_shuffle(self):
        ds = data.synthetic_digits(40, seed=0)
        batch = pipeline.sample_batch(ds, 40, seed=5)
        perm = np.random.default_rng(5).permutation(40)
        np.testing.assert_array_equal(batch, ds.images[perm])

    def test_same_seed_identical(self):
        ds = data.synthetic_digits(100, seed=0)
        a = pipeline.sample_batch(ds, 32, seed=42)
        b = pipeline.sample_batch(ds, 32, seed=42)
        np.testing.assert_array_equal(a, b)

    def test_different_seeds_differ(self):
        ds = data.synthetic_digits(100, seed=0)
        a = pipeline.sample_batch(ds, 100, seed=42)
        b = pipeline.sample_batch(ds, 100, seed=43)
        assert not np.array_equal(a, b)

    def test_empty_dataset_rejected(self):
        ds = data.Dataset(np.zeros((0, 1, 16, 16)), np.zeros(0, dtype=np.int64))
        with pytest.raises(ValueError):
            pipeline.sample_batch(ds, 4, seed=0)


class TestExtractLayerInputs:
    def test_hand_im2col_case(self, tmp_path):
        spec = LayerSpec(kind="Conv", name="c1", in_channels=1, out_channels=1,
                         kernel=(2, 2), stride=1, pad=0, weight_ref="c1.w.bwt")
        network = net.Network.from_specs([spec], (1, 3, 3), name="one")
        network.layers[0].weight = np.ones((1, 1, 2, 2))
        manifest = network.to_manifest(tmp_path)
        batch = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
        x = pipeline.extract_layer_inputs(manifest, batch, 0)
        assert x.shape == (4, 4)
        np.testing.assert_array_equal(x[:, 0], [1, 2, 4, 5])
        np.testing.assert_array_equal(x[:, 3], [5, 6, 8, 9])

    def test_first_layer_identical_for_both_paths(self, vgg_net, vgg_run, ds_held):
        batch = ds_held.images[:8]
        first = vgg_net.weight_layers()[0][0]
        a = pipeline._layer_input_matrix(vgg_net, batch, first)
        b = pipeline._layer_input_matrix(vgg_run.target_net, batch, first)
        np.testing.assert_array_equal(a, b)

    def test_binarized_prefix_changes_values_not_shape(self, vgg_net, vgg_run, ds_held):
        batch = ds_held.images[:8]
        second = vgg_net.weight_layers()[1][0]
        a = pipeline._layer_input_matrix(vgg_net, batch, second)
        b = pipeline._layer_input_matrix(vgg_run.target_net, batch, second)
        assert a.shape == b.shape
        assert not np.array_equal(a, b)

    def test_non_weight_layer_rejected(self, vgg_net, ds_held):
        with pytest.raises(ValueError, match="not a weight layer"):
            pipeline._layer_input_matrix(vgg_net, ds_held.images[:2], 1)

    def test_fc_layer_inputs_are_flattened_features(self, vgg_net, ds_held):
        batch = ds_held.images[:8]
        fc_index, fc = vgg_net.weight_layers()[-1]
        x = pipeline._layer_input_matrix(vgg_net, batch, fc_index)
        assert x.shape == (fc.spec.in_features, 8)
        features, _ = vgg_net.forward(batch, upto=fc_index)
        np.testing.assert_array_equal(x, features[-1].reshape(8, -1).T)


class TestTargetSimilarity:
    def test_identity_is_weights(self):
        w = np.random.default_rng(0).normal(size=(5, 3))
        np.testing.assert_array_equal(pipeline.compute_target_similarity(np.eye(5), w), w)

    def test_zero_weights(self):
        x = np.random.default_rng(1).normal(size=(4, 6))
        np.testing.assert_array_equal(
            pipeline.compute_target_similarity(x, np.zeros((4, 2))), np.zeros((6, 2)))

    def test_matches_independent_multiply(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(4, 3))
        w = rng.normal(size=(4, 2))
        got = pipeline.compute_target_similarity(x, w)
        want = np.empty((3, 2))
        for i in range(3):
            for j in range(2):
                want[i, j] = sum(x[k, i] * w[k, j] for k in range(4))
        np.testing.assert_allclose(got, want, atol=1e-10)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            pipeline.compute_target_similarity(np.ones((3, 2)), np.ones((4, 2)))


class TestSolveLayerAdaptive:
    def test_first_layer_reduces_to_plain_solve(self, toy2_net, ds_held):
        adaptive = pipeline.binarize_network(
            toy2_net, ds_held, pipeline.PipelineConfig(seed=1, adaptive=True))
        plain = pipeline.binarize_network(
            toy2_net, ds_held, pipeline.PipelineConfig(seed=1, adaptive=False))
        first = toy2_net.weight_layers()[0][0]
        a = adaptive.target_net.layers[first]
        b = plain.target_net.layers[first]
        np.testing.assert_array_equal(a.codes, b.codes)
        np.testing.assert_array_equal(a.scales, b.scales)

    def test_marks_layer_binarized(self, toy2_net, ds_held):
        run = pipeline.BinarizeRun(None, None, toy2_net, toy2_net.clone())
        cfg = pipeline.PipelineConfig(seed=0)
        first = toy2_net.weight_layers()[0][0]
        pipeline.solve_layer_adaptive(run, first, cfg, ds_held)
        assert run.target_net.layers[first].spec.binarized
        assert not toy2_net.layers[first].spec.binarized  # source untouched
        assert run.layer_reports[0].index == first

    def test_final_beats_initialized_only(self, toy2_net, ds_held):
        run = pipeline.binarize_network(toy2_net, ds_held, pipeline.PipelineConfig(seed=3))
        for report in run.layer_reports:
            assert report.objective_final <= report.objective_initial


class TestBinarizeModel:
    def test_vgg_all_layers_monotone_reports(self, vgg_run):
        assert len(vgg_run.layer_reports) == 7  # 6 conv + 1 fc
        for report in vgg_run.layer_reports:
            assert report.objective_final <= report.objective_initial
        assert vgg_run.target_net.fully_binarized()

    def test_skip_first_last(self, toy2_net, ds_held):
        run = pipeline.binarize_network(toy2_net, ds_held, pipeline.PipelineConfig(
            seed=0, skip_first=True, skip_last=True))
        for _, layer in run.target_net.weight_layers():
            assert not layer.binarized
            assert not layer.spec.binarized
            assert layer.spec.binary_ref is None

    def test_explicit_layer_subset(self, toy2_net, ds_held):
        indices = [i for i, _ in toy2_net.weight_layers()]
        run = pipeline.binarize_network(toy2_net, ds_held, pipeline.PipelineConfig(
            seed=0, layers=indices[:1]))
        assert run.target_net.layers[indices[0]].binarized
        assert not run.target_net.layers[indices[1]].binarized

    def test_col_cap_subsamples(self, toy2_net, ds_held):
        run = pipeline.binarize_network(toy2_net, ds_held, pipeline.PipelineConfig(
            seed=0, col_cap=64))
        for report in run.layer_reports:
            assert report.m_cols <= 64

    def test_determinism(self, toy2_net, ds_held):
        cfg = pipeline.PipelineConfig(seed=9)
        a = pipeline.binarize_network(toy2_net, ds_held, cfg)
        b = pipeline.binarize_network(toy2_net, ds_held, cfg)
        for (_, la), (_, lb) in zip(a.target_net.weight_layers(),
                                    b.target_net.weight_layers()):
            np.testing.assert_array_equal(la.codes, lb.codes)
            np.testing.assert_array_equal(la.scales, lb.scales)

    def test_failure_preserves_partial_reports(self, toy2_net, ds_held):
        broken = toy2_net.clone()
        second = broken.weight_layers()[1][0]
        broken.layers[second].weight[:] = np.nan
        with pytest.raises(pipeline.BinarizeError) as err:
            pipeline.binarize_network(broken, ds_held, pipeline.PipelineConfig(seed=0))
        assert err.value.layer_index == second
        assert len(err.value.run.layer_reports) == 1

    def test_manifest_level_entry_point(self, saved_toy2, ds_held, tmp_path):
        manifest, _ = saved_toy2
        run = pipeline.binarize_model(manifest, ds_held,
                                      pipeline.PipelineConfig(seed=0),
                                      out_dir=tmp_path)
        assert run.target_manifest is not None
        assert (tmp_path / "toy2.manifest").is_file()
        reloaded = net.Network.from_manifest(run.target_manifest)
        assert reloaded.fully_binarized()

    def test_target_from_binarized_switch(self, toy2_net, ds_held):
        a = pipeline.binarize_network(toy2_net, ds_held, pipeline.PipelineConfig(
            seed=4, target_from=pipeline.TARGET_FULL_PRECISION))
        b = pipeline.binarize_network(toy2_net, ds_held, pipeline.PipelineConfig(
            seed=4, target_from=pipeline.TARGET_BINARIZED))
        last = toy2_net.weight_layers()[-1][0]
        assert not np.array_equal(a.target_net.layers[last].scales,
                                  b.target_net.layers[last].scales)

    def test_report_file(self, vgg_run, tmp_path):
        import json
        path = tmp_path / "run.report.json"
        pipeline.write_run_report(vgg_run, path)
        doc = json.loads(path.read_text())
        assert len(doc["layers"]) == 7
        assert {"objective_initial", "objective_final", "flagged_columns"} <= set(
            doc["layers"][0])
