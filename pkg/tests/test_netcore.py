"""Network construction, BN snapshots, and batch statistic observation."""

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from scdd.errors import ConfigurationError, PreconditionError, ShapeError
from scdd.netcore import (
    NetworkSpec,
    build_network,
    extract_bn_statistics,
    forward_with_batch_stats,
    load_checkpoint,
    model_fingerprint,
    save_checkpoint,
)


class TestBuildNetwork:
    def test_same_seed_bitwise_identical(self):
        spec = NetworkSpec("tiny_resnet", depth=8, num_classes=10)
        a = build_network(spec, seed=0)
        b = build_network(spec, seed=0)
        assert model_fingerprint(a) == model_fingerprint(b)

    def test_single_bn_layer_is_rejected(self):
        spec = NetworkSpec("tiny_convnet", depth=1, num_classes=4)
        with pytest.raises(ConfigurationError):
            build_network(spec, seed=0)

    def test_different_seeds_differ(self):
        spec = NetworkSpec("tiny_resnet", depth=8, num_classes=10)
        a = build_network(spec, seed=0)
        b = build_network(spec, seed=1)
        assert model_fingerprint(a) != model_fingerprint(b)

    def test_unknown_architecture(self):
        with pytest.raises(ConfigurationError):
            NetworkSpec("resnet50", depth=8).validate()

    def test_head_init(self):
        model = build_network(NetworkSpec("tiny_convnet", depth=3, num_classes=5), seed=0)
        assert torch.all(model.head.bias.detach() == 0)
        assert float(model.head.weight.detach().abs().max()) < 0.1

    def test_too_few_classes(self):
        with pytest.raises(ConfigurationError):
            NetworkSpec("tiny_resnet", num_classes=1).validate()


class TestExtractBNStatistics:
    def test_fresh_network_defaults(self):
        model = build_network(NetworkSpec("tiny_resnet", depth=8), seed=0)
        snap = extract_bn_statistics(model)
        for layer in snap.layers:
            assert np.all(layer.mean == 0.0)
            assert np.all(layer.variance == 1.0)

    def test_copy_semantics(self, tiny_spec, tiny_train):
        model = build_network(tiny_spec, seed=3)
        before = extract_bn_statistics(model)
        saved = [layer.mean.copy() for layer in before.layers]
        # one training step mutates running stats
        model.train()
        x = tiny_train.to_tensor(range(8))
        y = tiny_train.label_tensor(range(8))
        loss = F.cross_entropy(model(x), y)
        loss.backward()
        after = extract_bn_statistics(model)
        assert any(not np.array_equal(a.mean, b.mean)
                   for a, b in zip(before.layers, after.layers))
        for layer, orig in zip(before.layers, saved):
            assert np.array_equal(layer.mean, orig)

    def test_layer_count_matches_bn_count(self):
        model = build_network(NetworkSpec("tiny_convnet", depth=5, num_classes=4), seed=0)
        snap = extract_bn_statistics(model)
        assert len(snap) == 5 == len(model.bn_layers())

    def test_idempotent_between_steps(self, micro_model):
        a = extract_bn_statistics(micro_model)
        b = extract_bn_statistics(micro_model)
        for la, lb in zip(a.layers, b.layers):
            assert np.array_equal(la.mean, lb.mean)
            assert np.array_equal(la.variance, lb.variance)

    def test_snapshot_is_readonly(self, micro_model):
        snap = extract_bn_statistics(micro_model)
        with pytest.raises(ValueError):
            snap.layers[0].mean[0] = 1.0


class TestForwardWithBatchStats:
    def test_identical_images_add_no_batch_spread(self, micro_model, tiny_train):
        """Replicating one image leaves channel statistics exactly unchanged.

        BN statistics pool batch and spatial dims, so a batch of identical
        images keeps each image's spatial variance; the across-batch spread
        contributes exactly zero, which shows as replication invariance.
        """
        one = tiny_train.to_tensor([0])
        _, rec2 = forward_with_batch_stats(micro_model, one.repeat(2, 1, 1, 1))
        _, rec8 = forward_with_batch_stats(micro_model, one.repeat(8, 1, 1, 1))
        for a, b in zip(rec2.layers, rec8.layers):
            assert torch.allclose(a.mean, b.mean, atol=1e-6)
            assert torch.allclose(a.variance, b.variance, atol=1e-6)

    def test_spatially_constant_batch_zero_first_variance(self):
        """With padding removed, constant inputs give zero spread at the stem BN."""
        spec = NetworkSpec("tiny_convnet", depth=2, num_classes=2, input_shape=(3, 8, 8))
        model = build_network(spec, seed=0)
        conv1 = model.backbone[0]
        conv1.padding = (0, 0)  # zero-padding would break spatial constancy
        batch = torch.full((4, 3, 8, 8), 0.37)
        _, rec = forward_with_batch_stats(model, batch)
        assert float(rec.layers[0].variance.detach().abs().max()) < 1e-10

    def test_batch_of_one_rejected(self, micro_model, tiny_train):
        with pytest.raises(PreconditionError):
            forward_with_batch_stats(micro_model, tiny_train.to_tensor([0]))

    def test_shape_mismatch_rejected(self, micro_model):
        with pytest.raises(ShapeError):
            forward_with_batch_stats(micro_model, torch.randn(4, 3, 8, 8))

    def test_logits_shape(self, micro_model, tiny_train):
        logits, _ = forward_with_batch_stats(micro_model, tiny_train.to_tensor(range(6)))
        assert logits.shape == (6, micro_model.spec.num_classes)

    def test_matches_external_reduction(self, tiny_spec, tiny_train):
        """Oracle: capture raw pre-BN activations separately, reduce in float64."""
        model = build_network(tiny_spec, seed=11)
        batch = tiny_train.to_tensor(range(8))

        captured = {}
        hooks = []
        for k, bn in enumerate(model.bn_layers()):
            def make(k):
                return lambda m, i, o: captured.__setitem__(k, i[0].detach().double())
            hooks.append(bn.register_forward_hook(make(k)))
        model.eval()
        with torch.no_grad():
            model(batch)
        for h in hooks:
            h.remove()

        _, rec = forward_with_batch_stats(model, batch)
        assert len(captured) == len(rec.layers)
        for layer in rec.layers:
            raw = captured[layer.layer_index]
            mean = raw.mean(dim=(0, 2, 3))
            var = ((raw - mean.view(1, -1, 1, 1)) ** 2).mean(dim=(0, 2, 3))
            np.testing.assert_allclose(layer.mean.detach().numpy(), mean.numpy(),
                                       atol=1e-6)
            np.testing.assert_allclose(layer.variance.detach().numpy(), var.numpy(),
                                       atol=1e-6)

    def test_hand_computed_stats(self):
        """First conv copies channel 0, so constant inputs 1 and 3 give mu=2, var=1."""
        spec = NetworkSpec("tiny_convnet", depth=2, num_classes=2, input_shape=(3, 8, 8))
        model = build_network(spec, seed=0)
        conv1 = model.backbone[0]
        with torch.no_grad():
            conv1.weight.zero_()
            conv1.weight[0, 0, 1, 1] = 1.0  # identity tap on channel 0
        batch = torch.stack([torch.full((3, 8, 8), 1.0), torch.full((3, 8, 8), 3.0)])
        _, rec = forward_with_batch_stats(model, batch)
        first = rec.layers[0]
        assert float(first.mean[0]) == pytest.approx(2.0, abs=1e-6)
        assert float(first.variance[0]) == pytest.approx(1.0, abs=1e-6)

    def test_does_not_mutate_running_stats(self, micro_model, tiny_train):
        before = extract_bn_statistics(micro_model)
        forward_with_batch_stats(micro_model, tiny_train.to_tensor(range(8)))
        after = extract_bn_statistics(micro_model)
        for la, lb in zip(before.layers, after.layers):
            assert np.array_equal(la.mean, lb.mean)


class TestCheckpoint:
    def test_roundtrip(self, micro_teacher, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(micro_teacher, path)
        loaded = load_checkpoint(path)
        assert model_fingerprint(loaded) == model_fingerprint(micro_teacher)
        assert loaded.provenance == micro_teacher.provenance
        assert loaded.spec == micro_teacher.spec

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "other.pt"
        torch.save({"format": "something-else"}, path)
        with pytest.raises(ConfigurationError):
            load_checkpoint(path)

    def test_running_stat_drift_is_bounded_after_training(self, micro_model):
        """Convergence is reported, not asserted: drift must at least be finite."""
        snap = extract_bn_statistics(micro_model)
        spread = max(float(np.abs(l.mean).max()) for l in snap.layers)
        assert np.isfinite(spread)
