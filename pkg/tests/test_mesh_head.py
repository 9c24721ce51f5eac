"""Mesh head classifier, the model composite and whole-image inference."""
import numpy as np
import pytest
from pydantic import ValidationError

from deep_fext.autograd.tensor import Tensor
from deep_fext.models.exceptions import ErrorTypes, FextError
from deep_fext.models.network import ConvLayerSpec, MeshHeadSpec, network_preset
from deep_fext.models.training import Task
from deep_fext.services.fext_service import build_fext_network
from deep_fext.services.mesh_head_service import build_mesh_head, classify_features, head_forward
from deep_fext.services.model_service import DeepFextModel, build_model, predict_probabilities, task_probability


class TestMeshHeadSpec:
    def test_default_layers_are_eight_eight_k(self):
        spec = MeshHeadSpec(num_classes=3)
        assert [layer.out_channels for layer in spec.conv_layers] == [8, 8, 3]
        assert spec.mesh_size == 100

    def test_last_layer_must_match_classes(self):
        with pytest.raises(ValidationError):
            MeshHeadSpec(num_classes=2, conv_layers=[ConvLayerSpec(out_channels=8)] * 2 + [ConvLayerSpec(out_channels=3)])

    def test_exactly_three_layers(self):
        with pytest.raises(ValidationError):
            MeshHeadSpec(num_classes=2, conv_layers=[ConvLayerSpec(out_channels=2)])


class TestMeshHead:
    def test_logits_shape(self, rng):
        head = build_mesh_head(MeshHeadSpec(num_classes=2), rng)
        logits = head_forward(Tensor(rng.normal(size=(7, 1, 10, 10))), head)
        assert logits.shape == (7, 2)

    def test_wrong_mesh_is_a_shape_error(self, rng):
        head = build_mesh_head(MeshHeadSpec(num_classes=2), rng)
        with pytest.raises(FextError) as err:
            head_forward(Tensor(np.zeros((4, 1, 5, 20))), head)
        assert err.value.error_type is ErrorTypes.SHAPE

    def test_pixels_are_classified_independently(self, rng):
        head = build_mesh_head(MeshHeadSpec(mesh_h=4, mesh_w=4, num_classes=3), rng)
        features = rng.normal(size=(1, 16, 5, 6)).astype(np.float32)
        before = classify_features(Tensor(features), head).data
        features[0, :, 2, 3] += 5.0
        after = classify_features(Tensor(features), head).data
        changed = np.any(before != after, axis=1)[0]
        assert changed[2, 3]
        changed[2, 3] = False
        assert not changed.any()


class TestModel:
    def test_feature_and_mesh_sizes_must_agree(self, rng):
        network = build_fext_network(network_preset("fext2-16"), rng)
        head = build_mesh_head(MeshHeadSpec(mesh_h=3, mesh_w=3), rng)
        with pytest.raises(FextError) as err:
            DeepFextModel(network, head, Task.VESSEL)
        assert err.value.error_type is ErrorTypes.CONFIGURATION

    def test_class_count_must_match_task(self, rng):
        network = build_fext_network(network_preset("fext2-16"), rng)
        head = build_mesh_head(MeshHeadSpec(mesh_h=4, mesh_w=4, num_classes=2), rng)
        with pytest.raises(FextError) as err:
            DeepFextModel(network, head, Task.BOTH)
        assert err.value.error_type is ErrorTypes.CONFIGURATION

    def test_parameters_are_named_in_declaration_order(self, model_factory):
        names = [name for name, _ in model_factory().named_parameters()]
        assert names[0] == "fext.layers.0.branches.0.stages.0.weight"
        assert names[-1] == "head.convs.2.bias"
        assert len(names) == len(set(names))

    def test_probabilities_sum_to_one(self, model_factory, rng):
        probs = predict_probabilities(model_factory(Task.BOTH), rng.uniform(size=(3, 9, 11)))
        assert probs.shape == (3, 9, 11)
        np.testing.assert_allclose(probs.sum(axis=0), 1.0, atol=1e-5)

    def test_tiled_inference_matches_a_single_pass(self, rng):
        spec = network_preset("fext2-16")
        model = build_model(spec, MeshHeadSpec(mesh_h=4, mesh_w=4), Task.VESSEL, seed=5)
        image = rng.uniform(size=(3, 37, 29)).astype(np.float32)
        whole = predict_probabilities(model, image, tile=64)
        tiled = predict_probabilities(model, image, tile=8)
        np.testing.assert_allclose(tiled, whole, atol=1e-5)

    @pytest.mark.parametrize("dy,dx", [(3, 5), (0, 1), (7, 0)])
    def test_shifted_image_shifts_the_probability_map(self, rng, dy, dx):
        model = build_model(network_preset("fext2-16"), MeshHeadSpec(mesh_h=4, mesh_w=4), Task.BOTH, seed=2)
        radius, size = model.network.receptive_radius, 32
        scene = rng.uniform(size=(3, size + dy, size + dx)).astype(np.float32)
        first = predict_probabilities(model, scene[:, :size, :size])
        shifted = predict_probabilities(model, scene[:, dy:dy + size, dx:dx + size])
        np.testing.assert_allclose(
            shifted[:, radius:size - radius - dy, radius:size - radius - dx],
            first[:, radius + dy:size - radius, radius + dx:size - radius],
            atol=1e-4
        )

    def test_image_smaller_than_largest_scale_is_a_data_error(self, model_factory):
        with pytest.raises(FextError) as err:
            predict_probabilities(model_factory(), np.zeros((3, 4, 40), dtype=np.float32))
        assert err.value.error_type is ErrorTypes.DATA
        assert "5x5" in err.value.message

    def test_same_seed_same_model(self, model_factory):
        first, second = model_factory(seed=9), model_factory(seed=9)
        for (_, a), (_, b) in zip(first.named_parameters(), second.named_parameters()):
            np.testing.assert_array_equal(a.data, b.data)


class TestTaskProbability:
    def test_multiclass_vessel_tree_includes_centerline(self):
        probs = np.stack([np.full((2, 2), 0.5), np.full((2, 2), 0.2), np.full((2, 2), 0.3)])
        np.testing.assert_allclose(task_probability(probs, Task.BOTH, "vessel"), 0.5)
        np.testing.assert_allclose(task_probability(probs, Task.BOTH, "centerline"), 0.3)

    def test_binary_model_only_offers_its_own_target(self):
        probs = np.stack([np.full((2, 2), 0.4), np.full((2, 2), 0.6)])
        np.testing.assert_allclose(task_probability(probs, Task.VESSEL, "vessel"), 0.6)
        assert task_probability(probs, Task.VESSEL, "centerline") is None
