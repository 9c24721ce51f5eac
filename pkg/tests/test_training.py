"""Label encoding, patch sampling, optimizer updates and the training loop."""
import numpy as np
import pytest
from scipy import ndimage

from deep_fext.autograd.tensor import Tensor
from deep_fext.models.dataset import LabeledImage
from deep_fext.models.exceptions import ErrorTypes, FextError
from deep_fext.models.network import MeshHeadSpec, network_preset
from deep_fext.models.training import OptimizerKind, Task, TrainConfig, TrainState
from deep_fext.repositories.checkpoint_repository import load_checkpoint
from deep_fext.services.metrics_service import dice
from deep_fext.services.model_service import build_model, predict_probabilities, task_probability
from deep_fext.services.training_service import (
    FINAL_CHECKPOINT,
    TRAIN_LOG,
    Trainer,
    TrainingSet,
    apply_optimizer_step,
    checkpoint_name,
    class_counts,
    encode_labels,
    sample_patches,
    train,
)
from deep_fext.utils.skeleton import skeletonize

from tests.conftest import draw_vessels


def labeled(seed: int = 0, size: int = 32, fov: np.ndarray = None) -> LabeledImage:
    image, mask = draw_vessels(size, seed=seed)
    return LabeledImage(id=f"{seed:02d}", image=image, vessel_mask=mask,
                        centerline_mask=skeletonize(mask), fov_mask=fov)


@pytest.fixture
def images():
    return [labeled(seed) for seed in range(3)]


@pytest.fixture
def small_config(nine_feature_spec):
    def build(**overrides) -> TrainConfig:
        values = dict(
            network_preset=None,
            network=nine_feature_spec,
            head=MeshHeadSpec(mesh_h=3, mesh_w=3, num_classes=2),
            patch_size=23,
            patches_per_step=1,
            border_margin=2,
            max_steps=3,
            checkpoint_every=2,
            validation_patches=1,
            learning_rate=1e-2
        )
        values.update(overrides)
        return TrainConfig(**values)
    return build


class TestLabels:
    def test_vessel_task_is_binary(self):
        image = labeled()
        np.testing.assert_array_equal(encode_labels(image, Task.VESSEL), image.vessel_mask)

    def test_centerline_wins_in_the_three_class_encoding(self):
        image = labeled()
        labels = encode_labels(image, Task.BOTH)
        assert set(np.unique(labels)) == {0, 1, 2}
        np.testing.assert_array_equal(labels == 2, image.centerline_mask.astype(bool))
        np.testing.assert_array_equal(labels > 0, image.vessel_mask.astype(bool))

    def test_missing_centerline_is_derived(self):
        image, mask = draw_vessels(32)
        bare = LabeledImage(id="x", image=image, vessel_mask=mask)
        np.testing.assert_array_equal(encode_labels(bare, Task.CENTERLINE), skeletonize(mask))


class TestSampling:
    def test_inverse_frequency_weights_balance_classes(self, images):
        dataset = TrainingSet(images, Task.BOTH)
        counts = class_counts(dataset.images, dataset.labels, 3)
        contributions = np.asarray(dataset.class_weights) * counts
        assert contributions / contributions[0] == pytest.approx([1.0, 1.0, 1.0])

    def test_sampled_classes_are_balanced(self, small_config):
        cfg = small_config(patch_size=32, border_margin=0, augment=True)
        batch = sample_patches(TrainingSet([labeled(5)], Task.VESSEL), cfg, np.random.default_rng(0), count=6)
        vessel = batch.weights[batch.labels == 1].sum()
        background = batch.weights[batch.labels == 0].sum()
        assert 0.9 <= vessel / background <= 1.1

    def test_pixels_outside_the_fov_carry_no_weight(self, small_config):
        fov = np.ones((32, 32), dtype=np.uint8)
        fov[:, :16] = 0
        cfg = small_config(patch_size=32, border_margin=0)
        batch = sample_patches(TrainingSet([labeled(fov=fov)], Task.VESSEL), cfg, np.random.default_rng(1), count=4)
        assert not batch.weights[..., :16].any()
        assert batch.weights[..., 16:].all()

    def test_border_margin_is_zeroed(self, images, small_config):
        batch = sample_patches(TrainingSet(images, Task.VESSEL), small_config(border_margin=5),
                               np.random.default_rng(2), count=2)
        assert not batch.weights[:, :5].any() and not batch.weights[:, :, -5:].any()

    def test_same_seed_same_patches(self, images, small_config):
        dataset, cfg = TrainingSet(images, Task.VESSEL), small_config(augment=True)
        first = sample_patches(dataset, cfg, np.random.default_rng(7), count=5)
        second = sample_patches(dataset, cfg, np.random.default_rng(7), count=5)
        np.testing.assert_array_equal(first.images, second.images)
        np.testing.assert_array_equal(first.weights, second.weights)

    def test_batch_pixels_limits_weighted_pixels(self, images, small_config):
        cfg = small_config(batch_pixels=50)
        batch = sample_patches(TrainingSet(images, Task.VESSEL), cfg, np.random.default_rng(3), count=2)
        assert np.count_nonzero(batch.weights) == 50

    def test_oversized_patch_is_a_configuration_error(self, images, small_config):
        with pytest.raises(FextError) as err:
            sample_patches(TrainingSet(images, Task.VESSEL), small_config(patch_size=40), np.random.default_rng(0))
        assert err.value.error_type is ErrorTypes.CONFIGURATION

    def test_empty_training_set_is_a_data_error(self):
        with pytest.raises(FextError) as err:
            TrainingSet([], Task.VESSEL)
        assert err.value.error_type is ErrorTypes.DATA


def single_parameter(value: float, grad: float):
    tensor = Tensor(np.array([value], dtype=np.float32), requires_grad=True, name="w")
    tensor.grad = np.array([grad], dtype=np.float32)
    return [("w", tensor)], tensor


class TestOptimizer:
    def test_sgd_step(self, small_config):
        params, tensor = single_parameter(0.0, 2.0)
        cfg = small_config(optimizer=OptimizerKind.SGD_MOMENTUM, learning_rate=1.0, momentum=0.0)
        state = apply_optimizer_step(params, TrainState(), cfg)
        assert tensor.data[0] == -2.0
        assert state.step == 1

    def test_sgd_momentum_accumulates(self, small_config):
        params, tensor = single_parameter(0.0, 1.0)
        cfg = small_config(optimizer=OptimizerKind.SGD_MOMENTUM, learning_rate=0.5, momentum=0.5)
        state = apply_optimizer_step(params, TrainState(), cfg)
        apply_optimizer_step(params, state, cfg)
        assert tensor.data[0] == pytest.approx(-0.5 - 0.75)

    @pytest.mark.parametrize("kind", list(OptimizerKind))
    def test_zero_gradient_is_a_no_op(self, kind, small_config):
        params, tensor = single_parameter(1.5, 0.0)
        apply_optimizer_step(params, TrainState(), small_config(optimizer=kind))
        assert tensor.data[0] == np.float32(1.5)

    @pytest.mark.parametrize("grad", [1e-4, 0.3, 50.0, -7.0])
    def test_first_adam_step_is_bounded_by_the_learning_rate(self, grad, small_config):
        params, tensor = single_parameter(0.0, grad)
        apply_optimizer_step(params, TrainState(), small_config(learning_rate=0.01))
        assert 0 < abs(tensor.data[0]) <= 0.01 + 1e-7
        assert np.sign(tensor.data[0]) == -np.sign(grad)

    def test_adam_keeps_two_moment_slots(self, small_config):
        params, _ = single_parameter(0.0, 1.0)
        state = apply_optimizer_step(params, TrainState(), small_config())
        assert len(state.moments["w"]) == 2
        assert state.moments["w"][0].dtype == np.float32


def parameters_of(model):
    return {name: tensor.data.copy() for name, tensor in model.named_parameters()}


class TestTrainer:
    def test_zero_learning_rate_leaves_parameters_bit_identical(self, images, small_config, model_factory, tmp_path):
        model = model_factory(seed=4)
        before = parameters_of(model)
        Trainer(model, images, small_config(learning_rate=0.0, max_steps=2), tmp_path).run()
        for name, value in parameters_of(model).items():
            np.testing.assert_array_equal(value, before[name])

    def test_a_step_changes_parameters(self, images, small_config, model_factory, tmp_path):
        model = model_factory(seed=4)
        before = parameters_of(model)
        Trainer(model, images, small_config(), tmp_path).step()
        after = parameters_of(model)
        assert any(not np.array_equal(after[name], before[name]) for name in before)

    def test_log_and_checkpoints(self, images, small_config, model_factory, tmp_path):
        state = train(model_factory(), images, small_config(), tmp_path)
        assert state.step == 3 and state.final
        lines = (tmp_path / TRAIN_LOG).read_text().splitlines()
        assert [int(line.split()[0]) for line in lines] == [1, 2, 3]
        for line in lines:
            step, loss, lr, elapsed = line.split()
            assert float(loss) > 0 and float(lr) == 0.01 and int(elapsed) >= 0
        assert (tmp_path / checkpoint_name(2)).exists()
        _, saved = load_checkpoint(tmp_path / FINAL_CHECKPOINT)
        assert saved.final and saved.step == 3
        assert len(saved.validation_losses) == 2

    def test_runs_are_reproducible(self, images, small_config, model_factory, tmp_path):
        for run in ("a", "b"):
            train(model_factory(seed=1), images, small_config(seed=5), tmp_path / run)
        first = (tmp_path / "a" / FINAL_CHECKPOINT).read_bytes()
        assert first == (tmp_path / "b" / FINAL_CHECKPOINT).read_bytes()

    def test_resume_continues_bit_exactly(self, images, small_config, model_factory, tmp_path):
        cfg = small_config(max_steps=2, checkpoint_every=1)
        train(model_factory(seed=1), images, cfg, tmp_path / "straight")

        model, state = load_checkpoint(tmp_path / "straight" / checkpoint_name(1))
        assert state.step == 1 and state.moments
        train(model, images, cfg, tmp_path / "resumed", resume_state=state)

        straight = (tmp_path / "straight" / FINAL_CHECKPOINT).read_bytes()
        assert (tmp_path / "resumed" / FINAL_CHECKPOINT).read_bytes() == straight

    def test_task_mismatch_is_a_configuration_error(self, images, small_config, model_factory, tmp_path):
        with pytest.raises(FextError) as err:
            Trainer(model_factory(Task.VESSEL), images, small_config(task=Task.CENTERLINE), tmp_path)
        assert err.value.error_type is ErrorTypes.CONFIGURATION

    def test_nan_loss_aborts_with_step_and_learning_rate(self, small_config, model_factory, tmp_path):
        image = labeled()
        image.image[0, 0, 0] = np.nan
        with pytest.raises(FextError) as err:
            Trainer(model_factory(), [image], small_config(), tmp_path).step()
        assert err.value.error_type is ErrorTypes.NUMERIC
        assert "step 1" in err.value.message and "learning_rate" in err.value.message

    def test_sustained_divergence_aborts(self, images, small_config, model_factory, tmp_path):
        cfg = small_config(divergence_patience=1)
        trainer = Trainer(model_factory(), images, cfg, tmp_path, resume_state=TrainState(initial_loss=1e-9))
        with pytest.raises(FextError) as err:
            trainer.step()
        assert err.value.error_type is ErrorTypes.NUMERIC
        assert "diverged" in err.value.message


def overfit(preset: str, task: Task, out_dir, **overrides):
    """Train ``preset`` on one 128x128 scene for up to 2000 steps."""
    image = labeled(0, size=128)
    values = dict(network_preset=preset, task=task, patch_size=64, patches_per_step=2, border_margin=6,
                  max_steps=2000, checkpoint_every=500, validation_patches=4, learning_rate=1e-2)
    values.update(overrides)
    cfg = TrainConfig(**values)
    model = build_model(network_preset(preset), cfg.head_spec(), task, seed=0)
    state = train(model, [image], cfg, out_dir)
    return image, predict_probabilities(model, image.image), state


def window_medians(log_path, window: int = 500) -> np.ndarray:
    """Median training loss of consecutive ``window``-step blocks of train.log."""
    losses = np.array([float(line.split()[1]) for line in log_path.read_text().splitlines()])
    return np.array([np.median(losses[start:start + window]) for start in range(0, len(losses), window)])


@pytest.mark.slow
@pytest.mark.parametrize("preset,overrides", [
    ("fext2-16", {}),
    ("fext5-100", {"border_margin": 11, "learning_rate": 1e-3}),
])
def test_preset_overfits_a_synthetic_scene(tmp_path, preset, overrides):
    image, probs, state = overfit(preset, Task.VESSEL, tmp_path, **overrides)
    predicted = probs[1] >= 0.5
    truth = image.vessel_mask.astype(bool)

    assert state.validation_losses[-1] < state.validation_losses[0]
    assert dice(predicted, truth) >= 0.95
    assert np.mean(predicted == truth) >= 0.99

    medians = window_medians(tmp_path / TRAIN_LOG)
    assert medians[1] < medians[0]
    # late blocks sit on a plateau; allow 5% jitter there
    assert np.all(medians[1:] <= medians[:-1] * 1.05), medians


@pytest.mark.slow
def test_predicted_centerlines_lie_on_predicted_vessels(tmp_path):
    _, probs, _ = overfit("fext2-16", Task.BOTH, tmp_path)
    vessel = task_probability(probs, Task.BOTH, "vessel") >= 0.5
    centerline = task_probability(probs, Task.BOTH, "centerline") >= 0.5
    assert centerline.any()
    distance = ndimage.distance_transform_edt(~vessel)
    assert np.mean(distance[centerline] <= 2.0) >= 0.9
