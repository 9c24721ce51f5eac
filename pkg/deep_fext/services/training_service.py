""" This module runs end-to-end optimization of the extraction network and mesh head """
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from deep_fext.autograd import ops
from deep_fext.autograd.tensor import ComputeGraph, Tensor
from deep_fext.models.dataset import LabeledImage
from deep_fext.models.exceptions import FextError, ErrorTypes
from deep_fext.models.training import NormalizationStats, OptimizerKind, Task, TrainConfig, TrainState
from deep_fext.repositories.checkpoint_repository import save_checkpoint
from deep_fext.services.model_service import DeepFextModel
from deep_fext.utils.skeleton import skeletonize

logger = logging.getLogger(__name__)

TRAIN_LOG = "train.log"
FINAL_CHECKPOINT = "final.dfxt"


def checkpoint_name(step: int) -> str:
    return f"step-{step:07d}.dfxt"


def rng_snapshot(rng: np.random.Generator) -> Dict[str, Any]:
    """Bit generator state with its 128-bit words as decimal strings, so it survives JSON."""
    state = rng.bit_generator.state
    return {**state, "state": {key: str(value) for key, value in state["state"].items()}}


def restore_rng(rng: np.random.Generator, snapshot: Dict[str, Any]) -> None:
    rng.bit_generator.state = {**snapshot, "state": {key: int(value) for key, value in snapshot["state"].items()}}


def encode_labels(image: LabeledImage, task: Task) -> np.ndarray:
    """
    Per-pixel class indices for ``task``.

    vessel: 0 background, 1 vessel. centerline: 0 rest, 1 centerline.
    both: 0 background, 1 vessel, 2 centerline (centerline wins).
    """
    vessel = image.vessel_mask.astype(bool)
    centerline = image.centerline_mask
    if task is not Task.VESSEL and centerline is None:
        centerline = skeletonize(image.vessel_mask)
    if task is Task.VESSEL:
        return vessel.astype(np.int64)
    if task is Task.CENTERLINE:
        return centerline.astype(np.int64)
    labels = vessel.astype(np.int64)
    labels[centerline.astype(bool)] = 2
    return labels


def _valid_region(image: LabeledImage) -> np.ndarray:
    if image.fov_mask is None:
        return np.ones((image.height, image.width), dtype=bool)
    return image.fov_mask.astype(bool)


def class_counts(images: Sequence[LabeledImage], labels: Sequence[np.ndarray], num_classes: int) -> np.ndarray:
    """Pixels per class inside the field of view."""
    counts = np.zeros(num_classes, dtype=np.int64)
    for image, label in zip(images, labels):
        counts += np.bincount(label[_valid_region(image)], minlength=num_classes)[:num_classes]
    return counts


def inverse_frequency_weights(counts: np.ndarray) -> List[float]:
    """w_k = N / (K * n_k), so every present class contributes equally; absent classes get 0."""
    counts = np.asarray(counts, dtype=np.float64)
    total, classes = counts.sum(), len(counts)
    return [float(total / (classes * count)) if count > 0 else 0.0 for count in counts]


def normalization_stats(images: Sequence[LabeledImage]) -> NormalizationStats:
    """Per-channel mean and standard deviation over field-of-view pixels."""
    channels = images[0].image.shape[0]
    total = np.zeros(channels)
    squares = np.zeros(channels)
    pixels = 0
    for image in images:
        values = image.image[:, _valid_region(image)].astype(np.float64)
        total += values.sum(axis=1)
        squares += (values ** 2).sum(axis=1)
        pixels += values.shape[1]
    mean = total / max(pixels, 1)
    std = np.sqrt(np.maximum(squares / max(pixels, 1) - mean ** 2, 0.0))
    std = np.where(std < 1e-6, 1.0, std)
    return NormalizationStats(mean=[float(v) for v in mean], std=[float(v) for v in std])


@dataclass
class PatchBatch:
    """Image patches (N,C,P,P), labels (N,P,P) and loss weights (N,P,P)."""
    images: np.ndarray
    labels: np.ndarray
    weights: np.ndarray


class TrainingSet:
    """Decoded training images with their label maps and class weights."""

    def __init__(self, images: Sequence[LabeledImage], task: Task, class_weights: Optional[List[float]] = None):
        if not images:
            raise FextError("training needs at least one labelled image", ErrorTypes.DATA)
        self.images = list(images)
        self.task = task
        self.labels = [encode_labels(image, task) for image in self.images]
        self.valid = [_valid_region(image) for image in self.images]
        if class_weights is None:
            class_weights = inverse_frequency_weights(class_counts(self.images, self.labels, task.num_classes))
        self.class_weights = [float(weight) for weight in class_weights]

    def __len__(self) -> int:
        return len(self.images)


def _augment(rng: np.random.Generator, *arrays: np.ndarray) -> Tuple[np.ndarray, ...]:
    """Same random rot90/flip on every array; the last two axes are spatial."""
    turns = int(rng.integers(4))
    flip = bool(rng.integers(2))
    result = []
    for array in arrays:
        array = np.rot90(array, turns, axes=(-2, -1))
        if flip:
            array = array[..., ::-1]
        result.append(np.ascontiguousarray(array))
    return tuple(result)


def sample_patches(
    dataset: TrainingSet,
    cfg: TrainConfig,
    rng: np.random.Generator,
    count: Optional[int] = None,
    augment: Optional[bool] = None
) -> PatchBatch:
    """
    Draw ``count`` (default ``cfg.patches_per_step``) square patches.

    Weights are the class weight of each pixel's label, zeroed outside the
    field of view and within ``cfg.border_margin`` of the patch edges. With
    ``cfg.batch_pixels`` only that many randomly chosen weighted pixels keep
    their weight.

    Raises:
        FextError: the patch does not fit inside an image (configuration).
    """
    size = cfg.patch_size
    count = count or cfg.patches_per_step
    augment = cfg.augment if augment is None else augment
    for image in dataset.images:
        if size > image.height or size > image.width:
            raise FextError(
                f"patch_size {size} exceeds image '{image.id}' ({image.height}x{image.width})",
                ErrorTypes.CONFIGURATION
            )

    class_weights = np.asarray(dataset.class_weights, dtype=np.float64)
    border = np.zeros((size, size), dtype=bool)
    margin = cfg.border_margin
    border[margin:size - margin, margin:size - margin] = True

    patches, labels, weights = [], [], []
    for _ in range(count):
        index = int(rng.integers(len(dataset)))
        image = dataset.images[index]
        y = int(rng.integers(image.height - size + 1))
        x = int(rng.integers(image.width - size + 1))
        window = (slice(y, y + size), slice(x, x + size))
        patch = image.image[(slice(None),) + window]
        label = dataset.labels[index][window]
        weight = class_weights[label] * dataset.valid[index][window] * border
        if augment:
            patch, label, weight = _augment(rng, patch, label, weight)
        patches.append(patch)
        labels.append(label)
        weights.append(weight)

    weight_batch = np.stack(weights)
    if cfg.batch_pixels is not None:
        candidates = np.flatnonzero(weight_batch > 0)
        if candidates.size > cfg.batch_pixels:
            keep = rng.choice(candidates, size=cfg.batch_pixels, replace=False)
            selected = np.zeros(weight_batch.size, dtype=bool)
            selected[keep] = True
            weight_batch = np.where(selected.reshape(weight_batch.shape), weight_batch, 0.0)

    return PatchBatch(
        images=np.stack(patches).astype(np.float32),
        labels=np.stack(labels).astype(np.int64),
        weights=weight_batch
    )


def apply_optimizer_step(
    params: Sequence[Tuple[str, Tensor]],
    state: TrainState,
    cfg: TrainConfig
) -> TrainState:
    """
    Update every parameter from its gradient and advance ``state.step``.

    SGD with momentum: v <- mu*v - lr*g, p <- p + v.
    Adam: bias-corrected first and second moments.
    Moments are kept as float32 so a checkpointed state resumes bit-exactly.
    """
    step = state.step + 1
    lr = cfg.learning_rate
    beta1, beta2 = cfg.betas
    for name, tensor in params:
        grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        grad = grad.astype(np.float64)
        slots = state.moments.get(name)
        if slots is None:
            slots = [np.zeros_like(tensor.data) for _ in range(cfg.optimizer.slots)]

        if cfg.optimizer is OptimizerKind.SGD_MOMENTUM:
            velocity = cfg.momentum * slots[0].astype(np.float64) - lr * grad
            update = velocity
            slots = [velocity.astype(np.float32)]
        else:
            first = beta1 * slots[0].astype(np.float64) + (1.0 - beta1) * grad
            second = beta2 * slots[1].astype(np.float64) + (1.0 - beta2) * grad ** 2
            first_hat = first / (1.0 - beta1 ** step)
            second_hat = second / (1.0 - beta2 ** step)
            update = -lr * first_hat / (np.sqrt(second_hat) + cfg.eps)
            slots = [first.astype(np.float32), second.astype(np.float32)]

        state.moments[name] = slots
        # lr == 0 is a frozen run: parameters must stay bit-identical.
        if lr > 0:
            tensor.data = (tensor.data.astype(np.float64) + update).astype(np.float32)
    state.step = step
    state.optimizer = cfg.optimizer
    return state


def batch_loss(model: DeepFextModel, batch: PatchBatch, graph: Optional[ComputeGraph] = None) -> Tensor:
    """Weighted cross-entropy of the model on one batch."""
    inputs = Tensor(model.normalize(batch.images))
    logits = model.forward(inputs, graph)
    return ops.softmax_cross_entropy(logits, batch.labels, batch.weights, graph)


def _append_log(path: Path, step: int, loss: float, lr: float, elapsed_ms: int) -> None:
    with path.open("a", encoding="utf-8") as stream:
        stream.write(f"{step} {loss:.6f} {lr:g} {elapsed_ms}\n")


class Trainer:
    """Owns the parameters, the sampler generator and the schedule of one run."""

    def __init__(
        self,
        model: DeepFextModel,
        images: Sequence[LabeledImage],
        cfg: TrainConfig,
        out_dir: Path,
        resume_state: Optional[TrainState] = None
    ):
        if model.task is not cfg.task:
            raise FextError(
                f"model predicts '{model.task.value}' but the config trains '{cfg.task.value}'",
                ErrorTypes.CONFIGURATION
            )
        self.model = model
        self.cfg = cfg
        self.out_dir = Path(out_dir)

        weights = resume_state.class_weights if resume_state and resume_state.class_weights else cfg.class_weights
        self.dataset = TrainingSet(images, cfg.task, weights)
        if resume_state is None:
            model.normalization = normalization_stats(self.dataset.images)

        self.rng = np.random.default_rng(cfg.seed)
        if resume_state is not None and resume_state.rng_state is not None:
            restore_rng(self.rng, resume_state.rng_state)
        # Held-out batch depends on the seed only, never on the run's progress.
        self.validation = sample_patches(
            self.dataset, cfg, np.random.default_rng([cfg.seed, 1]), count=cfg.validation_patches, augment=False
        )
        self.state = resume_state or TrainState(optimizer=cfg.optimizer)
        self.state.class_weights = self.dataset.class_weights

    def validation_loss(self) -> float:
        return batch_loss(self.model, self.validation).item()

    def checkpoint(self, name: str) -> Path:
        self.state.rng_state = rng_snapshot(self.rng)
        self.state.validation_losses.append(self.validation_loss())
        return save_checkpoint(self.model, self.state, self.out_dir / name)

    def step(self) -> float:
        """One sampled batch, one backward pass, one optimizer update."""
        cfg, state = self.cfg, self.state
        batch = sample_patches(self.dataset, cfg, self.rng)
        graph = ComputeGraph()
        loss = batch_loss(self.model, batch, graph)
        value = loss.item()
        if not np.isfinite(value):
            raise FextError(
                f"loss became {value} at step {state.step + 1} (learning_rate={cfg.learning_rate:g}); "
                "lower the learning rate or check the inputs",
                ErrorTypes.NUMERIC
            )
        self.model.zero_grad()
        graph.backward(loss)
        apply_optimizer_step(self.model.named_parameters(), state, cfg)

        state.running_loss = value
        state.epoch = (state.step - 1) // cfg.steps_per_epoch
        if state.initial_loss is None:
            state.initial_loss = value
        if state.initial_loss > 0 and value > cfg.divergence_factor * state.initial_loss:
            state.divergent_steps += 1
        else:
            state.divergent_steps = 0
        if state.divergent_steps >= cfg.divergence_patience:
            raise FextError(
                f"training diverged: loss {value:.4g} stayed above {cfg.divergence_factor:g}x the initial "
                f"{state.initial_loss:.4g} for {state.divergent_steps} steps (step {state.step}, "
                f"learning_rate={cfg.learning_rate:g})",
                ErrorTypes.NUMERIC
            )
        return value

    def run(self) -> TrainState:
        """Train until ``cfg.total_steps``; checkpoints every ``cfg.checkpoint_every`` steps and at the end."""
        cfg, state = self.cfg, self.state
        self.out_dir.mkdir(parents=True, exist_ok=True)
        log_path = self.out_dir / TRAIN_LOG
        if cfg.learning_rate == 0:
            logger.warning("learning_rate is 0: parameters will not change")
        logger.info(
            "training %s: %d steps from step %d, %d images, class weights %s",
            cfg.task.value, cfg.total_steps, state.step, len(self.dataset),
            ", ".join(f"{w:.3f}" for w in self.dataset.class_weights)
        )

        started = time.monotonic()
        while state.step < cfg.total_steps:
            value = self.step()
            elapsed_ms = int((time.monotonic() - started) * 1000)
            _append_log(log_path, state.step, value, cfg.learning_rate, elapsed_ms)
            if state.step % cfg.checkpoint_every == 0 and state.step < cfg.total_steps:
                self.checkpoint(checkpoint_name(state.step))

        state.final = True
        self.checkpoint(FINAL_CHECKPOINT)
        logger.info(
            "training finished at step %d: loss %.4f, validation %.4f",
            state.step, state.running_loss, state.validation_losses[-1]
        )
        return state


def train(
    model: DeepFextModel,
    images: Sequence[LabeledImage],
    cfg: TrainConfig,
    out_dir: Path,
    resume_state: Optional[TrainState] = None
) -> TrainState:
    """
    Train ``model`` on ``images`` and write checkpoints and ``train.log`` under ``out_dir``.

    Raises:
        FextError: task mismatch (configuration), NaN loss or divergence (numeric).
    """
    return Trainer(model, images, cfg, out_dir, resume_state).run()
