""" This module manages everything that turns checkpoints and images into output files """
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from deep_fext.autograd.tensor import Tensor
from deep_fext.config import settings
from deep_fext.models.dataset import Layout
from deep_fext.models.exceptions import FextError, ErrorTypes
from deep_fext.models.training import Task
from deep_fext.repositories.checkpoint_repository import load_checkpoint
from deep_fext.repositories.dataset_repository import DatasetRepository, index_directory
from deep_fext.repositories.image_repository import decode_image, decode_mask, encode_image, encode_mask
from deep_fext.services.fext_service import FextNetwork, block_ranges, export_feature_maps
from deep_fext.services.model_service import DeepFextModel, predict_probabilities, task_probability
from deep_fext.utils.naming import base_stem, image_id
from deep_fext.utils.skeleton import skeletonize
from deep_fext.utils.workers import parallel_map

logger = logging.getLogger(__name__)


def collect_inputs(path: Path) -> List[Path]:
    """A single file, or every visible file of a directory in name order."""
    path = Path(path)
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise FextError(f"input not found: {path}", ErrorTypes.DATA)
    files = [
        item for item in sorted(path.iterdir())
        if item.is_file() and not item.name.startswith(".") and settings.CENTERLINE_SUFFIX not in item.name
    ]
    if not files:
        raise FextError(f"no input images in {path}", ErrorTypes.DATA)
    return files


def label_image(probs: np.ndarray) -> np.ndarray:
    """Argmax class per pixel scaled to [0,1] as label / (K - 1)."""
    return np.argmax(probs, axis=0).astype(np.float32) / np.float32(probs.shape[0] - 1)


def provides(task: Task, target: str) -> bool:
    """Whether a model trained for ``task`` yields a ``target`` probability map."""
    return task is Task.BOTH or task.value == target


def threshold_mask(prob: np.ndarray, threshold: float, fov: Optional[np.ndarray] = None) -> np.ndarray:
    """prob >= threshold, cleared outside the field of view."""
    mask = prob >= threshold
    if fov is not None:
        mask &= fov.astype(bool)
    return mask.astype(np.uint8)


class PredictionService:
    """Prediction, fusion, feature inspection and dataset preparation over files."""

    def __init__(self, fov_dir: Optional[Path] = None, bits: int = 8):
        """Field-of-view masks are matched to inputs by image id."""
        self.fovs = index_directory(Path(fov_dir)) if fov_dir else {}
        self.fov_dir = fov_dir
        self.bits = bits

    def _fov_for(self, path: Path, shape) -> Optional[np.ndarray]:
        if not self.fov_dir:
            return None
        key = image_id(path)
        if key not in self.fovs:
            raise FextError(f"no field-of-view mask for '{key}' in {self.fov_dir}", ErrorTypes.DATA)
        fov = decode_mask(self.fovs[key])
        if fov.shape != tuple(shape):
            raise FextError(f"field-of-view mask {fov.shape} does not match image {tuple(shape)}", ErrorTypes.DATA)
        return fov

    def predict_file(self, model: DeepFextModel, path: Path, out_dir: Path, threshold: float) -> List[Path]:
        """
        Write ``<stem>_vessel``/``<stem>_centerline`` probabilities, ``<stem>_mask`` and ``<stem>_labels``.

        The mask thresholds the vessel map when the model has one, else the centerline map.
        """
        image = decode_image(path)
        probs = predict_probabilities(model, image)
        fov = self._fov_for(path, image.shape[1:])
        stem = base_stem(path)
        written = []
        primary = None
        for target in ("vessel", "centerline"):
            prob = task_probability(probs, model.task, target)
            if prob is None:
                continue
            primary = prob if primary is None else primary
            written.append(encode_image(prob, out_dir / f"{stem}_{target}.png", bits=self.bits))
        written.append(encode_mask(threshold_mask(primary, threshold, fov), out_dir / f"{stem}_mask.png"))
        written.append(encode_image(label_image(probs), out_dir / f"{stem}_labels.png", bits=8))
        return written

    def predict(self, checkpoint: Path, inputs: Path, out_dir: Path, threshold: float = 0.5) -> List[Path]:
        """Run one checkpoint over a file or a directory of images."""
        model, _ = load_checkpoint(checkpoint)
        files = collect_inputs(inputs)
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = parallel_map(lambda path: self.predict_file(model, path, out_dir, threshold), files)
        logger.info("predicted %d images into %s", len(files), out_dir)
        return [path for group in written for path in group]

    def fuse(
        self,
        checkpoints: Sequence[Path],
        inputs: Path,
        out_dir: Path,
        target: str = "vessel",
        threshold: float = 0.5
    ) -> List[Path]:
        """
        Pixelwise mean of the members' ``target`` probabilities, then thresholding.

        Raises:
            FextError: fewer than two models, or a member without ``target`` or with other inputs (configuration).
        """
        if len(checkpoints) < 2:
            raise FextError("fusion needs at least two checkpoints", ErrorTypes.CONFIGURATION)
        models = [load_checkpoint(path)[0] for path in checkpoints]
        channels = {model.network.spec.input_channels for model in models}
        if len(channels) > 1:
            raise FextError(f"members disagree on input channels: {sorted(channels)}", ErrorTypes.CONFIGURATION)
        for path, model in zip(checkpoints, models):
            if not provides(model.task, target):
                raise FextError(
                    f"{path} predicts '{model.task.value}' ({model.head.num_classes} classes) and has no {target} map",
                    ErrorTypes.CONFIGURATION
                )

        files = collect_inputs(inputs)
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

        def fuse_file(path: Path) -> List[Path]:
            image = decode_image(path)
            maps = [task_probability(predict_probabilities(model, image), model.task, target) for model in models]
            fused = np.mean(np.stack(maps).astype(np.float64), axis=0).astype(np.float32)
            fov = self._fov_for(path, image.shape[1:])
            stem = base_stem(path)
            return [
                encode_image(fused, out_dir / f"{stem}_{target}.png", bits=self.bits),
                encode_mask(threshold_mask(fused, threshold, fov), out_dir / f"{stem}_mask.png"),
            ]

        written = parallel_map(fuse_file, files)
        logger.info("fused %d models over %d images", len(models), len(files))
        return [path for group in written for path in group]


def inspect_features(
    network: FextNetwork,
    image: np.ndarray,
    out_dir: Path,
    by_layer: bool = False
) -> List[Path]:
    """
    One min-max normalized image per extracted feature.

    Flat output is ``feature_000.png``...; ``by_layer`` groups the files per
    block (``input/``, ``layer1/``...) with indices local to the block.
    """
    out_dir = Path(out_dir)
    maps = export_feature_maps(network, Tensor(image))
    written = []
    if not by_layer:
        for index, plane in enumerate(maps):
            written.append(encode_image(plane, out_dir / f"feature_{index:03d}.png"))
        return written
    for name, start, stop in block_ranges(network.spec):
        for index in range(start, stop):
            written.append(encode_image(maps[index], out_dir / name / f"feature_{index - start:03d}.png"))
    return written


def skeletonize_file(source: Path, target: Path) -> Path:
    """Thin a mask file into a {0,255} centerline image."""
    return encode_mask(skeletonize(decode_mask(source)), Path(target))


def prepare_dataset(root: Path, layout: Layout, cache_dir: Optional[Path] = None) -> Dict[str, int]:
    """Build every centerline cache of both splits; returns created and reused counts."""
    repository = DatasetRepository(cache_dir)
    train_split, test_split = repository.load_dataset(root, layout)
    items = train_split.items + test_split.items
    created = parallel_map(lambda item: repository.ensure_centerline(item.vessel_path)[1], items)
    counts = {"items": len(items), "created": sum(created), "reused": len(items) - sum(created)}
    logger.info("prepared %s: %d centerline masks (%d new)", root, counts["items"], counts["created"])
    return counts
