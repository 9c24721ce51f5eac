"""Shared fixtures: tiny networks, synthetic vessel scenes and on-disk dataset trees."""
from pathlib import Path
from typing import Callable, Tuple

import numpy as np
import pytest
from PIL import Image

from deep_fext.models.network import FextLayerSpec, FextNetworkSpec, MeshHeadSpec, parse_branches
from deep_fext.models.training import Task
from deep_fext.services.model_service import DeepFextModel, build_model


def draw_vessels(size: int = 48, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Bars and an arc of width 3-7 on a dark background: ((3,H,W) image, (H,W) mask)."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    mask = np.zeros((size, size), dtype=bool)
    mask |= np.abs(yy - size // 3) <= 1 + int(rng.integers(2))
    mask |= np.abs(xx - (2 * size) // 3) <= 2 + int(rng.integers(2))
    radius = np.hypot(yy - size, xx)
    mask |= np.abs(radius - 0.6 * size) <= 1.5
    image = np.empty((3, size, size), dtype=np.float32)
    noise = rng.normal(0.0, 0.02, size=(3, size, size))
    for channel, (low, high) in enumerate([(0.55, 0.25), (0.30, 0.10), (0.15, 0.05)]):
        image[channel] = np.where(mask, high, low) + noise[channel]
    return np.clip(image, 0.0, 1.0).astype(np.float32), mask.astype(np.uint8)


def save_rgb(path: Path, image: np.ndarray) -> Path:
    """(3,H,W) floats in [0,1] as an 8-bit PNG."""
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.rint(image.transpose(1, 2, 0) * 255).astype(np.uint8)).save(path)
    return path


def save_gray(path: Path, mask: np.ndarray) -> Path:
    """Binary map as a {0,255} PNG."""
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path)
    return path


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def nine_feature_spec() -> FextNetworkSpec:
    """RGB passthrough plus one layer with 3x3 and 5x5 branches: 9 features, a 3x3 mesh."""
    return FextNetworkSpec(layers=[FextLayerSpec(in_channels=3, branches=parse_branches("3(3),5(3)"))])


@pytest.fixture
def model_factory(nine_feature_spec) -> Callable[..., DeepFextModel]:
    """Builds the 9-feature model for a task and seed."""
    def build(task: Task = Task.VESSEL, seed: int = 0) -> DeepFextModel:
        head = MeshHeadSpec(mesh_h=3, mesh_w=3, num_classes=task.num_classes)
        return build_model(nine_feature_spec, head, task, seed=seed)
    return build


@pytest.fixture
def vessel_scene() -> Callable[..., Tuple[np.ndarray, np.ndarray]]:
    return draw_vessels


@pytest.fixture
def drive_tree(tmp_path) -> Path:
    """A DRIVE-shaped tree with 20 + 20 small images, FOV masks and second annotations."""
    root = tmp_path / "DRIVE"
    for folder, first in (("training", 21), ("test", 1)):
        suffix = "training" if folder == "training" else "test"
        for number in range(first, first + 20):
            image, mask = draw_vessels(32, seed=number)
            base = root / folder
            save_rgb(base / "images" / f"{number:02d}_{suffix}.png", image)
            save_gray(base / "1st_manual" / f"{number:02d}_manual1.png", mask)
            save_gray(base / "2nd_manual" / f"{number:02d}_manual2.png", mask)
            save_gray(base / "mask" / f"{number:02d}_{suffix}_mask.png", np.ones_like(mask))
    return root


@pytest.fixture
def custom_tree(tmp_path) -> Path:
    """Custom layout: train/ and test/ with images/ and masks/ paired by stem."""
    root = tmp_path / "custom"
    for split, names in (("train", ["a", "b"]), ("test", ["c"])):
        for index, name in enumerate(names):
            image, mask = draw_vessels(40, seed=index)
            save_rgb(root / split / "images" / f"{name}.png", image)
            save_gray(root / split / "masks" / f"{name}.png", mask)
    return root
