"""Dataset layouts on disk and the derived centerline cache."""
import logging
import os
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from deep_fext.config import settings
from deep_fext.models.dataset import DatasetItem, DatasetSplit, LabeledImage, Layout, SplitName
from deep_fext.models.exceptions import FextError, ErrorTypes
from deep_fext.repositories.image_repository import decode_image, decode_mask, encode_mask
from deep_fext.utils.naming import base_stem, image_id
from deep_fext.utils.skeleton import skeletonize

logger = logging.getLogger(__name__)

_SUFFIX_PREFERENCE = [".png", ".ppm", ".pgm", ".pbm"]

DRIVE_SPLIT_SIZE = 20
STARE_SIZE = 20
STARE_TRAIN_SIZE = 10


def _rank(path: Path) -> Tuple[int, str]:
    suffix = path.suffix.lower()
    order = _SUFFIX_PREFERENCE.index(suffix) if suffix in _SUFFIX_PREFERENCE else len(_SUFFIX_PREFERENCE)
    return order, path.name


def index_directory(directory: Path) -> Dict[str, Path]:
    """Map image id -> file, preferring natively decodable suffixes; skips caches and hidden files."""
    found: Dict[str, List[Path]] = {}
    if not directory.is_dir():
        return {}
    for path in sorted(directory.iterdir()):
        if not path.is_file() or path.name.startswith(".") or settings.CENTERLINE_SUFFIX in path.name:
            continue
        found.setdefault(image_id(path), []).append(path)
    return {key: min(paths, key=_rank) for key, paths in sorted(found.items())}


class DatasetRepository:
    """Loads dataset splits and labelled images; owns the centerline cache."""

    def __init__(self, cache_dir: Optional[Path] = None):
        """Centerline caches go beside the ground truth unless ``cache_dir`` is given."""
        self.cache_dir = Path(cache_dir) if cache_dir else None

    def load_dataset(self, root: Path, layout: Layout) -> Tuple[DatasetSplit, DatasetSplit]:
        """
        Resolve the (train, test) splits of a dataset root.

        Raises:
            FextError: missing root or files, listing what was expected and what was found.
        """
        root = Path(root)
        if not root.is_dir():
            raise FextError(f"dataset root not found: {root}", ErrorTypes.DATA)
        layout = Layout(layout)
        if layout is Layout.DRIVE:
            return self._load_drive(root)
        if layout is Layout.STARE:
            return self._load_stare(root)
        return self._load_custom(root)

    def _load_drive(self, root: Path) -> Tuple[DatasetSplit, DatasetSplit]:
        splits = []
        for folder, name in (("training", SplitName.DRIVE_TRAIN), ("test", SplitName.DRIVE_TEST)):
            base = root / folder
            items = self._pair(
                images=index_directory(base / "images"),
                vessels=index_directory(base / "1st_manual"),
                fovs=index_directory(base / "mask"),
                second=index_directory(base / "2nd_manual"),
                where=base,
                require_fov=True
            )
            if len(items) != DRIVE_SPLIT_SIZE:
                raise FextError(
                    f"DRIVE {folder}: expected {DRIVE_SPLIT_SIZE} images in {base / 'images'}, "
                    f"found {len(items)} ({', '.join(item.id for item in items) or 'none'})",
                    ErrorTypes.DATA
                )
            splits.append(DatasetSplit(name=name, items=items))
        return splits[0], splits[1]

    def _load_stare(self, root: Path) -> Tuple[DatasetSplit, DatasetSplit]:
        items = self._pair(
            images=index_directory(root / "images"),
            vessels=index_directory(root / "labels-ah"),
            fovs={},
            second=index_directory(root / "labels-vk"),
            where=root,
            require_fov=False
        )
        if len(items) != STARE_SIZE:
            raise FextError(
                f"STARE: expected {STARE_SIZE} annotated images in {root / 'images'}, found {len(items)}",
                ErrorTypes.DATA
            )
        # Sorted-name split; index_directory already sorts by id.
        return (DatasetSplit(name=SplitName.STARE_TRAIN, items=items[:STARE_TRAIN_SIZE]),
                DatasetSplit(name=SplitName.STARE_TEST, items=items[STARE_TRAIN_SIZE:]))

    def _load_custom(self, root: Path) -> Tuple[DatasetSplit, DatasetSplit]:
        if (root / "images").is_dir():
            bases = {"train": root, "test": None}
        else:
            bases = {"train": root / "train", "test": root / "test"}
        splits = []
        for base in (bases["train"], bases["test"]):
            if base is None or not base.is_dir():
                splits.append(DatasetSplit(name=SplitName.CUSTOM, items=[]))
                continue
            items = self._pair(
                images=self._index_by_stem(base / "images"),
                vessels=self._index_by_stem(base / "masks"),
                fovs=self._index_by_stem(base / "fov"),
                second={},
                where=base,
                require_fov=False
            )
            splits.append(DatasetSplit(name=SplitName.CUSTOM, items=items))
        if not splits[0].items and not splits[1].items:
            raise FextError(f"custom layout: no images/ + masks/ pairs under {root}", ErrorTypes.DATA)
        return splits[0], splits[1]

    @staticmethod
    def _index_by_stem(directory: Path) -> Dict[str, Path]:
        if not directory.is_dir():
            return {}
        found = {}
        for path in sorted(directory.iterdir(), key=_rank):
            if path.is_file() and not path.name.startswith(".") and settings.CENTERLINE_SUFFIX not in path.name:
                found.setdefault(base_stem(path), path)
        return dict(sorted(found.items()))

    @staticmethod
    def _pair(
        images: Dict[str, Path],
        vessels: Dict[str, Path],
        fovs: Dict[str, Path],
        second: Dict[str, Path],
        where: Path,
        require_fov: bool
    ) -> List[DatasetItem]:
        missing = []
        items = []
        for key, image_path in images.items():
            if key not in vessels:
                missing.append(f"{key}: vessel annotation")
            if require_fov and key not in fovs:
                missing.append(f"{key}: field-of-view mask")
            if key in vessels and (key in fovs or not require_fov):
                items.append(DatasetItem(
                    id=key,
                    image_path=image_path,
                    vessel_path=vessels[key],
                    fov_path=fovs.get(key),
                    second_annotator_path=second.get(key)
                ))
        if missing:
            raise FextError(
                f"{where}: {len(images)} images found but annotations are missing for "
                + "; ".join(missing),
                ErrorTypes.DATA
            )
        return items

    def centerline_path(self, vessel_path: Path) -> Path:
        """Cache location: ``<stem>.centerline.png`` beside the mask or under ``cache_dir``."""
        name = f"{base_stem(vessel_path)}{settings.CENTERLINE_SUFFIX}.png"
        if self.cache_dir is not None:
            return self.cache_dir / vessel_path.parent.name / name
        return vessel_path.with_name(name)

    def ensure_centerline(self, vessel_path: Path) -> Tuple[np.ndarray, bool]:
        """Cached centerline mask, regenerated when missing or older than its source."""
        vessel_path = Path(vessel_path)
        cache = self.centerline_path(vessel_path)
        if cache.exists() and os.stat(cache).st_mtime_ns >= os.stat(vessel_path).st_mtime_ns:
            return decode_mask(cache), False
        centerline = skeletonize(decode_mask(vessel_path))
        encode_mask(centerline, cache)
        logger.debug("cached centerline %s", cache)
        return centerline, True

    def load_item(self, item: DatasetItem, with_centerline: bool = True) -> LabeledImage:
        """Decode one item with its masks."""
        centerline = self.ensure_centerline(item.vessel_path)[0] if with_centerline else None
        return LabeledImage(
            id=item.id,
            image=decode_image(item.image_path),
            vessel_mask=decode_mask(item.vessel_path),
            centerline_mask=centerline,
            fov_mask=decode_mask(item.fov_path) if item.fov_path else None
        )
