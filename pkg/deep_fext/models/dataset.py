"""This module defines Pydantic models for datasets and labelled images."""

from enum import Enum
from pathlib import Path
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator


class Layout(str, Enum):
    """Supported dataset directory layouts."""
    DRIVE = "drive"
    STARE = "stare"
    CUSTOM = "custom"


class SplitName(str, Enum):
    """Names a split can carry."""
    DRIVE_TRAIN = "drive-train"
    DRIVE_TEST = "drive-test"
    STARE_TRAIN = "stare-train"
    STARE_TEST = "stare-test"
    CUSTOM = "custom"


class DatasetItem(BaseModel):
    """File locations of one labelled image."""
    id: str
    image_path: Path
    vessel_path: Path
    fov_path: Optional[Path] = None
    second_annotator_path: Optional[Path] = None


class DatasetSplit(BaseModel):
    """Ordered items of one split."""
    name: SplitName
    items: List[DatasetItem] = Field(default_factory=list)

    @property
    def ids(self) -> List[str]:
        return [item.id for item in self.items]

    def __len__(self) -> int:
        return len(self.items)


class LabeledImage(BaseModel):
    """Decoded image with its masks; every map shares (H, W)."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    id: str
    image: np.ndarray
    vessel_mask: np.ndarray
    centerline_mask: Optional[np.ndarray] = None
    fov_mask: Optional[np.ndarray] = None

    @model_validator(mode="after")
    def check_maps(self) -> "LabeledImage":
        """Masks are strictly {0,1} and aligned with the image."""
        if self.image.ndim != 3:
            raise ValueError(f"image must be (C,H,W), got {self.image.shape}")
        size = self.image.shape[1:]
        for name in ("vessel_mask", "centerline_mask", "fov_mask"):
            mask = getattr(self, name)
            if mask is None:
                continue
            if mask.shape != size:
                raise ValueError(f"{name} {mask.shape} does not match image {size}")
            if not np.isin(mask, (0, 1)).all():
                raise ValueError(f"{name} must be binary")
        return self

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]
