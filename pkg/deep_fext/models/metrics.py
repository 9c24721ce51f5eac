"""This module defines Pydantic models for segmentation scores."""

from typing import List, Optional

from pydantic import BaseModel, Field


class ConfusionCounts(BaseModel):
    """Pixel confusion counts over the evaluated region."""
    tp: int = Field(0, ge=0)
    fp: int = Field(0, ge=0)
    fn: int = Field(0, ge=0)
    tn: int = Field(0, ge=0)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


class ImageScores(BaseModel):
    """Scores of one image (or the aggregate row)."""
    id: str
    precision: float = Field(..., ge=0.0, le=1.0)
    recall: float = Field(..., ge=0.0, le=1.0)
    f1: float = Field(..., ge=0.0, le=1.0)
    max_dice: float = Field(..., ge=0.0, le=1.0)
    best_threshold: float = Field(..., ge=0.0, le=1.0)
    kappa: float = Field(..., ge=-1.0, le=1.0)


class MetricsReport(BaseModel):
    """Per-image rows plus the aggregate row, at one operating threshold."""
    task: str
    threshold_used: float
    fov_restricted: bool = False
    per_image: List[ImageScores] = Field(default_factory=list)
    aggregate: Optional[ImageScores] = None
