"""
Result Schemas - object votes, whole-image decisions and metrics reports.

All models serialize to JSON for report.json; every ratio lies in [0, 1] and
is None where its denominator is zero.
"""
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field

from core.models.micrograph import NOT_SEGMENTED


Ratio = Optional[float]


# ============================================================================
# VOTING RESULTS
# ============================================================================

class ObjectClassification(BaseModel):
    """Max-vote decision for one object region."""

    model_config = ConfigDict(frozen=True)

    region_id: int
    voted_class: int = Field(..., description="Constituent class 1..n_cl, or -1 for NOT_SEGMENTED")
    votes: List[int] = Field(..., description="Predicted-pixel histogram over classes 0..n_cl (0 = matrix)")
    area: int = Field(..., ge=0)

    @property
    def not_segmented(self) -> bool:
        return self.voted_class == NOT_SEGMENTED


class ImageClassification(BaseModel):
    """Majority class over the voted objects of one image."""

    model_config = ConfigDict(frozen=True)

    status: Literal["classified", "unclassifiable"]
    voted_class: Optional[int] = Field(default=None, description="None when unclassifiable")
    object_votes: List[int] = Field(..., description="Objects per class 0..n_cl (index 0 unused)")

    @classmethod
    def unclassifiable(cls, n_cl: int) -> "ImageClassification":
        return cls(status="unclassifiable", voted_class=None, object_votes=[0] * (n_cl + 1))


# ============================================================================
# METRICS REPORT
# ============================================================================

class ClassPixelMetrics(BaseModel):
    name: str
    support: int = Field(..., ge=0, description="t_i, pixels of this class in the truth")
    accuracy: Ratio = Field(default=None, ge=0.0, le=1.0)
    iu: Ratio = Field(default=None, ge=0.0, le=1.0)


class PixelMetrics(BaseModel):
    pixel_acc: float = Field(..., ge=0.0, le=1.0)
    mean_acc: float = Field(..., ge=0.0, le=1.0)
    mean_iu: float = Field(..., ge=0.0, le=1.0)
    fw_iu: float = Field(..., ge=0.0, le=1.0)
    per_class: List[ClassPixelMetrics]


class ClassObjectMetrics(BaseModel):
    name: str
    support: int = Field(..., ge=0, description="Objects of this class in the truth (segmented ones)")
    predicted: int = Field(..., ge=0, description="Objects voted into this class")
    recall: Ratio = Field(default=None, ge=0.0, le=1.0)
    precision: Ratio = Field(default=None, ge=0.0, le=1.0)


class ObjectMetrics(BaseModel):
    per_class: List[ClassObjectMetrics]
    correct: int = Field(..., ge=0)
    counted: int = Field(..., ge=0, description="Objects with a vote (not-segmented excluded)")
    not_segmented: int = Field(..., ge=0)
    accuracy_excluding_not_segmented: Ratio = Field(default=None, ge=0.0, le=1.0)
    accuracy_including_not_segmented: Ratio = Field(default=None, ge=0.0, le=1.0)


class ImageMetrics(BaseModel):
    correct: int = Field(..., ge=0)
    total: int = Field(..., ge=0)
    unclassifiable: int = Field(default=0, ge=0)
    accuracy: Ratio = Field(default=None, ge=0.0, le=1.0)


class MetricsReport(BaseModel):
    """
    Combined evaluation report.

    Examples:
        report = MetricsReport(class_names=names, pixel=pixel_metrics(cm))
        report.model_dump_json(indent=2)
    """

    model_config = ConfigDict(extra="forbid")

    class_names: List[str]
    pixel: Optional[PixelMetrics] = None
    objects: Optional[ObjectMetrics] = None
    images: Optional[ImageMetrics] = None
