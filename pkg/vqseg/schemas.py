from __future__ import annotations

from pydantic import BaseModel, Field
from typing import Dict, List, Optional


class CodeUsageStats(BaseModel):
    """How the codebook was used over an evaluation pass."""
    histogram: List[int] = Field(..., description="Assignment count per code")
    usage_fraction: float = Field(..., description="Fraction of codes used at least once")
    perplexity: float = Field(..., description="exp of the entropy of the code distribution")


class LossTerms(BaseModel):
    ce: float = Field(..., description="Pixel cross-entropy")
    vq: float = Field(..., description="codebook loss + beta * commitment loss")
    total: float = Field(..., description="ce + vq")


class ClassIoU(BaseModel):
    name: str
    iou: Optional[float] = Field(None, description="None when the class never occurs in GT or prediction")


class CodebookSummary(BaseModel):
    usage: float
    perplexity: float
    histogram: List[int] = Field(default_factory=list)


class MetricsReport(BaseModel):
    """Contents of metrics.json."""
    mIoU: float
    per_class: List[ClassIoU]
    codebook: Optional[CodebookSummary] = Field(None, description="Absent when the quantiser is bypassed")
    loss: Optional[LossTerms] = None
    pixel_accuracy: Optional[float] = None
    split: Optional[str] = None
    iteration: Optional[int] = None


class LossPoint(BaseModel):
    iteration: int
    lr: float
    terms: LossTerms


class RunReport(BaseModel):
    """What a training run produced."""
    loss_curve: List[LossPoint] = Field(default_factory=list)
    snapshots: Dict[int, MetricsReport] = Field(default_factory=dict)
    checkpoint: Optional[str] = None
    wall_clock: float = 0.0
    run_dir: Optional[str] = None


class AblationRow(BaseModel):
    K: int
    mIoU: float
    mIoU_std: float = 0.0
    usage: float
    perplexity: float
    repeats: int = 1


class ComparisonRow(BaseModel):
    """One seed of the quantised-vs-baseline comparison."""
    seed: int
    vq_mIoU: float
    baseline_mIoU: float
    usage: float
