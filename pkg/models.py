import hashlib
import json
import math
from pathlib import Path
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from errors import DataError, StorageError


class StrictModel(BaseModel):
    """Base schema: unknown keys are rejected"""
    model_config = ConfigDict(extra="forbid")


# ============================================================================
# ARCHITECTURE
# ============================================================================

class StageSpec(StrictModel):
    """One backbone stage; only its first block may downsample"""
    block_kind: Literal["fused_mbconv", "mbconv"]
    repeats: int = Field(..., ge=1)
    out_channels: int = Field(..., ge=1)
    stride: Literal[1, 2] = 1
    expansion: float = Field(1.0, ge=1.0)
    se_ratio: float = Field(0.0, ge=0.0, le=1.0)


class BackboneConfig(StrictModel):
    """Stem, stages and final 1x1 head of the convolutional feature extractor"""
    stem_channels: int = Field(..., ge=1)
    stem_stride: Literal[1, 2] = 2
    stages: List[StageSpec] = Field(..., min_length=1)
    head_channels: int = Field(..., ge=1)

    @property
    def total_stride(self) -> int:
        return self.stem_stride * math.prod(stage.stride for stage in self.stages)


class ScanConfig(StrictModel):
    """
    Selective-scan block hyperparameters.

    d_model is the token width D, expand is E, d_state is N, d_conv the causal
    conv width and dt_rank the bottleneck rank of the step-size projection.
    """
    d_model: int = Field(64, ge=1)
    expand: int = Field(2, ge=1)
    d_state: int = Field(16, ge=1)
    d_conv: int = Field(4, ge=1)
    dt_rank: Optional[int] = Field(None, ge=1)
    blocks: int = Field(2, ge=1)

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    @property
    def rank(self) -> int:
        return self.dt_rank if self.dt_rank is not None else math.ceil(self.d_model / 16)


class ModelConfig(StrictModel):
    """Hybrid classifier layout; variant selects the ablation rows"""
    variant: Literal["hybrid", "backbone_only", "vim_only"] = "hybrid"
    backbone: Literal["m-like", "tiny"] = "tiny"
    backbone_max_repeats: Optional[int] = Field(None, ge=1)
    backbone_weights: Optional[str] = Field(None, description="Pretrained backbone tensors (.npz); He init when absent")
    patch_size: int = Field(1, ge=1)
    raw_patch_size: int = Field(16, ge=1, description="Pixel patch size of the vim_only variant")
    token_dim: int = Field(256, ge=1)
    scan: ScanConfig = Field(default_factory=ScanConfig)

    @model_validator(mode="before")
    @classmethod
    def _scan_width_follows_tokens(cls, values):
        if isinstance(values, dict):
            token_dim = values.get("token_dim", 256)
            scan = dict(values.get("scan") or {})
            scan.setdefault("d_model", token_dim)
            values = {**values, "scan": scan}
        return values

    @model_validator(mode="after")
    def _check_widths(self):
        if self.scan.d_model != self.token_dim:
            raise ValueError(f"scan.d_model ({self.scan.d_model}) must equal token_dim ({self.token_dim})")
        return self


# ============================================================================
# DATA / TRAINING / EVALUATION
# ============================================================================

class SynthConfig(StrictModel):
    n: int = Field(200, ge=4)
    difficulty: Literal["easy", "medium", "hard"] = "easy"
    image_size: int = Field(64, ge=8)


class DataConfig(StrictModel):
    manifest: Optional[str] = Field(None, description="Manifest CSV; when absent a synthetic set is generated")
    manifest_format: Literal["manifest", "cbis"] = Field(
        "manifest", description="\"cbis\" reads a CBIS-DDSM description CSV with pre-converted crops")
    image_root: Optional[str] = Field(None, description="Root that manifest image paths are relative to")
    split: Optional[str] = Field(None, description="Split file; when absent one is built from the seed")
    synth: SynthConfig = Field(default_factory=SynthConfig)
    image_size: int = Field(224, ge=8)
    fractions: Tuple[float, float, float] = (0.70, 0.15, 0.15)
    workers: int = Field(1, ge=1)
    mean: Tuple[float, float, float] = (0.485, 0.456, 0.406)
    std: Tuple[float, float, float] = (0.229, 0.224, 0.225)

    @field_validator("fractions")
    @classmethod
    def _fractions_sum_to_one(cls, value):
        if any(f <= 0 for f in value) or abs(sum(value) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be positive and sum to 1, got {value}")
        return value

    @field_validator("std")
    @classmethod
    def _positive_std(cls, value):
        if any(s <= 0 for s in value):
            raise ValueError("std must be positive per channel")
        return value


class TrainConfig(StrictModel):
    epochs: int = Field(50, ge=1)
    batch_size: int = Field(16, ge=1)
    phase1_epochs: int = Field(10, ge=0)
    shared_budget: bool = Field(True, description="Phases share `epochs`; otherwise each runs `epochs`")
    patience: int = Field(10, ge=1)
    min_delta: float = Field(1e-4, ge=0.0)
    seed: int = 0
    lr_new: float = Field(3e-4, gt=0.0)
    lr_backbone: float = Field(3e-5, gt=0.0)
    weight_decay: float = Field(0.01, ge=0.0)
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = Field(1e-8, gt=0.0)
    t0: int = Field(10, ge=1)
    t_mult: int = Field(2, ge=1)
    eta_min_ratio: float = Field(0.01, ge=0.0, le=1.0)
    loss_weights: Literal["inverse_frequency", "none"] = "inverse_frequency"

    @model_validator(mode="after")
    def _phase1_shorter(self):
        if self.phase1_epochs >= self.epochs:
            raise ValueError(f"phase1_epochs ({self.phase1_epochs}) must be < epochs ({self.epochs})")
        return self


class EvalConfig(StrictModel):
    threshold: float = Field(0.5, ge=0.0, le=1.0)
    batch_size: int = Field(16, ge=1)


class ExperimentConfig(StrictModel):
    """Complete, diffable description of one experiment"""
    model: ModelConfig = Field(default_factory=ModelConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    seed: Optional[int] = Field(None, description="Overrides train.seed when set")

    @model_validator(mode="after")
    def _propagate_seed(self):
        if self.seed is not None and self.train.seed != self.seed:
            self.train = self.train.model_copy(update={"seed": self.seed})
        return self

    @classmethod
    def load(cls, path: str) -> "ExperimentConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise StorageError(f"cannot read config {path}: {exc}") from exc
        try:
            return cls.model_validate_json(text)
        except ValidationError as exc:
            raise DataError(f"invalid config {path}: {exc}") from exc

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def write_resolved(self, out_dir: Path) -> Path:
        path = Path(out_dir) / "resolved_config.json"
        path.write_text(json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


# ============================================================================
# RECORDS AND REPORTS
# ============================================================================

class ManifestRecord(StrictModel):
    """One ROI sample after manifest matching"""
    patient_id: str = Field(..., min_length=1)
    abnormality_id: str
    image_path: str
    pathology: str
    label: Literal[0, 1]


class HistoryRow(StrictModel):
    epoch: int
    phase: Literal["feature_extraction", "fine_tuning"]
    train_loss: float
    val_loss: float
    val_auc: Optional[float]
    lr_new: float
    lr_backbone: float


class MetricsReport(StrictModel):
    """Thresholded and threshold-free metrics; undefined values stay None"""
    auc: Optional[float]
    accuracy: Optional[float]
    sensitivity: Optional[float]
    specificity: Optional[float]
    precision: Optional[float]
    f1: Optional[float]
    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int
    n_pos: int
    n_neg: int
    undefined: List[str] = Field(default_factory=list)
    variant: Optional[str] = None
    partition: Optional[str] = None

    @model_validator(mode="after")
    def _consistent_counts(self):
        if self.tp + self.fn != self.n_pos or self.tn + self.fp != self.n_neg:
            raise ValueError("confusion counts do not add up to class totals")
        for key in ("auc", "accuracy", "sensitivity", "specificity", "precision", "f1"):
            value = getattr(self, key)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ValueError(f"{key}={value} outside [0, 1]")
        return self
