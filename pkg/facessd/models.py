"""
Data models for facessd: configuration, annotations, detections and reports.
"""
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .anchors import Box


class TaskName(str, Enum):
    """Face analysis tasks the analysis branch can learn."""
    SMILE = "smile"
    ATTRIBUTES = "attributes"
    VA = "va"


class TaskKind(str, Enum):
    BINARY = "binary"
    MULTI_BINARY = "multi_binary"
    REGRESSION = "regression"


class Activation(str, Enum):
    SIGMOID = "sigmoid"
    LINEAR = "linear"


class Phase(str, Enum):
    DETECTION = "detection"
    ANALYSIS = "analysis"


class Mechanism(str, Enum):
    """Augmentation mechanisms; one is drawn per sample."""
    SHRINK = "shrink"
    CROP = "crop"
    GAMMA = "gamma"
    HAS = "has"


class HasMode(str, Enum):
    COARSE = "coarse"
    FINE = "fine"


class Precision(str, Enum):
    FLOAT64 = "float64"
    FLOAT32 = "float32"


class TaskSegment(NamedTuple):
    """Where one task's planes sit inside the n task planes."""
    task: TaskName
    start: int
    stop: int
    kind: TaskKind
    activation: Activation


class HeadConfig(BaseModel):
    """
    Task head configuration.

    smile -> 1 sigmoid plane, attributes -> num_attributes sigmoid planes,
    va -> 2 linear planes (valence, arousal). Several tasks may share the head;
    their planes are concatenated in the listed order.
    """
    model_config = ConfigDict(extra="forbid", frozen=True)

    tasks: Tuple[TaskName, ...] = (TaskName.SMILE,)
    num_attributes: int = Field(default=8, ge=1)

    @field_validator("tasks")
    @classmethod
    def _unique_tasks(cls, tasks):
        if not tasks:
            raise ValueError("at least one task is required")
        if len(set(tasks)) != len(tasks):
            raise ValueError(f"duplicate tasks in {tasks}")
        return tasks

    @classmethod
    def for_task(cls, task, num_attributes: int = 8) -> "HeadConfig":
        return cls(tasks=(TaskName(task),), num_attributes=num_attributes)

    def segments(self) -> List[TaskSegment]:
        segments = []
        start = 0
        for task in self.tasks:
            if task == TaskName.SMILE:
                width, kind, act = 1, TaskKind.BINARY, Activation.SIGMOID
            elif task == TaskName.ATTRIBUTES:
                width, kind, act = self.num_attributes, TaskKind.MULTI_BINARY, Activation.SIGMOID
            else:
                width, kind, act = 2, TaskKind.REGRESSION, Activation.LINEAR
            segments.append(TaskSegment(task, start, start + width, kind, act))
            start += width
        return segments

    @property
    def n_tasks(self) -> int:
        """Number of task planes n."""
        return self.segments()[-1].stop

    @property
    def task_kind(self) -> TaskKind:
        return self.segments()[0].kind

    @property
    def task_activation(self) -> Activation:
        return self.segments()[0].activation


class FaceLossConfig(BaseModel):
    """Face detection loss settings (lambda balances regression against classification)."""
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    lambda_: float = Field(default=1.0, gt=0, alias="lambda")
    neg_pos_ratio: float = Field(default=3.0, gt=0)
    eps: float = Field(default=1e-7, gt=0, lt=0.5)
    hard_negative_mining: bool = True


class TaskWeights(BaseModel):
    """Per-task weights w_t of the multi-task loss."""
    model_config = ConfigDict(extra="forbid")

    w: List[float] = Field(default_factory=lambda: [1.0])

    @field_validator("w")
    @classmethod
    def _positive(cls, w):
        if not w or any(v <= 0 for v in w):
            raise ValueError(f"task weights must be a nonempty list of positive values, got {w}")
        return w

    @classmethod
    def uniform(cls, count: int) -> "TaskWeights":
        return cls(w=[1.0] * count)


class DatasetStats(BaseModel):
    """Per-channel mean and standard deviation of raw [0, 1] pixels."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    mean: Tuple[float, float, float]
    std: Tuple[float, float, float]

    @field_validator("std")
    @classmethod
    def _positive_std(cls, std):
        if any(s <= 0 for s in std):
            raise ValueError(f"std must be > 0 per channel, got {std}")
        return std


class AugmentConfig(BaseModel):
    """Training-time augmentation settings."""
    model_config = ConfigDict(extra="forbid")

    flip_prob: float = Field(default=0.5, ge=0, le=1)
    mechanisms: List[Mechanism] = Field(
        default_factory=lambda: [Mechanism.SHRINK, Mechanism.CROP, Mechanism.GAMMA, Mechanism.HAS]
    )
    has_mode: HasMode = HasMode.COARSE
    has_apply_prob: float = Field(default=0.5, ge=0, le=1)
    has_hide_prob: float = Field(default=0.25, ge=0, le=1)
    coarse_divisions: List[int] = Field(default_factory=lambda: [3, 4, 5, 6])
    fine_divisions: List[int] = Field(default_factory=lambda: [16, 32, 44, 56])
    gamma_range: Tuple[float, float] = (0.5, 2.0)
    shrink_range: Tuple[float, float] = (0.5, 1.0)
    crop_range: Tuple[float, float] = (0.6, 1.0)
    crop_min_visible: float = Field(default=0.5, ge=0, le=1)
    # mixed with the training seed into every augmentation draw
    seed: int = 0

    @field_validator("mechanisms")
    @classmethod
    def _nonempty_mechanisms(cls, mechanisms):
        if not mechanisms:
            raise ValueError("at least one augmentation mechanism must be enabled")
        return mechanisms

    @field_validator("coarse_divisions", "fine_divisions")
    @classmethod
    def _valid_divisions(cls, divisions):
        if not divisions or any(d < 1 for d in divisions):
            raise ValueError(f"division sets must be nonempty positive integers, got {divisions}")
        return divisions

    @field_validator("gamma_range")
    @classmethod
    def _valid_gamma(cls, value):
        lo, hi = value
        if lo <= 0 or hi < lo:
            raise ValueError(f"gamma range must satisfy 0 < lo <= hi, got {value}")
        return value

    @field_validator("shrink_range", "crop_range")
    @classmethod
    def _valid_fraction_range(cls, value):
        lo, hi = value
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"range must satisfy 0 < lo <= hi <= 1, got {value}")
        return value

    @property
    def divisions(self) -> List[int]:
        return self.coarse_divisions if self.has_mode == HasMode.COARSE else self.fine_divisions

    @classmethod
    def va_preset(cls, **overrides) -> "AugmentConfig":
        """Only minor face-size variation, for valence-arousal training."""
        values = {"shrink_range": (0.9, 1.0)}
        values.update(overrides)
        return cls(**values)


class FaceAnnotation(BaseModel):
    """One ground-truth face with its task labels."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    box: Box
    smile: int = Field(default=0, ge=0, le=1)
    attributes: Tuple[int, ...] = ()
    valence: float = Field(default=0.0, ge=-1, le=1)
    arousal: float = Field(default=0.0, ge=-1, le=1)

    @field_validator("box")
    @classmethod
    def _positive_extent(cls, box):
        if box.w <= 0 or box.h <= 0:
            raise ValueError(f"box extents must be positive, got {tuple(box)}")
        return box

    @field_validator("attributes")
    @classmethod
    def _bits(cls, bits):
        if any(b not in (0, 1) for b in bits):
            raise ValueError(f"attributes must be 0/1 bits, got {bits}")
        return bits

    @property
    def attribute_bits(self) -> str:
        return "".join(str(b) for b in self.attributes)

    def with_box(self, box: Box) -> "FaceAnnotation":
        return self.model_copy(update={"box": box})


class SyntheticSpec(BaseModel):
    """Procedural synthetic face dataset parameters."""
    model_config = ConfigDict(extra="forbid")

    num_images: int = Field(default=96, ge=0)
    faces_per_image: Tuple[int, int] = (1, 3)
    face_size_range: Tuple[float, float] = (0.15, 0.45)
    num_attributes: int = Field(default=8, ge=1, le=8)
    noise_amplitude: float = Field(default=0.06, ge=0, le=0.5)
    stripe_amplitude: float = Field(default=0.12, ge=0, le=0.5)
    max_overlap: float = Field(default=0.1, ge=0, le=1)
    max_retries: int = Field(default=200, ge=1)
    val_fraction: float = Field(default=0.0, ge=0, le=1)
    test_fraction: float = Field(default=1 / 3, ge=0, le=1)
    seed: int = 0

    @field_validator("faces_per_image")
    @classmethod
    def _valid_counts(cls, value):
        lo, hi = value
        if lo < 0 or hi < lo:
            raise ValueError(f"faces_per_image must satisfy 0 <= lo <= hi, got {value}")
        return value

    @field_validator("face_size_range")
    @classmethod
    def _valid_sizes(cls, value):
        lo, hi = value
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"face_size_range must satisfy 0 < lo <= hi <= 1, got {value}")
        return value

    @model_validator(mode="after")
    def _valid_splits(self):
        if self.val_fraction + self.test_fraction > 1:
            raise ValueError("val_fraction + test_fraction must not exceed 1")
        return self


class LrStage(BaseModel):
    model_config = ConfigDict(extra="forbid")

    iterations: int = Field(ge=1)
    lr: float = Field(ge=0)


# learning-rate ladder: warm start, raise, then decay by 10 per stage
FULL_LR_LADDER = (1e-3, 1e-2, 1e-3, 1e-4, 1e-5)
FULL_STAGE_ITERATIONS = 40_000


def desk_scale_schedule(factor: float = 0.01) -> List[LrStage]:
    iterations = max(1, int(round(FULL_STAGE_ITERATIONS * factor)))
    return [LrStage(iterations=iterations, lr=lr) for lr in FULL_LR_LADDER]


class TrainConfig(BaseModel):
    """One finetuning phase."""
    model_config = ConfigDict(extra="forbid")

    phase: Phase = Phase.DETECTION
    lr_schedule: List[LrStage] = Field(default_factory=desk_scale_schedule)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    weight_decay: float = Field(default=0.0005, ge=0)
    batch_size: int = Field(default=16, ge=1)
    hnm_recycling: bool = True
    hnm_fraction: float = Field(default=0.3, gt=0, lt=1)
    iou_threshold: float = Field(default=0.35, gt=0, lt=1)
    loss: FaceLossConfig = Field(default_factory=FaceLossConfig)
    task_weights: Optional[TaskWeights] = None
    checkpoint_every: int = Field(default=100, ge=1)
    num_workers: int = Field(default=2, ge=1)
    precision: Precision = Precision.FLOAT64
    seed: int = 0

    @field_validator("lr_schedule")
    @classmethod
    def _nonempty_schedule(cls, schedule):
        if not schedule:
            raise ValueError("lr_schedule needs at least one stage")
        return schedule

    @classmethod
    def desk_scale(cls, factor: float = 0.01, **overrides) -> "TrainConfig":
        return cls(lr_schedule=desk_scale_schedule(factor), **overrides)

    @property
    def total_iterations(self) -> int:
        return sum(stage.iterations for stage in self.lr_schedule)

    @property
    def stage_boundaries(self) -> List[int]:
        """Iteration counts at which each stage ends."""
        bounds, total = [], 0
        for stage in self.lr_schedule:
            total += stage.iterations
            bounds.append(total)
        return bounds

    def lr_at(self, iteration: int) -> float:
        """Learning rate for a 0-based iteration (the last stage extends forever)."""
        for bound, stage in zip(self.stage_boundaries, self.lr_schedule):
            if iteration < bound:
                return stage.lr
        return self.lr_schedule[-1].lr


class InferenceConfig(BaseModel):
    """Test-time thresholds."""
    model_config = ConfigDict(extra="forbid")

    th_face: float = Field(default=0.1, ge=0, le=1)
    th_t: float = Field(default=0.5, ge=0, le=1)
    nms_overlap: float = Field(default=0.35, gt=0, lt=1)
    eval_iou: float = Field(default=0.5, gt=0, le=1)


class Detection(BaseModel):
    """A final face detection with its task readout."""
    model_config = ConfigDict(extra="forbid")

    box: Box
    face_score: float
    task_scores: List[float] = Field(default_factory=list)
    scale: int = Field(ge=1)
    location: Tuple[int, int]
    task_bits: Optional[List[Optional[int]]] = None


class VAScores(BaseModel):
    rmse: float
    # None when either side is constant
    corr: Optional[float] = None
    sagr: float
    ccc: float

    @property
    def corr_defined(self) -> bool:
        return self.corr is not None


class VAReport(BaseModel):
    valence: VAScores
    arousal: VAScores

    def flat(self) -> Dict[str, float]:
        out = {}
        for dim in ("valence", "arousal"):
            for key, value in getattr(self, dim).model_dump().items():
                out[f"{dim}_{key}"] = float("nan") if value is None else value
        return out


class TrainLogRow(BaseModel):
    """One line of the training log CSV."""
    iteration: int
    phase: Phase
    lr: float
    loss: float
    cls_loss: float = 0.0
    reg_loss: float = 0.0
    task_loss: float = 0.0
    num_positive: int = 0
    recycled: int = 0


class TensorEntry(BaseModel):
    name: str
    shape: List[int]
    dtype: str


class WeightsManifest(BaseModel):
    """Structured header of a weights file."""
    format_version: int = 1
    head: HeadConfig
    channel_scale: str
    seed: int
    stats: Optional[DatasetStats] = None
    tensors: List[TensorEntry] = Field(default_factory=list)


class DatasetManifest(BaseModel):
    """Split membership and provenance of a saved dataset."""
    num_attributes: int
    splits: Dict[str, str] = Field(default_factory=dict)
    spec: Optional[SyntheticSpec] = None


def parse_channel_scale(value) -> Fraction:
    """Accept 0.125, "1/8" or Fraction(1, 8); must lie in (0, 1]."""
    try:
        scale = Fraction(str(value)) if not isinstance(value, Fraction) else value
    except (ValueError, ZeroDivisionError):
        raise ValueError(f"invalid channel_scale {value!r}") from None
    if not 0 < scale <= 1:
        raise ValueError(f"channel_scale must lie in (0, 1], got {value!r}")
    return scale


class PathsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    data_dir: Path = Path("data")
    out_dir: Path = Path("runs")
    weights: Optional[Path] = None


class RunConfig(BaseModel):
    """Everything a CLI run needs; loaded from JSON, overridden by flags."""
    model_config = ConfigDict(extra="forbid")

    seed: int = 0
    channel_scale: str = "1/8"
    head: HeadConfig = Field(default_factory=HeadConfig)
    data: SyntheticSpec = Field(default_factory=SyntheticSpec)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    detection: TrainConfig = Field(default_factory=lambda: TrainConfig(phase=Phase.DETECTION))
    analysis: TrainConfig = Field(default_factory=lambda: TrainConfig(phase=Phase.ANALYSIS))
    inference: InferenceConfig = Field(default_factory=InferenceConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)
    copy_detection_to_analysis: bool = True

    @field_validator("channel_scale", mode="before")
    @classmethod
    def _valid_scale(cls, value):
        parse_channel_scale(value)
        return str(value)

    @model_validator(mode="after")
    def _phases_match(self):
        if self.detection.phase != Phase.DETECTION or self.analysis.phase != Phase.ANALYSIS:
            raise ValueError("detection/analysis sections must carry their own phase")
        return self


class DetectResponse(BaseModel):
    """Response body of the detection endpoint."""
    image_id: str
    tasks: List[TaskName]
    detections: List[Detection]
