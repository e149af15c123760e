from datetime import datetime
from enum import Enum
from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator


def _split_list(value):
    """Accept comma-separated strings for list fields coming from flat config files"""
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class ShiftKind(str, Enum):
    ROTATION = "rotation"
    TRANSLATION = "translation"
    COVARIANCE_SCALE = "covariance-scale"


class Backbone(str, Enum):
    MLP = "mlp"
    CONV = "conv"


class PluginName(str, Enum):
    ZERO = "zero"
    FIXMATCH_CM = "fixmatch_cm"
    MOMENT = "moment"


class SecondStepMode(str, Enum):
    NONE = "none"
    NAIVE = "naive"
    BORT2_NO_BILEVEL = "bort2_no_bilevel"
    BORT2_FULL = "bort2_full"


class ThresholdMode(str, Enum):
    FIXED = "fixed"
    ADAPTIVE = "adaptive"
    PER_CLASS = "per_class"


class Phase(str, Enum):
    INNER_WARMUP = "inner_warmup"
    BILEVEL = "bilevel"


class PhaseTrigger(str, Enum):
    CONVERGENCE = "convergence"
    FIXED_EPOCHS = "fixed_epochs"


class ValidationSource(str, Enum):
    TRAIN = "train"
    HELD_OUT = "held_out"


class DatasetKind(str, Enum):
    SYNTHETIC = "synthetic"
    DISK = "disk"


class OptimizerName(str, Enum):
    SGD = "sgd"
    ADAM = "adam"


class SyntheticShiftConfig(BaseModel):
    """Parameters of the synthetic multi-domain generator.

    ``shift_magnitudes`` holds one value per domain: the sources first, the target last.
    Rotation magnitudes are degrees; translation magnitudes are distances along the
    diagonal direction; covariance-scale magnitudes multiply the within-class spread
    by ``1 + magnitude``.
    """
    model_config = ConfigDict(frozen=True)

    num_classes: int = Field(3, ge=2)
    num_source_domains: int = Field(3, ge=2)
    samples_per_domain: int = Field(200, gt=0)
    feature_dim: int = Field(2, ge=2)
    shift_kind: ShiftKind = ShiftKind.ROTATION
    shift_magnitudes: List[float] = Field(default_factory=lambda: [0.0, 45.0, 90.0, 95.0])
    label_noise_rate: float = Field(0.0, ge=0.0, lt=1.0)
    class_radius: float = Field(1.0, gt=0.0)
    noise_std: float = Field(0.2, gt=0.0)
    seed: int = 0

    @field_validator("shift_magnitudes", mode="before")
    @classmethod
    def split_shift_magnitudes(cls, value):
        return _split_list(value)

    @model_validator(mode="after")
    def check_shifts(self):
        expected = self.num_source_domains + 1
        if len(self.shift_magnitudes) != expected:
            raise ValueError(
                f"shift_magnitudes needs {expected} values (sources then target), got {len(self.shift_magnitudes)}")
        # All-equal shifts are the no-shift anchor; otherwise every domain must differ
        if len(set(self.shift_magnitudes)) != 1 and len(set(self.shift_magnitudes)) != expected:
            raise ValueError(f"domains must receive distinct shifts, got {self.shift_magnitudes}")
        return self


class NeumannConfig(BaseModel):
    """Truncation depth and step size of the Neumann series ``eta * sum_j (I - eta*H)^j``.

    The series only converges when the spectral radius of ``I - eta*(H + damping*I)`` is
    below one; this is assumed, not checked.
    """
    model_config = ConfigDict(frozen=True)

    num_terms: int = Field(20, gt=0)
    eta: float = Field(0.01, gt=0.0)
    damping: float = Field(1e-3, ge=0.0)


class ExperimentConfig(BaseModel):
    """Flat, fully serializable description of one experiment.

    Defaults follow the published settings where they exist (lambda=0.1, m=4,
    alpha=0.999, tau0=0.95, outer lr 5e-5, B=64) and desk-scale values elsewhere.
    """
    name: str = "bort2"
    seed: int = 0
    seeds: List[int] = Field(default_factory=list)
    output_dir: Optional[str] = None

    # dataset
    dataset_kind: DatasetKind = DatasetKind.SYNTHETIC
    data_root: Optional[str] = None
    target_domain: Optional[str] = None
    manifest_path: Optional[str] = None
    num_classes: int = Field(3, ge=2)
    num_source_domains: int = Field(3, ge=2)
    samples_per_domain: int = Field(400, gt=0)
    feature_dim: int = Field(2, ge=2)
    shift_kind: ShiftKind = ShiftKind.ROTATION
    shift_magnitudes: List[float] = Field(default_factory=lambda: [0.0, 45.0, 90.0, 95.0])
    label_noise_rate: float = Field(0.0, ge=0.0, lt=1.0)
    class_radius: float = Field(1.0, gt=0.0)
    noise_std: float = Field(0.2, gt=0.0)
    target_test_fraction: float = Field(0.5, gt=0.0, lt=1.0)
    target_test_disjoint: bool = True

    # first step
    backbone: Backbone = Backbone.MLP
    hidden_dim: int = Field(32, gt=0)
    step1_plugin: PluginName = PluginName.FIXMATCH_CM
    step1_epochs: int = Field(30, ge=0, description="published Digit-Five setting: 30 SGD epochs")
    step1_optimizer: OptimizerName = OptimizerName.SGD
    step1_lr: float = Field(0.05, ge=0.0, description="published Digit-Five setting: initial rate 0.05, cosine decay")
    step1_momentum: float = Field(0.9, ge=0.0)
    step1_weight_decay: float = Field(5e-4, ge=0.0)
    batch_size: int = Field(64, gt=0, description="published Digit-Five setting: 64 per domain")
    tau0: float = Field(0.95, ge=0.0, description="FixMatch confidence threshold 0.95")
    use_cutmix: bool = True
    use_mixstyle: bool = True
    use_target_terms: bool = True
    cutmix_beta: float = Field(1.0, gt=0.0)
    mixstyle_alpha: float = Field(0.1, gt=0.0)
    moment_weight: float = Field(1.0, ge=0.0)

    # second step
    second_step_mode: SecondStepMode = SecondStepMode.BORT2_FULL
    step2_epochs: int = Field(40, ge=0)
    step2_lr: float = Field(0.05, ge=0.0)
    step2_momentum: float = Field(0.9, ge=0.0)
    loss_weight_lambda: float = Field(0.1, ge=0.0, description="published setting: entropy-loss weight 0.1, best of 0.001..1")
    margin_m: float = Field(4.0, description="published setting: entropy-loss margin 4, best of 2..32")
    threshold_mode: ThresholdMode = ThresholdMode.ADAPTIVE
    fixed_tau: float = Field(0.95, ge=0.0, description="FixMatch threshold, used by threshold_mode=fixed")
    ema_alpha: float = Field(0.999, ge=0.0, le=1.0, description="published setting: adaptive-threshold EMA factor 0.999")
    neumann_terms: int = Field(20, gt=0)
    neumann_eta: float = Field(0.01, gt=0.0)
    neumann_damping: float = Field(1e-3, ge=0.0)
    outer_lr: float = Field(5e-5, ge=0.0, description="published setting: labeling-function fine-tuning rate 5e-5")
    inner_steps_per_outer: int = Field(10, gt=0)
    gumbel_temperature: float = Field(1.0, gt=0.0)
    gumbel_straight_through: bool = True
    gumbel_sample_forward: bool = False
    feature_samples: int = Field(8, gt=0)
    phase_trigger: PhaseTrigger = PhaseTrigger.CONVERGENCE
    warmup_epochs: int = Field(5, ge=0)
    convergence_tol: float = Field(1e-3, ge=0.0)
    convergence_window: int = Field(5, gt=0)
    validation_source: ValidationSource = ValidationSource.TRAIN
    held_out_fraction: float = Field(0.2, gt=0.0, lt=1.0)
    eval_batch_size: int = Field(512, gt=0)

    @field_validator("shift_magnitudes", "seeds", mode="before")
    @classmethod
    def split_lists(cls, value):
        return _split_list(value)

    @model_validator(mode="after")
    def check_dataset(self):
        if self.dataset_kind == DatasetKind.DISK and not (self.data_root or self.manifest_path):
            raise ValueError("dataset_kind=disk needs data_root or manifest_path")
        if self.dataset_kind == DatasetKind.SYNTHETIC:
            try:
                self.synthetic_config()
            except ValidationError as e:
                raise ValueError(f"invalid synthetic dataset settings: {e}") from e
        return self

    def resolved_seeds(self) -> List[int]:
        return list(self.seeds) if self.seeds else [self.seed]

    def synthetic_config(self) -> SyntheticShiftConfig:
        return SyntheticShiftConfig(
            num_classes=self.num_classes,
            num_source_domains=self.num_source_domains,
            samples_per_domain=self.samples_per_domain,
            feature_dim=self.feature_dim,
            shift_kind=self.shift_kind,
            shift_magnitudes=self.shift_magnitudes,
            label_noise_rate=self.label_noise_rate,
            class_radius=self.class_radius,
            noise_std=self.noise_std,
            seed=self.seed,
        )

    def neumann_config(self) -> NeumannConfig:
        return NeumannConfig(num_terms=self.neumann_terms, eta=self.neumann_eta,
                             damping=self.neumann_damping)


class MetricsRecord(BaseModel):
    """One append-only line of a run's metric stream"""
    step: int = Field(..., ge=0)
    epoch: int = Field(0, ge=0)
    stage: str = Field(..., description="'step1' or 'step2'")
    phase: Optional[str] = None
    metrics: Dict[str, float] = Field(default_factory=dict)
    wall_time: float = Field(..., description="Seconds since the store was opened")
    timestamp: datetime = Field(default_factory=datetime.now)


class EvaluationResult(BaseModel):
    """Accuracy of a model on a labeled target test set"""
    accuracy: float
    per_class_accuracy: List[Optional[float]]
    confusion_matrix: List[List[int]] = Field(..., description="rows: true class, columns: predicted class")
    num_samples: int


class DomainAccuracy(BaseModel):
    domain: str
    accuracy: float


class RunSummary(BaseModel):
    """Outcome of one seed of one experiment"""
    name: str
    seed: int
    config_hash: str
    second_step_mode: SecondStepMode
    first_step_accuracy: Optional[float] = None
    second_step_accuracy: Optional[float] = None
    final_accuracy: Optional[float] = None
    per_domain: List[DomainAccuracy] = Field(default_factory=list)
    bilevel_started: Optional[bool] = None
    run_dir: Optional[str] = None


class SweepSummary(BaseModel):
    """Aggregate of several runs: mean and std of accuracies across seeds"""
    name: str
    config_hash: str
    seeds: List[int]
    runs: List[RunSummary]
    mean_accuracy: float
    std_accuracy: float
    mean_first_step_accuracy: Optional[float] = None
    std_first_step_accuracy: Optional[float] = None

    def formatted(self) -> str:
        return format_mean_std(self.mean_accuracy, self.std_accuracy)


def format_mean_std(mean: float, std: float) -> str:
    """Render accuracies (fractions) as percentages, e.g. ``98.80±0.08``"""
    return f"{100.0 * mean:.2f}±{100.0 * std:.2f}"
