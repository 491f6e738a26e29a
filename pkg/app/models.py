# app/models.py
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

MODES = ("moda_fm", "moda", "fm", "uniform_alpha_adversarial", "source_only", "fully_supervised_oracle")
SWEEPABLE = ("mu_d", "mu_s", "mu_c", "tau")


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class ShiftSpec(Section):
    """Synthetic multi-domain task: rotated Gaussian class clusters with per-domain label priors."""

    num_sources: int = Field(3, ge=1)
    classes: int = Field(3, ge=2)
    dim: int = Field(2, ge=1)
    # C x D base class means; rotations act on the first two coordinates
    class_means: Optional[List[List[float]]] = None
    class_cov: Optional[List[List[float]]] = None
    mean_radius: float = Field(3.0, gt=0)
    class_std: float = Field(0.8, gt=0)
    # sources first, then the target
    rotations: Optional[List[float]] = None
    priors: Optional[List[List[float]]] = None
    samples_per_domain: int = Field(2000, ge=1)
    test_samples: int = Field(1000, ge=0)

    @model_validator(mode="after")
    def _check_shapes(self):
        domains = self.num_sources + 1
        if self.class_means is not None:
            if len(self.class_means) != self.classes or any(len(row) != self.dim for row in self.class_means):
                raise ValueError(f"class_means must be {self.classes} x {self.dim}")
        if self.class_cov is not None:
            if len(self.class_cov) != self.dim or any(len(row) != self.dim for row in self.class_cov):
                raise ValueError(f"class_cov must be {self.dim} x {self.dim}")
        if self.rotations is not None and len(self.rotations) != domains:
            raise ValueError(f"rotations needs {domains} entries (sources then target)")
        if self.priors is not None:
            if len(self.priors) != domains:
                raise ValueError(f"priors needs {domains} rows (sources then target)")
            for row in self.priors:
                if len(row) != self.classes or min(row) < 0 or abs(sum(row) - 1.0) > 1e-12:
                    raise ValueError(f"label prior {row} is not on the {self.classes}-class simplex")
        return self


class ModelSection(Section):
    extractor_hidden: List[int] = Field(default_factory=lambda: [64, 64])
    classifier_hidden: List[int] = Field(default_factory=lambda: [32])
    discriminator_hidden: List[int] = Field(default_factory=lambda: [32])
    feature_reversal: float = Field(1.0, ge=0)
    alpha_reversal: float = Field(1.0, ge=0)

    @field_validator("extractor_hidden")
    @classmethod
    def _non_empty(cls, widths):
        if not widths or min(widths) < 1:
            raise ValueError("extractor_hidden needs at least one positive width")
        return widths

    @field_validator("classifier_hidden", "discriminator_hidden")
    @classmethod
    def _positive(cls, widths):
        if widths and min(widths) < 1:
            raise ValueError("layer widths must be positive")
        return widths


class DataSection(Section):
    kind: Literal["synthetic", "csv"] = "synthetic"
    shift: ShiftSpec = Field(default_factory=ShiftSpec)
    source_paths: List[str] = Field(default_factory=list)
    target_path: Optional[str] = None
    target_test_path: Optional[str] = None
    # one labeled file with a domain column; target_domain names the row group used as target
    domains_path: Optional[str] = None
    target_domain: Optional[str] = None
    target_has_labels: bool = False
    transductive: bool = False
    source_subset: Optional[List[int]] = None
    # seed of the synthetic draw; None reuses run.seed
    seed: Optional[int] = None

    @model_validator(mode="after")
    def _check_paths(self):
        if self.kind != "csv":
            return self
        per_file = bool(self.source_paths or self.target_path)
        if self.domains_path is not None:
            if per_file:
                raise ValueError("domains_path excludes source_paths and target_path")
            if not self.target_domain:
                raise ValueError("domains_path needs target_domain")
        elif not self.source_paths or not self.target_path:
            raise ValueError("csv data needs source_paths and target_path, or domains_path and target_domain")
        return self


class LossSection(Section):
    mu_d: float = Field(0.1, ge=0)
    mu_s: float = Field(0.01, ge=0)
    mu_c: float = Field(0.5, ge=0)
    tau: float = Field(0.9, ge=0, le=1)


class AugmentSpec(Section):
    kind: Literal["gaussian_noise", "dropout_rate", "none"] = "gaussian_noise"
    sigma_min: float = Field(0.1, ge=0)
    sigma_max: float = Field(0.5, ge=0)
    p_min: float = Field(0.2, ge=0, lt=1)
    p_max: float = Field(0.8, ge=0, lt=1)
    # extractor dropout sites used by dropout_rate; None means every site
    dropout_sites: Optional[List[int]] = None

    @model_validator(mode="after")
    def _check_ranges(self):
        if self.sigma_min > self.sigma_max:
            raise ValueError("sigma_min must not exceed sigma_max")
        if self.p_min > self.p_max:
            raise ValueError("p_min must not exceed p_max")
        return self


class OptimSection(Section):
    kind: Literal["sgd", "adadelta"] = "adadelta"
    learning_rate: float = Field(1.0, gt=0)
    rho: float = Field(0.9, gt=0, lt=1)
    eps: float = Field(1e-6, gt=0)


class RunSection(Section):
    mode: Literal["moda_fm", "moda", "fm", "uniform_alpha_adversarial", "source_only",
                  "fully_supervised_oracle"] = "moda_fm"
    epochs: int = Field(40, ge=1)
    batch_size: int = Field(20, ge=1)
    iterations_per_epoch: Optional[int] = Field(None, ge=1)
    seed: int = 0
    out_dir: str = "runs"


class ProbeSection(Section):
    hidden: List[int] = Field(default_factory=lambda: [16])
    epochs: int = Field(500, ge=1)
    batch_size: int = Field(128, ge=1)
    learning_rate: float = Field(1.0, gt=0)
    optimizer: Literal["sgd", "adadelta"] = "adadelta"
    train_fraction: float = Field(0.7, gt=0, lt=1)


class BoundSection(Section):
    vc_dimension: int = Field(5, ge=1)
    delta: float = Field(0.05, gt=0, lt=1)
    # defaults to the target training-set size
    n: Optional[int] = Field(None, ge=1)


class SearchSection(Section):
    iterations: int = Field(20, ge=1)
    mu_d_range: List[float] = Field(default_factory=lambda: [1e-4, 1.0])
    mu_s_range: List[float] = Field(default_factory=lambda: [1e-6, 1e-1])
    mu_c_range: List[float] = Field(default_factory=lambda: [1e-2, 1.0])

    @field_validator("mu_d_range", "mu_s_range", "mu_c_range")
    @classmethod
    def _log_range(cls, bounds):
        if len(bounds) != 2 or bounds[0] <= 0 or bounds[0] > bounds[1]:
            raise ValueError(f"search range {bounds} must be [low, high] with 0 < low <= high")
        return bounds


class ThreadpoolSection(Section):
    size: int = Field(4, ge=1)


class TrainConfig(Section):
    model: ModelSection = Field(default_factory=ModelSection)
    data: DataSection = Field(default_factory=DataSection)
    loss: LossSection = Field(default_factory=LossSection)
    augment: AugmentSpec = Field(default_factory=AugmentSpec)
    optim: OptimSection = Field(default_factory=OptimSection)
    run: RunSection = Field(default_factory=RunSection)
    probe: ProbeSection = Field(default_factory=ProbeSection)
    bound: BoundSection = Field(default_factory=BoundSection)
    search: SearchSection = Field(default_factory=SearchSection)
    threadpool: ThreadpoolSection = Field(default_factory=ThreadpoolSection)


class LossBreakdown(BaseModel):
    class_loss: float
    disc_loss: float
    cons_loss: float
    sparsity_term: float
    total: float
    per_domain_class_losses: List[float]
    masked_fraction: float


class EpochRow(BaseModel):
    epoch: int
    loss_class: float
    loss_disc: float
    loss_cons: float
    sparsity: float
    total: float
    alpha: List[float]
    masked_frac: float
    acc_target: float
    acc_src: List[float]


class RunRecord(BaseModel):
    run_id: str
    seed: int
    mode: str
    status: Literal["completed", "failed"] = "completed"
    failure_reason: Optional[str] = None
    initial_alpha: List[float] = Field(default_factory=list)
    rows: List[EpochRow] = Field(default_factory=list)
    metrics_path: Optional[str] = None
    checkpoint_path: Optional[str] = None

    @property
    def final_accuracy(self) -> float:
        return self.rows[-1].acc_target if self.rows else float("nan")


class BoundReport(BaseModel):
    alpha: List[float]
    M: int
    d: int
    vc_dimension_kind: str = "surrogate"
    n: int
    delta: float
    B_alpha: float
    V: float
    h_divergence_estimate: float
    lambda_hat: Optional[float] = None
    weighted_source_risk: float
    bound_total: float
    target_error: Optional[float] = None
    label_js_distances: Optional[List[List[float]]] = None
    provenance: Dict[str, object] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_terms(self):
        if self.B_alpha < 0 or self.V < 0:
            raise ValueError("bound terms must be non-negative")
        if not 0.0 <= self.h_divergence_estimate <= 2.0:
            raise ValueError("H-divergence estimate must lie in [0, 2]")
        return self


class SweepRow(BaseModel):
    param: str
    value: float
    mean_accuracy: float
    std_accuracy: float
    n_seeds: int


class OvertrainEntry(BaseModel):
    mode: str
    # None on the per-mode median row
    seed: Optional[int] = None
    max_accuracy: float
    final_accuracy: float
    drop_from_peak: float
    tail_slope: float
