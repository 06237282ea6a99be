import enum
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

DATASET_FORMAT_VERSION = 1
MODEL_FORMAT_VERSION = 1


class GraphKind(str, enum.Enum):
    ER = "er"
    SBM = "sbm"
    BA = "ba"
    RG = "rg"
    KARATE = "karate"


class SourceMode(str, enum.Enum):
    BERNOULLI = "bernoulli"
    COMMUNITY = "community"


class Method(str, enum.Enum):
    ADMM = "admm"
    SLOG = "slog"


class AdmmConfig(BaseModel):
    """
    Penalties and stopping controls of the model-based solver.

    The solver stops once the scaled primal and dual residuals are within
    tolerance, |1^T g~ - c| <= 10 tol_primal, and ||x||_1 has moved by at most
    plateau_tol * max(||x||_1, 1) over the last plateau_window iterations.
    """

    model_config = ConfigDict(frozen=True)

    rho_lambda: float = Field(1.0, gt=0)
    rho_mu: float = Field(1.0, gt=0)
    scale_c: float = 1.0
    max_iters: int = Field(5000, ge=1)
    tol_primal: float = Field(1e-6, gt=0)
    tol_dual: float = Field(1e-6, gt=0)
    plateau_window: int = Field(10, ge=1)
    plateau_tol: float = Field(1e-8, ge=0)

    @model_validator(mode="after")
    def _nonzero_scale(self):
        if self.scale_c == 0:
            raise ValueError("scale_c must be nonzero")
        return self


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    epochs: int = Field(30, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = Field(1e-8, gt=0)
    val_every_batches: int = Field(20, ge=1)
    seed: int = Field(7, ge=0)
    checkpoint_dir: Optional[str] = None


class BenchConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    eta_sweep: List[float] = Field(default_factory=lambda: [0.0])
    trials: int = Field(10, ge=1)
    kappa: float = Field(0.1, gt=0)
    p_test: Optional[int] = Field(None, ge=1)
    seed: int = Field(1, ge=0)
    jobs: int = Field(1, ge=1)


class GraphDescriptor(BaseModel):
    kind: Optional[GraphKind] = None
    n_nodes: int = Field(ge=1)
    params: Dict[str, float] = Field(default_factory=dict)
    seed: int = 0
    edge_list: Optional[str] = None
    communities: Optional[List[int]] = None
    fingerprint: Optional[str] = None


class DatasetManifest(BaseModel):
    """Provenance of one dataset split; enough to regenerate it bit-exactly."""

    format_version: int = DATASET_FORMAT_VERSION
    split: str = "train"
    n_nodes: int = Field(ge=1)
    n_signals: int = Field(ge=1)
    batch_size: int = Field(ge=1)
    n_batches: int = Field(ge=1)
    theta: float = Field(ge=0, le=1)
    source_mode: SourceMode = SourceMode.BERNOULLI
    filter_order: int = Field(ge=1)
    phi: float = Field(ge=0)
    eta: float = Field(ge=0)
    source_seed: int
    filter_seed: int
    noise_seed: int
    graph: GraphDescriptor
    shapes: Dict[str, List[int]] = Field(default_factory=dict)
    non_invertible_batches: List[int] = Field(default_factory=list)
    config: Dict[str, Any] = Field(default_factory=dict)


class ModelManifest(BaseModel):
    format_version: int = MODEL_FORMAT_VERSION
    n_nodes: int = Field(ge=1)
    constraint_dim: int = Field(ge=1)
    n_layers: int = Field(ge=1)
    init_seed: int
    train_seed: Optional[int] = None
    graph_fingerprint: Optional[str] = None
    best_val_loss: Optional[float] = None
    field_order: List[str] = Field(default_factory=list)
    config: Dict[str, Any] = Field(default_factory=dict)


class EvalReport(BaseModel):
    """Figures of merit for one method on one test realization."""

    method: Method
    re_x: float = Field(ge=0)
    re_g: float = Field(ge=0)
    acc: float = Field(ge=0, le=1)
    kappa: float = Field(gt=0)
    timing_seconds: float = Field(ge=0)
    conditioning: float = Field(ge=0)
    iters: int = 0
    community_acc: Optional[float] = Field(None, ge=0, le=1)
    metadata: Dict[str, Any] = Field(default_factory=dict)
