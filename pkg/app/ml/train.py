"""
Training, checkpointing and inference for SLoG-Net.

The trainer runs epochs x Q Adam steps over shuffled mini-batches, scores the
validation split every few steps and keeps the parameters with the lowest
validation loss.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from app.core.errors import (
    DimensionMismatchError,
    GraphMismatchError,
    TrainingDivergedError,
    VersionMismatchError,
)
from app.core.graph import SpectralGraph
from app.core.rng import SHUFFLE, VALIDATION, make_rng
from app.core.storage import fingerprint, read_f64, read_json, write_f64, write_json
from app.ml.datagen import Dataset
from app.ml.slog_net import (
    FIELD_ORDER,
    SlogModel,
    adam_step,
    backward,
    forward,
    init_model,
    layer_size,
    loss,
    make_optimizer,
    predict,
)
from app.models.records import MODEL_FORMAT_VERSION, ModelManifest, TrainConfig

logger = logging.getLogger(__name__)

MODEL_FILE = "model.json"
PARAMS_FILE = "params.f64le"
LOG_FILE = "training_log.json"


@dataclass
class TrainingLog:
    steps: List[Dict[str, float]] = field(default_factory=list)
    validations: List[Dict[str, float]] = field(default_factory=list)
    snapshots: List[np.ndarray] = field(default_factory=list, repr=False)
    best_step: Optional[int] = None
    best_val_loss: Optional[float] = None

    def record_step(self, step: int, epoch: int, batch: int, value: float) -> None:
        self.steps.append({"step": step, "epoch": epoch, "batch": batch, "loss": value})

    def record_validation(self, step: int, value: float, params: np.ndarray) -> None:
        self.validations.append({"step": step, "loss": value})
        self.snapshots.append(params)
        # Ties keep the earlier snapshot
        if self.best_val_loss is None or value < self.best_val_loss:
            self.best_val_loss = value
            self.best_step = step

    @property
    def best_params(self) -> Optional[np.ndarray]:
        for entry, params in zip(self.validations, self.snapshots):
            if entry["step"] == self.best_step:
                return params
        return None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "steps": self.steps,
            "validations": self.validations,
            "best_step": self.best_step,
            "best_val_loss": self.best_val_loss,
        }


def validation_loss(model: SlogModel, val_set: Dataset, seed: int) -> float:
    """Mean loss over the validation batches, with initial states fixed by ``seed``."""
    values = []
    for q, (X_q, Y_q) in enumerate(val_set.batches()):
        x_hat, _ = predict(model, Y_q, init_seed=seed, stream=(VALIDATION, q))
        values.append(float(loss(x_hat, X_q)))
    return float(np.mean(values))


def clone_model(model: SlogModel, flat: Optional[np.ndarray] = None) -> SlogModel:
    """Independent model with the same graph and shapes; parameters from ``flat`` when given."""
    clone = SlogModel(model.sg, model.layer_params())
    if flat is not None:
        clone.load_flat(flat)
    return clone


class SlogTrainer:
    """Adam training with seeded batch shuffling and validation-based model selection"""

    def __init__(self, model: SlogModel, cfg: Optional[TrainConfig] = None, config: Optional[Dict[str, Any]] = None):
        self.model = model
        self.cfg = cfg or TrainConfig()
        self.config = config or {}
        self.optimizer = make_optimizer(model, self.cfg)
        self.log = TrainingLog()

    def _check(self, ds: Dataset) -> None:
        if ds.manifest.n_nodes != self.model.n_nodes:
            raise DimensionMismatchError(
                f"{ds.manifest.split} split has N={ds.manifest.n_nodes}, model has N={self.model.n_nodes}"
            )

    def fit(self, dataset: Dataset, val_set: Dataset) -> Tuple[SlogModel, TrainingLog]:
        """
        Train for ``cfg.epochs`` passes over the mini-batches.

        Args:
            dataset: Training split
            val_set: Validation split

        Returns:
            Tuple of (model with the lowest validation loss, training log)
        """
        self._check(dataset)
        self._check(val_set)
        cfg = self.cfg
        total_steps = cfg.epochs * dataset.n_batches
        logger.info(
            f"Training K={self.model.n_layers}, d={self.model.constraint_dim} on "
            f"{dataset.n_batches} batches for {cfg.epochs} epochs ({total_steps} steps)"
        )

        step = 0
        for epoch in range(cfg.epochs):
            order = make_rng(cfg.seed, SHUFFLE, epoch).permutation(dataset.n_batches)
            epoch_losses = []
            for q in order:
                q = int(q)
                X_q, Y_q = dataset.batch(q)
                x_hat, _, trace = forward(self.model, Y_q, init_seed=cfg.seed, stream=(epoch, q))
                value = float(loss(x_hat.detach(), X_q))
                if not math.isfinite(value):
                    raise TrainingDivergedError(
                        f"training loss became {value} at step {step + 1} (epoch {epoch}, batch {q})",
                        log=self.log.to_dict(),
                    )
                grads = backward(self.model, trace, Y_q, X_q)
                adam_step(self.model, grads, self.optimizer)
                step += 1
                self.log.record_step(step, epoch, q, value)
                epoch_losses.append(value)

                if step % cfg.val_every_batches == 0 or step == total_steps:
                    self._validate(step, val_set)

            logger.info(f"Epoch {epoch + 1}/{cfg.epochs}: mean training loss {np.mean(epoch_losses):.4f}")

        best = clone_model(self.model, self.log.best_params)
        logger.info(f"Best validation loss {self.log.best_val_loss:.4f} at step {self.log.best_step}")
        return best, self.log

    def _validate(self, step: int, val_set: Dataset) -> None:
        value = validation_loss(self.model, val_set, self.cfg.seed)
        improved = self.log.best_val_loss is None or value < self.log.best_val_loss
        self.log.record_validation(step, value, self.model.flatten())
        logger.debug(f"Step {step}: validation loss {value:.6f}")
        if improved and self.cfg.checkpoint_dir:
            save_checkpoint(self.model, self.cfg.checkpoint_dir, self.cfg, best_val_loss=value, config=self.config)


def train(
    model: SlogModel,
    dataset: Dataset,
    val_set: Dataset,
    cfg: Optional[TrainConfig] = None,
    config: Optional[Dict[str, Any]] = None,
) -> Tuple[SlogModel, TrainingLog]:
    return SlogTrainer(model, cfg, config).fit(dataset, val_set)


def save_checkpoint(
    model: SlogModel,
    directory: Union[str, Path],
    cfg: Optional[TrainConfig] = None,
    best_val_loss: Optional[float] = None,
    log: Optional[TrainingLog] = None,
    config: Optional[Dict[str, Any]] = None,
) -> Path:
    """Write ``params.f64le`` then ``model.json`` (and ``training_log.json`` when given)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cfg = cfg or TrainConfig()
    write_f64(directory / PARAMS_FILE, model.flatten())
    manifest = ModelManifest(
        n_nodes=model.n_nodes,
        constraint_dim=model.constraint_dim,
        n_layers=model.n_layers,
        init_seed=cfg.seed,
        train_seed=cfg.seed,
        graph_fingerprint=fingerprint(model.sg.graph.adjacency),
        best_val_loss=best_val_loss,
        field_order=list(FIELD_ORDER),
        config=dict(config or cfg.model_dump(mode="json")),
    )
    write_json(directory / MODEL_FILE, manifest.model_dump(mode="json"))
    if log is not None:
        write_json(directory / LOG_FILE, log.to_dict())
    logger.info(f"Saved checkpoint to {directory}")
    return directory


def load_checkpoint(directory: Union[str, Path], sg: SpectralGraph) -> Tuple[SlogModel, ModelManifest]:
    """
    Restore a checkpoint onto graph ``sg``.

    Raises:
        VersionMismatchError: unknown format_version
        GraphMismatchError: checkpoint was trained on another graph
        CorruptPayloadError: parameter payload has the wrong size
    """
    directory = Path(directory)
    raw = read_json(directory / MODEL_FILE)
    version = raw.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise VersionMismatchError(f"{directory}: model format_version {version}, expected {MODEL_FORMAT_VERSION}")
    manifest = ModelManifest.model_validate(raw)

    graph_print = fingerprint(sg.graph.adjacency)
    if manifest.graph_fingerprint is not None and manifest.graph_fingerprint != graph_print:
        raise GraphMismatchError(
            f"checkpoint graph {manifest.graph_fingerprint[:12]} differs from dataset graph {graph_print[:12]}"
        )
    if manifest.n_nodes != sg.n_nodes:
        raise GraphMismatchError(f"checkpoint has N={manifest.n_nodes}, graph has {sg.n_nodes} nodes")

    size = layer_size(manifest.n_nodes, manifest.constraint_dim) * manifest.n_layers
    flat = read_f64(directory / PARAMS_FILE, (size,))

    # Shapes come from the manifest; values are overwritten right after
    model = init_model(manifest.n_nodes, manifest.constraint_dim, manifest.n_layers, manifest.init_seed, sg)
    model.load_flat(flat)
    return model, manifest


def infer(model: SlogModel, Y: np.ndarray, seed: int = 0) -> Tuple[np.ndarray, np.ndarray, float]:
    """
    Single forward pass.

    Returns:
        Tuple of (X^, g~, wall-clock seconds of the forward pass)
    """
    start = time.perf_counter()
    x_hat, g_tilde = predict(model, Y, init_seed=seed)
    seconds = time.perf_counter() - start
    return x_hat, g_tilde, seconds
