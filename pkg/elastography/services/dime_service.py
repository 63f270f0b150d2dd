"""
Training and inference for the learned inversion.

Targets enter the network in kPa; patch inputs are optionally divided by
their peak displacement magnitude. Both conversions happen here and nowhere
else.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from django.conf import settings
from torch import nn

from ..exceptions import NumericalError, TrainingDiverged, ValidationError
from ..fields import ComplexField, ScalarField, derive_seed, make_rng
from .dime_model import UNet, UNetConfig, backward, build_model, composite_loss
from .patch_service import INFER_PATCH_SIZE, INFER_STRIDE, PatchSet, aggregate, extract_inference
from .performance_monitor import monitor_performance

logger = logging.getLogger(__name__)

PA_PER_KPA = 1000.0
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
HISTORY_COLUMNS = ["epoch", "lr", "train_loss", "val_loss"]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    batch_size: int = 32
    epochs: int = 50
    lr_decay: float = 0.8
    decay_every: int = 20  # epochs
    tv_lambda: float = 1e-3
    tv_epsilon: float = 1e-8
    patience: int = 10
    seed: int = 0
    base_channels: int = 32
    normalize_patches: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ValidationError(f"lr must be > 0, got {self.lr}")
        if not (0 < self.lr_decay <= 1):
            raise ValidationError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.tv_epsilon <= 0:
            raise ValidationError(f"tv_epsilon must be > 0, got {self.tv_epsilon}")
        if self.tv_lambda < 0:
            raise ValidationError(f"tv_lambda must be >= 0, got {self.tv_lambda}")
        if self.batch_size < 1 or self.epochs < 1 or self.decay_every < 1 or self.patience < 1:
            raise ValidationError("batch_size, epochs, decay_every and patience must be >= 1")

    @property
    def unet(self) -> UNetConfig:
        return UNetConfig(base_channels=self.base_channels)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Learning rate in effect during 0-based ``epoch``."""
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.decay_every)


def make_optimizer(model: nn.Module, cfg: TrainConfig) -> Tuple[torch.optim.Adam, torch.optim.lr_scheduler.StepLR]:
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=ADAM_BETAS, eps=ADAM_EPS)
    scheduler = torch.optim.lr_scheduler.StepLR(optimizer, step_size=cfg.decay_every, gamma=cfg.lr_decay)
    return optimizer, scheduler


def adam_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor],
    state: Optional[torch.optim.Adam],
    lr: float,
) -> Tuple[Sequence[torch.Tensor], torch.optim.Adam]:
    """One bias-corrected Adam update of ``params`` in place.

    ``state`` is the optimizer holding the moment estimates; pass None on the
    first step to create it.
    """
    if state is None:
        state = torch.optim.Adam(params, lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)
    for group in state.param_groups:
        group["lr"] = lr
    for p, g in zip(params, grads):
        p.grad = g.detach().clone()
    state.step()
    return params, state


class EarlyStopping:
    """Stops after ``patience`` consecutive epochs without a new best validation loss."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValidationError(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.best = float("inf")
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, loss: float) -> bool:
        """Record ``loss`` for ``epoch``; True when training should stop."""
        if loss < self.best:
            self.best = loss
            self.best_epoch = epoch
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    @property
    def improved(self) -> bool:
        return self.bad_epochs == 0


@dataclass(frozen=True)
class EpochRecord:
    epoch: int  # 1-based
    lr: float
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    model: UNet
    history: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    stopped_early: bool = False


def history_frame(history: Sequence[EpochRecord]) -> pd.DataFrame:
    return pd.DataFrame([asdict(r) for r in history], columns=HISTORY_COLUMNS)


def write_history(history: Sequence[EpochRecord], path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    history_frame(history).to_csv(path, index=False, float_format="%.9g")


def normalize_inputs(inputs: np.ndarray) -> np.ndarray:
    """Divide each (2, h, w) input by its peak displacement magnitude."""
    peak = np.sqrt(inputs[:, 0] ** 2 + inputs[:, 1] ** 2).max(axis=(1, 2))
    scale = np.where(peak > 0, peak, 1.0)
    return inputs / scale[:, None, None, None]


def patch_tensors(
    patch_set: PatchSet,
    normalize: bool = True,
    dtype: torch.dtype = torch.float32,
) -> Tuple[torch.Tensor, Optional[torch.Tensor]]:
    """Network-ready inputs and, if present, kPa targets of shape (N, 1, h, w)."""
    if not len(patch_set):
        raise ValidationError("PatchSet is empty")
    inputs = patch_set.inputs()
    if normalize:
        inputs = normalize_inputs(inputs)
    targets = None
    if patch_set.has_targets:
        targets = torch.as_tensor(patch_set.targets()[:, None] / PA_PER_KPA, dtype=dtype)
    return torch.as_tensor(inputs, dtype=dtype), targets


def _batches(order: np.ndarray, batch_size: int) -> List[np.ndarray]:
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    # batch norm cannot take a single sample at a 1x1 bottleneck
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches.pop()
    return batches


def evaluate_loss(model: nn.Module, inputs: torch.Tensor, targets: torch.Tensor, cfg: TrainConfig) -> float:
    """Sample-weighted mean of the composite loss, batch norm on running statistics."""
    model.eval()
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(inputs), cfg.batch_size):
            x = inputs[start:start + cfg.batch_size]
            y = targets[start:start + cfg.batch_size]
            total += composite_loss(model(x), y, cfg.tv_lambda, cfg.tv_epsilon).item() * len(x)
    return total / len(inputs)


@monitor_performance("train")
def train(train_set: PatchSet, val_set: Optional[PatchSet], cfg: TrainConfig = TrainConfig()) -> TrainResult:
    """Seeded mini-batch training with step decay, early stopping and best-state retention."""
    if not len(train_set) or not train_set.has_targets:
        raise ValidationError("Training set is empty or lacks targets")
    overlap = set(train_set.source_ids) & set(val_set.source_ids if val_set is not None else [])
    if overlap:
        raise ValidationError(f"Source fields shared between train and validation: {sorted(overlap)}")

    torch.set_num_threads(getattr(settings, "ELASTOLAB_TORCH_THREADS", 1))
    model = build_model(cfg.unet, seed=cfg.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer, scheduler = make_optimizer(model, cfg)
    x_train, y_train = patch_tensors(train_set, cfg.normalize_patches)
    if val_set is not None and len(val_set):
        x_val, y_val = patch_tensors(val_set, cfg.normalize_patches)
    else:
        logger.warning("No validation patches; early stopping follows the training loss")
        x_val = y_val = None

    stopper = EarlyStopping(cfg.patience)
    result = TrainResult(model=model)
    best_state = copy.deepcopy(model.state_dict())
    logger.info(f"Training on {len(x_train)} patches, validating on {0 if x_val is None else len(x_val)}")

    for epoch in range(cfg.epochs):
        lr = optimizer.param_groups[0]["lr"]
        order = make_rng(derive_seed(cfg.seed, epoch)).permutation(len(x_train))
        model.train()
        running = 0.0
        seen = 0
        for batch in _batches(order, cfg.batch_size):
            index = torch.as_tensor(batch)
            try:
                loss, grads = backward(model, x_train[index], y_train[index], cfg.tv_lambda, cfg.tv_epsilon)
            except NumericalError as e:
                raise TrainingDiverged(f"Epoch {epoch + 1}: {e}", params=best_state, history=result.history) from e
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"Epoch {epoch + 1}: non-finite training loss", params=best_state, history=result.history
                )
            adam_step(params, [grads[name] for name, p in model.named_parameters() if p.requires_grad], optimizer, lr)
            running += loss.item() * len(batch)
            seen += len(batch)
        train_loss = running / seen

        val_loss = train_loss if x_val is None else evaluate_loss(model, x_val, y_val, cfg)
        if not np.isfinite(val_loss):
            raise TrainingDiverged(
                f"Epoch {epoch + 1}: non-finite validation loss", params=best_state, history=result.history
            )
        result.history.append(EpochRecord(epoch + 1, lr, train_loss, val_loss))
        logger.info(f"Epoch {epoch + 1}/{cfg.epochs} lr={lr:.3g} train={train_loss:.5g} val={val_loss:.5g}")

        stop = stopper.update(epoch + 1, val_loss)
        if stopper.improved:
            best_state = copy.deepcopy(model.state_dict())
        if stop:
            logger.info(f"Early stopping at epoch {epoch + 1}; best epoch {stopper.best_epoch}")
            result.stopped_early = True
            break
        scheduler.step()

    model.load_state_dict(best_state)
    model.eval()
    result.best_epoch = stopper.best_epoch
    result.best_val_loss = stopper.best
    return result


def _model_dtype(model: nn.Module) -> torch.dtype:
    param = next(model.parameters(), None)
    return torch.float32 if param is None else param.dtype


@monitor_performance("dime_invert")
def dime_invert(
    model: nn.Module,
    u: ComplexField,
    size: int = INFER_PATCH_SIZE,
    stride: int = INFER_STRIDE,
    normalize: bool = True,
    batch_size: int = 256,
) -> ScalarField:
    """Tile ``u`` into overlapping patches, predict each in eval mode and average overlaps (Pa)."""
    patches = extract_inference(u, size=size, stride=stride)
    inputs, _ = patch_tensors(patches, normalize, dtype=_model_dtype(model))
    model.eval()
    outputs = []
    with torch.no_grad():
        for start in range(0, len(inputs), batch_size):
            outputs.append(model(inputs[start:start + batch_size])[:, 0].cpu().numpy())
    predictions = np.concatenate(outputs).astype(np.float64) * PA_PER_KPA
    stiffness, covered = aggregate(zip((p.origin for p in patches), predictions), u.shape, u.spacing)
    if not covered.all():
        raise NumericalError("Inference tiling left pixels uncovered")
    return stiffness
