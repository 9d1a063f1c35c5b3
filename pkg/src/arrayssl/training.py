"""Losses, data splitting, the epoch loop and model checkpoint helpers.

The same loop drives both phases:

* in-painting pretraining: ``mse`` between reconstruction and the unmasked
  example, with a fresh random antenna mask drawn per example per visit;
* bandwidth transfer: the masked log-MSE of :func:`bandwidth_loss` on the
  bins that carry a labeled signal.
"""
from __future__ import annotations

import csv
import logging
import math
import warnings
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import Checkpoint, save_checkpoint
from .dsp import mask_batch
from .errors import ConfigError, NoSignalWarning, NonFiniteError, ShapeError
from .models import BandwidthNet, InpaintNet, build_from_config, summarize
from .tensorcore import Adam, DiffTensor, log, mse, no_grad, square
from .tensorcore.nn import Module

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 16
    initial_lr: float = 1e-3
    early_stop_patience: int = 30
    plateau_patience: int = 10
    lr_factor: float = 0.1
    val_fraction: float = 0.2
    seed: int = 0
    freeze_encoder: bool = False
    epsilon: float = 1e-6
    # None trains until early stopping fires
    max_epochs: int | None = None

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.initial_lr <= 0:
            raise ConfigError(f"initial_lr must be > 0, got {self.initial_lr}")
        if self.early_stop_patience < 1 or self.plateau_patience < 1:
            raise ConfigError("patience values must be >= 1")
        if not 0 < self.lr_factor < 1:
            raise ConfigError(f"lr_factor must be in (0, 1), got {self.lr_factor}")
        if not 0 < self.val_fraction < 1:
            raise ConfigError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if self.max_epochs is not None and self.max_epochs < 0:
            raise ConfigError(f"max_epochs must be >= 0, got {self.max_epochs}")

    def to_metadata(self) -> dict[str, str]:
        return {f"config.{k}": str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_metadata(cls, meta: dict[str, str]) -> "TrainConfig":
        kwargs = {}
        for f in fields(cls):
            raw = meta.get(f"config.{f.name}")
            if raw is None:
                continue
            if raw == "None":
                kwargs[f.name] = None
            elif f.name == "freeze_encoder":
                kwargs[f.name] = raw == "True"
            elif f.name in ("initial_lr", "lr_factor", "val_fraction", "epsilon"):
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = int(raw)
        return cls(**kwargs)


PRETRAIN_DEFAULTS = TrainConfig()
TRANSFER_DEFAULTS = TrainConfig(initial_lr=0.01)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    saved: bool


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    records: list[EpochRecord]
    initial_val_loss: float
    best_epoch: int | None

    @property
    def best_val_loss(self) -> float:
        return min((r.val_loss for r in self.records), default=math.inf)


@dataclass
class EvalResult:
    mean_loss: float
    best_case: float
    per_example: np.ndarray


# -- losses ---------------------------------------------------------------
def mse_loss(recon, target) -> DiffTensor:
    return mse(recon, target)


def bandwidth_loss_per_example(target, pred: DiffTensor, epsilon: float = 1e-6) -> DiffTensor:
    """``sum_{i: B_i != 0} (log B_i - log(eps + B_hat_i))**2`` for each row.

    Bins with ``B_i == 0`` are multiplied by an exact zero mask, so the
    gradient there is exactly zero.
    """
    target = np.asarray(target, dtype=np.float64)
    if target.ndim == 1:
        target = target[None]
    if pred.ndim == 1:
        pred = pred.reshape(1, -1)
    if target.shape != pred.shape:
        raise ShapeError(f"bandwidth_loss: target {target.shape} vs prediction {pred.shape}")
    mask = target != 0
    empty = ~mask.any(axis=1)
    if empty.any():
        warnings.warn(f"{int(empty.sum())} example(s) without any labeled signal contribute 0 loss",
                      NoSignalWarning, stacklevel=2)
    # constants follow the prediction's dtype so an f64 check stays f64
    log_target = DiffTensor(np.log(np.where(mask, target, 1.0)), dtype=pred.dtype)
    keep = DiffTensor(mask, dtype=pred.dtype)
    # unlabeled bins are replaced before the log so that any value there,
    # even a non-positive one, contributes exactly 0 loss and 0 gradient
    safe = pred * keep + DiffTensor(~mask, dtype=pred.dtype)
    diff = (log(safe + epsilon) - log_target) * keep
    return square(diff).sum(axis=1)


def bandwidth_loss(target, pred: DiffTensor, epsilon: float = 1e-6) -> DiffTensor:
    """Batch mean of :func:`bandwidth_loss_per_example`."""
    return bandwidth_loss_per_example(target, pred, epsilon).mean()


# An objective maps (model, inputs, targets) to (scalar batch loss, per-example losses).
Objective = Callable[[Module, np.ndarray, np.ndarray], tuple[DiffTensor, np.ndarray]]


def inpaint_objective(model: Module, inputs, targets):
    _, recon = model(DiffTensor(inputs))
    loss = mse_loss(recon, DiffTensor(targets))
    per = ((recon.data.astype(np.float64) - targets) ** 2).reshape(len(inputs), -1).mean(axis=1)
    return loss, per


def make_bandwidth_objective(epsilon: float = 1e-6) -> Objective:
    def objective(model: Module, inputs, targets):
        pred = model(DiffTensor(inputs))
        per = bandwidth_loss_per_example(targets, pred, epsilon)
        return per.mean(), per.data.astype(np.float64)

    return objective


def inpaint_corruption(inputs, targets, rng: np.random.Generator):
    masked, _, _ = mask_batch(inputs, rng)
    return masked, inputs


# -- data -----------------------------------------------------------------
def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Shuffled disjoint ``(train, val)`` index arrays; ``round(n * val_fraction)`` go to validation."""
    if n < 2:
        raise ConfigError(f"need at least 2 examples to split, got {n}")
    if not 0 < val_fraction < 1:
        raise ConfigError(f"val_fraction must be in (0, 1), got {val_fraction}")
    n_val = min(max(int(round(n * val_fraction)), 1), n - 1)
    perm = np.random.default_rng(np.random.SeedSequence([seed, 7])).permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def split_dataset(examples, val_fraction: float, seed: int):
    examples = np.asarray(examples)
    tr, va = split_indices(len(examples), val_fraction, seed)
    return examples[tr], examples[va]


def evaluate(model: Module, inputs, targets, objective: Objective, batch_size: int = 16) -> EvalResult:
    """Mean and best-case (minimum) per-example loss in eval mode."""
    if len(inputs) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    was_training = model.training
    model.eval()
    per = []
    with no_grad(), warnings.catch_warnings():
        warnings.simplefilter("ignore", NoSignalWarning)
        for start in range(0, len(inputs), batch_size):
            _, p = objective(model, inputs[start : start + batch_size], targets[start : start + batch_size])
            per.append(p)
    model.train(was_training)
    per = np.concatenate(per)
    return EvalResult(float(per.mean()), float(per.min()), per)


# -- schedule -------------------------------------------------------------
class PlateauMonitor:
    """Best-so-far tracking, reduce-on-plateau and early stopping.

    An epoch improves only if its validation loss is strictly below every
    previous one. After ``plateau_patience`` consecutive non-improving epochs
    the learning rate is multiplied by ``lr_factor`` (and the plateau count
    restarts); after ``early_stop_patience`` the run stops.
    """

    def __init__(self, lr: float, early_stop_patience: int = 30, plateau_patience: int = 10, lr_factor: float = 0.1):
        self.lr = lr
        self.early_stop_patience = early_stop_patience
        self.plateau_patience = plateau_patience
        self.lr_factor = lr_factor
        self.best = math.inf
        self.best_epoch: int | None = None
        self.since_best = 0
        self.since_drop = 0
        self.stopped = False

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record one epoch; returns whether it improved. Adjusts ``lr`` for the next epoch."""
        improved = val_loss < self.best
        if improved:
            self.best, self.best_epoch = val_loss, epoch
            self.since_best = self.since_drop = 0
        else:
            self.since_best += 1
            self.since_drop += 1
        if self.since_best >= self.early_stop_patience:
            self.stopped = True
        elif self.since_drop >= self.plateau_patience:
            self.lr *= self.lr_factor
            self.since_drop = 0
        return improved


# -- model <-> checkpoint -------------------------------------------------
def model_checkpoint(model: Module, config: TrainConfig | None = None, extra: dict | None = None) -> Checkpoint:
    meta: dict[str, str] = {}
    if hasattr(model, "config"):
        meta.update({f"arch.{k}": str(v) for k, v in model.config().items()})
    meta.update({f"manifest.{i}": row for i, row in enumerate(summarize(model))})
    if config is not None:
        meta.update(config.to_metadata())
    if extra:
        meta.update({k: str(v) for k, v in extra.items()})
    return Checkpoint(OrderedDict(model.state_dict()), meta)


def model_from_checkpoint(ckpt: Checkpoint) -> Module:
    arch = ckpt.section("arch")
    if not arch:
        raise ConfigError("checkpoint carries no architecture metadata")
    model = build_from_config(arch)
    model.load_state_dict(ckpt.tensors)
    if isinstance(model, BandwidthNet) and ckpt.metadata.get("config.freeze_encoder") == "True":
        model.freeze_encoder = True
    return model


def write_metrics_csv(path, records: list[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "lr", "saved"])
        for r in records:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.lr), int(r.saved)])


# -- loop -----------------------------------------------------------------
def _trainable(model: Module) -> list[DiffTensor]:
    if hasattr(model, "trainable_parameters"):
        return model.trainable_parameters()
    return model.parameters()


def train_loop(
    model: Module,
    inputs,
    targets,
    config: TrainConfig,
    objective: Objective,
    corruption_fn=None,
    checkpoint_path=None,
    metrics_path=None,
) -> TrainResult:
    """Train until early stopping (or ``config.max_epochs``); return the best checkpoint.

    ``targets=None`` means the inputs are their own targets (pretraining).
    Validation pairs are corrupted once with a fixed per-run seed so the
    validation loss is comparable across epochs.
    """
    config.validate()
    inputs = np.asarray(inputs, dtype=np.float32)
    targets = inputs if targets is None else np.asarray(targets, dtype=np.float32)
    if len(inputs) == 0:
        raise ConfigError("empty dataset")
    if len(targets) != len(inputs):
        raise ShapeError(f"{len(inputs)} inputs but {len(targets)} targets")
    tr, va = split_indices(len(inputs), config.val_fraction, config.seed)
    if len(va) == 0:
        raise ConfigError("validation split is empty")
    x_tr, y_tr = inputs[tr], targets[tr]
    x_va, y_va = inputs[va], targets[va]
    if corruption_fn is not None:
        x_va, y_va = corruption_fn(x_va, y_va, np.random.default_rng(np.random.SeedSequence([config.seed, 3])))

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    opt = Adam(_trainable(model), lr=config.initial_lr)
    monitor = PlateauMonitor(config.initial_lr, config.early_stop_patience, config.plateau_patience, config.lr_factor)

    initial = evaluate(model, x_va, y_va, objective, config.batch_size).mean_loss
    logger.info("initial validation loss %.6f", initial)
    best_state = model_checkpoint(model, config, {"train.epoch": -1, "train.val_loss": repr(initial)})
    records: list[EpochRecord] = []

    epoch = 0
    while config.max_epochs is None or epoch < config.max_epochs:
        model.train()
        lr_used = opt.lr = monitor.lr
        perm = rng.permutation(len(x_tr))
        batch_losses = []
        for b, start in enumerate(range(0, len(perm), config.batch_size)):
            idx = perm[start : start + config.batch_size]
            xb, yb = x_tr[idx], y_tr[idx]
            if corruption_fn is not None:
                xb, yb = corruption_fn(xb, yb, rng)
            opt.zero_grad()
            loss, _ = objective(model, xb, yb)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteError(f"non-finite loss {value} at epoch {epoch}, batch {b}", batch_index=b)
            loss.backward()
            try:
                opt.step()
            except NonFiniteError as exc:
                raise NonFiniteError(f"{exc} (epoch {epoch}, batch {b})", batch_index=b) from None
            batch_losses.append(value)

        train_loss = float(np.mean(batch_losses))
        val_loss = evaluate(model, x_va, y_va, objective, config.batch_size).mean_loss
        if not math.isfinite(val_loss):
            raise NonFiniteError(f"non-finite validation loss at epoch {epoch}")
        improved = monitor.update(epoch, val_loss)
        if improved:
            best_state = model_checkpoint(model, config, {"train.epoch": epoch, "train.val_loss": repr(val_loss)})
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, best_state)
        records.append(EpochRecord(epoch, train_loss, val_loss, lr_used, improved))
        logger.info("epoch %d train %.6f val %.6f lr %.2e%s", epoch, train_loss, val_loss, lr_used,
                    " *" if improved else "")
        if metrics_path is not None:
            write_metrics_csv(metrics_path, records)
        epoch += 1
        if monitor.stopped:
            break

    if checkpoint_path is not None and not records:
        save_checkpoint(checkpoint_path, best_state)
    return TrainResult(best_state, records, initial, monitor.best_epoch)


# -- the two phases -------------------------------------------------------
def pretrain(examples, config: TrainConfig = PRETRAIN_DEFAULTS, net: InpaintNet | None = None, **io) -> tuple[InpaintNet, TrainResult]:
    """Channel in-painting pretraining on standardized ``[M, 2A, T, F]`` examples."""
    examples = np.asarray(examples, dtype=np.float32)
    if net is None:
        net = InpaintNet(n_antennas=examples.shape[1] // 2, seed=config.seed)
    result = train_loop(net, examples, None, config, inpaint_objective, inpaint_corruption, **io)
    net.load_state_dict(result.checkpoint.tensors)
    return net, result


def build_transfer_net(n_antennas: int, n_chunks: int, seed: int, encoder_source: Module | None = None,
                       freeze: bool = False) -> BandwidthNet:
    """Bandwidth net with decoder weights fixed by ``seed``; optionally a copied encoder."""
    from .models import transfer_encoder

    net = BandwidthNet(n_antennas=n_antennas, n_chunks=n_chunks, seed=seed)
    if encoder_source is not None:
        transfer_encoder(encoder_source, net, freeze=freeze)
    return net


def train_bandwidth(examples, targets, config: TrainConfig = TRANSFER_DEFAULTS, encoder_source: Module | None = None,
                    net: BandwidthNet | None = None, **io) -> tuple[BandwidthNet, TrainResult]:
    examples = np.asarray(examples, dtype=np.float32)
    if net is None:
        net = build_transfer_net(examples.shape[1] // 2, examples.shape[2], config.seed, encoder_source,
                                 config.freeze_encoder)
    objective = make_bandwidth_objective(config.epsilon)
    result = train_loop(net, examples, targets, config, objective, **io)
    net.load_state_dict(result.checkpoint.tensors)
    return net, result
