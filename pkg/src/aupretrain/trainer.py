"""Two-stage training: noisy-label pre-training, then per-fold fine-tuning."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .datapipe import AugmentConfig, Manifest, as_dataset, batch_indices
from .errors import ConfigError
from .metrics import FoldPredictions
from .network import replace_head
from .optim import Adam
from .splits import holdout_images, holdout_subjects

log = logging.getLogger(__name__)

STOP_REASONS = ("converged", "max_epochs", "early_stopped", "callback")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 500
    early_stop_patience: int | None = None
    convergence_tol: float = 1e-4
    convergence_window: int = 5
    val_fraction: float = 0.05
    seed: int = 0
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)
    in_channels: int = 1
    eval_batch_size: int = 128

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be at least 1, got {self.max_epochs}")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ConfigError(f"early_stop_patience must be at least 1, got {self.early_stop_patience}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if self.lr < 0 or self.convergence_tol <= 0 or self.convergence_window < 1:
            raise ConfigError("lr must be non-negative; convergence_tol and convergence_window positive")
        if self.in_channels not in (1, 3):
            raise ConfigError(f"in_channels must be 1 or 3, got {self.in_channels}")

    @classmethod
    def for_pretraining(cls, **overrides):
        return cls(**{"lr": 0.005, "max_epochs": 500, "early_stop_patience": None, **overrides})

    @classmethod
    def for_finetuning(cls, **overrides):
        return cls(**{"lr": 0.0001, "max_epochs": 500, "early_stop_patience": 10, **overrides})

    def to_dict(self):
        d = asdict(self)
        if self.augment is not None:
            d["augment"]["scale_range"] = list(self.augment.scale_range)
        return d

    def config_hash(self):
        return config_hash(self.to_dict())


def config_hash(obj):
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float | None
    wall_time: float


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    stop_reason: str | None = None
    best_epoch: int | None = None

    def train_losses(self):
        return [e.train_loss for e in self.epochs]

    def val_losses(self):
        return [e.val_loss for e in self.epochs]

    def to_jsonl(self):
        lines = [json.dumps(asdict(e), sort_keys=True) for e in self.epochs]
        lines.append(json.dumps({"stop_reason": self.stop_reason, "best_epoch": self.best_epoch}, sort_keys=True))
        return "\n".join(lines) + "\n"


class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without a strictly lower validation loss."""

    def __init__(self, patience):
        self.patience = patience
        self.best = float("inf")
        self.best_epoch = None
        self.bad_epochs = 0

    def update(self, epoch, val_loss):
        """Record one epoch; returns True when training should stop."""
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def has_converged(losses, tol, window):
    """Relative train-loss improvement over the last ``window`` epochs below ``tol``."""
    if len(losses) <= window:
        return False
    ref, cur = losses[-1 - window], losses[-1]
    if ref == 0:
        return True
    return (ref - cur) / abs(ref) < tol


def _dropout_rng(seed, epoch, step):
    return np.random.default_rng([int(seed), int(epoch), int(step), 1])


def dataset_loss(net, ds, batch_size=128, hook=None, stage="val"):
    """Mean eval-mode BCE over ``ds``."""
    total, n = 0.0, 0
    with T.no_grad():
        for idx in batch_indices(len(ds), batch_size, shuffle=False):
            if hook is not None:
                hook(stage, ds.subject_ids[idx])
            X, Y = ds.batch(idx)
            loss = T.bce_loss(net.forward(X), Y.astype(net.dtype))
            total += float(loss.item()) * len(idx)
            n += len(idx)
    return total / n


def fit(net, train_ds, cfg, val_ds=None, stopper=None, converge=False, hook=None, log_file=None, on_epoch_end=None):
    """Adam/BCE training loop shared by both stages.

    ``stopper`` (an :class:`EarlyStopping`) monitors the validation loss and
    the weights of its best epoch are restored at the end. With ``converge``
    set, training stops once the train loss has plateaued. ``on_epoch_end``
    is called as ``on_epoch_end(net, record)`` after every epoch; a true
    return value stops training.
    """
    if train_ds.labels.shape[1] != net.num_outputs:
        raise ConfigError(f"labels have width {train_ds.labels.shape[1]}, network emits {net.num_outputs}")
    opt = Adam(net.parameters, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    history = TrainHistory()
    best_state = None
    reason = "max_epochs"
    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        total, n = 0.0, 0
        for step, idx in enumerate(batch_indices(len(train_ds), cfg.batch_size, cfg.seed, epoch, shuffle=True)):
            if hook is not None:
                hook("train", train_ds.subject_ids[idx])
            X, Y = train_ds.batch(idx, epoch, training=True)
            out = net.forward(X, training=True, rng=_dropout_rng(cfg.seed, epoch, step))
            loss = T.bce_loss(out, Y.astype(net.dtype))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.item()) * len(idx)
            n += len(idx)
        val_loss = dataset_loss(net, val_ds, cfg.eval_batch_size, hook) if val_ds is not None else None
        rec = EpochRecord(epoch + 1, total / n, val_loss, time.perf_counter() - t0)
        history.epochs.append(rec)
        log.info("epoch %d train_loss %.5f val_loss %s", rec.epoch, rec.train_loss, val_loss)
        if log_file is not None:
            log_file.write(json.dumps(asdict(rec), sort_keys=True) + "\n")
            log_file.flush()
        if stopper is not None and val_loss is not None:
            stop = stopper.update(rec.epoch, val_loss)
            if stopper.best_epoch == rec.epoch:
                best_state = net.state_dict()
            if stop:
                reason = "early_stopped"
                break
        if converge and has_converged(history.train_losses(), cfg.convergence_tol, cfg.convergence_window):
            reason = "converged"
            break
        if on_epoch_end is not None and on_epoch_end(net, rec):
            reason = "callback"
            break
    if best_state is not None:
        net.load_state_dict(best_state)
        history.best_epoch = stopper.best_epoch
    history.stop_reason = reason
    return history


def _open_log(path):
    if path is None:
        return None
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return open(path, "w", encoding="utf-8")


def pretrain(net, data, cfg=None, cache=None, hook=None, log_path=None):
    """Train ``net`` in place on noisy binary labels.

    A random ``cfg.val_fraction`` of images is held out as a test split whose
    loss is logged each epoch. Training stops on convergence of the train
    loss or after ``cfg.max_epochs``.
    """
    cfg = cfg or TrainConfig.for_pretraining()
    if isinstance(data, Manifest) and data.label_kind != "binary":
        raise ConfigError("pre-training expects binary labels")
    ds = as_dataset(data, cfg.in_channels, cfg.augment, cfg.seed, cache)
    if ds.labels.shape[1] != net.num_outputs:
        raise ConfigError(f"manifest has {ds.labels.shape[1]} label columns, network emits {net.num_outputs}")
    train_idx, test_idx = holdout_images(len(ds), cfg.val_fraction, cfg.seed)
    fh = _open_log(log_path)
    try:
        history = fit(net, ds.subset(train_idx), cfg, val_ds=ds.subset(test_idx), converge=True, hook=hook, log_file=fh)
    finally:
        if fh is not None:
            fh.close()
    return net, history


@dataclass
class FinetuneResult:
    networks: list
    histories: list
    predictions: list  # FoldPredictions per fold


def finetune(pretrained, data, folds, cfg=None, cache=None, hook=None, log_dir=None, head_seed=None):
    """Fine-tune a copy of ``pretrained`` on each fold's training subjects.

    The output layer is replaced when its width differs from the label width.
    A subject-disjoint ``cfg.val_fraction`` of the training subjects drives
    early stopping; the best-validation weights are kept and then scored on
    the fold's test subjects.
    """
    cfg = cfg or TrainConfig.for_finetuning()
    ds = as_dataset(data, cfg.in_channels, cfg.augment, cfg.seed, cache)
    width = ds.labels.shape[1]
    nets, histories, preds = [], [], []
    for f in range(folds.k):
        train_idx, test_idx = folds.fold_indices(ds, f)
        if len(train_idx) == 0 or len(test_idx) == 0:
            raise ConfigError(f"fold {f} has an empty train or test split")
        tr, va = holdout_subjects(ds.subject_ids[train_idx], cfg.val_fraction, cfg.seed + f)
        fold_cfg = replace(cfg, seed=cfg.seed + f)
        net = pretrained.copy()
        if net.num_outputs != width:
            net = replace_head(net, width, (head_seed if head_seed is not None else cfg.seed) + f)
        stopper = EarlyStopping(cfg.early_stop_patience) if cfg.early_stop_patience else None
        fh = _open_log(Path(log_dir) / f"fold{f}.jsonl" if log_dir is not None else None)
        try:
            hist = fit(
                net, ds.subset(train_idx[tr]), fold_cfg, val_ds=ds.subset(train_idx[va]),
                stopper=stopper, hook=hook, log_file=fh,
            )
        finally:
            if fh is not None:
                fh.close()
        scores, labels = evaluate_model(net, ds.subset(test_idx), cfg.eval_batch_size, hook=hook)
        nets.append(net)
        histories.append(hist)
        preds.append(FoldPredictions(f, [int(i) for i in test_idx], scores, labels, list(ds.subject_ids[test_idx])))
    return FinetuneResult(nets, histories, preds)


def evaluate_model(net, data, batch_size=128, in_channels=None, cache=None, hook=None):
    """Eval-mode scores (N, L) and aligned ground-truth labels, no augmentation."""
    ds = as_dataset(data, in_channels or net.in_channels, None, 0, cache)
    if ds.labels.shape[1] != net.num_outputs:
        raise ConfigError(f"labels have width {ds.labels.shape[1]}, network emits {net.num_outputs}")
    scores = []
    with T.no_grad():
        for idx in batch_indices(len(ds), batch_size, shuffle=False):
            if hook is not None:
                hook("test", ds.subject_ids[idx])
            X, _ = ds.batch(idx)
            scores.append(net.forward(X).data)
    return np.concatenate(scores).astype(np.float64), np.asarray(ds.labels).astype(np.int64)
