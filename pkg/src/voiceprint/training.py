"""SGD-with-momentum training loop with plateau LR scheduling and early
stopping.

Improvement is strict everywhere: a validation loss counts as better only
when it is below best - threshold. The LR scheduler resets its patience
counter after each reduction; the early stopper never resets except on
improvement, and it cannot fire before min_epochs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, VoiceprintError
from .losses import LossConfig, inference_scores, loss_forward_backward
from .network import EmbeddingNetwork, stack_features


class TrainingDivergedError(VoiceprintError):
    """Non-finite loss or gradient during optimization."""


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 1e-4
    plateau_factor: float = 0.1
    plateau_patience: int = 5
    plateau_threshold: float = 1e-4
    early_stop_patience: int = 15
    min_epochs: int = 30
    max_epochs: int = 120
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must be in (0, 1)")
        if self.min_epochs > self.max_epochs:
            raise ValueError("min_epochs must not exceed max_epochs")
        if self.batch_size < 1 or self.lr0 <= 0:
            raise ValueError("batch_size and lr0 must be positive")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_top1: float
    lr: float

    def __post_init__(self):
        if self.lr <= 0 or not (math.isfinite(self.train_loss) and math.isfinite(self.val_loss)):
            raise ValueError("epoch record with non-finite loss or bad lr")

    def as_line(self) -> str:
        return f"{self.epoch}\t{self.train_loss!r}\t{self.val_loss!r}\t{self.val_top1!r}\t{self.lr!r}"


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             state: dict[str, np.ndarray], cfg: TrainConfig, lr: float) -> None:
    """v <- momentum*v + (grad + wd*param); param <- param - lr*v. In place."""
    for name, param in params.items():
        grad = grads[name]
        if not np.all(np.isfinite(grad)):
            raise TrainingDivergedError(f"non-finite gradient for {name}")
        update = grad + cfg.weight_decay * param
        vel = state.get(name)
        if vel is None:
            vel = state[name] = np.zeros_like(param)
        vel *= cfg.momentum
        vel += update
        param -= lr * vel


class _Improvement:
    """Tracks best-so-far with the strict `< best - threshold` rule."""

    def __init__(self, threshold: float):
        self.threshold = threshold
        self.best = math.inf
        self.streak = 0  # consecutive non-improving epochs

    def update(self, value: float) -> bool:
        if value < self.best - self.threshold:
            self.best = value
            self.streak = 0
            return True
        self.streak += 1
        return False


def plateau_lr_sequence(val_losses, cfg: TrainConfig) -> list[float]:
    """LR in effect at each epoch; reductions apply from the next epoch on."""
    tracker = _Improvement(cfg.plateau_threshold)
    lr = cfg.lr0
    lrs = []
    for v in val_losses:
        lrs.append(lr)
        if not tracker.update(v) and tracker.streak >= cfg.plateau_patience:
            lr *= cfg.plateau_factor
            tracker.streak = 0
    return lrs


def early_stop_decisions(val_losses, cfg: TrainConfig) -> list[bool]:
    """Per-epoch stop flags: floor at min_epochs, then patience exhausted."""
    tracker = _Improvement(cfg.plateau_threshold)
    flags = []
    for epoch, v in enumerate(val_losses, start=1):
        tracker.update(v)
        flags.append(epoch >= cfg.min_epochs
                     and tracker.streak >= cfg.early_stop_patience)
    return flags


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator):
    """Seeded shuffled index batches covering 0..n-1 exactly once."""
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


@dataclass
class TrainResult:
    best_net: EmbeddingNetwork
    records: list[EpochRecord]
    best_epoch: int
    label_order: list[str]
    stopped_early: bool = False


class FeatureBatcher:
    """Binds manifest entries to their cached feature arrays and labels."""

    def __init__(self, entries, features, label_order):
        self.entries = list(entries)
        index = {sp: i for i, sp in enumerate(label_order)}
        self.labels = np.array([index[e.speaker_id] for e in self.entries])
        self._features = features

    def __len__(self):
        return len(self.entries)

    def batch(self, idx: np.ndarray, dtype) -> tuple[np.ndarray, np.ndarray]:
        arrays = [self._features[self.entries[i].path] for i in idx]
        return stack_features(arrays).astype(dtype, copy=False), self.labels[idx]


def _evaluate_split(net: EmbeddingNetwork, batcher: FeatureBatcher,
                    loss_cfg: LossConfig, batch_size: int):
    total_loss = 0.0
    correct = 0
    head = net.head_weight.data
    for start in range(0, len(batcher), batch_size):
        idx = np.arange(start, min(start + batch_size, len(batcher)))
        xb, yb = batcher.batch(idx, net.dtype)
        emb, _ = net.forward_embed(xb, train=False)
        loss, _, _ = loss_forward_backward(loss_cfg, emb, head, yb)
        total_loss += loss * len(idx)
        scores = inference_scores(loss_cfg, emb, head)
        correct += int((scores.argmax(axis=1) == yb).sum())
    n = len(batcher)
    return total_loss / n, correct / n


def renormalize_head(net: EmbeddingNetwork) -> None:
    w = net.head_weight.data
    w /= np.sqrt((w * w).sum(axis=1, keepdims=True))


def train(manifest, features, net: EmbeddingNetwork, loss_cfg: LossConfig,
          cfg: TrainConfig, log_path=None) -> TrainResult:
    """Optimize net on the manifest's train split, monitoring the val split.

    `features` maps utterance path -> (H, W, 3) array. Returns the
    checkpoint with the lowest validation loss, never the last epoch's.
    """
    label_order = manifest.speakers()
    if len(label_order) != net.config.num_classes or len(label_order) != loss_cfg.num_classes:
        raise ConfigError(
            f"{len(label_order)} speakers vs num_classes "
            f"{net.config.num_classes}/{loss_cfg.num_classes}")
    train_entries = manifest.by_split("train")
    val_entries = manifest.by_split("val")
    if not train_entries or not val_entries:
        raise ConfigError("train and val splits must both be non-empty")

    train_batcher = FeatureBatcher(train_entries, features, label_order)
    val_batcher = FeatureBatcher(val_entries, features, label_order)

    shuffle_rng = np.random.default_rng([cfg.seed, 0xA])
    dropout_rng = np.random.default_rng([cfg.seed, 0xB])
    cosine_head = loss_cfg.family in ("cosface", "arcface")
    if cosine_head:
        renormalize_head(net)

    param_data = {name: p.data for name, p in net.params.items()}
    state: dict[str, np.ndarray] = {}
    scheduler = _Improvement(cfg.plateau_threshold)
    stopper = _Improvement(cfg.plateau_threshold)
    lr = cfg.lr0
    records: list[EpochRecord] = []
    best_val = math.inf
    best_epoch = 0
    best_params: dict[str, np.ndarray] = {}
    stopped_early = False
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            loss_sum = 0.0
            for idx in iterate_minibatches(len(train_batcher), cfg.batch_size, shuffle_rng):
                xb, yb = train_batcher.batch(idx, net.dtype)
                emb, cache = net.forward_embed(xb, train=True,
                                               dropout_rng=dropout_rng, keep_cache=True)
                loss, grad_emb, grad_head = loss_forward_backward(
                    loss_cfg, emb.astype(np.float64), net.head_weight.data.astype(np.float64), yb)
                if not math.isfinite(loss):
                    raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
                net.zero_grad()
                net.backward(cache, grad_emb.astype(net.dtype))
                net.head_weight.grad += grad_head.astype(net.dtype)
                grads = {name: p.grad for name, p in net.params.items()}
                sgd_step(param_data, grads, state, cfg, lr)
                if cosine_head:
                    renormalize_head(net)
                loss_sum += loss * len(idx)
            train_loss = loss_sum / len(train_batcher)
            val_loss, val_top1 = _evaluate_split(net, val_batcher, loss_cfg, cfg.batch_size)
            record = EpochRecord(epoch, train_loss, val_loss, val_top1, lr)
            records.append(record)
            if log_fh:
                log_fh.write(record.as_line() + "\n")

            if val_loss < best_val:
                best_val = val_loss
                best_epoch = epoch
                best_params = {name: p.data.copy() for name, p in net.params.items()}

            if not scheduler.update(val_loss) and scheduler.streak >= cfg.plateau_patience:
                lr *= cfg.plateau_factor
                scheduler.streak = 0
            stopper.update(val_loss)
            if epoch >= cfg.min_epochs and stopper.streak >= cfg.early_stop_patience:
                stopped_early = True
                break
    finally:
        if log_fh:
            log_fh.close()

    best_net = EmbeddingNetwork(net.config, dtype=net.dtype, init=False)
    for name, data in best_params.items():
        best_net.params[name].data = data
    return TrainResult(best_net=best_net, records=records, best_epoch=best_epoch,
                       label_order=label_order, stopped_early=stopped_early)
