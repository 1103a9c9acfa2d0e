"""Training recipe: cross-entropy, momentum SGD, step-decay schedule.

The learning rate starts at `base_lr` and is divided by `1/decay_factor`
every `decay_every_epochs` epochs (set `decay_every_epochs > epochs` for a
constant rate). One train step is forward -> backward -> SGD update on a
fresh tape; batch assembly (augmentation + normalization) may fan out
across worker threads, but every sample owns an rng stream derived from
(seed, epoch, dataset index), so the resulting batches are bit-identical
no matter the worker count or schedule.

Per-epoch metrics append to a plain-text log, one record per line:

    epoch,lr,train_loss,train_acc,eval_acc
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .augmix import AugmixConfig, augmix, rng_for_sample
from .blocks import Model
from .data import normalize_channels
from .errors import ConfigError, ContractError
from .module import Parameter
from .tensor import Tape, Tensor, log_softmax, tsum


@dataclass
class TrainConfig:
    base_lr: float = 0.007
    decay_factor: float = 0.1
    decay_every_epochs: int = 3
    epochs: int = 20
    train_batch: int = 64
    eval_batch: int = 256
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    augmix: AugmixConfig | None = field(default_factory=AugmixConfig)

    def validate(self) -> "TrainConfig":
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if not 0.0 < self.decay_factor < 1.0:
            raise ConfigError(
                f"decay_factor must be in (0, 1), got {self.decay_factor}"
            )
        if self.decay_every_epochs < 1:
            raise ConfigError("decay_every_epochs must be >= 1")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.train_batch < 1 or self.eval_batch < 1:
            raise ConfigError("batch sizes must be >= 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.augmix is not None:
            self.augmix.validate()
        return self


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step-decay schedule: base_lr * decay_factor ** (epoch // every)."""
    if epoch < 0:
        raise ContractError(f"epoch must be >= 0, got {epoch}")
    return cfg.base_lr * cfg.decay_factor ** (epoch // cfg.decay_every_epochs)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood over the batch, log-sum-exp stable."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.ndim != 1 or logits.shape[0] != targets.shape[0]:
        raise ContractError(
            f"need (B, K) logits and B targets, got {logits.shape} and {targets.shape}"
        )
    b, k = logits.shape
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise ContractError(
            f"targets must lie in [0, {k}), got range "
            f"[{targets.min()}, {targets.max()}]"
        )
    onehot = np.zeros((b, k), dtype=logits.dtype)
    onehot[np.arange(b), targets] = 1.0
    picked = tsum(log_softmax(logits, axis=-1) * Tensor(onehot))
    return -picked * (1.0 / b)


def accuracy(logits: np.ndarray, targets: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=-1) == targets))


class SGD:
    """Classical-momentum SGD: v <- momentum*v + g; w <- w - lr*v."""

    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params: list[tuple[str, Parameter]] = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {
            name: np.zeros_like(p.data) for name, p in self.params
        }

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def step(self, lr: float) -> None:
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ContractError(
                    f"gradient shape {g.shape} does not match parameter "
                    f"{name} of shape {p.data.shape}"
                )
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data -= lr * v


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    eval_acc: float

    def record(self) -> str:
        return (f"{self.epoch},{self.lr:.10g},{self.train_loss:.10g},"
                f"{self.train_acc:.10g},{self.eval_acc:.10g}")


@dataclass
class TrainState:
    model: Model
    optimizer: SGD
    epoch: int = 0
    step: int = 0
    best_eval: float = 0.0


def _worker_count() -> int:
    raw = os.environ.get("NLVT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"NLVT_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def _assemble_batch(dataset, indices, model_cfg, train_cfg, epoch: int,
                    augment: bool, pool: ThreadPoolExecutor | None):
    """Stack images (augmented when training) into a normalized batch array."""

    def one(i: int) -> np.ndarray:
        img = dataset.image(int(i))
        if augment and train_cfg.augmix is not None:
            rng = rng_for_sample(train_cfg.augmix.seed, epoch, int(i))
            img = augmix(img, train_cfg.augmix, rng)
        return normalize_channels(img, model_cfg.norm_mean, model_cfg.norm_std)

    if pool is None:
        images = [one(i) for i in indices]
    else:
        images = list(pool.map(one, indices))
    batch = np.stack(images).astype(model_cfg.dtype)
    labels = np.asarray([dataset.label(int(i)) for i in indices], dtype=np.int64)
    return batch, labels


def evaluate(model: Model, dataset, batch: int = 256) -> float:
    """Top-1 accuracy over `dataset`; pure read, no augmentation."""
    if len(dataset) == 0:
        raise ConfigError("cannot evaluate on an empty dataset")
    was_training = model.training
    model.eval()
    correct = 0
    try:
        for start in range(0, len(dataset), batch):
            idx = range(start, min(start + batch, len(dataset)))
            images = np.stack([
                normalize_channels(dataset.image(i), model.config.norm_mean,
                                   model.config.norm_std)
                for i in idx
            ]).astype(model.config.dtype)
            labels = np.asarray([dataset.label(i) for i in idx])
            logits = model(Tensor(images)).numpy()
            correct += int(np.sum(np.argmax(logits, axis=-1) == labels))
    finally:
        model.train(was_training)
    return correct / len(dataset)


def train(model: Model, train_data, eval_data, cfg: TrainConfig,
          log_path=None, checkpoint_path=None) -> tuple[TrainState, list[EpochMetrics]]:
    """Run the full epoch loop; deterministic given `cfg.seed`.

    When `checkpoint_path` is given, the model is snapshotted there every
    time the eval accuracy improves.
    """
    cfg.validate()
    if len(train_data) == 0:
        raise ConfigError("cannot train on an empty dataset")
    optimizer = SGD(model.named_parameters(), momentum=cfg.momentum,
                    weight_decay=cfg.weight_decay)
    state = TrainState(model=model, optimizer=optimizer)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xD5)))
    metrics: list[EpochMetrics] = []
    workers = _worker_count()
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, cfg)
            order = shuffle_rng.permutation(len(train_data))
            model.train()
            losses = []
            accs = []
            for start in range(0, len(order), cfg.train_batch):
                indices = order[start:start + cfg.train_batch]
                batch, labels = _assemble_batch(
                    train_data, indices, model.config, cfg, epoch, True, pool)
                with Tape() as tape:
                    logits = model(Tensor(batch))
                    loss = cross_entropy(logits, labels)
                    optimizer.zero_grad()
                    tape.backward(loss)
                optimizer.step(lr)
                losses.append(loss.item() * len(indices))
                accs.append(accuracy(logits.numpy(), labels) * len(indices))
                state.step += 1
            train_loss = float(np.sum(losses) / len(order))
            train_acc = float(np.sum(accs) / len(order))
            eval_acc = evaluate(model, eval_data, cfg.eval_batch) \
                if eval_data is not None and len(eval_data) else 0.0
            state.epoch = epoch + 1
            if eval_acc > state.best_eval or (checkpoint_path and epoch == 0):
                state.best_eval = max(state.best_eval, eval_acc)
                if checkpoint_path:
                    from .data import save_checkpoint
                    save_checkpoint(model, checkpoint_path)
            entry = EpochMetrics(epoch, lr, train_loss, train_acc, eval_acc)
            metrics.append(entry)
            if log_fh:
                log_fh.write(entry.record() + "\n")
                log_fh.flush()
    finally:
        if pool is not None:
            pool.shutdown()
        if log_fh:
            log_fh.close()
    return state, metrics
